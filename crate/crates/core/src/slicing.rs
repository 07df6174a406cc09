//! Virtual B-scans: vertical slices of a volume along arbitrary planes.
//!
//! A slice column is the lateral linear interpolation of the (up to four)
//! A-scans surrounding the sample point; the axial axis is copied sample for
//! sample, never resampled. Slicing along an acquired B-scan plane therefore
//! reproduces that B-scan exactly.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::volume::{IoctVolume, MetricPoint, VolumeGeometry};

const NORMAL_TOLERANCE: f64 = 1e-9;

/// Plane through `point` with unit `normal`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneSpec {
    pub point: MetricPoint,
    pub normal: [f64; 3],
}

impl PlaneSpec {
    /// Normalizes `normal`; fails if it is zero or not finite.
    pub fn new(point: MetricPoint, normal: [f64; 3]) -> Result<Self> {
        let norm = math::sqrt(normal.iter().map(|c| c * c).sum());
        if !(norm.is_finite() && norm > 0.0) || !point.is_finite() {
            return Err(Error::InvalidParameter {
                name: "plane",
                reason: format!("normal {normal:?} / point {point:?} is degenerate"),
            });
        }
        let normal = if (norm - 1.0).abs() <= NORMAL_TOLERANCE {
            normal
        } else {
            [normal[0] / norm, normal[1] / norm, normal[2] / norm]
        };
        Ok(Self { point, normal })
    }

    /// Plane of the acquired B-scan `i`: point (0, i·sy, 0), normal ĵ.
    pub fn native(geometry: &VolumeGeometry, i: usize) -> Self {
        Self {
            point: MetricPoint::new(0.0, i as f64 * geometry.spacing[1], 0.0),
            normal: [0.0, 1.0, 0.0],
        }
    }

    pub fn is_vertical(&self) -> bool {
        self.normal[2].abs() <= NORMAL_TOLERANCE
    }

    /// In-plane horizontal axis `n × k̂`, as a lateral unit vector.
    pub fn horizontal_axis(&self) -> [f64; 2] {
        let (ax, ay) = (self.normal[1], -self.normal[0]);
        let norm = math::hypot(ax, ay);
        [ax / norm, ay / norm]
    }
}

/// Tool-aligned plane through the projected needle line: point
/// (t_x, t_y, 0) and normal (sin θz, cos θz, 0). Its horizontal axis
/// (cos θz, −sin θz) is the needle-advance direction.
pub fn tool_aligned_plane(
    theta_z: f64,
    tx: f64,
    ty: f64,
    geometry: &VolumeGeometry,
) -> Result<PlaneSpec> {
    if !theta_z.is_finite() {
        return Err(Error::InvalidParameter {
            name: "theta_z",
            reason: format!("{theta_z} is not finite"),
        });
    }
    if !geometry.contains_lateral(tx, ty) {
        return Err(Error::OutOfBounds {
            what: "needle tip",
            detail: format!("({tx}, {ty}) µm outside the lateral scan region"),
        });
    }
    Ok(PlaneSpec {
        point: MetricPoint::new(tx, ty, 0.0),
        normal: [math::sin(theta_z), math::cos(theta_z), 0.0],
    })
}

/// Pixel grid of a vertical slice and its mapping into the volume frame.
///
/// Column `c` sits at lateral position `P0 + (u_min + c·su)·axis`; row `r`
/// at depth `r·sz`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SliceGeometry {
    pub plane: PlaneSpec,
    pub axis: [f64; 2],
    pub u_min: f64,
    pub u_spacing: f64,
    pub z_spacing: f64,
    pub width: usize,
    pub height: usize,
}

impl SliceGeometry {
    /// Builds the slice grid for `plane`. `extent` is the (u_min, u_max)
    /// range along the horizontal axis relative to the plane point; by
    /// default the full intersection with the A-scan grid. `u_spacing`
    /// defaults to the finest lateral spacing, sx.
    pub fn new(
        geometry: &VolumeGeometry,
        plane: &PlaneSpec,
        extent: Option<(f64, f64)>,
        u_spacing: Option<f64>,
    ) -> Result<Self> {
        if !plane.is_vertical() {
            return Err(Error::NonVerticalPlane(plane.normal[2]));
        }
        let su = u_spacing.unwrap_or(geometry.spacing[0]);
        if !(su.is_finite() && su > 0.0) {
            return Err(Error::InvalidParameter {
                name: "u_spacing",
                reason: format!("{su} must be positive"),
            });
        }
        let axis = plane.horizontal_axis();
        let inside = lateral_clip(geometry, plane, axis).ok_or(Error::PlaneMissesVolume)?;
        let (u0, u1) = match extent {
            None => inside,
            Some((a, b)) => {
                if !(a.is_finite() && b.is_finite() && a <= b) {
                    return Err(Error::InvalidParameter {
                        name: "u_extent",
                        reason: format!("({a}, {b}) is not an ordered range"),
                    });
                }
                if b < inside.0 || a > inside.1 {
                    return Err(Error::PlaneMissesVolume);
                }
                (a, b)
            }
        };
        let width = math::floor((u1 - u0) / su + 1e-9) as usize + 1;
        Ok(Self {
            plane: *plane,
            axis,
            u_min: u0,
            u_spacing: su,
            z_spacing: geometry.spacing[2],
            width,
            height: geometry.dims[2],
        })
    }

    /// Horizontal coordinate of column `col` (may be fractional).
    #[inline]
    pub fn u_at(&self, col: f64) -> f64 {
        self.u_min + col * self.u_spacing
    }

    #[inline]
    pub fn lateral_at(&self, u: f64) -> (f64, f64) {
        (
            self.plane.point.x + u * self.axis[0],
            self.plane.point.y + u * self.axis[1],
        )
    }

    /// Volume point of the (possibly fractional) pixel position.
    pub fn pixel_to_metric(&self, col: f64, row: f64) -> MetricPoint {
        let (x, y) = self.lateral_at(self.u_at(col));
        MetricPoint::new(x, y, row * self.z_spacing)
    }

    /// Slice metric coordinates (u, z) to volume point.
    pub fn slice_to_metric(&self, u: f64, z: f64) -> MetricPoint {
        let (x, y) = self.lateral_at(u);
        MetricPoint::new(x, y, z)
    }

    /// Orthogonal projection of a volume point into slice metric
    /// coordinates (u, z).
    pub fn metric_to_slice(&self, p: &MetricPoint) -> (f64, f64) {
        let dx = p.x - self.plane.point.x;
        let dy = p.y - self.plane.point.y;
        (dx * self.axis[0] + dy * self.axis[1], p.z)
    }

    /// Fractional pixel (col, row) of a volume point projected onto the plane.
    pub fn metric_to_pixel(&self, p: &MetricPoint) -> (f64, f64) {
        let (u, z) = self.metric_to_slice(p);
        ((u - self.u_min) / self.u_spacing, z / self.z_spacing)
    }
}

/// Parameter range of the plane's horizontal line inside the lateral grid.
fn lateral_clip(geometry: &VolumeGeometry, plane: &PlaneSpec, axis: [f64; 2]) -> Option<(f64, f64)> {
    let [mx, my, _] = geometry.max_metric();
    let origin = [plane.point.x, plane.point.y];
    let bounds = [mx, my];
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for k in 0..2 {
        if axis[k].abs() <= 1e-12 {
            if origin[k] < -1e-9 || origin[k] > bounds[k] + 1e-9 {
                return None;
            }
        } else {
            let a = (0.0 - origin[k]) / axis[k];
            let b = (bounds[k] - origin[k]) / axis[k];
            lo = lo.max(a.min(b));
            hi = hi.min(a.max(b));
        }
    }
    (lo <= hi + 1e-9).then_some((lo, hi.max(lo)))
}

/// A vertical slice: `width` columns along the plane, `height` = Z rows.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualBScan {
    pub geometry: SliceGeometry,
    /// Row-major: pixel (col, row) at `row * width + col`.
    pub pixels: Vec<f32>,
    /// Per column: whether the sample point lies inside the A-scan grid.
    pub valid: Vec<bool>,
}

impl VirtualBScan {
    #[inline]
    pub fn at(&self, col: usize, row: usize) -> f32 {
        self.pixels[row * self.geometry.width + col]
    }

    pub fn width(&self) -> usize {
        self.geometry.width
    }

    pub fn height(&self) -> usize {
        self.geometry.height
    }
}

/// Composes the virtual B-scan of `plane`.
pub fn virtual_bscan(
    volume: &IoctVolume,
    plane: &PlaneSpec,
    extent: Option<(f64, f64)>,
    u_spacing: Option<f64>,
) -> Result<VirtualBScan> {
    let geometry = SliceGeometry::new(volume.geometry(), plane, extent, u_spacing)?;
    Ok(sample_slice(volume, &geometry, None))
}

/// Like [`virtual_bscan`], but B-scans flagged in `dropped` (lost in
/// transmission, all zero) are left out of the interpolation; their weight
/// goes to the surviving neighbour.
pub fn virtual_bscan_skipping(
    volume: &IoctVolume,
    plane: &PlaneSpec,
    extent: Option<(f64, f64)>,
    u_spacing: Option<f64>,
    dropped: &[bool],
) -> Result<VirtualBScan> {
    let geometry = SliceGeometry::new(volume.geometry(), plane, extent, u_spacing)?;
    if dropped.len() != volume.dims()[1] {
        return Err(Error::InvalidParameter {
            name: "dropped",
            reason: format!("{} flags for {} B-scans", dropped.len(), volume.dims()[1]),
        });
    }
    Ok(sample_slice(volume, &geometry, Some(dropped)))
}

/// Adjacent grid indices and the weight of the upper one for a fractional
/// index in [0, n-1]; `None` outside.
#[inline]
fn bracket(f: f64, n: usize) -> Option<(usize, usize, f64)> {
    let last = (n - 1) as f64;
    if !(f >= -1e-9 && f <= last + 1e-9) {
        return None;
    }
    let f = f.clamp(0.0, last);
    let i0 = math::floor(f) as usize;
    if i0 >= n - 1 {
        return Some((n - 1, n - 1, 0.0));
    }
    Some((i0, i0 + 1, f - i0 as f64))
}

pub(crate) fn sample_slice(
    volume: &IoctVolume,
    geometry: &SliceGeometry,
    dropped: Option<&[bool]>,
) -> VirtualBScan {
    let [nx, ny, nz] = volume.dims();
    let [sx, sy, _] = volume.spacing();
    let width = geometry.width;
    let mut pixels = vec![0.0f32; width * nz];
    let mut valid = vec![false; width];
    let mut column = vec![0.0f32; nz];

    for col in 0..width {
        let (x, y) = geometry.lateral_at(geometry.u_at(col as f64));
        let (Some((x0, x1, wx)), Some((y0, y1, wy))) =
            (bracket(math::snap(x / sx), nx), bracket(math::snap(y / sy), ny))
        else {
            continue;
        };
        let Some(rows) = row_weights(y0, y1, wy, dropped) else {
            continue;
        };
        let mut taps: [(usize, usize, f32); 4] = [(0, 0, 0.0); 4];
        let mut n_taps = 0;
        for (iy, w_row) in rows.into_iter().flatten() {
            for (ix, w_col) in [(x0, 1.0 - wx), (x1, wx)] {
                let w = w_row * w_col;
                if w > 0.0 {
                    taps[n_taps] = (ix, iy, w as f32);
                    n_taps += 1;
                }
            }
        }
        // Taps with weight exactly 1 copy the A-scan verbatim.
        let (ix, iy, w) = taps[0];
        for (dst, &src) in column.iter_mut().zip(volume.ascan(ix, iy)) {
            *dst = w * src as f32;
        }
        for &(ix, iy, w) in &taps[1..n_taps] {
            for (dst, &src) in column.iter_mut().zip(volume.ascan(ix, iy)) {
                *dst += w * src as f32;
            }
        }
        for (row, &v) in column.iter().enumerate() {
            pixels[row * width + col] = v;
        }
        valid[col] = true;
    }

    VirtualBScan {
        geometry: *geometry,
        pixels,
        valid,
    }
}

/// The one or two B-scan rows contributing to a sample and their weights,
/// after dropping lost B-scans.
fn row_weights(
    y0: usize,
    y1: usize,
    wy: f64,
    dropped: Option<&[bool]>,
) -> Option<[Option<(usize, f64)>; 2]> {
    let lost = |iy: usize| dropped.is_some_and(|d| d[iy]);
    let candidates = [(y0, 1.0 - wy), (y1, wy)];
    if y0 == y1 {
        return (!lost(y0)).then_some([Some((y0, 1.0)), None]);
    }
    match (lost(y0), lost(y1)) {
        (false, false) => Some(candidates.map(|(iy, w)| (w > 0.0).then_some((iy, w)))),
        (false, true) => Some([Some((y0, 1.0)), None]),
        (true, false) => Some([Some((y1, 1.0)), None]),
        (true, true) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn geometry() -> VolumeGeometry {
        VolumeGeometry::new([40, 12, 16], [2.5, 25.0, 3.0]).unwrap()
    }

    #[test]
    fn tool_plane_normals() {
        let g = VolumeGeometry::default();
        let p = tool_aligned_plane(0.0, 100.0, 200.0, &g).unwrap();
        assert_eq!(p.point, MetricPoint::new(100.0, 200.0, 0.0));
        assert_eq!(p.normal, [0.0, 1.0, 0.0]);
        let p = tool_aligned_plane(core::f64::consts::FRAC_PI_2, 100.0, 200.0, &g).unwrap();
        assert_abs_diff_eq!(p.normal[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.normal[1], 0.0, epsilon = 1e-15);
        let p = tool_aligned_plane(30f64.to_radians(), 100.0, 200.0, &g).unwrap();
        assert_abs_diff_eq!(p.normal[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(p.normal[1], 3f64.sqrt() / 2.0, epsilon = 1e-15);
        let norm: f64 = p.normal.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        assert!(tool_aligned_plane(0.0, -5.0, 0.0, &g).is_err());
        assert!(tool_aligned_plane(f64::NAN, 5.0, 0.0, &g).is_err());
    }

    #[test]
    fn horizontal_axis_follows_advance_direction() {
        let g = VolumeGeometry::default();
        let theta = 0.4f64;
        let p = tool_aligned_plane(theta, 500.0, 500.0, &g).unwrap();
        let a = p.horizontal_axis();
        assert_abs_diff_eq!(a[0], theta.cos(), epsilon = 1e-12);
        assert_abs_diff_eq!(a[1], -theta.sin(), epsilon = 1e-12);
        // Axis lies in the plane.
        assert_abs_diff_eq!(a[0] * p.normal[0] + a[1] * p.normal[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn native_plane_reproduces_bscan() {
        let g = geometry();
        let v = IoctVolume::from_fn(g, |x, y, z| (x * 31 + y * 7 + z * 3) as u16).unwrap();
        for i in 0..g.dims[1] {
            let s = virtual_bscan(&v, &PlaneSpec::native(&g, i), None, None).unwrap();
            let b = v.native_bscan(i).unwrap();
            assert_eq!((s.width(), s.height()), (b.width, b.height));
            for (a, &e) in s.pixels.iter().zip(&b.data) {
                assert_eq!(a.to_bits(), (e as f32).to_bits());
            }
        }
    }

    #[test]
    fn linear_field_is_reproduced() {
        let g = geometry();
        // V = x + 2y in voxel-index units, depth independent.
        let v = IoctVolume::from_fn(g, |x, y, _| (x + 2 * y) as u16).unwrap();
        let plane = tool_aligned_plane(0.3, 40.0, 120.0, &g).unwrap();
        let s = virtual_bscan(&v, &plane, None, None).unwrap();
        for col in 0..s.width() {
            assert!(s.valid[col]);
            let p = s.geometry.pixel_to_metric(col as f64, 0.0);
            let expected = p.x / 2.5 + 2.0 * p.y / 25.0;
            for row in [0, 7, 15] {
                let got = s.at(col, row) as f64;
                assert!((got - expected).abs() <= 1e-6 * expected.abs().max(1.0), "{got} vs {expected}");
            }
        }
    }

    #[test]
    fn outside_samples_are_zero_and_flagged() {
        let g = geometry();
        let v = IoctVolume::from_fn(g, |_, _, _| 5).unwrap();
        let plane = PlaneSpec::native(&g, 3);
        let s = virtual_bscan(&v, &plane, Some((-10.0, 20.0)), None).unwrap();
        assert!(!s.valid[0] && !s.valid[3]);
        assert!(s.valid[4]);
        assert_eq!(s.at(0, 2), 0.0);
        assert_eq!(s.at(4, 2), 5.0);
    }

    #[test]
    fn rejects_missing_and_oblique_planes() {
        let g = geometry();
        let v = IoctVolume::zeros(g).unwrap();
        let miss = PlaneSpec::new(MetricPoint::new(0.0, 1e6, 0.0), [0.0, 1.0, 0.0]).unwrap();
        assert_eq!(virtual_bscan(&v, &miss, None, None).unwrap_err(), Error::PlaneMissesVolume);
        let oblique = PlaneSpec::new(MetricPoint::new(0.0, 0.0, 0.0), [0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            virtual_bscan(&v, &oblique, None, None),
            Err(Error::NonVerticalPlane(_))
        ));
    }

    #[test]
    fn skipping_dropped_bscans() {
        let g = geometry();
        let v = IoctVolume::from_fn(g, |_, y, _| if y == 5 { 0 } else { 100 }).unwrap();
        // Plane halfway between B-scans 4 and 5.
        let plane = PlaneSpec::new(MetricPoint::new(0.0, 4.5 * 25.0, 0.0), [0.0, 1.0, 0.0]).unwrap();
        let plain = virtual_bscan(&v, &plane, None, None).unwrap();
        assert_eq!(plain.at(3, 3), 50.0);
        let mut dropped = vec![false; 12];
        dropped[5] = true;
        let skipped = virtual_bscan_skipping(&v, &plane, None, None, &dropped).unwrap();
        assert_eq!(skipped.at(3, 3), 100.0);
    }

    #[test]
    fn pixel_metric_round_trip() {
        let g = VolumeGeometry::default();
        let plane = tool_aligned_plane(-0.7, 1200.0, 900.0, &g).unwrap();
        let sg = SliceGeometry::new(&g, &plane, None, None).unwrap();
        for (c, r) in [(0.0, 0.0), (12.5, 100.25), (sg.width as f64 - 1.0, 1023.0)] {
            let p = sg.pixel_to_metric(c, r);
            let (c2, r2) = sg.metric_to_pixel(&p);
            assert_abs_diff_eq!(c, c2, epsilon = 1e-9);
            assert_abs_diff_eq!(r, r2, epsilon = 1e-9);
        }
    }
}
