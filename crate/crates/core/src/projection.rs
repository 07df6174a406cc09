//! Axial projection: every A-scan reduced to one value.
//!
//! The needle attenuates everything beneath it, so under the mean operator
//! its footprint shows up as a dark band in the projection image.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::volume::IoctVolume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum ProjectionOp {
    #[default]
    Mean,
    Min,
    Max,
}

impl ProjectionOp {
    pub fn name(self) -> &'static str {
        match self {
            ProjectionOp::Mean => "mean",
            ProjectionOp::Min => "min",
            ProjectionOp::Max => "max",
        }
    }
}

impl core::str::FromStr for ProjectionOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(ProjectionOp::Mean),
            "min" => Ok(ProjectionOp::Min),
            "max" => Ok(ProjectionOp::Max),
            other => Err(Error::InvalidParameter {
                name: "operator",
                reason: format!("unknown projection operator `{other}`"),
            }),
        }
    }
}

/// Half-open range of axial sample indices the operator is applied over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZWindow {
    pub start: usize,
    pub end: usize,
}

/// X × Y image of per-A-scan reductions; pixel (x, y) at `y * width + x`.
#[derive(Debug, Clone, PartialEq)]
pub struct AxialProjectionImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub op: ProjectionOp,
    /// (sx, sy) µm, inherited from the source volume.
    pub spacing: [f64; 2],
    pub source_id: u64,
}

impl AxialProjectionImage {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Rows that are identically zero. A dropped B-scan projects to such a
    /// row under every operator; real tissue never does.
    pub fn zero_rows(&self) -> Vec<bool> {
        self.pixels
            .chunks_exact(self.width)
            .map(|row| row.iter().all(|&p| p == 0.0))
            .collect()
    }

    /// Minimum and maximum pixel value.
    pub fn range(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &p| {
                (lo.min(p), hi.max(p))
            })
    }
}

/// Projects the full A-scan depth.
pub fn axial_projection(volume: &IoctVolume, op: ProjectionOp) -> AxialProjectionImage {
    let nz = volume.dims()[2];
    axial_projection_window(volume, op, ZWindow { start: 0, end: nz })
        .expect("full window is always valid")
}

/// Projects only the samples in `window`.
pub fn axial_projection_window(
    volume: &IoctVolume,
    op: ProjectionOp,
    window: ZWindow,
) -> Result<AxialProjectionImage> {
    let [nx, ny, nz] = volume.dims();
    if window.start >= window.end || window.end > nz {
        return Err(Error::InvalidParameter {
            name: "z window",
            reason: format!("[{}, {}) is empty or exceeds depth {nz}", window.start, window.end),
        });
    }
    let count = (window.end - window.start) as f64;
    let mut pixels = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let samples = &volume.ascan(ix, iy)[window.start..window.end];
            let value = match op {
                // Integer accumulation: exact and independent of summation
                // order. u16 samples cannot overflow a u64, so wrapping adds
                // change nothing but keep the loop vectorized when overflow
                // checks are on.
                ProjectionOp::Mean => {
                    let sum = samples.iter().fold(0u64, |acc, &v| acc.wrapping_add(v as u64));
                    (sum as f64 / count) as f32
                }
                ProjectionOp::Min => samples.iter().copied().min().unwrap_or(0) as f32,
                ProjectionOp::Max => samples.iter().copied().max().unwrap_or(0) as f32,
            };
            pixels.push(value);
        }
    }
    let [sx, sy, _] = volume.spacing();
    Ok(AxialProjectionImage {
        width: nx,
        height: ny,
        pixels,
        op,
        spacing: [sx, sy],
        source_id: volume.id(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeGeometry;

    fn geometry(nz: usize) -> VolumeGeometry {
        VolumeGeometry::new([3, 2, nz], [2.5, 25.0, 3.0]).unwrap()
    }

    #[test]
    fn constant_volume_projects_to_constant() {
        let v = IoctVolume::from_fn(geometry(16), |_, _, _| 777).unwrap();
        for op in [ProjectionOp::Mean, ProjectionOp::Min, ProjectionOp::Max] {
            let p = axial_projection(&v, op);
            assert!(p.pixels.iter().all(|&x| x == 777.0), "{op:?}");
        }
    }

    #[test]
    fn ramp_mean_is_midpoint() {
        // Direct summation oracle: sum(0..1024) / 1024 = 1023 * 1024 / 2 / 1024.
        let expected = (0..1024u64).sum::<u64>() as f64 / 1024.0;
        assert_eq!(expected, 511.5);
        let v = IoctVolume::from_fn(geometry(1024), |_, _, z| z as u16).unwrap();
        let p = axial_projection(&v, ProjectionOp::Mean);
        assert_eq!(p.at(1, 1), 511.5);
        assert_eq!(axial_projection(&v, ProjectionOp::Min).at(0, 0), 0.0);
        assert_eq!(axial_projection(&v, ProjectionOp::Max).at(0, 0), 1023.0);
    }

    #[test]
    fn window_restricts_depth() {
        let v = IoctVolume::from_fn(geometry(10), |_, _, z| z as u16).unwrap();
        let p = axial_projection_window(&v, ProjectionOp::Mean, ZWindow { start: 2, end: 4 }).unwrap();
        assert_eq!(p.at(0, 0), 2.5);
        assert!(axial_projection_window(&v, ProjectionOp::Mean, ZWindow { start: 4, end: 4 }).is_err());
        assert!(axial_projection_window(&v, ProjectionOp::Mean, ZWindow { start: 0, end: 11 }).is_err());
    }

    #[test]
    fn dropped_bscan_gives_zero_row() {
        let v = IoctVolume::from_fn(geometry(8), |_, y, z| if y == 1 { 0 } else { 100 + z as u16 }).unwrap();
        let p = axial_projection(&v, ProjectionOp::Mean);
        assert_eq!(p.zero_rows(), vec![false, true]);
    }

    proptest::proptest! {
        #[test]
        fn mean_ignores_order_within_ascan(mut values in proptest::collection::vec(0u16..u16::MAX, 32), seed in 0u64..1000) {
            let g = VolumeGeometry::new([1, 1, 32], [1.0; 3]).unwrap();
            let a = IoctVolume::new(g, values.clone()).unwrap();
            // deterministic shuffle
            let n = values.len();
            let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                values.swap(i, (s >> 33) as usize % (i + 1));
            }
            let b = IoctVolume::new(g, values).unwrap();
            proptest::prop_assert_eq!(
                axial_projection(&a, ProjectionOp::Mean).pixels,
                axial_projection(&b, ProjectionOp::Mean).pixels
            );
        }
    }
}
