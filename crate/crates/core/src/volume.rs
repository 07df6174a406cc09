//! OCT volume container, frame conventions and metric/index conversions.
//!
//! Frame: right-handed, X along the A-scans of a B-scan, Y across B-scans,
//! Z along the optical axis, increasing with depth. The metric origin is the
//! center of voxel (0, 0, 0); `voxel_to_metric` is a pure diagonal scaling.
//!
//! Storage is A-scan major: z varies fastest, then x, then y, so the A-scan at
//! lateral index (x, y) is the contiguous run starting at `(y * X + x) * Z`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A-scans per B-scan, B-scans per volume, samples per A-scan.
pub const DEFAULT_DIMS: [usize; 3] = [1000, 100, 1024];
/// Voxel spacing in µm.
pub const DEFAULT_SPACING_UM: [f64; 3] = [2.5, 25.0, 3.0];

/// A point in the volume frame, in µm.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MetricPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &MetricPoint) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

impl From<[f64; 3]> for MetricPoint {
    fn from(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

/// Grid dimensions and spacing without the voxel payload.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VolumeGeometry {
    /// (X, Y, Z) sample counts.
    pub dims: [usize; 3],
    /// (sx, sy, sz) in µm per voxel.
    pub spacing: [f64; 3],
}

impl Default for VolumeGeometry {
    fn default() -> Self {
        Self {
            dims: DEFAULT_DIMS,
            spacing: DEFAULT_SPACING_UM,
        }
    }
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let geometry = Self { dims, spacing };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidDims(self.dims));
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidSpacing(self.spacing));
        }
        Ok(())
    }

    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Metric coordinate of the last voxel center along each axis.
    pub fn max_metric(&self) -> [f64; 3] {
        [
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        ]
    }

    /// Length of one voxel diagonal in µm.
    pub fn voxel_diagonal(&self) -> f64 {
        let [sx, sy, sz] = self.spacing;
        crate::math::sqrt(sx * sx + sy * sy + sz * sz)
    }

    /// Whether the lateral position lies within the A-scan grid (voxel centers).
    pub fn contains_lateral(&self, x: f64, y: f64) -> bool {
        let [mx, my, _] = self.max_metric();
        (0.0..=mx).contains(&x) && (0.0..=my).contains(&y)
    }

    pub fn contains(&self, p: &MetricPoint) -> bool {
        let [_, _, mz] = self.max_metric();
        self.contains_lateral(p.x, p.y) && (0.0..=mz).contains(&p.z)
    }

    pub fn voxel_to_metric(&self, index: [usize; 3]) -> Result<MetricPoint> {
        if index.iter().zip(self.dims.iter()).any(|(i, d)| i >= d) {
            return Err(Error::OutOfBounds {
                what: "voxel index",
                detail: format!("{:?} for dims {:?}", index, self.dims),
            });
        }
        Ok(MetricPoint::new(
            index[0] as f64 * self.spacing[0],
            index[1] as f64 * self.spacing[1],
            index[2] as f64 * self.spacing[2],
        ))
    }

    /// Fractional voxel index of a metric point. Points up to half a voxel
    /// outside the outermost centers are accepted (they are inside the
    /// sampled region).
    pub fn metric_to_voxel(&self, p: &MetricPoint) -> Result<[f64; 3]> {
        let coords = p.to_array();
        let mut index = [0.0; 3];
        for axis in 0..3 {
            let f = coords[axis] / self.spacing[axis];
            if !(f.is_finite() && f >= -0.5 && f <= self.dims[axis] as f64 - 0.5) {
                return Err(Error::OutOfBounds {
                    what: "metric point",
                    detail: format!("{:?} for dims {:?} spacing {:?}", p, self.dims, self.spacing),
                });
            }
            index[axis] = crate::math::snap(f);
        }
        Ok(index)
    }
}

/// A 2D image stored row-major: pixel (col, row) at `row * width + col`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Image2<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, col: usize, row: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, col: usize, row: usize, value: T) {
        self.data[row * self.width + col] = value;
    }
}

/// Anisotropic OCT intensity volume. Immutable once constructed.
#[derive(Debug, Clone, PartialEq)]
pub struct IoctVolume {
    geometry: VolumeGeometry,
    voxels: Vec<u16>,
    id: u64,
}

impl IoctVolume {
    pub fn new(geometry: VolumeGeometry, voxels: Vec<u16>) -> Result<Self> {
        geometry.validate()?;
        if voxels.len() != geometry.voxel_count() {
            return Err(Error::SizeMismatch {
                expected: geometry.voxel_count(),
                actual: voxels.len(),
            });
        }
        Ok(Self {
            geometry,
            voxels,
            id: 0,
        })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Result<Self> {
        geometry.validate()?;
        Self::new(geometry, vec![0; geometry.voxel_count()])
    }

    /// Builds a volume from an intensity function of the voxel index.
    pub fn from_fn(
        geometry: VolumeGeometry,
        mut f: impl FnMut(usize, usize, usize) -> u16,
    ) -> Result<Self> {
        geometry.validate()?;
        let [nx, ny, nz] = geometry.dims;
        let mut voxels = Vec::with_capacity(geometry.voxel_count());
        for iy in 0..ny {
            for ix in 0..nx {
                for iz in 0..nz {
                    voxels.push(f(ix, iy, iz));
                }
            }
        }
        Self::new(geometry, voxels)
    }

    /// Tags the volume with a caller-chosen identifier carried into derived
    /// images.
    pub fn with_id(mut self, id: u64) -> Self {
        self.id = id;
        self
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.geometry.spacing
    }

    pub fn voxels(&self) -> &[u16] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<u16> {
        self.voxels
    }

    #[inline]
    pub fn ascan(&self, ix: usize, iy: usize) -> &[u16] {
        let [nx, _, nz] = self.geometry.dims;
        let start = (iy * nx + ix) * nz;
        &self.voxels[start..start + nz]
    }

    /// All A-scans of B-scan `iy`, x-major.
    #[inline]
    pub fn bscan_slab(&self, iy: usize) -> &[u16] {
        let [nx, _, nz] = self.geometry.dims;
        let start = iy * nx * nz;
        &self.voxels[start..start + nx * nz]
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> u16 {
        self.ascan(ix, iy)[iz]
    }

    pub fn voxel_to_metric(&self, index: [usize; 3]) -> Result<MetricPoint> {
        self.geometry.voxel_to_metric(index)
    }

    pub fn metric_to_voxel(&self, p: &MetricPoint) -> Result<[f64; 3]> {
        self.geometry.metric_to_voxel(p)
    }

    /// The acquired B-scan `i` as an X × Z image (rows are depth), copied
    /// without interpolation.
    pub fn native_bscan(&self, i: usize) -> Result<Image2<u16>> {
        let [nx, ny, nz] = self.geometry.dims;
        if i >= ny {
            return Err(Error::OutOfBounds {
                what: "B-scan index",
                detail: format!("{i} >= {ny}"),
            });
        }
        let mut image = Image2::filled(nx, nz, 0u16);
        for ix in 0..nx {
            for (iz, &v) in self.ascan(ix, i).iter().enumerate() {
                image.data[iz * nx + ix] = v;
            }
        }
        Ok(image)
    }
}
