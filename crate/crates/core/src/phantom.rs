//! Synthetic iOCT scenes with known ground truth, and a simulated robot.
//!
//! Scene geometry lives in physical µm. The rendered volume is in optical
//! depth: each A-scan integrates the refractive index from the top of the
//! volume down (air above the fluid surface, vitreous down to the ILM,
//! tissue below), exactly as an OCT engine would display it. Lateral
//! coordinates are shared by both frames.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::Vector3;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::math;
use crate::pose::{compose_pose, NeedlePose};
use crate::registration::RegistrationMatrix;
use crate::trajectory::RefractiveIndices;
use crate::volume::{IoctVolume, MetricPoint, VolumeGeometry};

const SPECKLE_TABLE_BITS: u32 = 16;
const SPECKLE_TABLE_SALT: u64 = 0x5eed_7ab1_e0c7_0001;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GaussianBump {
    pub center: [f64; 2],
    pub amplitude: f64,
    pub sigma: f64,
}

/// Smooth depth surface `z(x, y)`, physical µm:
/// `base + slope·q + curvature·q² + Σ bumps`, with `q = (x, y) − center`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct HeightField {
    pub base: f64,
    pub slope: [f64; 2],
    pub curvature: [f64; 2],
    pub center: [f64; 2],
    pub bumps: Vec<GaussianBump>,
}

impl Default for HeightField {
    fn default() -> Self {
        Self::flat(0.0)
    }
}

impl HeightField {
    pub fn flat(base: f64) -> Self {
        Self {
            base,
            slope: [0.0; 2],
            curvature: [0.0; 2],
            center: [0.0; 2],
            bumps: Vec::new(),
        }
    }

    pub fn at(&self, x: f64, y: f64) -> f64 {
        let (qx, qy) = (x - self.center[0], y - self.center[1]);
        let mut z = self.base + self.slope[0] * qx + self.slope[1] * qy;
        z += self.curvature[0] * qx * qx + self.curvature[1] * qy * qy;
        for b in &self.bumps {
            let (dx, dy) = (x - b.center[0], y - b.center[1]);
            z += b.amplitude * math::exp(-(dx * dx + dy * dy) / (2.0 * b.sigma * b.sigma));
        }
        z
    }

    /// Same surface shifted down by `offset`.
    pub fn offset(&self, offset: f64) -> Self {
        let mut f = self.clone();
        f.base += offset;
        f
    }

    fn is_valid(&self) -> bool {
        let finite = [self.base, self.slope[0], self.slope[1], self.curvature[0], self.curvature[1]]
            .iter()
            .chain(&self.center)
            .all(|v| v.is_finite());
        finite
            && self
                .bumps
                .iter()
                .all(|b| b.amplitude.is_finite() && b.sigma.is_finite() && b.sigma > 0.0)
    }
}

/// Straight cylindrical needle: axis from `tip − length·d` to `tip`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct NeedleModel {
    pub theta_z: f64,
    pub theta_y: f64,
    /// Physical tip position.
    pub tip: MetricPoint,
    pub radius: f64,
    pub length: f64,
}

impl Default for NeedleModel {
    fn default() -> Self {
        Self {
            theta_z: 0.0,
            theta_y: 20f64.to_radians(),
            tip: MetricPoint::new(1250.0, 1250.0, 660.0),
            // 36G: 0.11 mm outer diameter.
            radius: 55.0,
            length: 20_000.0,
        }
    }
}

impl NeedleModel {
    pub fn pose(&self) -> NeedlePose {
        compose_pose(self.theta_z, self.theta_y, self.tip)
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.pose().direction()
    }

    /// Physical depth interval where the vertical ray at (x, y) is inside
    /// the cylinder.
    pub fn ray_interval(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let d = self.direction();
        // q(z) − tip = a + z·k̂
        let a = Vector3::new(x - self.tip.x, y - self.tip.y, -self.tip.z);
        let ad = a.dot(&d);
        // |perp|² = |a + z k̂|² − (a·d + z d_z)² <= r²
        let qa = 1.0 - d.z * d.z;
        let qb = 2.0 * (a.z - ad * d.z);
        let qc = a.norm_squared() - ad * ad - self.radius * self.radius;
        let (mut lo, mut hi) = if qa <= 1e-12 {
            // Vertical needle: the ray is either inside the radius or not.
            if qc > 0.0 {
                return None;
            }
            (f64::NEG_INFINITY, f64::INFINITY)
        } else {
            let disc = qb * qb - 4.0 * qa * qc;
            if disc < 0.0 {
                return None;
            }
            let s = math::sqrt(disc);
            ((-qb - s) / (2.0 * qa), (-qb + s) / (2.0 * qa))
        };
        // Axial coordinate t = a·d + z d_z must lie in [−length, 0].
        if d.z.abs() <= 1e-12 {
            if ad < -self.length || ad > 0.0 {
                return None;
            }
        } else {
            let t0 = (-self.length - ad) / d.z;
            let t1 = -ad / d.z;
            lo = lo.max(t0.min(t1));
            hi = hi.min(t0.max(t1));
        }
        (lo < hi).then_some((lo, hi))
    }

    /// Distance from the infinite axis line.
    pub fn axis_distance(&self, p: &Vector3<f64>) -> f64 {
        let d = self.direction();
        let q = p - self.tip.to_vector();
        (q - d * q.dot(&d)).norm()
    }

    /// Lateral distance from (x, y) to the axis projected onto the XY
    /// plane; equals the distance between the vertical ray and the axis.
    pub fn lateral_axis_distance(&self, x: f64, y: f64) -> f64 {
        let d = self.direction();
        let l = math::hypot(d.x, d.y);
        let (qx, qy) = (x - self.tip.x, y - self.tip.y);
        if l <= 1e-12 {
            return math::hypot(qx, qy);
        }
        ((qx * d.y - qy * d.x) / l).abs()
    }
}

/// Intensity model; band half-widths are optical µm.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Appearance {
    pub air: f64,
    pub vitreous: f64,
    pub tissue: f64,
    pub choroid: f64,
    pub choroid_decay_um: f64,
    pub ilm_peak: f64,
    pub ilm_half_width_um: f64,
    pub rpe_peak: f64,
    pub rpe_half_width_um: f64,
    pub needle: f64,
    /// Attenuation of everything below the needle.
    pub shadow_factor: f64,
}

impl Default for Appearance {
    fn default() -> Self {
        Self {
            air: 600.0,
            vitreous: 1200.0,
            tissue: 7000.0,
            choroid: 6000.0,
            choroid_decay_um: 400.0,
            ilm_peak: 22000.0,
            ilm_half_width_um: 18.0,
            rpe_peak: 26000.0,
            rpe_half_width_um: 24.0,
            needle: 18000.0,
            shadow_factor: 0.2,
        }
    }
}

/// Ground truth for one synthetic acquisition.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct PhantomScene {
    pub geometry: VolumeGeometry,
    /// Physical depth of the ILM.
    pub ilm_surface: HeightField,
    /// Physical depth of the RPE.
    pub rpe_surface: HeightField,
    pub appearance: Appearance,
    pub needle: Option<NeedleModel>,
    pub indices: RefractiveIndices,
    /// Physical depth of the fluid surface; above it lies air.
    pub fluid_surface_um: f64,
    /// Log-standard deviation of the multiplicative speckle.
    pub speckle_sigma: f64,
    pub bscan_dropout_prob: f64,
    pub rng_seed: u64,
}

impl Default for PhantomScene {
    fn default() -> Self {
        let geometry = VolumeGeometry::default();
        let [mx, my, _] = geometry.max_metric();
        let ilm = HeightField {
            base: 1110.0,
            slope: [0.0; 2],
            curvature: [1.5e-5, 1.5e-5],
            center: [0.5 * mx, 0.5 * my],
            bumps: Vec::new(),
        };
        Self {
            geometry,
            rpe_surface: ilm.offset(250.0),
            ilm_surface: ilm,
            appearance: Appearance::default(),
            needle: Some(NeedleModel::default()),
            indices: RefractiveIndices::default(),
            fluid_surface_um: 0.0,
            speckle_sigma: 0.3,
            bscan_dropout_prob: 0.0,
            rng_seed: 0,
        }
    }
}

/// Scene quantities along one A-scan; depths optical unless noted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColumnProfile {
    pub fluid: f64,
    pub ilm: f64,
    pub rpe: f64,
    pub ilm_physical: f64,
    pub rpe_physical: f64,
    /// Optical depth interval occupied by the needle.
    pub needle: Option<(f64, f64)>,
}

impl PhantomScene {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        self.indices.validate()?;
        let bad = |msg: alloc::string::String| Err(Error::InvalidScene(msg));
        if !self.ilm_surface.is_valid() || !self.rpe_surface.is_valid() {
            return bad("layer surfaces must have finite parameters and positive bump widths".into());
        }
        if !(0.0..=1.0).contains(&self.bscan_dropout_prob) {
            return bad(format!("dropout probability {} outside [0, 1]", self.bscan_dropout_prob));
        }
        if !(self.speckle_sigma.is_finite() && self.speckle_sigma >= 0.0) {
            return bad(format!("speckle sigma {} must be >= 0", self.speckle_sigma));
        }
        if !(self.fluid_surface_um.is_finite() && self.fluid_surface_um >= 0.0) {
            return bad(format!("fluid surface {} must be >= 0", self.fluid_surface_um));
        }
        let a = &self.appearance;
        if !(0.0..=1.0).contains(&a.shadow_factor) {
            return bad(format!("shadow factor {} outside [0, 1]", a.shadow_factor));
        }
        let levels = [a.air, a.vitreous, a.tissue, a.choroid, a.ilm_peak, a.rpe_peak, a.needle];
        if levels.iter().any(|v| !(v.is_finite() && *v >= 0.0))
            || !(a.choroid_decay_um > 0.0 && a.ilm_half_width_um > 0.0 && a.rpe_half_width_um > 0.0)
        {
            return bad("appearance levels must be >= 0 and widths > 0".into());
        }
        if let Some(n) = &self.needle {
            if !(n.radius.is_finite() && n.radius > 0.0) {
                return bad(format!("needle radius {} must be > 0", n.radius));
            }
            if !(n.length.is_finite() && n.length > 0.0) {
                return bad(format!("needle length {} must be > 0", n.length));
            }
            if !(n.theta_z.is_finite() && n.theta_y.is_finite() && n.tip.is_finite()) {
                return bad("needle pose must be finite".into());
            }
        }
        let [nx, ny, _] = self.geometry.dims;
        let [sx, sy, _] = self.geometry.spacing;
        for iy in 0..ny {
            for ix in 0..nx {
                let (x, y) = (ix as f64 * sx, iy as f64 * sy);
                let ilm = self.ilm_surface.at(x, y);
                let rpe = self.rpe_surface.at(x, y);
                if !(rpe > ilm) {
                    return bad(format!("RPE ({rpe}) not below ILM ({ilm}) at ({x}, {y})"));
                }
                if ilm < self.fluid_surface_um {
                    return bad(format!("ILM ({ilm}) above the fluid surface at ({x}, {y})"));
                }
            }
        }
        Ok(())
    }

    /// Copy with the needle tip moved to `tip` (physical).
    pub fn with_needle_tip(&self, tip: MetricPoint) -> Self {
        let mut s = self.clone();
        if let Some(n) = &mut s.needle {
            n.tip = tip;
        }
        s
    }

    /// Physical depth → optical depth along the A-scan at (x, y).
    pub fn optical_depth(&self, x: f64, y: f64, z: f64) -> f64 {
        let ilm = self.ilm_surface.at(x, y);
        self.optical_depth_with(ilm, z)
    }

    fn optical_depth_with(&self, ilm: f64, z: f64) -> f64 {
        let f = self.fluid_surface_um;
        let n = &self.indices;
        if z <= f {
            n.air * z
        } else if z <= ilm {
            n.air * f + n.vitreous * (z - f)
        } else {
            n.air * f + n.vitreous * (ilm - f) + n.tissue * (z - ilm)
        }
    }

    /// Optical depth → physical depth along the A-scan at (x, y).
    pub fn physical_depth(&self, x: f64, y: f64, o: f64) -> f64 {
        let ilm = self.ilm_surface.at(x, y);
        self.physical_depth_with(ilm, o)
    }

    fn physical_depth_with(&self, ilm: f64, o: f64) -> f64 {
        let f = self.fluid_surface_um;
        let n = &self.indices;
        let of = n.air * f;
        let oi = of + n.vitreous * (ilm - f);
        if o <= of {
            o / n.air
        } else if o <= oi {
            f + (o - of) / n.vitreous
        } else {
            ilm + (o - oi) / n.tissue
        }
    }

    pub fn to_optical(&self, p: &MetricPoint) -> MetricPoint {
        MetricPoint::new(p.x, p.y, self.optical_depth(p.x, p.y, p.z))
    }

    pub fn to_physical(&self, p: &MetricPoint) -> MetricPoint {
        MetricPoint::new(p.x, p.y, self.physical_depth(p.x, p.y, p.z))
    }

    pub fn column(&self, x: f64, y: f64) -> ColumnProfile {
        let ilm_p = self.ilm_surface.at(x, y);
        let rpe_p = self.rpe_surface.at(x, y);
        let needle = self.needle.as_ref().and_then(|n| n.ray_interval(x, y)).map(|(a, b)| {
            (self.optical_depth_with(ilm_p, a), self.optical_depth_with(ilm_p, b))
        });
        ColumnProfile {
            fluid: self.indices.air * self.fluid_surface_um,
            ilm: self.optical_depth_with(ilm_p, ilm_p),
            rpe: self.optical_depth_with(ilm_p, rpe_p),
            ilm_physical: ilm_p,
            rpe_physical: rpe_p,
            needle,
        }
    }

    /// Needle pose as it appears in the (optical) volume frame. Exact while
    /// the last 100 µm of the needle stay within one medium.
    pub fn needle_in_volume(&self) -> Option<NeedlePose> {
        let n = self.needle.as_ref()?;
        let d = n.direction();
        let tip = n.tip;
        let back = MetricPoint::from_vector(&(tip.to_vector() - d * 100.0));
        let (to, bo) = (self.to_optical(&tip), self.to_optical(&back));
        let c = to.to_vector() - bo.to_vector();
        let theta_z = math::atan2(-c.y, c.x);
        let theta_y = math::atan2(c.z, math::hypot(c.x, c.y));
        Some(compose_pose(theta_z, theta_y, to))
    }

    /// Radial needle score `1 − ½(ρ/r)²` (0.5 on the surface) when the A-scan
    /// at (x, y) hits the needle.
    pub fn footprint_score(&self, x: f64, y: f64) -> f64 {
        let Some(n) = &self.needle else { return 0.0 };
        if n.ray_interval(x, y).is_none() {
            return 0.0;
        }
        let rho = n.lateral_axis_distance(x, y) / n.radius;
        (1.0 - 0.5 * rho * rho).clamp(0.5, 1.0)
    }

    /// Score of the optical volume point `p` inside the needle, else 0.
    pub fn needle_score(&self, p: &MetricPoint) -> f64 {
        let Some(n) = &self.needle else { return 0.0 };
        let Some((a, b)) = n.ray_interval(p.x, p.y) else { return 0.0 };
        let z = self.physical_depth(p.x, p.y, p.z);
        if z < a || z > b {
            return 0.0;
        }
        let rho = n.axis_distance(&Vector3::new(p.x, p.y, z)) / n.radius;
        (1.0 - 0.5 * rho * rho).clamp(0.5, 1.0)
    }

    /// Renders the acquisition. Deterministic in the scene; B-scan `iy` uses
    /// its own random stream, so B-scans can be rendered independently.
    pub fn render(&self) -> Result<IoctVolume> {
        self.validate()?;
        let g = self.geometry;
        let [nx, ny, nz] = g.dims;
        let [sx, sy, sz] = g.spacing;
        let depth = (nz - 1) as f64 * sz;
        let table = (self.speckle_sigma > 0.0).then(|| speckle_table(self.rng_seed, self.speckle_sigma));
        let mut voxels = vec![0u16; g.voxel_count()];
        let mut needle_seen = self.needle.is_none();
        let mut column = vec![0f32; nz];

        for iy in 0..ny {
            let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
            rng.set_stream(iy as u64);
            let dropped = (rng.next_u32() as f64) / 4_294_967_296.0 < self.bscan_dropout_prob;
            for ix in 0..nx {
                let (x, y) = (ix as f64 * sx, iy as f64 * sy);
                let profile = self.column(x, y);
                if let Some((a, b)) = profile.needle {
                    needle_seen |= b >= 0.0 && a <= depth;
                }
                if dropped {
                    continue;
                }
                self.render_ascan(&profile, sz, &mut column);
                let out = &mut voxels[(iy * nx + ix) * nz..][..nz];
                match &table {
                    Some(table) => {
                        let mut bits = 0u32;
                        for (iz, (dst, &v)) in out.iter_mut().zip(&column).enumerate() {
                            if iz % 2 == 0 {
                                bits = rng.next_u32();
                            }
                            let k = (bits >> (16 * (iz % 2))) as usize & ((1 << SPECKLE_TABLE_BITS) - 1);
                            *dst = quantize(v * table[k]);
                        }
                    }
                    None => {
                        for (dst, &v) in out.iter_mut().zip(&column) {
                            *dst = quantize(v);
                        }
                    }
                }
            }
        }
        if !needle_seen {
            return Err(Error::NeedleOutsideScan);
        }
        Ok(IoctVolume::new(g, voxels)?.with_id(self.rng_seed))
    }

    /// Noise-free intensities along one A-scan.
    fn render_ascan(&self, p: &ColumnProfile, sz: f64, out: &mut [f32]) {
        let a = &self.appearance;
        let decay_step = math::exp(-sz / a.choroid_decay_um);
        let mut choroid = None::<f64>;
        for (iz, dst) in out.iter_mut().enumerate() {
            let o = iz as f64 * sz;
            let mut v = if o < p.fluid {
                a.air
            } else if o < p.ilm {
                a.vitreous
            } else if o < p.rpe {
                a.tissue
            } else {
                let c = match choroid {
                    Some(c) => c * decay_step,
                    None => a.choroid * math::exp(-(o - p.rpe) / a.choroid_decay_um),
                };
                choroid = Some(c);
                c
            };
            v = v.max(a.ilm_peak * (1.0 - (o - p.ilm).abs() / a.ilm_half_width_um));
            v = v.max(a.rpe_peak * (1.0 - (o - p.rpe).abs() / a.rpe_half_width_um));
            if let Some((n0, n1)) = p.needle {
                if o >= n0 && o <= n1 {
                    v = a.needle;
                } else if o > n1 {
                    v *= a.shadow_factor;
                }
            }
            *dst = v as f32;
        }
    }
}

#[inline]
fn quantize(v: f32) -> u16 {
    math::round(v as f64).clamp(0.0, u16::MAX as f64) as u16
}

/// Mean-one log-normal factors `exp(σ z − σ²/2)`, `z ~ N(0, 1)`.
fn speckle_table(seed: u64, sigma: f64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ SPECKLE_TABLE_SALT);
    (0..1usize << SPECKLE_TABLE_BITS)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            math::exp(sigma * z - 0.5 * sigma * sigma) as f32
        })
        .collect()
}

pub fn render_volume(scene: &PhantomScene) -> Result<IoctVolume> {
    scene.render()
}

/// Translation-only robot whose frame is rotated by the true needle yaw.
///
/// Positions are physical; `C(θz)` maps robot vectors into the volume frame.
#[derive(Debug, Clone)]
pub struct SimulatedRobot {
    /// Tip at construction, volume frame.
    origin: Vector3<f64>,
    /// Accumulated motion, robot frame.
    displacement: Vector3<f64>,
    frame: RegistrationMatrix,
    sigma_move: f64,
    rng: ChaCha8Rng,
}

impl SimulatedRobot {
    /// Robot holding its tip at `tip` (volume frame, physical µm).
    pub fn new(tip: MetricPoint, theta_z: f64, sigma_move: f64, seed: u64) -> Result<Self> {
        if !(sigma_move.is_finite() && sigma_move >= 0.0) {
            return Err(Error::InvalidParameter {
                name: "sigma_move",
                reason: format!("{sigma_move} must be >= 0"),
            });
        }
        let frame = RegistrationMatrix::new(theta_z);
        Ok(Self {
            origin: tip.to_vector(),
            displacement: Vector3::zeros(),
            frame,
            sigma_move,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Robot for the scene's needle, with the true yaw as frame rotation.
    pub fn for_scene(scene: &PhantomScene, sigma_move: f64, seed: u64) -> Result<Self> {
        let n = scene.needle.as_ref().ok_or(Error::InvalidScene("scene has no needle".into()))?;
        Self::new(n.tip, n.theta_z, sigma_move, seed)
    }

    pub fn tip_robot(&self) -> Vector3<f64> {
        self.frame.volume_to_robot(&self.origin) + self.displacement
    }

    pub fn tip_volume(&self) -> MetricPoint {
        MetricPoint::from_vector(&(self.origin + self.frame.robot_to_volume(&self.displacement)))
    }

    pub fn theta_z(&self) -> f64 {
        self.frame.theta_z
    }

    pub fn sigma_move(&self) -> f64 {
        self.sigma_move
    }

    /// Moves by `t_r` (robot frame) plus independent N(0, σ²) per axis.
    pub fn apply_translation(&mut self, t_r: &Vector3<f64>) -> Result<()> {
        if !t_r.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "translation",
                reason: format!("{t_r:?} is not finite"),
            });
        }
        let mut step = *t_r;
        if self.sigma_move > 0.0 {
            let noise = Normal::new(0.0, self.sigma_move).expect("sigma checked at construction");
            for v in step.iter_mut() {
                *v += noise.sample(&mut self.rng);
            }
        }
        self.displacement += step;
        Ok(())
    }
}

/// Renders the scene with the needle tip at the robot's current position.
pub fn reacquire(scene: &PhantomScene, robot: &SimulatedRobot) -> Result<IoctVolume> {
    scene.with_needle_tip(robot.tip_volume()).render()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small_scene() -> PhantomScene {
        let geometry = VolumeGeometry::new([80, 8, 256], [10.0, 25.0, 6.0]).unwrap();
        PhantomScene {
            geometry,
            ilm_surface: HeightField::flat(500.0),
            rpe_surface: HeightField::flat(700.0),
            needle: Some(NeedleModel {
                theta_z: 0.0,
                theta_y: 20f64.to_radians(),
                tip: MetricPoint::new(500.0, 100.0, 300.0),
                radius: 55.0,
                length: 5000.0,
            }),
            ..PhantomScene::default()
        }
    }

    #[test]
    fn flat_needle_free_scene_has_identical_bscans() {
        let scene = PhantomScene { needle: None, speckle_sigma: 0.0, ..small_scene() };
        let v = scene.render().unwrap();
        let first = v.bscan_slab(0).to_vec();
        for iy in 1..8 {
            assert_eq!(v.bscan_slab(iy), &first[..]);
        }
    }

    #[test]
    fn full_dropout_gives_zero_volume() {
        let scene = PhantomScene { bscan_dropout_prob: 1.0, ..small_scene() };
        assert!(scene.render().unwrap().voxels().iter().all(|&v| v == 0));
    }

    #[test]
    fn render_is_deterministic() {
        let scene = PhantomScene { bscan_dropout_prob: 0.3, ..small_scene() };
        assert_eq!(scene.render().unwrap(), scene.render().unwrap());
        let other = PhantomScene { rng_seed: 1, ..scene.clone() };
        assert_ne!(scene.render().unwrap().voxels(), other.render().unwrap().voxels());
    }

    #[test]
    fn needle_outside_is_rejected() {
        let scene = small_scene().with_needle_tip(MetricPoint::new(-9000.0, 100.0, 300.0));
        assert_eq!(scene.render().unwrap_err(), Error::NeedleOutsideScan);
        let mut bad = small_scene();
        bad.rpe_surface = HeightField::flat(400.0);
        assert!(matches!(bad.render(), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn depth_maps_are_inverse() {
        let scene = PhantomScene { fluid_surface_um: 100.0, ..small_scene() };
        for z in [0.0, 50.0, 100.0, 300.0, 500.0, 800.0] {
            let o = scene.optical_depth(10.0, 10.0, z);
            assert_abs_diff_eq!(scene.physical_depth(10.0, 10.0, o), z, epsilon = 1e-9);
        }
        // 100 µm of air, 400 µm of vitreous at 1.38.
        assert_abs_diff_eq!(scene.optical_depth(0.0, 0.0, 500.0), 100.0 + 552.0, epsilon = 1e-9);
    }

    #[test]
    fn ray_interval_matches_cylinder() {
        let n = small_scene().needle.unwrap();
        // Ray through the axis, well behind the tip: chord is 2r / cos θy.
        let back = 1000.0;
        let d = n.direction();
        let x = n.tip.x - back * d.x / d.x.hypot(d.y);
        let (a, b) = n.ray_interval(x, n.tip.y).unwrap();
        assert_abs_diff_eq!(b - a, 2.0 * 55.0 / n.theta_y.cos(), epsilon = 1e-9);
        // Points of the interval lie on the cylinder surface.
        for z in [a, b] {
            assert_abs_diff_eq!(n.axis_distance(&Vector3::new(x, n.tip.y, z)), 55.0, epsilon = 1e-9);
        }
        assert!(n.ray_interval(x, n.tip.y + 56.0).is_none());
        // Ahead of the tip.
        assert!(n.ray_interval(n.tip.x + 100.0, n.tip.y).is_none());
    }

    #[test]
    fn shadow_darkens_ascans() {
        let mut scene = small_scene();
        scene.speckle_sigma = 0.0;
        let with = scene.render().unwrap();
        let without = PhantomScene { needle: None, ..scene.clone() }.render().unwrap();
        let n = scene.needle.unwrap();
        for ix in 0..80 {
            let x = ix as f64 * 10.0;
            if let Some((_, b)) = scene.column(x, 100.0).needle {
                let from = (b / 6.0).ceil() as usize + 1;
                if from >= 256 {
                    continue;
                }
                let mean = |v: &IoctVolume| v.ascan(ix, 4)[from..].iter().map(|&s| s as f64).sum::<f64>();
                assert!(mean(&with) < mean(&without), "column {ix}");
            }
        }
        assert!(n.ray_interval(500.0, 100.0).is_some());
    }

    #[test]
    fn ground_truth_pose_in_volume() {
        let scene = PhantomScene { indices: RefractiveIndices { air: 1.0, vitreous: 1.0, tissue: 1.0 }, ..small_scene() };
        let pose = scene.needle_in_volume().unwrap();
        let n = scene.needle.unwrap();
        assert_abs_diff_eq!(pose.theta_z, n.theta_z, epsilon = 1e-12);
        assert_abs_diff_eq!(pose.theta_y, n.theta_y, epsilon = 1e-12);
        // Uniform index below the surface: optical pitch is atan(n tan θy).
        let scene = small_scene();
        let pose = scene.needle_in_volume().unwrap();
        assert_abs_diff_eq!(pose.theta_y, (1.38 * n.theta_y.tan()).atan(), epsilon = 1e-12);
        assert_abs_diff_eq!(pose.tip.z, 1.38 * 300.0, epsilon = 1e-9);
    }

    #[test]
    fn robot_moves() {
        let mut r = SimulatedRobot::new(MetricPoint::new(1.0, 2.0, 3.0), 0.4, 0.0, 1).unwrap();
        let start = r.tip_robot();
        r.apply_translation(&Vector3::zeros()).unwrap();
        assert_eq!(r.tip_robot(), start);
        r.apply_translation(&Vector3::new(500.0, 0.0, 0.0)).unwrap();
        assert_eq!(r.tip_robot(), start + Vector3::new(500.0, 0.0, 0.0));
        assert!(SimulatedRobot::new(MetricPoint::default(), 0.0, -1.0, 0).is_err());
        assert!(r.apply_translation(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        let back = SimulatedRobot::new(MetricPoint::new(1.0, 2.0, 3.0), 0.4, 0.0, 1).unwrap();
        assert_abs_diff_eq!(back.tip_volume().to_vector(), Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-12);
    }

    #[test]
    fn reacquire_unmoved_matches_render() {
        let scene = small_scene();
        let robot = SimulatedRobot::for_scene(&scene, 0.0, 3).unwrap();
        let a = reacquire(&scene, &robot).unwrap();
        let b = scene.render().unwrap();
        assert_eq!(a, b);
    }
}
