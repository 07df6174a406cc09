//! Two-phase insertion planning.
//!
//! The tip first moves horizontally onto the insertion line (the line
//! through the target parallel to the needle), reaching point `J` at the
//! tip's depth, then advances along the line to the target. Only the
//! advance crosses media and gets its axial extent corrected for refraction.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::pose::NeedlePose;
use crate::registration::RegistrationMatrix;
use crate::slicing::PlaneSpec;
use crate::volume::{MetricPoint, VolumeGeometry};

/// Below this |d_z| the needle counts as horizontal.
const MIN_DESCENT: f64 = 1e-9;
const RANGE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct RefractiveIndices {
    pub air: f64,
    pub vitreous: f64,
    pub tissue: f64,
}

impl Default for RefractiveIndices {
    fn default() -> Self {
        Self {
            air: 1.0,
            vitreous: 1.38,
            tissue: 1.38,
        }
    }
}

impl RefractiveIndices {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [("n_air", self.air), ("n_vitreous", self.vitreous), ("n_tissue", self.tissue)] {
            if !(n.is_finite() && n >= 1.0) {
                return Err(Error::InvalidParameter {
                    name,
                    reason: format!("refractive index {n} must be >= 1"),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Medium {
    Air,
    Vitreous,
    Tissue,
}

/// Depth interval `[top, bottom)` (optical µm) filled with one medium.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MediaRegion {
    pub medium: Medium,
    pub index: f64,
    pub top: f64,
    pub bottom: f64,
}

/// Contiguous media along +Z at one lateral position.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MediaStack {
    regions: Vec<MediaRegion>,
}

impl MediaStack {
    pub fn new(regions: Vec<MediaRegion>) -> Result<Self> {
        if regions.is_empty() {
            return Err(Error::InvalidParameter {
                name: "media",
                reason: "stack has no regions".into(),
            });
        }
        for (i, r) in regions.iter().enumerate() {
            if !(r.index.is_finite() && r.index >= 1.0) {
                return Err(Error::InvalidParameter {
                    name: "media",
                    reason: format!("region {i} has refractive index {}", r.index),
                });
            }
            if !(r.top.is_finite() && r.bottom.is_finite() && r.top < r.bottom) {
                return Err(Error::InvalidParameter {
                    name: "media",
                    reason: format!("region {i} boundaries [{}, {}) are not increasing", r.top, r.bottom),
                });
            }
            if i > 0 && regions[i - 1].bottom != r.top {
                return Err(Error::InvalidParameter {
                    name: "media",
                    reason: format!("gap or overlap between regions {} and {i}", i - 1),
                });
            }
        }
        Ok(Self { regions })
    }

    /// Air from the volume top to the fluid surface, vitreous down to the
    /// ILM, tissue down to the RPE. Empty regions are left out.
    pub fn open_sky(fluid_surface: f64, ilm: f64, rpe: f64, indices: &RefractiveIndices) -> Result<Self> {
        indices.validate()?;
        if !(0.0 <= fluid_surface && fluid_surface <= ilm && ilm < rpe) {
            return Err(Error::InvalidParameter {
                name: "media",
                reason: format!("need 0 <= fluid {fluid_surface} <= ILM {ilm} < RPE {rpe}"),
            });
        }
        let regions = [
            (Medium::Air, indices.air, 0.0, fluid_surface),
            (Medium::Vitreous, indices.vitreous, fluid_surface, ilm),
            (Medium::Tissue, indices.tissue, ilm, rpe),
        ]
        .into_iter()
        .filter(|&(_, _, top, bottom)| top < bottom)
        .map(|(medium, index, top, bottom)| MediaRegion { medium, index, top, bottom })
        .collect();
        Self::new(regions)
    }

    pub fn regions(&self) -> &[MediaRegion] {
        &self.regions
    }

    pub fn top(&self) -> f64 {
        self.regions[0].top
    }

    pub fn bottom(&self) -> f64 {
        self.regions[self.regions.len() - 1].bottom
    }

    /// Physical length of the optical depth interval from `start` to `end`,
    /// signed like `end - start`.
    pub fn physical_extent(&self, start: f64, end: f64) -> Result<f64> {
        let (lo, hi) = if start <= end { (start, end) } else { (end, start) };
        if lo < self.top() - RANGE_TOLERANCE || hi > self.bottom() + RANGE_TOLERANCE {
            return Err(Error::OutsideMediaStack {
                start,
                end,
                top: self.top(),
                bottom: self.bottom(),
            });
        }
        let mut sum = 0.0;
        for r in &self.regions {
            let a = lo.max(r.top);
            let b = hi.min(r.bottom);
            if b > a {
                sum += (b - a) / r.index;
            }
        }
        Ok(if start <= end { sum } else { -sum })
    }
}

/// Parametric 3D line `point + s·direction`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Line3 {
    pub point: Vector3<f64>,
    pub direction: Vector3<f64>,
}

impl Line3 {
    pub fn at(&self, s: f64) -> Vector3<f64> {
        self.point + self.direction * s
    }
}

/// Line through the target parallel to the needle axis.
pub fn insertion_line(target: &MetricPoint, pose: &NeedlePose) -> Line3 {
    Line3 {
        point: target.to_vector(),
        direction: pose.direction(),
    }
}

/// Decomposed motion from the current tip to the target.
#[derive(Debug, Clone, PartialEq)]
pub struct InsertionPlan {
    pub target: MetricPoint,
    pub tip: MetricPoint,
    /// Unit needle direction.
    pub direction: Vector3<f64>,
    /// Insertion line point at the tip's depth.
    pub j: MetricPoint,
    /// Horizontal alignment `J - tip`.
    pub t_a: Vector3<f64>,
    /// Advance `V - J`, optical.
    pub t_b: Vector3<f64>,
    /// Advance with its axial extent converted to physical length.
    pub t_b_corrected: Vector3<f64>,
    pub registration: RegistrationMatrix,
    /// Robot-frame commands for `t_a` and `t_b_corrected`.
    pub robot_commands: [Vector3<f64>; 2],
}

/// Plans the two phases without refraction correction
/// (`t_b_corrected = t_b`); see [`InsertionPlan::with_refraction`].
pub fn plan_trajectory(pose: &NeedlePose, target: &MetricPoint) -> Result<InsertionPlan> {
    if !pose.is_finite() || !target.is_finite() {
        return Err(Error::InvalidParameter {
            name: "plan",
            reason: "non-finite pose or target".into(),
        });
    }
    let d = pose.direction();
    if d.z.abs() < MIN_DESCENT {
        return Err(Error::HorizontalNeedle);
    }
    let v = target.to_vector();
    let tip = pose.tip.to_vector();
    let s = (v.z - tip.z) / d.z;
    if s < 0.0 {
        return Err(Error::TargetBehindTip(s));
    }
    let mut j = v - d * s;
    // J lies on the tip's horizontal plane by construction.
    j.z = tip.z;
    let t_a = j - tip;
    let t_b = v - j;
    let registration = RegistrationMatrix::new(pose.theta_z);
    let robot_commands = [registration.volume_to_robot(&t_a), registration.volume_to_robot(&t_b)];
    Ok(InsertionPlan {
        target: *target,
        tip: pose.tip,
        direction: d,
        j: MetricPoint::from_vector(&j),
        t_a,
        t_b,
        t_b_corrected: t_b,
        registration,
        robot_commands,
    })
}

/// Converts the axial extent of `t_b`, starting at depth `entry_z`, from
/// optical to physical length. Lateral components are unchanged.
pub fn refraction_correct(t_b: &Vector3<f64>, entry_z: f64, media: &MediaStack) -> Result<Vector3<f64>> {
    let z = media.physical_extent(entry_z, entry_z + t_b.z)?;
    Ok(Vector3::new(t_b.x, t_b.y, z))
}

impl InsertionPlan {
    /// Applies the refraction correction to the advance and updates the
    /// robot command for it.
    pub fn with_refraction(mut self, media: &MediaStack) -> Result<Self> {
        self.t_b_corrected = refraction_correct(&self.t_b, self.j.z, media)?;
        self.robot_commands[1] = self.registration.volume_to_robot(&self.t_b_corrected);
        Ok(self)
    }
}

/// Plane through the target with the tool-aligned normal; its layer
/// boundaries define the media stack at the target.
pub fn second_virtual_bscan(target: &MetricPoint, theta_z: f64, geometry: &VolumeGeometry) -> Result<PlaneSpec> {
    if !geometry.contains(target) {
        return Err(Error::OutOfBounds {
            what: "target",
            detail: format!("{target:?} outside the volume"),
        });
    }
    PlaneSpec::new(*target, [crate::math::sin(theta_z), crate::math::cos(theta_z), 0.0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::compose_pose;
    use alloc::vec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    /// Pose whose direction is (0, 1/√2, 1/√2): yaw −90°, pitch 45°.
    fn diagonal_pose() -> NeedlePose {
        compose_pose(-core::f64::consts::FRAC_PI_2, core::f64::consts::FRAC_PI_4, MetricPoint::default())
    }

    #[test]
    fn target_on_axis() {
        let pose = diagonal_pose();
        let d = pose.direction();
        assert_abs_diff_eq!(d, Vector3::new(0.0, 0.5f64.sqrt(), 0.5f64.sqrt()), epsilon = 1e-15);
        let plan = plan_trajectory(&pose, &MetricPoint::new(0.0, 100.0, 100.0)).unwrap();
        assert_abs_diff_eq!(plan.j.to_vector(), Vector3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.t_a, Vector3::zeros(), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.t_b, Vector3::new(0.0, 100.0, 100.0), epsilon = 1e-12);
    }

    #[test]
    fn target_off_axis() {
        // Line through V = (0, 200, 100) along d meets z = 0 at s = 100√2:
        // J = V − 100·(0, 1, 1) = (0, 100, 0).
        let plan = plan_trajectory(&diagonal_pose(), &MetricPoint::new(0.0, 200.0, 100.0)).unwrap();
        assert_abs_diff_eq!(plan.j.to_vector(), Vector3::new(0.0, 100.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.t_a, Vector3::new(0.0, 100.0, 0.0), epsilon = 1e-12);
        assert_abs_diff_eq!(plan.t_b, Vector3::new(0.0, 100.0, 100.0), epsilon = 1e-12);
    }

    #[test]
    fn rejects_horizontal_and_backward() {
        let flat = compose_pose(-core::f64::consts::FRAC_PI_2, 0.0, MetricPoint::default());
        assert_eq!(
            plan_trajectory(&flat, &MetricPoint::new(0.0, 10.0, 10.0)).unwrap_err(),
            Error::HorizontalNeedle
        );
        assert!(matches!(
            plan_trajectory(&diagonal_pose(), &MetricPoint::new(0.0, 0.0, -10.0)),
            Err(Error::TargetBehindTip(_))
        ));
    }

    #[test]
    fn insertion_line_contains_target_and_follows_needle() {
        let pose = compose_pose(0.3, 0.5, MetricPoint::new(10.0, 20.0, 30.0));
        let v = MetricPoint::new(400.0, 300.0, 500.0);
        let line = insertion_line(&v, &pose);
        for s in [-50.0, 0.0, 12.5, 300.0] {
            let p = line.at(s);
            assert!((p - v.to_vector()).cross(&pose.direction()).norm() <= 1e-9);
        }
        // Target on the needle axis: line coincides with the axis.
        let on_axis = MetricPoint::from_vector(&(pose.tip.to_vector() + pose.direction() * 80.0));
        let line = insertion_line(&on_axis, &pose);
        assert!((pose.tip.to_vector() - line.point).cross(&line.direction).norm() <= 1e-9);
        let flat = compose_pose(0.3, 0.0, MetricPoint::default());
        assert_eq!(insertion_line(&v, &flat).direction.z, 0.0);
    }

    #[test]
    fn refraction_examples() {
        let unit = RefractiveIndices { air: 1.0, vitreous: 1.0, tissue: 1.0 };
        let stack = MediaStack::open_sky(50.0, 300.0, 500.0, &unit).unwrap();
        let t = Vector3::new(3.0, -4.0, 200.0);
        assert_eq!(refraction_correct(&t, 10.0, &stack).unwrap(), t);

        let single = MediaStack::new(vec![MediaRegion { medium: Medium::Tissue, index: 1.38, top: 0.0, bottom: 1000.0 }]).unwrap();
        let c = refraction_correct(&Vector3::new(0.0, 0.0, 138.0), 100.0, &single).unwrap();
        assert!((c.z - 100.0).abs() <= 1e-9 * 100.0);

        let air_vitreous = MediaStack::open_sky(50.0, 500.0, 600.0, &RefractiveIndices::default()).unwrap();
        let c = refraction_correct(&Vector3::new(0.0, 0.0, 188.0), 0.0, &air_vitreous).unwrap();
        assert!((c.z - 150.0).abs() <= 1e-9 * 150.0);

        assert!(matches!(
            refraction_correct(&Vector3::new(0.0, 0.0, 188.0), 500.0, &air_vitreous),
            Err(Error::OutsideMediaStack { .. })
        ));
    }

    #[test]
    fn stack_validation() {
        assert!(MediaStack::open_sky(0.0, 300.0, 300.0, &RefractiveIndices::default()).is_err());
        let s = MediaStack::open_sky(0.0, 300.0, 400.0, &RefractiveIndices::default()).unwrap();
        assert_eq!(s.regions().len(), 2);
        assert_eq!(s.regions()[0].medium, Medium::Vitreous);
        let bad = RefractiveIndices { air: 0.9, ..RefractiveIndices::default() };
        assert!(MediaStack::open_sky(10.0, 300.0, 400.0, &bad).is_err());
    }

    #[test]
    fn second_plane() {
        let g = VolumeGeometry::default();
        let v = MetricPoint::new(100.0, 200.0, 300.0);
        let p = second_virtual_bscan(&v, 0.0, &g).unwrap();
        assert_eq!(p.point, v);
        assert_eq!(p.normal, [0.0, 1.0, 0.0]);
        assert!(second_virtual_bscan(&MetricPoint::new(-1.0, 0.0, 0.0), 0.0, &g).is_err());
    }

    proptest! {
        #[test]
        fn decomposition_invariants(
            tz in -1.5f64..1.5, ty in 0.05f64..1.2,
            tip in proptest::array::uniform3(0.0f64..1000.0),
            along in 0.0f64..800.0, off_x in -300.0f64..300.0, off_y in -300.0f64..300.0,
        ) {
            let pose = compose_pose(tz, ty, MetricPoint::from(tip));
            let d = pose.direction();
            let v = pose.tip.to_vector() + d * along + Vector3::new(off_x, off_y, 0.0);
            let plan = plan_trajectory(&pose, &MetricPoint::from_vector(&v)).unwrap();
            let total = v - pose.tip.to_vector();
            let scale = total.norm().max(1.0);
            prop_assert!((plan.t_a + plan.t_b - total).norm() <= 1e-9 * scale);
            prop_assert!(plan.t_a.z.abs() <= 1e-9 * scale);
            prop_assert!(plan.t_b.cross(&d).norm() <= 1e-9 * scale);
            prop_assert!(plan.t_b.dot(&d) >= 0.0);
        }

        #[test]
        fn correction_never_lengthens(
            fluid in 0.0f64..200.0, vit in 1.0f64..500.0, tis in 1.0f64..500.0,
            na in 1.0f64..1.5, nv in 1.0f64..1.5, nt in 1.0f64..1.5,
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let idx = RefractiveIndices { air: na, vitreous: nv, tissue: nt };
            let stack = MediaStack::open_sky(fluid, fluid + vit, fluid + vit + tis, &idx).unwrap();
            let bottom = stack.bottom();
            let (z0, z1) = (a * bottom, b * bottom);
            let c = refraction_correct(&Vector3::new(0.0, 0.0, z1 - z0), z0, &stack).unwrap();
            prop_assert!(c.z.abs() <= (z1 - z0).abs() + 1e-9);
            prop_assert!(c.z * (z1 - z0) >= 0.0);
        }
    }
}
