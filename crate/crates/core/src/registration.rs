//! Online robot/volume registration from the needle yaw.
//!
//! The robot's Z axis is anti-parallel to the volume's, and its Y axis is the
//! normal of the tool-aligned plane. The matrix is rebuilt from every new yaw
//! estimate.

use nalgebra::{Matrix3, Vector3};

use crate::math;

/// Robot axes expressed in the volume frame, as the columns of `C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegistrationMatrix {
    pub matrix: Matrix3<f64>,
    pub theta_z: f64,
}

impl RegistrationMatrix {
    /// Assembles `C = [v_x v_y v_z]` with `v_y = (sin θz, cos θz, 0)`,
    /// `v_z = (0, 0, -1)` and `v_x = v_y × v_z`.
    pub fn new(theta_z: f64) -> Self {
        let v_y = Vector3::new(math::sin(theta_z), math::cos(theta_z), 0.0);
        let v_z = Vector3::new(0.0, 0.0, -1.0);
        let v_x = v_y.cross(&v_z);
        Self {
            matrix: Matrix3::from_columns(&[v_x, v_y, v_z]),
            theta_z,
        }
    }

    pub fn v_x(&self) -> Vector3<f64> {
        self.matrix.column(0).into_owned()
    }

    pub fn v_y(&self) -> Vector3<f64> {
        self.matrix.column(1).into_owned()
    }

    pub fn v_z(&self) -> Vector3<f64> {
        self.matrix.column(2).into_owned()
    }

    /// `T_r = C⁻¹ T_v`, computed as `Cᵀ T_v`.
    pub fn volume_to_robot(&self, t_v: &Vector3<f64>) -> Vector3<f64> {
        self.matrix.tr_mul(t_v)
    }

    /// `T_v = C T_r`.
    pub fn robot_to_volume(&self, t_r: &Vector3<f64>) -> Vector3<f64> {
        self.matrix * t_r
    }
}

pub fn build_registration(theta_z: f64) -> RegistrationMatrix {
    RegistrationMatrix::new(theta_z)
}

pub fn volume_to_robot(c: &RegistrationMatrix, t_v: &Vector3<f64>) -> Vector3<f64> {
    c.volume_to_robot(t_v)
}
