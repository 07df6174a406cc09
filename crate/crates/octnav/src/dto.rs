//! JSON shapes exchanged over the CLI and HTTP API. All lengths in µm,
//! volume frame.

use octnav_core::{InsertionPlan, IoctVolume, NeedlePose};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseJson {
    pub theta_z_rad: f64,
    pub theta_y_rad: f64,
    pub tip_um: [f64; 3],
    /// Rotation matrix, row-major.
    #[serde(rename = "R")]
    pub r: [f64; 9],
}

impl From<&NeedlePose> for PoseJson {
    fn from(p: &NeedlePose) -> Self {
        let m = &p.rotation;
        Self {
            theta_z_rad: p.theta_z,
            theta_y_rad: p.theta_y,
            tip_um: p.tip.to_array(),
            r: [
                m[(0, 0)], m[(0, 1)], m[(0, 2)],
                m[(1, 0)], m[(1, 1)], m[(1, 2)],
                m[(2, 0)], m[(2, 1)], m[(2, 2)],
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanJson {
    pub target_um: [f64; 3],
    #[serde(rename = "J_um")]
    pub j_um: [f64; 3],
    #[serde(rename = "tA_um")]
    pub t_a_um: [f64; 3],
    #[serde(rename = "tB_um")]
    pub t_b_um: [f64; 3],
    #[serde(rename = "tB_corrected_um")]
    pub t_b_corrected_um: [f64; 3],
    /// Robot-frame translations for `tA` and `tB_corrected`, in order.
    pub robot_cmds_um: [[f64; 3]; 2],
}

fn arr(v: &octnav_core::Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl From<&InsertionPlan> for PlanJson {
    fn from(p: &InsertionPlan) -> Self {
        Self {
            target_um: p.target.to_array(),
            j_um: p.j.to_array(),
            t_a_um: arr(&p.t_a),
            t_b_um: arr(&p.t_b),
            t_b_corrected_um: arr(&p.t_b_corrected),
            robot_cmds_um: [arr(&p.robot_commands[0]), arr(&p.robot_commands[1])],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub id: u64,
    /// Indices of B-scans lost in acquisition.
    pub dropped_bscans: Vec<usize>,
}

impl VolumeMeta {
    pub fn new(volume: &IoctVolume, dropped: &[bool]) -> Self {
        Self {
            dims: volume.dims(),
            spacing_um: volume.spacing(),
            id: volume.id(),
            dropped_bscans: dropped.iter().enumerate().filter(|(_, &d)| d).map(|(i, _)| i).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetJson {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorJson {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}
