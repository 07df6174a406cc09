//! Volume processing, needle pose estimation and insertion planning for
//! OCT-guided subretinal needle navigation.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. Everything here is a pure function of its inputs; file formats,
//! wall-clock timing, the CLI and the HTTP API live in the `octnav` crate.
//!
//! Processing chain for one acquisition:
//!
//! 1. [`projection`] reduces every A-scan to one value (mean by default),
//!    which exposes the needle's shadow footprint.
//! 2. [`segmentation`] scores the footprint; [`pose::estimate_inplane`] fits a
//!    robust line to the most confident pixels, giving yaw and the lateral tip.
//! 3. [`slicing`] composes a tool-aligned virtual B-scan through that line.
//! 4. [`pose::estimate_axial`] fits the needle in the slice for pitch and depth.
//! 5. [`trajectory`] splits the motion to a target into a lateral alignment and
//!    an advance along the insertion line, correcting the advance for
//!    refraction; [`registration`] maps both into robot coordinates.
//!
//! [`phantom`] renders synthetic scenes with known ground truth and simulates
//! the robot so the whole loop can be closed on a desk.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
mod math;

pub mod phantom;
pub mod pose;
pub mod projection;
pub mod registration;
pub mod segmentation;
pub mod slicing;
pub mod trajectory;
pub mod volume;

pub use error::{Error, Result};
pub use nalgebra::{Matrix3, Vector3};
pub use phantom::{PhantomScene, SimulatedRobot};
pub use pose::{NeedlePose, PoseParams};
pub use projection::{AxialProjectionImage, ProjectionOp};
pub use registration::RegistrationMatrix;
pub use segmentation::{Segmenter, SoftMask};
pub use slicing::{PlaneSpec, VirtualBScan};
pub use trajectory::{InsertionPlan, MediaStack};
pub use volume::{IoctVolume, MetricPoint, VolumeGeometry};
