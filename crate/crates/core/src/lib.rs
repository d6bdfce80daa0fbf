//! Language-driven tabletop manipulation: a motion-primitive action space, a
//! kinematic simulator, language teleoperation, stochastic trajectory
//! augmentation, contrastive imitation learning and closed-loop control.

// Rotation magnitudes are the table's four-digit radians, kept verbatim.
#![allow(clippy::approx_constant)]
// Dense numeric kernels read better with explicit indices.
#![allow(clippy::needless_range_loop)]

pub mod action_space;
pub mod sim_world;
pub mod endpoint;
pub mod teleop;
pub mod expert;
pub mod sta_augment;
pub mod cil_train;
pub mod policy_control;
pub mod dataset_io;
pub mod eval_harness;
