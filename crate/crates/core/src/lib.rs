//! Stereo differentiable-rendering pose estimation for serial robot arms.

pub mod bench;
pub mod breathing;
pub mod camera;
pub mod dual;
pub mod error;
pub mod kinematics;
pub mod mask;
pub mod mesh;
pub mod objective;
pub mod par;
pub mod pose;
pub mod render;
pub mod seg;
pub mod swarm;

pub use error::{Error, Result};
