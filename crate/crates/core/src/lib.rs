pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decomposition;
pub mod deform;
pub mod error;
pub mod gaussian;
pub mod image;
pub mod kinematics;
pub mod lod;
pub mod losses;
pub mod math;
pub mod render;
pub mod so3;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
