//! Terrain-aware character motion: terrain grids and signed distances,
//! navigation planning, motion losses, kinematic optimization, diffusion
//! sampling and tracking rewards.

pub mod diffusion;
pub mod error;
pub mod losses;
pub mod motion;
pub mod navgraph;
pub mod optimize;
pub mod pipeline;
pub mod rotmath;
pub mod terrain;
pub mod tracking;

pub use error::{Error, Result};
