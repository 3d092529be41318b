//! Multi-task self-supervised video pre-training at desk scale: a shared
//! low-level 3D encoder feeding a human-parsing distillation branch and a
//! motion/appearance contrastive branch, each with its own high-level encoder.

pub mod config;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod resample;
pub mod rng;
pub mod teacher;
pub mod trainer;
pub mod video_data;

pub use config::Config;
pub use error::{Error, Result};
