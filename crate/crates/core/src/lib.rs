pub mod body;
pub mod cli;
pub mod config;
pub mod error;
pub mod fitting;
pub mod gaze;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod monocular;
pub mod multishot;
pub mod optim;
pub mod scene;
pub mod synth;

pub use error::{Error, Result};
