pub mod denoiser;
pub mod error;
pub mod grid;
pub mod guidance;
pub mod harness;
pub mod pipeline;
pub mod schedule;
pub mod snf;
pub mod world;

pub use error::{Error, Result};
