//! Attention interpolation for a toy conditional diffusion model.

pub mod attention;
pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod scheduler;
pub mod selection;

pub use error::{AidError, Result};
pub use numerics::{SeededRng, Tensor};
