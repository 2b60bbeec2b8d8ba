//! Multi-stage prediction (MSP) networks for harmonizing volumetric images
//! across acquisition platforms.

pub mod cohort;
pub mod error;
pub mod eval;
pub mod models;
pub mod patches;
pub mod rng;
pub mod sh;
pub mod tensor;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
