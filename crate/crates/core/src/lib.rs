pub mod autograd;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
