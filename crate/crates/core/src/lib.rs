pub mod assemble;
pub mod calibrate;
pub mod engine;
pub mod error;
mod fft;
pub mod field;
pub mod io;
pub mod mask;
pub mod pipeline;
pub mod register;
pub mod simulate;

pub use error::{Error, Result};
pub use field::{ComplexField, Geometry};
