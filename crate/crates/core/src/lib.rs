pub mod convert;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
mod linalg;
pub mod model;
pub mod toy;
pub mod train;

pub use error::{Error, Result};
