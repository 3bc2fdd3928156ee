pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
