pub mod attention;
pub mod cli;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod objectives;
pub mod support_set;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
