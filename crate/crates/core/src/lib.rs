pub mod cli;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
