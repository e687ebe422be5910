pub mod autodiff;
pub mod bagging;
pub mod config;
pub mod error;
pub mod eval;
pub mod ingest;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
