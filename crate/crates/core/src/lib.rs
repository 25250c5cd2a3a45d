pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod recombiner;
pub mod sampler;
pub mod trainer;

pub use error::{Result, SrlError};
