pub mod adversary;
pub mod blocks;
pub mod checkpoint;
pub mod converter;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod features;
pub mod model;
pub mod trainer;
pub mod nn;

pub use error::{Error, Result};
