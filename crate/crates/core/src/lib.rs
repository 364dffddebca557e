pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod error;
pub mod data;
pub mod numerics;
pub mod metrics;
pub mod model;
pub mod sampler;
pub mod tokenizer;
pub mod train;
pub mod unify;

pub use error::{Error, Result};
