pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data_io;
pub mod ensemble;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
