pub mod augment;
pub mod checkpoint;
pub mod coarse;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod fea;
pub mod fine;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod rng;
pub mod schema;
pub mod tensor;
pub mod train;
pub use error::{Error, Result};
