pub mod attention;
pub mod audit;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod freq;
pub mod layouts;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod probe;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
