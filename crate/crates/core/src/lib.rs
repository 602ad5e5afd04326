pub mod baseline;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod groundtruth;
pub mod inference;
pub mod network;
pub mod nn;
pub mod objectives;
pub mod raster;
pub mod synthcity;
pub mod trainer;

pub use error::{Error, Result};
