pub mod checkpoint;
pub mod config;
pub mod envs;
pub mod grpc;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod planner;
pub mod replay;
pub mod trainer;
pub mod world_model;

pub use error::{Error, Result};
