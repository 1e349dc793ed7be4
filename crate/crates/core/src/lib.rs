//! Desk-scale simulator of personalized federated learning for forgery
//! detection.
//!
//! Each client trains a three-branch network: a feature extractor and a
//! shared head whose parameters are averaged by the server every round, and
//! a personalized head that never leaves the client.

pub mod acceptance;
pub mod checkpoint;
pub mod data;
pub mod dataset_file;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod statmix;
pub mod tensor;

pub use error::{Error, Result};
