pub mod autodiff;
pub mod cli;
pub mod complexity;
pub mod data;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod selftest;
pub mod training;
pub mod vision;

pub use error::{Error, Result};
