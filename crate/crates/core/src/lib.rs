//! Personalized federated forecasting with prompt-adapted patch tokens over
//! a frozen transformer backbone.

pub mod backbone;
pub mod config;
pub mod data;
pub mod encoder;
mod error;
pub mod evaluation;
pub mod exec;
pub mod experiment;
pub mod federation;
pub mod head;
pub mod model;
pub mod numerics;
pub mod optim;
pub mod params;
pub mod synth;

pub use error::{Error, Result};
