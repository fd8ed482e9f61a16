pub mod accounting;
pub mod config;
pub mod datasets;
pub mod error;
pub mod layers;
pub mod lm;
pub mod model;
pub mod navsim;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod params;
pub mod reasoner;
pub mod rng;
pub mod vision;

pub use config::ModelConfig;
pub use error::{Error, Result};
