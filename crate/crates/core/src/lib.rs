//! Privacy auditing for next-POI recommendation models.
//!
//! The crate trains a compact recurrent recommender on check-in trajectories,
//! runs location- and trajectory-level extraction and membership-inference
//! attacks against it, and evaluates training-time and data-level defenses.

pub mod data;
pub mod defense;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod extraction;
pub mod io;
pub mod membership;
pub mod model;
pub mod pipeline;
pub mod seed;
pub mod train;

pub use data::{CheckIn, Location, MobilityDataset, PreprocessConfig, Split, SynthConfig, Trajectory, Visit};
pub use error::{Error, Result};
pub use model::{Example, Gradient, ModelConfig, PoiModel, PoiOracle, Prediction, QueryOutput, TimeEncoding};
pub use train::{EpochMetrics, GradientHook, Optimizer, TrainConfig, TrainLog};
