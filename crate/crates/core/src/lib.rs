//! Contextual telematics risk modeling.
//!
//! Trajectories are turned into kinematic streams, annotated with driving
//! context, summarized as 2-D feature maps, compared against a reference
//! population through histogram deviations, clustered into risk cohorts and
//! finally used to train a gradient-boosted risk classifier.

pub mod classifier;
pub mod cohorts;
pub mod context;
pub mod deviation;
pub mod error;
pub mod featuremap;
pub mod gbdt;
#[cfg(feature = "properties")]
pub mod properties;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod trajectory;

pub use error::{Error, Result};
