//! Vision in-context operator networks at desk scale.
//!
//! A patch-tokenized transformer reads a prompt of condition/QoI frame pairs
//! that share one PDE time-stepping operator and predicts the QoI of a new
//! condition. The crate bundles the tensor engine and gradient tape it runs
//! on, analytic 2D data generators, prompt normalization, rollout planners
//! for complete and gappy initial frames, training, and evaluation metrics.

pub mod patching;
pub mod prompt_norm;
pub mod tensor;
pub mod model;
pub mod dataio;
pub mod rollout;
pub mod metrics;
pub mod train;
pub mod cli;
