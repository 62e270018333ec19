//! Replay-free class-incremental learning with a conservative and a radical
//! learner sharing a frozen backbone.
//!
//! The pipeline: adapters on a frozen residual backbone are aligned to the
//! first task, a radical copy adapts to each new task, an EMA folds it back
//! into the conservative learner, both feed recursive ridge classifiers, and
//! a divergence-gated fusion combines their predictions.

pub mod analytic;
pub mod backbone;
mod binio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod learners;
pub mod numerics;
pub mod stream;

pub use config::{validate_config, ConfigIssue, ExperimentConfig, Method};
pub use error::{Error, Result};
pub use experiment::{run_experiment, Report, RunOptions, SessionRecord};
