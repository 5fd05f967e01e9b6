//! Class-incremental learning by combining within-task prediction with
//! task-id prediction.
//!
//! A shared ReLU feature extractor is protected from forgetting with
//! hard-attention task masks ([`hat`]). Each task owns an OOD head, trained
//! against replayed samples of other tasks ([`memory`]), and a WP head
//! ([`row`]). At test time the OOD heads, scaled by a Mahalanobis
//! coefficient, give a distribution over tasks; multiplied with the WP
//! heads' class distributions this yields the class-incremental decision
//! ([`scoring`]).

pub mod data;
pub mod error;
pub mod experiment;
pub mod hat;
pub mod memory;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod row;
pub mod scoring;

pub use error::{Error, Result};
pub use experiment::{parse_config, run, run_with, ExperimentConfig, Mode, RunReport};
pub use par::Exec;
pub use row::{Hyper, Learner, TaskModel};
pub use scoring::{predict_batch, predict_cil, tp_probability, CilPrediction, PredictMode};
