//! Guided diffusion sampling over analytic Gaussian-mixture concept worlds.
//!
//! Every concept in a [`ConceptWorld`] is a Gaussian mixture, so diffused
//! densities, scores, posteriors and odds ratios are exact. That makes the
//! guidance strategies in [`chains`] (classifier-free guidance, negative
//! prompting, diffusion-negative sampling and the samplers built on it)
//! checkable against closed forms rather than learned judges.

pub mod chains;
pub mod denoiser;
mod error;
pub mod eval;
pub mod guidance;
pub mod schedule;
pub mod trainable;
pub mod world;

pub use chains::{ChainTrace, DnsOutcome, Engine, StepRecord};
pub use denoiser::{AnalyticDenoiser, Denoiser};
pub use error::{Error, Result};
pub use eval::{compare_strategies, negative_drift_experiment, sweep_k, Comparison, DriftTable, MetricsReport, SweepRow};
pub use guidance::{GuidanceConfig, SamplerKind, Strategy};
pub use schedule::{ScheduleKind, VarianceSchedule};
pub use trainable::{train_denoiser, TrainConfig, TrainableDenoiser};
pub use world::{Component, Concept, ConceptId, ConceptWorld, Condition};

/// Version string embedded in every output artifact.
pub const ENGINE_VERSION: &str = concat!("negdiff ", env!("CARGO_PKG_VERSION"));
