//! Desk-scale laboratory for uniform-state discrete diffusion models and
//! pseudo-likelihood associative memories.
//!
//! The crate is organised bottom-up:
//!
//! - [`pseudo_am`]: binary associative memory trained by conditional-likelihood
//!   maximisation, with deterministic/stochastic retrieval and basin probes.
//! - [`uddm`]: the uniform-state forward process, exact reverse posteriors,
//!   factorised reverse sampling and the NELBO.
//! - [`duality`]: Gaussian diffusion transformation and the argmax pushforward.
//! - [`denoiser`]: a pairwise coupled-logits denoiser with hand-derived gradients.
//! - [`metrics`]: token recovery, conditional entropy, KS and Laplace checks.
//! - [`data`]: synthetic corpora, text ingestion and dataset-fraction schedules.
//! - [`experiments`]: the three retrieval/generation experiments and the sweep.

pub mod data;
pub mod denoiser;
pub mod duality;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod pseudo_am;
pub mod seed;
pub mod uddm;

pub use data::{Dataset, FractionSchedule};
pub use denoiser::{CoupledLogitsDenoiser, TrainConfig, TrainLog};
pub use error::{Error, Result};
pub use experiments::{RecoveryCurve, SweepConfig, SweepOutcome, TransitionReport};
pub use pseudo_am::{CouplingMatrix, MarginReport, PatternSet, SpinPattern};
pub use uddm::{
    CategoricalDist, Denoiser, DiffusionSchedule, FinalStep, SampleMode, ScheduleKind, TokenSequence,
};
