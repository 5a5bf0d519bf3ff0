//! Safe exploration under uncertain discrete contexts.
//!
//! The crate composes four pieces:
//!
//! * [`cme`]: a conditional-mean-embedding classifier that maps an external
//!   measurement to context probabilities with a frequentist error bound;
//! * [`identify`]: a kernel two-sample (MMD) test that recognizes the active
//!   context from a short excitation experiment;
//! * [`safeopt`]: a contextual safe Bayesian optimizer over a parameter grid;
//! * [`harness`]: the decision loop gluing them together, with the
//!   end-to-end safety-probability accounting and the experiment scenarios.
//!
//! [`env`] holds the simulated systems every experiment runs against and
//! [`kernel`] the shared kernel and linear-algebra layer.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cme;
pub mod env;
pub mod error;
pub mod harness;
pub mod identify;
pub mod io;
pub mod kernel;
pub mod safeopt;

pub use cme::{
    BoundBreakdown, ClassifierModel, ContextDecision, ContextId, LabeledObservation,
    OffsetConvention, Provenance,
};
pub use env::{ContextDynamics, EpisodeRecord, Excitation, ObservationChannel};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, RunMetrics, Scenario};
pub use identify::{ContextLibrary, MmdTestResult, SubsampleConfig, Trajectory};
pub use kernel::{GramMatrix, KernelKind, KernelSpec};
pub use safeopt::{ObjectiveObservation, SafeOptState};
