//! Numerics for mean-field stochastic control with common noise: particle
//! simulation, finite-dimensional HJB solvers, feedback synthesis, Wasserstein
//! distances and smoothing of functionals on the space of measures.

// Negated comparisons deliberately reject NaN alongside out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cost;
pub mod error;
pub mod expr;
pub mod hjb;
pub mod measure;
pub mod model;
pub mod mollify;
pub mod rng;
pub mod sim;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
pub use expr::{CoefficientExpr, MeasureFeatures};
pub use measure::{EmpiricalMeasure, VectorTuple};
pub use model::ModelSpec;
pub use sim::{ControlPolicy, LiftedPolicy, PathBundle, SimConfig};
pub use stats::Estimate;
pub use cost::{cost_finite, cost_lifted, policy_compare, CostEstimate};
pub use hjb::{solve_hjb, synthesize_feedback, GridSpec, GridValueFunction};
pub use mollify::{BaseFunctional, SmoothedFunctional};
pub use verify::{ProbeReport, ValueSource};

/// Crate version, recorded in experiment manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
