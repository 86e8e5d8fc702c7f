//! Prediction-guided active experimentation.
//!
//! The crate estimates a population mean `θ = E_q[Y]` from data collected by
//! an experimenter who chooses, per covariate value `x`, how often to sample
//! (`p(x)`) and how often to pay for a real outcome (`π(x)`), falling back on
//! a machine-learning prediction `F` otherwise.
//!
//! * [`population`] holds covariate spaces, the synthetic data-generating
//!   process, file-backed finite populations and outcome predictors.
//! * [`design`] evaluates the semiparametric variance bound `V(p, π)` and
//!   solves for the budget-constrained optimal design.
//! * [`nuisance`] fits the conditional-moment regressions that drive the
//!   adaptive design.
//! * [`estimator`] computes influence values, the cross-fit and adaptive
//!   one-step estimators, baselines and confidence intervals.
//! * [`harness`] runs data-collection policies and replication studies.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod design;
pub mod error;
pub mod estimator;
pub mod harness;
mod linalg;
pub mod nuisance;
pub mod population;
pub mod rng;
pub mod trace;

pub use design::{DesignRule, OptimalDesign, VarianceComponents};
pub use error::{Error, Result};
pub use estimator::{EstimateMethod, EstimateReport, EstimatorOptions};
pub use harness::{MetricsRow, MetricsTable, PolicyName, PolicySpec, World};
pub use nuisance::{NuisanceConfig, RegressorKind};
pub use population::{CovariateSpace, FinitePopulation, Predictor, PredictorKind, SyntheticDgp};
pub use rng::StreamKey;
pub use trace::{ExperimentRecord, RefreshSchedule, Trace};
