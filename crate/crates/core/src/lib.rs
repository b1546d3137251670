//! Lasso-penalized pairwise ranking by minimizing a U-statistic risk.
//!
//! A ranking rule scores ordered pairs, `f_θ(x, x') = θᵀΨ(x, x')`, and is fitted
//! by minimizing the pairwise empirical risk plus an `l1` penalty. The crate
//! also chooses the penalty, computes the quantities that appear in the oracle
//! inequality, and simulates the Gaussian linear model to check rates.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod error;
pub mod model;
pub mod simulate;
pub mod solver;
pub mod tuning;
pub mod urisk;

pub use error::{Error, Result};
pub use model::{make_linear_basis, BasisSpec, Dataset, FnBasis, LossKind, LossSpec, PairFeatures, Theta};
pub use solver::{fit_lasso, FitResult, SolverOptions, StepRule};
