//! Split-panel jackknife inference for fixed-effects panel models.
//!
//! Nonlinear fixed-effects estimators carry an incidental-parameter bias that
//! shrinks polynomially in the panel dimensions. Re-estimating the model on
//! overlapping rectangular subpanels and recombining with carefully chosen
//! weights removes the leading bias terms while a complementary set of weight
//! vectors turns the same subpanel estimates into a variance estimate, so the
//! studentized statistic is asymptotically Student-t with a known, finite
//! number of degrees of freedom. This crate implements the whole pipeline:
//!
//! - [`linalg`] — small dense kernel (elimination, pivoted QR, Jacobi eigen,
//!   bordered stationarity systems);
//! - [`design`] — subpanel layouts, exact-rational bias loadings, and overlap
//!   covariance matrices with validation diagnostics;
//! - [`weights`] — minimum-variance unbiased combination weights and the
//!   orthogonal variance-direction basis;
//! - [`tdist`] — Student-t CDF/quantiles and tail probabilities;
//! - [`inference`] — recombination, t-statistics, confidence intervals, and
//!   the full jackknife driver over a user-supplied estimator;
//! - [`estimators`] — reference panel estimators (within least squares,
//!   two-way and three-way variance MLEs, optional two-way probit);
//! - [`sim`] — deterministic replicated Monte Carlo studies with
//!   reproducible parallelism.

pub mod design;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod sim;
pub mod tdist;
pub mod weights;
