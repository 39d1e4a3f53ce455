//! End-to-end jackknife inference.
//!
//! Evaluates a plug-in estimator on the full sample and every subsample of a
//! [`Design`], combines the estimates with the minimum-variance unbiased
//! weights into the bias-corrected point estimate `φ̃ = v*ᵀφ̂`, forms the
//! jackknife standard error `σ̃_q = √((1/q)Σ_l (u_lᵀφ̂)²)`, and reports the
//! t-statistic, tail probabilities, and confidence interval under the
//! Student-t reference distribution with `q` degrees of freedom.

use crate::design::{bias_loading_matrix, overlap_covariance, Design};
use crate::estimators::{DataView, EstimatorError, PanelDataset};
use crate::tdist::{p_values, t_quantile, PValues, TDistError};
use crate::weights::{solve_weights, WeightError, WeightSolution};
use serde::Serialize;
use thiserror::Error;

/// Relative threshold under which `σ̃` counts as degenerate (all variance
/// directions annihilated the estimate vector).
pub const TOL_SIGMA_REL: f64 = 1e-14;

/// Errors from inference orchestration.
#[derive(Debug, Error)]
pub enum InferenceError {
    /// Estimate and weight lengths disagree.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// The jackknife standard error vanished where a t-statistic was needed.
    #[error("zero variance: σ̃ = {sigma:.3e} admits no t-statistic")]
    ZeroVariance { sigma: f64 },
    /// The significance level must lie strictly between 0 and 1.
    #[error("invalid significance level α = {0}; need 0 < α < 1")]
    InvalidAlpha(f64),
    /// An estimator produced a non-finite value on one subsample.
    #[error("estimator returned non-finite value {value} on subsample {subsample}")]
    NonFiniteEstimate { subsample: usize, value: f64 },
    /// An estimator failed on one subsample.
    #[error("estimator failed on subsample {subsample}: {source}")]
    EstimatorFailure {
        subsample: usize,
        #[source]
        source: EstimatorError,
    },
    /// The design cannot support inference (shape mismatch, rank loss, …).
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    /// Reference-distribution failure (should be unreachable for valid α).
    #[error(transparent)]
    TDist(#[from] TDistError),
}

impl From<WeightError> for InferenceError {
    fn from(e: WeightError) -> Self {
        InferenceError::InvalidDesign(e.to_string())
    }
}

/// Subsample estimates `(φ̂⁽⁰⁾, …, φ̂⁽ᵐ⁻¹⁾)`, ordered like the design's
/// subsample list (entry 0 is the full sample).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateVector {
    values: Vec<f64>,
}

impl EstimateVector {
    /// Validated constructor: all entries finite, at least one entry.
    pub fn new(values: Vec<f64>) -> Result<Self, InferenceError> {
        if values.is_empty() {
            return Err(InferenceError::DimensionMismatch("no estimates supplied".into()));
        }
        if let Some((j, &v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(InferenceError::NonFiniteEstimate { subsample: j, value: v });
        }
        Ok(Self { values })
    }

    /// Number of subsamples m.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// Whether the vector is empty (never true for validated instances).
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// The estimates in subsample order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// A plug-in estimator: any deterministic map from a data view to a finite
/// scalar that uses only entries inside the view.
pub trait PanelEstimator: Sync {
    /// Evaluate on one subsample view.
    fn estimate(&self, view: &DataView) -> Result<f64, EstimatorError>;
}

impl<F> PanelEstimator for F
where
    F: Fn(&DataView) -> Result<f64, EstimatorError> + Sync,
{
    fn estimate(&self, view: &DataView) -> Result<f64, EstimatorError> {
        self(view)
    }
}

impl PanelEstimator for crate::estimators::BuiltinEstimator {
    fn estimate(&self, view: &DataView) -> Result<f64, EstimatorError> {
        self.evaluate(view)
    }
}

/// Shape and size summary of the design an inference run used.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDigest {
    /// Axis sizes of the panel.
    pub dims: Vec<usize>,
    /// Number of subsamples m.
    pub m: usize,
    /// Number of bias terms R.
    pub r: usize,
}

/// The weight vectors an inference run used, recorded for audit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightAudit {
    /// Combination weights `v*` (length m).
    pub v_star: Vec<f64>,
    /// Variance directions, one inner vector per direction (each length m).
    pub u_star: Vec<Vec<f64>>,
    /// `v*ᵀCv*`.
    pub variance_factor: f64,
}

/// Complete output of one jackknife inference run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceResult {
    /// Bias-corrected point estimate `φ̃ = v*ᵀφ̂`.
    pub phi_tilde: f64,
    /// Jackknife standard error `σ̃_q`.
    pub sigma_tilde: f64,
    /// Degrees of freedom of the reference distribution.
    pub q: usize,
    /// Null value the t-statistic was formed against.
    pub phi0: f64,
    /// `J = (φ̃ − φ₀)/σ̃`; absent when the variance degenerated.
    pub j_statistic: Option<f64>,
    /// Two-sided and one-sided tail probabilities of `J` under `t_q`;
    /// absent when the variance degenerated.
    pub p_values: Option<PValues>,
    /// Lower confidence bound `φ̃ − t_{q,1−α/2}·σ̃`.
    pub ci_lower: f64,
    /// Upper confidence bound `φ̃ + t_{q,1−α/2}·σ̃`.
    pub ci_upper: f64,
    /// Significance level of the interval.
    pub alpha: f64,
    /// `σ̃` was numerically zero: the interval is the single point `φ̃` and
    /// hypothesis tests reject nothing.
    pub degenerate_variance: bool,
    /// The subsample estimates the run combined.
    pub estimates: Vec<f64>,
    /// Shape summary of the design.
    pub design: DesignDigest,
    /// Weight vectors used, for audit.
    pub weights: WeightAudit,
}

/// Options for [`run_jackknife`].
#[derive(Debug, Clone)]
pub struct JackknifeSettings {
    /// Degrees of freedom; `None` uses the maximum the design admits.
    pub q: Option<usize>,
    /// Null value for the reported t-statistic.
    pub phi0: f64,
    /// Significance level for the confidence interval.
    pub alpha: f64,
}

impl Default for JackknifeSettings {
    fn default() -> Self {
        Self { q: None, phi0: 0.0, alpha: 0.05 }
    }
}

/// Combine subsample estimates with solved weights: returns
/// `(φ̃, σ̃_q) = (v*ᵀφ̂, √((1/q)Σ_l (u_lᵀφ̂)²))`.
pub fn combine(
    estimates: &EstimateVector,
    solution: &WeightSolution,
) -> Result<(f64, f64), InferenceError> {
    let m = estimates.len();
    if solution.v_star.len() != m || solution.u_star.rows() != m {
        return Err(InferenceError::DimensionMismatch(format!(
            "{} estimates vs weights for {} subsamples",
            m,
            solution.v_star.len()
        )));
    }
    if solution.q == 0 {
        return Err(InferenceError::DimensionMismatch("q must be ≥ 1".into()));
    }
    let phi_tilde: f64 =
        solution.v_star.iter().zip(estimates.values()).map(|(w, e)| w * e).sum();
    let mut acc = 0.0;
    for l in 0..solution.q {
        let proj: f64 = (0..m).map(|j| solution.u_star.get(j, l) * estimates.values()[j]).sum();
        acc += proj * proj;
    }
    Ok((phi_tilde, (acc / solution.q as f64).sqrt()))
}

fn sigma_tol(phi_tilde: f64, phi0: f64) -> f64 {
    TOL_SIGMA_REL * phi_tilde.abs().max(phi0.abs()).max(1.0)
}

/// The jackknife t-statistic `J = (φ̃ − φ₀)/σ̃`.
///
/// # Errors
/// `ZeroVariance` when `σ̃` is numerically zero (e.g. two identical
/// subsample estimates spanned every variance direction).
pub fn t_statistic(phi_tilde: f64, sigma_tilde: f64, phi0: f64) -> Result<f64, InferenceError> {
    if sigma_tilde <= sigma_tol(phi_tilde, phi0) {
        return Err(InferenceError::ZeroVariance { sigma: sigma_tilde });
    }
    Ok((phi_tilde - phi0) / sigma_tilde)
}

/// Equal-tailed confidence interval `φ̃ ∓ t_{q,1−α/2}·σ̃`.
pub fn confidence_interval(
    phi_tilde: f64,
    sigma_tilde: f64,
    q: usize,
    alpha: f64,
) -> Result<(f64, f64), InferenceError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha(alpha));
    }
    let crit = t_quantile(q, 1.0 - alpha / 2.0)?;
    Ok((phi_tilde - crit * sigma_tilde, phi_tilde + crit * sigma_tilde))
}

/// Run the whole pipeline: evaluate `estimator` on each subsample view of
/// `design`, combine with minimum-variance unbiased weights (or the supplied
/// `cached_weights`), and assemble the full [`InferenceResult`].
///
/// Subsample evaluations are sequential in subsample order, so results are
/// trivially deterministic; parallelism lives one level up, across
/// replications.
///
/// # Errors
/// `InvalidDesign` when the dataset shape disagrees with the design or the
/// weight problem is unsolvable; `EstimatorFailure`/`NonFiniteEstimate` tag
/// the offending subsample index.
pub fn run_jackknife<E: PanelEstimator + ?Sized>(
    dataset: &PanelDataset,
    design: &Design,
    estimator: &E,
    settings: &JackknifeSettings,
    cached_weights: Option<&WeightSolution>,
) -> Result<InferenceResult, InferenceError> {
    if !(settings.alpha > 0.0 && settings.alpha < 1.0) {
        return Err(InferenceError::InvalidAlpha(settings.alpha));
    }
    if dataset.shape() != design.shape() {
        return Err(InferenceError::InvalidDesign(format!(
            "dataset shape {:?} does not match design shape {:?}",
            dataset.shape().dims(),
            design.shape().dims()
        )));
    }

    let solution: WeightSolution = match cached_weights {
        Some(w) => {
            if w.v_star.len() != design.m() {
                return Err(InferenceError::DimensionMismatch(format!(
                    "cached weights cover {} subsamples, design has {}",
                    w.v_star.len(),
                    design.m()
                )));
            }
            w.clone()
        }
        None => {
            let a = bias_loading_matrix(design);
            let c = overlap_covariance(design);
            solve_weights(&a, &c, settings.q)?
        }
    };

    let mut values = Vec::with_capacity(design.m());
    for (j, spec) in design.subsamples().iter().enumerate() {
        let view = dataset
            .view(spec)
            .map_err(|source| InferenceError::EstimatorFailure { subsample: j, source })?;
        let est = estimator
            .estimate(&view)
            .map_err(|source| InferenceError::EstimatorFailure { subsample: j, source })?;
        if !est.is_finite() {
            return Err(InferenceError::NonFiniteEstimate { subsample: j, value: est });
        }
        values.push(est);
    }
    let estimates = EstimateVector::new(values)?;

    let (phi_tilde, sigma_tilde) = combine(&estimates, &solution)?;
    let degenerate = sigma_tilde <= sigma_tol(phi_tilde, settings.phi0);
    let (j_statistic, pv) = if degenerate {
        (None, None)
    } else {
        let j = (phi_tilde - settings.phi0) / sigma_tilde;
        (Some(j), Some(p_values(j, solution.q)))
    };
    let (ci_lower, ci_upper) = if degenerate {
        (phi_tilde, phi_tilde)
    } else {
        confidence_interval(phi_tilde, sigma_tilde, solution.q, settings.alpha)?
    };

    let u_star: Vec<Vec<f64>> = (0..solution.q)
        .map(|l| (0..design.m()).map(|j| solution.u_star.get(j, l)).collect())
        .collect();

    Ok(InferenceResult {
        phi_tilde,
        sigma_tilde,
        q: solution.q,
        phi0: settings.phi0,
        j_statistic,
        p_values: pv,
        ci_lower,
        ci_upper,
        alpha: settings.alpha,
        degenerate_variance: degenerate,
        estimates: estimates.values().to_vec(),
        design: DesignDigest {
            dims: design.shape().dims().to_vec(),
            m: design.m(),
            r: design.r(),
        },
        weights: WeightAudit {
            v_star: solution.v_star.clone(),
            u_star,
            variance_factor: solution.variance_factor,
        },
    })
}
