//! Deterministic Monte Carlo harness.
//!
//! Generates panel data from the built-in data-generating processes, runs
//! jackknife inference (and a conventional least-squares baseline) on every
//! replication, and reduces the results into bias / standard-error /
//! coverage / length tables with Monte Carlo standard errors.
//!
//! Replications are scheduled across a worker pool; each owns a private RNG
//! substream keyed by its index and results are reduced in index order, so a
//! study's output is byte-identical for any worker count.

pub mod rng;

use crate::design::{
    bias_loading_matrix, design_from_json, expand_fixed_effects, overlap_covariance,
    partition_axis, Design, DesignError, FixedEffectGroup, PanelShape, SubsampleSpec,
};
use crate::estimators::{BuiltinEstimator, EstimatorError, PanelDataset};
use crate::inference::{run_jackknife, InferenceError, JackknifeSettings};
use crate::tdist::t_quantile;
use crate::weights::{solve_weights, WeightError, WeightSolution};
use rayon::prelude::*;
use rng::{substream_seed, NormalSource};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from study configuration and execution.
#[derive(Debug, Error)]
pub enum SimError {
    /// The study config is malformed or inconsistent.
    #[error("invalid study config: {0}")]
    InvalidConfig(String),
    /// A design in the config could not be built.
    #[error(transparent)]
    Design(#[from] DesignError),
    /// Weight construction for a design failed.
    #[error("weight construction failed: {0}")]
    Weights(#[from] WeightError),
    /// One replication failed (policy `abort`).
    #[error("replication {replication} failed on design {design:?}: {message}")]
    Replication { replication: usize, design: String, message: String },
}

// ---------------------------------------------------------------------------
// Data-generating processes
// ---------------------------------------------------------------------------

/// Dynamic binary-feedback linear panel.
///
/// Per unit `i` (ascending), draws `λ_i`, then `ε_it` in time order, and
/// builds recursively: `x_i,0 = 0`, `x_it = 1{y_{i,t−1} > 0}`,
/// `y_it = φ·x_it + λ_i + ε_it`. All draws are standard normal. Variables
/// stored: `y`, `x`.
pub fn dgp_dynamic_binary_panel(
    shape: &PanelShape,
    phi: f64,
    rng: &mut NormalSource,
) -> Result<PanelDataset, SimError> {
    if shape.k() != 2 {
        return Err(SimError::InvalidConfig(format!(
            "dynamic binary panel needs 2 axes, got {}",
            shape.k()
        )));
    }
    if !phi.is_finite() {
        return Err(SimError::InvalidConfig(format!("φ = {phi} is not finite")));
    }
    let (n, t) = (shape.dims()[0], shape.dims()[1]);
    let mut y = vec![0.0; n * t];
    let mut x = vec![0.0; n * t];
    for i in 0..n {
        let lambda = rng.next_normal();
        let mut prev_y = 0.0;
        for s in 0..t {
            let eps = rng.next_normal();
            let xv = if s == 0 {
                0.0
            } else if prev_y > 0.0 {
                1.0
            } else {
                0.0
            };
            let yv = phi * xv + lambda + eps;
            x[i * t + s] = xv;
            y[i * t + s] = yv;
            prev_y = yv;
        }
    }
    let data = PanelDataset::new(shape.clone())
        .with_variable("y", y)
        .and_then(|d| d.with_variable("x", x))
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(data)
}

/// Additive two-way effects model with error variance `φ`.
///
/// Draws `λ_i` (ascending i), `γ_t` (ascending t), then `ε_it` row-major,
/// all standard normal, and stores `y = λ_i + γ_t + √φ·ε_it`. The error
/// draws are consumed even at `φ = 0` so the stream position is independent
/// of `φ`. Variable stored: `y`.
pub fn dgp_twoway_variance(
    shape: &PanelShape,
    phi: f64,
    rng: &mut NormalSource,
) -> Result<PanelDataset, SimError> {
    if shape.k() != 2 {
        return Err(SimError::InvalidConfig(format!(
            "two-way variance panel needs 2 axes, got {}",
            shape.k()
        )));
    }
    if !(phi.is_finite() && phi >= 0.0) {
        return Err(SimError::InvalidConfig(format!("error variance φ = {phi} must be ≥ 0")));
    }
    let (n, t) = (shape.dims()[0], shape.dims()[1]);
    let sd = phi.sqrt();
    let lambdas: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
    let gammas: Vec<f64> = (0..t).map(|_| rng.next_normal()).collect();
    let mut y = vec![0.0; n * t];
    for i in 0..n {
        for s in 0..t {
            y[i * t + s] = lambdas[i] + gammas[s] + sd * rng.next_normal();
        }
    }
    let data = PanelDataset::new(shape.clone())
        .with_variable("y", y)
        .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
    Ok(data)
}

// ---------------------------------------------------------------------------
// Built-in jackknife schemes
// ---------------------------------------------------------------------------

fn unit_effect_terms() -> Vec<crate::design::BiasTerm> {
    expand_fixed_effects(2, &[FixedEffectGroup::first_order(vec![0])])
        .expect("single first-order group always expands")
}

fn explicit_scheme(
    shape: &PanelShape,
    subsamples: Vec<SubsampleSpec>,
    v: Vec<f64>,
    u: &[Vec<f64>],
) -> Result<(Design, WeightSolution), SimError> {
    let design = Design::new(shape.clone(), unit_effect_terms(), subsamples)?;
    let a = bias_loading_matrix(&design);
    let c = overlap_covariance(&design);
    let weights = WeightSolution::from_explicit(v, u, &a, &c)?;
    Ok((design, weights))
}

/// Scheme `a`: the full sample plus the two time half-panels (m = 3),
/// weights `v = (2, −1/2, −1/2)`, one variance direction `(0, 1/2, −1/2)`.
pub fn scheme_time_halves(shape: &PanelShape) -> Result<(Design, WeightSolution), SimError> {
    let mut subs = vec![SubsampleSpec::full(shape)];
    subs.extend(partition_axis(shape, 1, 2)?);
    explicit_scheme(
        shape,
        subs,
        vec![2.0, -0.5, -0.5],
        &[vec![0.0, 0.5, -0.5]],
    )
}

/// Scheme `b`: full sample, time halves, and unit halves (m = 5), weights
/// `v = (2/3, −1/2, −1/2, 2/3, 2/3)` and two half-contrast variance
/// directions — two degrees of freedom from the same panel.
pub fn scheme_crossed_halves(shape: &PanelShape) -> Result<(Design, WeightSolution), SimError> {
    let mut subs = vec![SubsampleSpec::full(shape)];
    subs.extend(partition_axis(shape, 1, 2)?);
    subs.extend(partition_axis(shape, 0, 2)?);
    explicit_scheme(
        shape,
        subs,
        vec![2.0 / 3.0, -0.5, -0.5, 2.0 / 3.0, 2.0 / 3.0],
        &[
            vec![0.0, 0.5, -0.5, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 0.5, -0.5],
        ],
    )
}

/// Scheme `c`: full sample, time halves, and unit fifths (m = 8), weights
/// `v = (1, −1/2, −1/2, 1/5 ×5)` with five variance directions: the time
/// half-contrast plus four orthogonal contrasts across the unit fifths.
pub fn scheme_half_fifths(shape: &PanelShape) -> Result<(Design, WeightSolution), SimError> {
    let mut subs = vec![SubsampleSpec::full(shape)];
    subs.extend(partition_axis(shape, 1, 2)?);
    subs.extend(partition_axis(shape, 0, 5)?);
    let s10 = 10.0_f64.sqrt();
    let s30 = 30.0_f64.sqrt();
    let s60 = 60.0_f64.sqrt();
    explicit_scheme(
        shape,
        subs,
        vec![1.0, -0.5, -0.5, 0.2, 0.2, 0.2, 0.2, 0.2],
        &[
            vec![0.0, 0.5, -0.5, 0.0, 0.0, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0 / s10, -1.0 / s10, 0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0 / s30, 1.0 / s30, -2.0 / s30, 0.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0 / s60, 1.0 / s60, 1.0 / s60, -3.0 / s60, 0.0],
            vec![0.0, 0.0, 0.0, 0.1, 0.1, 0.1, 0.1, -0.4],
        ],
    )
}

// ---------------------------------------------------------------------------
// Study configuration
// ---------------------------------------------------------------------------

/// Which data-generating process a study uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// [`dgp_dynamic_binary_panel`].
    DynamicBinary,
    /// [`dgp_twoway_variance`].
    TwowayVariance,
}

impl DgpKind {
    fn default_estimator(self) -> BuiltinEstimator {
        match self {
            DgpKind::DynamicBinary => BuiltinEstimator::WithinLs,
            DgpKind::TwowayVariance => BuiltinEstimator::Var2,
        }
    }
}

/// What to do when a replication's estimator fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailurePolicy {
    /// Fail the whole study, naming the replication (default).
    #[default]
    Abort,
    /// Drop the replication for that design and count it.
    DropAndCount,
}

/// Explicit weight vectors for an inline design entry.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExplicitWeights {
    /// Combination weights (length m).
    pub v: Vec<f64>,
    /// Variance directions, each of length m.
    pub u: Vec<Vec<f64>>,
}

/// One design under study: a named built-in scheme, or an inline design
/// spec with solver or explicit weights.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignEntry {
    /// Row label; defaults to the scheme's conventional name.
    #[serde(default)]
    pub name: Option<String>,
    /// Built-in scheme: `ls`, `a`, `b`, or `c`.
    #[serde(default)]
    pub scheme: Option<String>,
    /// Inline design spec (same schema as a design file).
    #[serde(default)]
    pub design: Option<serde_json::Value>,
    /// Explicit weights for an inline design; omitted = solve for them.
    #[serde(default)]
    pub weights: Option<ExplicitWeights>,
    /// Degrees-of-freedom override for solver weights.
    #[serde(default)]
    pub dof: Option<usize>,
}

fn default_alpha() -> f64 {
    0.05
}

fn default_workers() -> usize {
    1
}

/// Complete configuration of one Monte Carlo study.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    /// Data-generating process.
    pub dgp: DgpKind,
    /// True parameter (slope, or error variance).
    pub phi: f64,
    /// Panel dimensions.
    pub dims: Vec<usize>,
    /// Designs to evaluate, one table row each.
    pub designs: Vec<DesignEntry>,
    /// Number of Monte Carlo replications.
    pub replications: usize,
    /// Master seed; replication `r` uses substream `mix(seed, r)`.
    pub seed: u64,
    /// Confidence level is `1 − alpha`.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Worker threads (1 = fully sequential).
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Estimator name override; defaults to the DGP's natural estimator.
    #[serde(default)]
    pub estimator: Option<String>,
    /// What to do when a replication fails.
    #[serde(default)]
    pub failure_policy: FailurePolicy,
}

impl StudyConfig {
    /// Parse from JSON text.
    pub fn from_json(text: &str) -> Result<Self, SimError> {
        serde_json::from_str(text).map_err(|e| SimError::InvalidConfig(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Study execution
// ---------------------------------------------------------------------------

enum PreparedKind {
    /// Conventional full-sample within least squares with a t interval.
    LeastSquares,
    /// Jackknife inference under a design with fixed weights.
    Jackknife { design: Design, weights: WeightSolution },
}

struct PreparedDesign {
    name: String,
    kind: PreparedKind,
}

fn prepare_designs(config: &StudyConfig, shape: &PanelShape) -> Result<Vec<PreparedDesign>, SimError> {
    let mut out = Vec::with_capacity(config.designs.len());
    for (idx, entry) in config.designs.iter().enumerate() {
        let prepared = match (&entry.scheme, &entry.design) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(SimError::InvalidConfig(format!(
                    "design entry {idx}: give exactly one of \"scheme\" or \"design\""
                )));
            }
            (Some(scheme), None) => {
                let (default_name, kind) = match scheme.as_str() {
                    "ls" => {
                        if config.dgp != DgpKind::DynamicBinary {
                            return Err(SimError::InvalidConfig(
                                "scheme \"ls\" applies only to the dynamic binary DGP".into(),
                            ));
                        }
                        ("LS".to_string(), PreparedKind::LeastSquares)
                    }
                    "a" => {
                        let (design, weights) = scheme_time_halves(shape)?;
                        ("JK(a)".to_string(), PreparedKind::Jackknife { design, weights })
                    }
                    "b" => {
                        let (design, weights) = scheme_crossed_halves(shape)?;
                        ("JK(b)".to_string(), PreparedKind::Jackknife { design, weights })
                    }
                    "c" => {
                        let (design, weights) = scheme_half_fifths(shape)?;
                        ("JK(c)".to_string(), PreparedKind::Jackknife { design, weights })
                    }
                    other => {
                        return Err(SimError::InvalidConfig(format!(
                            "unknown scheme {other:?}; expected ls, a, b, or c"
                        )));
                    }
                };
                PreparedDesign {
                    name: entry.name.clone().unwrap_or(default_name),
                    kind,
                }
            }
            (None, Some(value)) => {
                let text = serde_json::to_string(value)
                    .map_err(|e| SimError::InvalidConfig(e.to_string()))?;
                let loaded = design_from_json(&text)?;
                if loaded.design.shape() != shape {
                    return Err(SimError::InvalidConfig(format!(
                        "design entry {idx}: design shape {:?} does not match study dims {:?}",
                        loaded.design.shape().dims(),
                        shape.dims()
                    )));
                }
                let c = loaded.effective_covariance();
                let a = bias_loading_matrix(&loaded.design);
                let weights = match &entry.weights {
                    Some(explicit) => {
                        WeightSolution::from_explicit(explicit.v.clone(), &explicit.u, &a, &c)?
                    }
                    None => solve_weights(&a, &c, entry.dof)?,
                };
                PreparedDesign {
                    name: entry.name.clone().unwrap_or_else(|| format!("design{idx}")),
                    kind: PreparedKind::Jackknife { design: loaded.design, weights },
                }
            }
        };
        out.push(prepared);
    }
    Ok(out)
}

/// Conventional within least squares on the full view: slope, equal-tailed
/// t interval with `NT − N − 1` residual degrees of freedom.
fn within_ls_conventional(
    data: &PanelDataset,
    alpha: f64,
) -> Result<(f64, f64, f64), EstimatorError> {
    let view = data.view_full();
    let (n, t) = (view.count(0), view.count(1));
    let yv = view.extract("y")?;
    let xv = view.extract("x")?;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut raw_energy = 0.0;
    for i in 0..n {
        let row = i * t;
        let xbar: f64 = xv[row..row + t].iter().sum::<f64>() / t as f64;
        let ybar: f64 = yv[row..row + t].iter().sum::<f64>() / t as f64;
        for s in 0..t {
            let xd = xv[row + s] - xbar;
            let yd = yv[row + s] - ybar;
            sxy += xd * yd;
            sxx += xd * xd;
            syy += yd * yd;
            raw_energy += xv[row + s] * xv[row + s];
        }
    }
    if sxx <= 1e-12 * raw_energy.max(1e-300) {
        return Err(EstimatorError::DegenerateRegressor { sum_sq: sxx });
    }
    let dof = n * t - n - 1;
    if dof == 0 {
        return Err(EstimatorError::InvalidView(
            "no residual degrees of freedom for a conventional interval".into(),
        ));
    }
    let slope = sxy / sxx;
    let ssr = (syy - slope * sxy).max(0.0);
    let se = (ssr / dof as f64 / sxx).sqrt();
    let crit = t_quantile(dof, 1.0 - alpha / 2.0)
        .expect("alpha validated by the study config");
    Ok((slope, slope - crit * se, slope + crit * se))
}

/// One replication's outcome for one design.
#[derive(Debug, Clone, Copy)]
struct RepStats {
    estimate: f64,
    covered: bool,
    length: f64,
}

fn run_one_replication(
    config: &StudyConfig,
    shape: &PanelShape,
    prepared: &[PreparedDesign],
    estimator: BuiltinEstimator,
    r: usize,
) -> Vec<Result<RepStats, SimError>> {
    let mut rng = NormalSource::from_seed(substream_seed(config.seed, r as u64));
    let data = match config.dgp {
        DgpKind::DynamicBinary => dgp_dynamic_binary_panel(shape, config.phi, &mut rng),
        DgpKind::TwowayVariance => dgp_twoway_variance(shape, config.phi, &mut rng),
    };
    let data = match data {
        Ok(d) => d,
        Err(e) => {
            // A DGP failure poisons the whole replication.
            return prepared
                .iter()
                .map(|p| {
                    Err(SimError::Replication {
                        replication: r,
                        design: p.name.clone(),
                        message: e.to_string(),
                    })
                })
                .collect();
        }
    };

    prepared
        .iter()
        .map(|p| {
            let outcome: Result<(f64, f64, f64), String> = match &p.kind {
                PreparedKind::LeastSquares => {
                    within_ls_conventional(&data, config.alpha).map_err(|e| e.to_string())
                }
                PreparedKind::Jackknife { design, weights } => {
                    let settings = JackknifeSettings {
                        q: None,
                        phi0: 0.0,
                        alpha: config.alpha,
                    };
                    run_jackknife(&data, design, &estimator, &settings, Some(weights))
                        .map(|res| (res.phi_tilde, res.ci_lower, res.ci_upper))
                        .map_err(|e: InferenceError| e.to_string())
                }
            };
            match outcome {
                Ok((estimate, lo, hi)) => Ok(RepStats {
                    estimate,
                    covered: lo <= config.phi && config.phi <= hi,
                    length: hi - lo,
                }),
                Err(message) => Err(SimError::Replication {
                    replication: r,
                    design: p.name.clone(),
                    message,
                }),
            }
        })
        .collect()
}

/// One row of the result table.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsRow {
    /// Design label.
    pub design: String,
    /// Mean estimate minus the true φ.
    pub bias: f64,
    /// MC standard error of the bias (SD of estimates / √used).
    pub bias_se: f64,
    /// SD of the estimates across replications.
    pub std_err: f64,
    /// Fraction of intervals containing φ.
    pub coverage: f64,
    /// MC standard error of coverage: √(p(1−p)/used).
    pub coverage_se: f64,
    /// Mean interval length.
    pub length: f64,
    /// MC standard error of the mean length.
    pub length_se: f64,
    /// Replications contributing to this row.
    pub used: usize,
    /// Replications dropped under `drop-and-count`.
    pub failures: usize,
}

/// Bias / SE / coverage / length table over all designs of a study.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MetricsTable {
    /// DGP the study ran.
    pub dgp: DgpKind,
    /// True parameter.
    pub phi: f64,
    /// Configured replication count.
    pub replications: usize,
    /// Master seed.
    pub seed: u64,
    /// One row per design, in config order.
    pub rows: Vec<MetricsRow>,
}

fn reduce_rows(
    config: &StudyConfig,
    prepared: &[PreparedDesign],
    outcomes: &[Vec<Result<RepStats, SimError>>],
) -> Result<Vec<MetricsRow>, SimError> {
    let mut rows = Vec::with_capacity(prepared.len());
    for (d, p) in prepared.iter().enumerate() {
        let mut used = 0usize;
        let mut failures = 0usize;
        let mut sum_est = 0.0;
        let mut sum_sq_est = 0.0;
        let mut covered = 0usize;
        let mut sum_len = 0.0;
        let mut sum_sq_len = 0.0;
        for rep in outcomes {
            match &rep[d] {
                Ok(stats) => {
                    used += 1;
                    sum_est += stats.estimate;
                    sum_sq_est += stats.estimate * stats.estimate;
                    if stats.covered {
                        covered += 1;
                    }
                    sum_len += stats.length;
                    sum_sq_len += stats.length * stats.length;
                }
                Err(e) => match config.failure_policy {
                    FailurePolicy::Abort => {
                        // Reconstruct rather than re-wrap so the message
                        // appears once.
                        return Err(match e {
                            SimError::Replication { replication, design, message } => {
                                SimError::Replication {
                                    replication: *replication,
                                    design: design.clone(),
                                    message: message.clone(),
                                }
                            }
                            other => SimError::Replication {
                                replication: 0,
                                design: p.name.clone(),
                                message: other.to_string(),
                            },
                        });
                    }
                    FailurePolicy::DropAndCount => failures += 1,
                },
            }
        }
        if used == 0 {
            return Err(SimError::InvalidConfig(format!(
                "all replications failed for design {:?}",
                p.name
            )));
        }
        let nf = used as f64;
        let mean_est = sum_est / nf;
        let var_est = if used > 1 {
            ((sum_sq_est - nf * mean_est * mean_est) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        let sd_est = var_est.sqrt();
        let mean_len = sum_len / nf;
        let var_len = if used > 1 {
            ((sum_sq_len - nf * mean_len * mean_len) / (nf - 1.0)).max(0.0)
        } else {
            0.0
        };
        let p_cov = covered as f64 / nf;
        rows.push(MetricsRow {
            design: p.name.clone(),
            bias: mean_est - config.phi,
            bias_se: sd_est / nf.sqrt(),
            std_err: sd_est,
            coverage: p_cov,
            coverage_se: (p_cov * (1.0 - p_cov) / nf).sqrt(),
            length: mean_len,
            length_se: var_len.sqrt() / nf.sqrt(),
            used,
            failures,
        });
    }
    Ok(rows)
}

/// Run a complete study: every replication on its own RNG substream, every
/// design on every replication, reduced in replication order.
pub fn run_study(config: &StudyConfig) -> Result<MetricsTable, SimError> {
    if config.replications == 0 {
        return Err(SimError::InvalidConfig("replications must be ≥ 1".into()));
    }
    if !(config.alpha > 0.0 && config.alpha < 1.0) {
        return Err(SimError::InvalidConfig(format!(
            "alpha = {} must lie strictly between 0 and 1",
            config.alpha
        )));
    }
    if config.workers == 0 {
        return Err(SimError::InvalidConfig("workers must be ≥ 1".into()));
    }
    if config.designs.is_empty() {
        return Err(SimError::InvalidConfig("at least one design entry is required".into()));
    }
    let shape = PanelShape::new(config.dims.clone())?;
    let estimator = match &config.estimator {
        Some(name) => BuiltinEstimator::from_name(name).ok_or_else(|| {
            SimError::InvalidConfig(format!(
                "unknown estimator {name:?}; expected one of {:?}",
                BuiltinEstimator::names()
            ))
        })?,
        None => config.dgp.default_estimator(),
    };
    let prepared = prepare_designs(config, &shape)?;

    let outcomes: Vec<Vec<Result<RepStats, SimError>>> = if config.workers == 1 {
        (0..config.replications)
            .map(|r| run_one_replication(config, &shape, &prepared, estimator, r))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| SimError::InvalidConfig(format!("worker pool: {e}")))?;
        pool.install(|| {
            (0..config.replications)
                .into_par_iter()
                .map(|r| run_one_replication(config, &shape, &prepared, estimator, r))
                .collect()
        })
    };

    let rows = reduce_rows(config, &prepared, &outcomes)?;
    Ok(MetricsTable {
        dgp: config.dgp,
        phi: config.phi,
        replications: config.replications,
        seed: config.seed,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Table emission
// ---------------------------------------------------------------------------

/// Output format for [`emit_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    /// GitHub-flavored markdown table.
    Markdown,
    /// Comma-separated values with a header row.
    Csv,
    /// Pretty-printed JSON at full double precision.
    Json,
}

impl std::str::FromStr for TableFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" | "markdown" => Ok(Self::Markdown),
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown table format {other:?}; expected json, md, or csv")),
        }
    }
}

const TABLE_COLUMNS: [&str; 10] = [
    "design",
    "bias",
    "std_err",
    "coverage",
    "length",
    "bias_se",
    "coverage_se",
    "length_se",
    "used",
    "failures",
];

fn row_cells(row: &MetricsRow) -> [String; 10] {
    [
        row.design.clone(),
        format!("{:.4}", row.bias),
        format!("{:.4}", row.std_err),
        format!("{:.4}", row.coverage),
        format!("{:.4}", row.length),
        format!("{:.4}", row.bias_se),
        format!("{:.4}", row.coverage_se),
        format!("{:.4}", row.length_se),
        row.used.to_string(),
        row.failures.to_string(),
    ]
}

/// Render a metrics table as text.
///
/// Markdown and CSV round numeric cells to 4 decimals in a fixed column
/// order; JSON carries full double precision.
pub fn emit_table(table: &MetricsTable, format: TableFormat) -> String {
    match format {
        TableFormat::Json => {
            let mut s = serde_json::to_string_pretty(table).expect("table serializes");
            s.push('\n');
            s
        }
        TableFormat::Csv => {
            let mut out = String::new();
            out.push_str(&TABLE_COLUMNS.join(","));
            out.push('\n');
            for row in &table.rows {
                out.push_str(&row_cells(row).join(","));
                out.push('\n');
            }
            out
        }
        TableFormat::Markdown => {
            let mut out = String::new();
            out.push_str(&format!("| {} |\n", TABLE_COLUMNS.join(" | ")));
            out.push_str("| --- | ---: | ---: | ---: | ---: | ---: | ---: | ---: | ---: | ---: |\n");
            for row in &table.rows {
                out.push_str(&format!("| {} |\n", row_cells(row).join(" | ")));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::AxisSelection;
    use crate::estimators::twoway_variance_mle;
    use crate::inference::run_jackknife;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    fn shape(n: usize, t: usize) -> PanelShape {
        PanelShape::new(vec![n, t]).unwrap()
    }

    #[test]
    fn dynamic_binary_dgp_has_documented_structure() {
        let sh = shape(200, 20);
        let mut rng = NormalSource::from_seed(11);
        let data = dgp_dynamic_binary_panel(&sh, 0.0, &mut rng).unwrap();
        let x = data.variable("x").unwrap();
        let y = data.variable("y").unwrap();

        // First-period regressor is always zero.
        for i in 0..200 {
            assert_eq!(x[i * 20], 0.0);
        }
        // Feedback: x_it = 1{y_{i,t−1} > 0}.
        for i in 0..200 {
            for s in 1..20 {
                let expected = if y[i * 20 + s - 1] > 0.0 { 1.0 } else { 0.0 };
                assert_eq!(x[i * 20 + s], expected);
            }
        }
        // At φ = 0, y = λ + ε is symmetric about zero, so beyond the first
        // period x has mean 1/2 (3 MC SE band).
        let (mut count, mut total) = (0.0, 0.0);
        for i in 0..200 {
            for s in 1..20 {
                count += x[i * 20 + s];
                total += 1.0;
            }
        }
        let freq: f64 = count / total;
        // Within-unit dependence through λ roughly doubles the variance of
        // the frequency vs. iid; use a conservative 4× iid SE band.
        let se = 0.5 / total.sqrt() * 2.0;
        assert!((freq - 0.5).abs() < 3.0 * se, "x frequency {freq}");
    }

    #[test]
    fn dynamic_binary_dgp_is_reproducible() {
        let sh = shape(10, 6);
        let mut r1 = NormalSource::from_seed(77);
        let mut r2 = NormalSource::from_seed(77);
        let d1 = dgp_dynamic_binary_panel(&sh, 0.5, &mut r1).unwrap();
        let d2 = dgp_dynamic_binary_panel(&sh, 0.5, &mut r2).unwrap();
        assert_eq!(d1.variable("y").unwrap(), d2.variable("y").unwrap());
        assert_eq!(d1.variable("x").unwrap(), d2.variable("x").unwrap());
    }

    #[test]
    fn twoway_variance_dgp_is_exact_at_zero_variance() {
        let sh = shape(12, 9);
        let mut rng = NormalSource::from_seed(31);
        let data = dgp_twoway_variance(&sh, 0.0, &mut rng).unwrap();
        let est = twoway_variance_mle(&data.view_full(), "y").unwrap();
        assert!(est <= 1e-25, "double-centered residual {est}");
    }

    #[test]
    fn twoway_variance_dgp_mean_matches_shrunk_variance() {
        // E[full-sample estimate] = φ(1−1/N)(1−1/T); check the MC mean.
        let sh = shape(10, 10);
        let phi = 2.0;
        let reps = 2000;
        let mut mean = 0.0;
        for r in 0..reps {
            let mut rng = NormalSource::from_seed(substream_seed(404, r));
            let data = dgp_twoway_variance(&sh, phi, &mut rng).unwrap();
            mean += twoway_variance_mle(&data.view_full(), "y").unwrap();
        }
        mean /= reps as f64;
        let target = phi * (1.0 - 0.1) * (1.0 - 0.1);
        // Var(σ̂²) = 2φ²·dof/(NT)² with dof = (N−1)(T−1) = 81.
        let se = (2.0 * phi * phi * 81.0 / (100.0 * 100.0) / reps as f64).sqrt();
        assert_close(mean, target, 3.0 * se);
    }

    #[test]
    fn builtin_schemes_satisfy_weight_conditions() {
        let sh = shape(100, 10);
        for (label, built) in [
            ("a", scheme_time_halves(&sh)),
            ("b", scheme_crossed_halves(&sh)),
            ("c", scheme_half_fifths(&sh)),
        ] {
            let (design, weights) = built.unwrap_or_else(|e| panic!("scheme {label}: {e}"));
            assert_eq!(weights.v_star.len(), design.m(), "scheme {label}");
            assert!(
                weights.residuals.max() <= 1e-14,
                "scheme {label}: residual {:.3e}",
                weights.residuals.max()
            );
            assert_close(weights.variance_factor, 1.0, 1e-12);
        }
        let q: Vec<usize> = [
            scheme_time_halves(&sh).unwrap().1.q,
            scheme_crossed_halves(&sh).unwrap().1.q,
            scheme_half_fifths(&sh).unwrap().1.q,
        ]
        .to_vec();
        assert_eq!(q, vec![1, 2, 5]);
    }

    #[test]
    fn builtin_schemes_report_divisibility_failures() {
        assert!(matches!(
            scheme_time_halves(&shape(10, 9)),
            Err(SimError::Design(DesignError::IndivisibleAxis { axis: 1, .. }))
        ));
        assert!(matches!(
            scheme_half_fifths(&shape(9, 10)),
            Err(SimError::Design(DesignError::IndivisibleAxis { axis: 0, .. }))
        ));
    }

    fn small_config(workers: usize) -> StudyConfig {
        StudyConfig {
            dgp: DgpKind::DynamicBinary,
            phi: 0.5,
            dims: vec![10, 4],
            designs: vec![
                DesignEntry {
                    name: None,
                    scheme: Some("ls".into()),
                    design: None,
                    weights: None,
                    dof: None,
                },
                DesignEntry {
                    name: None,
                    scheme: Some("a".into()),
                    design: None,
                    weights: None,
                    dof: None,
                },
            ],
            replications: 12,
            seed: 9001,
            alpha: 0.05,
            workers,
            estimator: None,
            failure_policy: FailurePolicy::Abort,
        }
    }

    #[test]
    fn study_output_is_identical_across_worker_counts() {
        let base = run_study(&small_config(1)).unwrap();
        let md = emit_table(&base, TableFormat::Markdown);
        let json = emit_table(&base, TableFormat::Json);
        for workers in [4, 16] {
            let other = run_study(&small_config(workers)).unwrap();
            assert_eq!(md, emit_table(&other, TableFormat::Markdown), "workers {workers}");
            assert_eq!(json, emit_table(&other, TableFormat::Json), "workers {workers}");
        }
    }

    #[test]
    fn single_replication_collapses_to_one_inference_run() {
        let mut config = small_config(1);
        config.replications = 1;
        config.designs.remove(0); // keep only scheme a
        let table = run_study(&config).unwrap();

        // Reproduce that single replication by hand.
        let sh = shape(10, 4);
        let mut rng = NormalSource::from_seed(substream_seed(config.seed, 0));
        let data = dgp_dynamic_binary_panel(&sh, config.phi, &mut rng).unwrap();
        let (design, weights) = scheme_time_halves(&sh).unwrap();
        let res = run_jackknife(
            &data,
            &design,
            &BuiltinEstimator::WithinLs,
            &JackknifeSettings::default(),
            Some(&weights),
        )
        .unwrap();

        let row = &table.rows[0];
        assert_eq!(row.used, 1);
        assert_close(row.bias, res.phi_tilde - config.phi, 1e-15);
        assert_eq!(row.std_err, 0.0);
        let covered = res.ci_lower <= config.phi && config.phi <= res.ci_upper;
        assert_eq!(row.coverage, if covered { 1.0 } else { 0.0 });
        assert_close(row.length, res.ci_upper - res.ci_lower, 1e-15);
    }

    #[test]
    fn emit_table_formats_are_stable() {
        let table = MetricsTable {
            dgp: DgpKind::DynamicBinary,
            phi: 0.5,
            replications: 0,
            seed: 1,
            rows: vec![],
        };
        let md = emit_table(&table, TableFormat::Markdown);
        assert!(md.starts_with("| design | bias | std_err | coverage | length |"));
        assert_eq!(md.lines().count(), 2); // header + separator only

        let csv = emit_table(&table, TableFormat::Csv);
        assert_eq!(
            csv,
            "design,bias,std_err,coverage,length,bias_se,coverage_se,length_se,used,failures\n"
        );

        let filled = MetricsTable {
            rows: vec![MetricsRow {
                design: "JK(a)".into(),
                bias: 0.015,
                bias_se: 0.002,
                std_err: 0.0956,
                coverage: 0.9538,
                coverage_se: 0.0047,
                length: 2.1164,
                length_se: 0.0212,
                used: 2000,
                failures: 0,
            }],
            ..table
        };
        let csv = emit_table(&filled, TableFormat::Csv);
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header[0..5], ["design", "bias", "std_err", "coverage", "length"]);
        let cells: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(cells[0], "JK(a)");
        assert_eq!(cells[1], "0.0150");
        assert_eq!(cells[3], "0.9538");

        let json = emit_table(&filled, TableFormat::Json);
        let parsed: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(parsed["rows"][0]["design"], "JK(a)");
        assert_eq!(parsed["rows"][0]["coverage"], 0.9538);
    }

    #[test]
    fn study_config_parses_with_defaults() {
        let text = r#"{
            "dgp": "dynamic_binary",
            "phi": 0.5,
            "dims": [100, 10],
            "designs": [
                {"scheme": "ls"},
                {"scheme": "a"},
                {"name": "alt", "scheme": "b"}
            ],
            "replications": 2000,
            "seed": 42
        }"#;
        let config = StudyConfig::from_json(text).unwrap();
        assert_eq!(config.alpha, 0.05);
        assert_eq!(config.workers, 1);
        assert_eq!(config.failure_policy, FailurePolicy::Abort);
        assert!(config.estimator.is_none());
        assert_eq!(config.designs.len(), 3);

        assert!(StudyConfig::from_json("{\"dgp\": \"nope\"}").is_err());
    }

    #[test]
    fn study_rejects_invalid_configs() {
        let mut c = small_config(1);
        c.replications = 0;
        assert!(matches!(run_study(&c), Err(SimError::InvalidConfig(_))));

        let mut c = small_config(1);
        c.alpha = 1.0;
        assert!(matches!(run_study(&c), Err(SimError::InvalidConfig(_))));

        let mut c = small_config(1);
        c.estimator = Some("nope".into());
        assert!(matches!(run_study(&c), Err(SimError::InvalidConfig(_))));

        let mut c = small_config(1);
        c.designs[0].scheme = Some("z".into());
        assert!(matches!(run_study(&c), Err(SimError::InvalidConfig(_))));

        let mut c = small_config(1);
        c.designs[0].design = Some(serde_json::json!({}));
        assert!(matches!(run_study(&c), Err(SimError::InvalidConfig(_))));
    }

    /// Two-way variance design: full, time thirds ladder, unit third, and
    /// the shared corner — identifies 1/N, 1/T, and 1/(NT) bias terms.
    fn corner_design(n: usize, t: usize) -> Design {
        let sh = shape(n, t);
        use crate::design::{BiasTerm, Rational};
        let half = Rational::new(1, 2);
        let mhalf = -half;
        let terms = vec![
            BiasTerm::new(vec![half, mhalf]),  // ∝ 1/T
            BiasTerm::new(vec![mhalf, half]),  // ∝ 1/N
            BiasTerm::new(vec![mhalf, mhalf]), // ∝ 1/(NT)
        ];
        let third_t = t / 3;
        let third_n = n / 3;
        let subs = vec![
            SubsampleSpec::full(&sh),
            SubsampleSpec::new(vec![
                AxisSelection::full(n),
                AxisSelection::new(vec![(0, third_t)], t).unwrap(),
            ]),
            SubsampleSpec::new(vec![
                AxisSelection::full(n),
                AxisSelection::new(vec![(0, 2 * third_t)], t).unwrap(),
            ]),
            SubsampleSpec::new(vec![
                AxisSelection::new(vec![(0, third_n)], n).unwrap(),
                AxisSelection::full(t),
            ]),
            SubsampleSpec::new(vec![
                AxisSelection::new(vec![(0, third_n)], n).unwrap(),
                AxisSelection::new(vec![(0, third_t)], t).unwrap(),
            ]),
        ];
        Design::new(sh, terms, subs).unwrap()
    }

    #[test]
    fn variance_model_coverage_tracks_nominal_level() {
        // Jackknife CI on the two-way variance DGP at N = T = 60: coverage
        // within ±0.02 of 0.95 over 5,000 replications (MC SE ≈ 0.003).
        let design = corner_design(60, 60);
        let a = bias_loading_matrix(&design);
        let c = overlap_covariance(&design);
        let weights = solve_weights(&a, &c, None).unwrap();
        assert_eq!(weights.q, 1);

        let sh = shape(60, 60);
        let phi = 1.0;
        let reps = 5000;
        let mut covered = 0usize;
        for r in 0..reps {
            let mut rng = NormalSource::from_seed(substream_seed(606060, r));
            let data = dgp_twoway_variance(&sh, phi, &mut rng).unwrap();
            let res = run_jackknife(
                &data,
                &design,
                &BuiltinEstimator::Var2,
                &JackknifeSettings::default(),
                Some(&weights),
            )
            .unwrap();
            if res.ci_lower <= phi && phi <= res.ci_upper {
                covered += 1;
            }
        }
        let coverage = covered as f64 / reps as f64;
        assert!(
            (coverage - 0.95).abs() <= 0.02,
            "coverage {coverage} outside 0.95 ± 0.02"
        );
    }
}
