//! Panel datasets, subsample views, and built-in plug-in estimators.
//!
//! A [`PanelDataset`] stores named variables densely over the full index
//! grid; a [`DataView`] restricts it to one rectangular subsample without
//! copying. Estimators consume views, so the same code evaluates the full
//! sample and every subsample. Built-ins:
//!
//! - [`within_ls_oneway`] — least-squares slope after within-unit demeaning;
//! - [`twoway_variance_mle`] — error-variance ML in an additive two-way
//!   effects model (double-centered mean square);
//! - [`kway_interacted_variance_mle`] — error-variance ML with all three
//!   pairwise-interacted effects on a three-axis panel, by alternating
//!   centering;
//! - [`twoway_probit_mle`] — slope ML in a two-way additive probit panel.

use crate::design::{PanelShape, SubsampleSpec};
use statrs::function::erf::erfc;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use thiserror::Error;

/// Relative tolerance for the alternating-centering projection.
pub const TOL_PROJ: f64 = 1e-10;
/// Iteration cap for the alternating-centering projection.
pub const MAX_PROJ_ITER: usize = 10_000;
/// Gradient ∞-norm target for the probit Newton solver.
pub const TOL_PROBIT_GRAD: f64 = 1e-8;
/// Any fixed effect or slope drifting past this magnitude flags separation.
pub const SEPARATION_BOUND: f64 = 20.0;

/// Errors from dataset construction and estimation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimatorError {
    /// A named variable is absent from the dataset.
    #[error("variable {0:?} not found in the dataset")]
    MissingVariable(String),
    /// Variable data does not match the grid, or values are not finite.
    #[error("malformed variable {name:?}: {detail}")]
    MalformedVariable { name: String, detail: String },
    /// The view's arity or extent does not fit the estimator.
    #[error("invalid view: {0}")]
    InvalidView(String),
    /// The within variation of the regressor vanished.
    #[error("degenerate regressor: within sum of squares {sum_sq:.3e} is numerically zero")]
    DegenerateRegressor { sum_sq: f64 },
    /// An iterative solver ran out of iterations.
    #[error("no convergence after {iterations} iterations (last update {last_update:.3e})")]
    NoConvergence { iterations: usize, last_update: f64 },
    /// The binary outcome is perfectly predictable for some unit or period.
    #[error("separation detected: {0}")]
    Separation(String),
}

/// Named real variables stored densely over a panel index grid.
///
/// Storage is row-major over the grid: the flat index of `(i₁, …, i_K)` is
/// `((i₁·N₂ + i₂)·N₃ + …)`. Every variable covers every cell.
#[derive(Debug, Clone)]
pub struct PanelDataset {
    shape: PanelShape,
    variables: BTreeMap<String, Vec<f64>>,
}

impl PanelDataset {
    /// Empty dataset over a grid.
    pub fn new(shape: PanelShape) -> Self {
        Self { shape, variables: BTreeMap::new() }
    }

    /// Add (or replace) one variable; must have `Π N_k` finite entries.
    pub fn with_variable(
        mut self,
        name: impl Into<String>,
        values: Vec<f64>,
    ) -> Result<Self, EstimatorError> {
        let name = name.into();
        if values.len() != self.shape.total() {
            return Err(EstimatorError::MalformedVariable {
                detail: format!(
                    "{} entries supplied for a grid of {}",
                    values.len(),
                    self.shape.total()
                ),
                name,
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EstimatorError::MalformedVariable {
                detail: "entries must be finite".into(),
                name,
            });
        }
        self.variables.insert(name, values);
        Ok(self)
    }

    /// Grid shape.
    pub fn shape(&self) -> &PanelShape {
        &self.shape
    }

    /// Raw storage of one variable.
    pub fn variable(&self, name: &str) -> Result<&[f64], EstimatorError> {
        self.variables
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| EstimatorError::MissingVariable(name.to_string()))
    }

    /// Names of all variables, sorted.
    pub fn variable_names(&self) -> Vec<&str> {
        self.variables.keys().map(String::as_str).collect()
    }

    /// View of the whole grid.
    pub fn view_full(&self) -> DataView<'_> {
        DataView {
            dataset: self,
            axis_indices: self.shape.dims().iter().map(|&d| (0..d).collect()).collect(),
        }
    }

    /// View restricted to one rectangular subsample.
    pub fn view(&self, spec: &SubsampleSpec) -> Result<DataView<'_>, EstimatorError> {
        if spec.k() != self.shape.k() {
            return Err(EstimatorError::InvalidView(format!(
                "subsample covers {} axes, dataset has {}",
                spec.k(),
                self.shape.k()
            )));
        }
        let axis_indices: Vec<Vec<usize>> = spec.axes().iter().map(|s| s.indices()).collect();
        for (axis, idx) in axis_indices.iter().enumerate() {
            if idx.iter().any(|&i| i >= self.shape.dims()[axis]) {
                return Err(EstimatorError::InvalidView(format!(
                    "subsample selects out-of-range indices on axis {axis}"
                )));
            }
        }
        Ok(DataView { dataset: self, axis_indices })
    }
}

/// A rectangular, view-local window into a [`PanelDataset`].
///
/// Axis `k` of the view enumerates `count(k)` retained original indices in
/// ascending order; estimators address cells by view-local coordinates and
/// can never observe data outside the window.
#[derive(Debug, Clone)]
pub struct DataView<'a> {
    dataset: &'a PanelDataset,
    axis_indices: Vec<Vec<usize>>,
}

impl<'a> DataView<'a> {
    /// Number of axes.
    pub fn k(&self) -> usize {
        self.axis_indices.len()
    }

    /// Retained index count on one axis.
    pub fn count(&self, axis: usize) -> usize {
        self.axis_indices[axis].len()
    }

    /// Total number of cells in the view.
    pub fn len(&self) -> usize {
        self.axis_indices.iter().map(Vec::len).product()
    }

    /// Whether the view is empty (it never is for validated subsamples).
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Copy one variable into a dense, view-local, row-major array.
    pub fn extract(&self, name: &str) -> Result<Vec<f64>, EstimatorError> {
        let raw = self.dataset.variable(name)?;
        let dims = self.dataset.shape().dims();
        let k = self.k();
        let mut out = Vec::with_capacity(self.len());
        let mut cursor = vec![0usize; k];
        'outer: loop {
            let mut flat = 0usize;
            for ax in 0..k {
                flat = flat * dims[ax] + self.axis_indices[ax][cursor[ax]];
            }
            out.push(raw[flat]);
            // Mixed-radix increment, last axis fastest.
            for ax in (0..k).rev() {
                cursor[ax] += 1;
                if cursor[ax] < self.axis_indices[ax].len() {
                    continue 'outer;
                }
                cursor[ax] = 0;
            }
            break;
        }
        Ok(out)
    }
}

fn require_axes(view: &DataView, k: usize, who: &str) -> Result<(), EstimatorError> {
    if view.k() != k {
        return Err(EstimatorError::InvalidView(format!(
            "{who} needs a {k}-axis view, got {} axes",
            view.k()
        )));
    }
    Ok(())
}

/// Within (fixed-effects) least-squares slope on a two-axis view.
///
/// Demeans `y` and `x` within each unit over the view's time indices and
/// returns `Σ x̃ỹ / Σ x̃²`.
///
/// # Errors
/// `DegenerateRegressor` when the within sum of squares of `x` is
/// numerically zero (constant regressor, or a single time point).
pub fn within_ls_oneway(view: &DataView, y: &str, x: &str) -> Result<f64, EstimatorError> {
    require_axes(view, 2, "within_ls_oneway")?;
    let (n, t) = (view.count(0), view.count(1));
    let yv = view.extract(y)?;
    let xv = view.extract(x)?;

    let mut num = 0.0;
    let mut den = 0.0;
    let mut raw_energy = 0.0;
    for i in 0..n {
        let row = i * t;
        let ybar: f64 = yv[row..row + t].iter().sum::<f64>() / t as f64;
        let xbar: f64 = xv[row..row + t].iter().sum::<f64>() / t as f64;
        for s in 0..t {
            let xd = xv[row + s] - xbar;
            let yd = yv[row + s] - ybar;
            num += xd * yd;
            den += xd * xd;
            raw_energy += xv[row + s] * xv[row + s];
        }
    }
    if den <= 1e-12 * raw_energy.max(1e-300) {
        return Err(EstimatorError::DegenerateRegressor { sum_sq: den });
    }
    Ok(num / den)
}

/// Error-variance ML estimate in the additive two-way effects model: the
/// mean square of the double-centered outcome,
/// `(1/(N_v·T_v)) Σ (y − ȳ_i· − ȳ_·t + ȳ)²` over the view.
pub fn twoway_variance_mle(view: &DataView, y: &str) -> Result<f64, EstimatorError> {
    require_axes(view, 2, "twoway_variance_mle")?;
    let (n, t) = (view.count(0), view.count(1));
    if n < 2 || t < 2 {
        return Err(EstimatorError::InvalidView(format!(
            "twoway_variance_mle needs at least a 2×2 view, got {n}×{t}"
        )));
    }
    let yv = view.extract(y)?;
    let nf = n as f64;
    let tf = t as f64;

    let mut row_mean = vec![0.0; n];
    let mut col_mean = vec![0.0; t];
    let mut grand = 0.0;
    for i in 0..n {
        for s in 0..t {
            let v = yv[i * t + s];
            row_mean[i] += v;
            col_mean[s] += v;
            grand += v;
        }
    }
    for r in &mut row_mean {
        *r /= tf;
    }
    for c in &mut col_mean {
        *c /= nf;
    }
    grand /= nf * tf;

    let mut acc = 0.0;
    for i in 0..n {
        for s in 0..t {
            let e = yv[i * t + s] - row_mean[i] - col_mean[s] + grand;
            acc += e * e;
        }
    }
    Ok(acc / (nf * tf))
}

/// Error-variance ML estimate with all three pairwise-interacted effects on
/// a three-axis view: the mean squared residual after projecting out the
/// spans of `(i₁,i₂)-`, `(i₂,i₃)-`, and `(i₃,i₁)-indexed` effects.
///
/// The projection runs cyclic alternating centering — subtract the current
/// mean over each pairwise margin in rotation — until the largest subtracted
/// mean is at most `TOL_PROJ × scale`.
///
/// # Errors
/// `NoConvergence` after [`MAX_PROJ_ITER`] sweeps, reporting the last update
/// size.
pub fn kway_interacted_variance_mle(view: &DataView, y: &str) -> Result<f64, EstimatorError> {
    require_axes(view, 3, "kway_interacted_variance_mle")?;
    let (n1, n2, n3) = (view.count(0), view.count(1), view.count(2));
    if n1 < 2 || n2 < 2 || n3 < 2 {
        return Err(EstimatorError::InvalidView(format!(
            "kway_interacted_variance_mle needs all axes ≥ 2, got {n1}×{n2}×{n3}"
        )));
    }
    let mut r = view.extract(y)?;
    let scale = r.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let at = |a: usize, b: usize, c: usize| (a * n2 + b) * n3 + c;

    let mut last_update = f64::INFINITY;
    for sweep in 0..MAX_PROJ_ITER {
        let mut max_update = 0.0_f64;

        // Margin (i₁, i₂): mean over i₃.
        for a in 0..n1 {
            for b in 0..n2 {
                let mut mean = 0.0;
                for c in 0..n3 {
                    mean += r[at(a, b, c)];
                }
                mean /= n3 as f64;
                max_update = max_update.max(mean.abs());
                for c in 0..n3 {
                    r[at(a, b, c)] -= mean;
                }
            }
        }
        // Margin (i₂, i₃): mean over i₁.
        for b in 0..n2 {
            for c in 0..n3 {
                let mut mean = 0.0;
                for a in 0..n1 {
                    mean += r[at(a, b, c)];
                }
                mean /= n1 as f64;
                max_update = max_update.max(mean.abs());
                for a in 0..n1 {
                    r[at(a, b, c)] -= mean;
                }
            }
        }
        // Margin (i₃, i₁): mean over i₂.
        for c in 0..n3 {
            for a in 0..n1 {
                let mut mean = 0.0;
                for b in 0..n2 {
                    mean += r[at(a, b, c)];
                }
                mean /= n2 as f64;
                max_update = max_update.max(mean.abs());
                for b in 0..n2 {
                    r[at(a, b, c)] -= mean;
                }
            }
        }

        last_update = max_update;
        if max_update <= TOL_PROJ * scale {
            let ssr: f64 = r.iter().map(|v| v * v).sum();
            return Ok(ssr / r.len() as f64);
        }
        let _ = sweep;
    }
    Err(EstimatorError::NoConvergence { iterations: MAX_PROJ_ITER, last_update })
}

/// The built-in estimators, addressable by the names the CLI accepts.
///
/// Each uses conventional variable names: outcome `y`, continuous regressor
/// `x` (least squares), binary regressor `d` (probit).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuiltinEstimator {
    /// `within_ls`: within least-squares slope of `y` on `x`.
    WithinLs,
    /// `var2`: two-way error-variance ML on `y`.
    Var2,
    /// `var3`: three-way interacted error-variance ML on `y`.
    Var3,
    /// `probit2`: two-way panel probit slope of `y` on `d`.
    Probit2,
}

impl BuiltinEstimator {
    /// Look up an estimator by its CLI name.
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "within_ls" => Some(Self::WithinLs),
            "var2" => Some(Self::Var2),
            "var3" => Some(Self::Var3),
            "probit2" => Some(Self::Probit2),
            _ => None,
        }
    }

    /// The CLI name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::WithinLs => "within_ls",
            Self::Var2 => "var2",
            Self::Var3 => "var3",
            Self::Probit2 => "probit2",
        }
    }

    /// All registered names, for diagnostics.
    pub fn names() -> &'static [&'static str] {
        &["within_ls", "var2", "var3", "probit2"]
    }

    /// Evaluate on one view using the conventional variable names.
    pub fn evaluate(&self, view: &DataView) -> Result<f64, EstimatorError> {
        match self {
            Self::WithinLs => within_ls_oneway(view, "y", "x"),
            Self::Var2 => twoway_variance_mle(view, "y"),
            Self::Var3 => kway_interacted_variance_mle(view, "y"),
            Self::Probit2 => twoway_probit_mle(view, "y", "d"),
        }
    }
}

// ---------------------------------------------------------------------------
// Two-way panel probit
// ---------------------------------------------------------------------------

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Far-tail switch point for the asymptotic expansions.
const TAIL_SWITCH: f64 = -8.0;

/// `1 − 1/x² + 3/x⁴ − 15/x⁶ + 105/x⁸` (tail series of the Mills ratio).
fn tail_series(x: f64) -> f64 {
    let inv2 = 1.0 / (x * x);
    1.0 + inv2 * (-1.0 + inv2 * (3.0 + inv2 * (-15.0 + inv2 * 105.0)))
}

/// Inverse Mills ratio `φ(x)/Φ(x)`, stable in the deep left tail.
fn mills(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        -x / tail_series(x)
    } else {
        std_normal_pdf(x) / std_normal_cdf(x)
    }
}

/// `ln Φ(x)`, stable in the deep left tail.
fn log_std_normal_cdf(x: f64) -> f64 {
    if x < TAIL_SWITCH {
        -0.5 * x * x - 0.5 * (2.0 * PI).ln() - (-x).ln() + tail_series(x).ln()
    } else {
        std_normal_cdf(x).ln()
    }
}

/// Parameters of the two-way probit panel: slope, unit effects, and period
/// effects with the first period normalized to zero.
#[derive(Debug, Clone)]
pub struct ProbitParams {
    /// Slope on the regressor.
    pub phi: f64,
    /// Unit effects λ_i (length N of the view).
    pub lambdas: Vec<f64>,
    /// Period effects γ_t (length T of the view); `gammas[0]` is fixed at 0.
    pub gammas: Vec<f64>,
}

/// Log-likelihood of the two-way probit panel at given parameters.
///
/// `y` must be 0/1; the linear index of cell `(i, t)` is
/// `φ·d_it + λ_i + γ_t`. Exposed for diagnostics and derivative checking.
pub fn probit_loglik(yv: &[f64], dv: &[f64], n: usize, t: usize, p: &ProbitParams) -> f64 {
    let mut ll = 0.0;
    for i in 0..n {
        for s in 0..t {
            let v = p.phi * dv[i * t + s] + p.lambdas[i] + p.gammas[s];
            ll += if yv[i * t + s] > 0.5 {
                log_std_normal_cdf(v)
            } else {
                log_std_normal_cdf(-v)
            };
        }
    }
    ll
}

/// Analytic gradient of [`probit_loglik`] in `(φ, λ, γ₂…γ_T)` order; the
/// normalized `γ₁` is excluded. Exposed for derivative checking.
pub fn probit_gradient(
    yv: &[f64],
    dv: &[f64],
    n: usize,
    t: usize,
    p: &ProbitParams,
) -> Vec<f64> {
    let mut grad = vec![0.0; 1 + n + (t - 1)];
    for i in 0..n {
        for s in 0..t {
            let v = p.phi * dv[i * t + s] + p.lambdas[i] + p.gammas[s];
            // ∂ℓ/∂v: Mills ratio at v for successes, −Mills at −v otherwise.
            let sc = if yv[i * t + s] > 0.5 { mills(v) } else { -mills(-v) };
            grad[0] += sc * dv[i * t + s];
            grad[1 + i] += sc;
            if s > 0 {
                grad[1 + n + (s - 1)] += sc;
            }
        }
    }
    grad
}

/// Slope ML estimate in the two-way additive probit panel
/// `y_it = 1{φ·d_it + λ_i + γ_t ≥ ε_it}`.
///
/// Maximizes the log-likelihood by cyclic one-dimensional Newton blocks over
/// `λ_i`, `γ_t` (first period normalized to zero), and `φ`, stopping when the
/// full gradient ∞-norm is at most [`TOL_PROBIT_GRAD`].
///
/// # Errors
/// `Separation` when any unit or period has all-0 or all-1 outcomes, or any
/// parameter drifts past [`SEPARATION_BOUND`]; `NoConvergence` when the sweep
/// limit is exhausted.
pub fn twoway_probit_mle(view: &DataView, y: &str, d: &str) -> Result<f64, EstimatorError> {
    require_axes(view, 2, "twoway_probit_mle")?;
    let (n, t) = (view.count(0), view.count(1));
    if n < 2 || t < 2 {
        return Err(EstimatorError::InvalidView(format!(
            "twoway_probit_mle needs at least a 2×2 view, got {n}×{t}"
        )));
    }
    let yv = view.extract(y)?;
    let dv = view.extract(d)?;
    if let Some(bad) = yv.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(EstimatorError::MalformedVariable {
            name: y.to_string(),
            detail: format!("outcome must be 0/1, found {bad}"),
        });
    }

    // Perfectly predictable rows/columns make the effect diverge.
    for i in 0..n {
        let s: f64 = yv[i * t..(i + 1) * t].iter().sum();
        if s == 0.0 || s == t as f64 {
            return Err(EstimatorError::Separation(format!(
                "unit {i} has all-{} outcomes",
                if s == 0.0 { 0 } else { 1 }
            )));
        }
    }
    for s in 0..t {
        let tot: f64 = (0..n).map(|i| yv[i * t + s]).sum();
        if tot == 0.0 || tot == n as f64 {
            return Err(EstimatorError::Separation(format!(
                "period {s} has all-{} outcomes",
                if tot == 0.0 { 0 } else { 1 }
            )));
        }
    }

    let mut p = ProbitParams { phi: 0.0, lambdas: vec![0.0; n], gammas: vec![0.0; t] };
    // ∂²ℓ/∂v² for one observation, always negative — the Newton denominator.
    let curvature = |yval: f64, v: f64| -> f64 {
        if yval > 0.5 {
            let m = mills(v);
            -m * (v + m)
        } else {
            let m = mills(-v);
            -m * (m - v)
        }
    };
    let index = |p: &ProbitParams, i: usize, s: usize, dval: f64| -> f64 {
        p.phi * dval + p.lambdas[i] + p.gammas[s]
    };

    const MAX_SWEEPS: usize = 1000;
    for sweep in 0..MAX_SWEEPS {
        // Unit-effect blocks.
        for i in 0..n {
            let mut g = 0.0;
            let mut h = 0.0;
            for s in 0..t {
                let v = index(&p, i, s, dv[i * t + s]);
                let yval = yv[i * t + s];
                g += if yval > 0.5 { mills(v) } else { -mills(-v) };
                h += curvature(yval, v);
            }
            if h < 0.0 {
                p.lambdas[i] += (-g / h).clamp(-2.0, 2.0);
            }
        }
        // Period-effect blocks (first period stays 0).
        for s in 1..t {
            let mut g = 0.0;
            let mut h = 0.0;
            for i in 0..n {
                let v = index(&p, i, s, dv[i * t + s]);
                let yval = yv[i * t + s];
                g += if yval > 0.5 { mills(v) } else { -mills(-v) };
                h += curvature(yval, v);
            }
            if h < 0.0 {
                p.gammas[s] += (-g / h).clamp(-2.0, 2.0);
            }
        }
        // Slope block.
        let mut g = 0.0;
        let mut h = 0.0;
        for i in 0..n {
            for s in 0..t {
                let dval = dv[i * t + s];
                let v = index(&p, i, s, dval);
                let yval = yv[i * t + s];
                let sc = if yval > 0.5 { mills(v) } else { -mills(-v) };
                g += sc * dval;
                h += curvature(yval, v) * dval * dval;
            }
        }
        if h < 0.0 {
            p.phi += (-g / h).clamp(-2.0, 2.0);
        }

        let drift = p
            .lambdas
            .iter()
            .chain(p.gammas.iter())
            .chain(std::iter::once(&p.phi))
            .fold(0.0_f64, |m, v| m.max(v.abs()));
        if drift > SEPARATION_BOUND {
            return Err(EstimatorError::Separation(format!(
                "a parameter drifted to {drift:.1}; the likelihood is unbounded"
            )));
        }

        let grad = probit_gradient(&yv, &dv, n, t, &p);
        let gnorm = grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if gnorm <= TOL_PROBIT_GRAD {
            return Ok(p.phi);
        }
        let _ = sweep;
    }
    let grad = probit_gradient(&yv, &dv, n, t, &p);
    let gnorm = grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    Err(EstimatorError::NoConvergence { iterations: MAX_SWEEPS, last_update: gnorm })
}
