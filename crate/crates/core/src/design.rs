//! Subsampling designs for K-dimensional panels.
//!
//! A design lists `m` rectangular subsamples of an `N₁ × … × N_K` index grid
//! (the first being the full grid) together with `R` bias terms describing
//! which incidental-parameter bias rates the recombination must annihilate.
//! From a design two matrices are built in closed form:
//!
//! - the bias-loading matrix `A` (m×R) with
//!   `A[j,r] = Π_k κ_{j,k}^(e_{r,k} − 1/2)`, where `κ_{j,k}` is the fraction
//!   of axis `k` retained by subsample `j` and `e_{r,k}` are the exact
//!   rational rate exponents of bias term `r`;
//! - the overlap covariance `C` (m×m) with
//!   `C[a,b] = N · |S_a ∩ S_b| / (|S_a| · |S_b|)`, the limiting covariance of
//!   the normalized subsample scores under exchangeable sampling.
//!
//! Both are computed in exact rational arithmetic and converted to floats
//! only at matrix assembly. [`validate_design`] reports the identification
//! diagnostics a design must satisfy for the downstream weight solve.

use crate::linalg::{self, symmetric_eigenvalues, Matrix};
use crate::weights;
use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};
use std::str::FromStr;
use thiserror::Error;

/// Exact rational scalar used for rate exponents and retained fractions.
pub type Rational = Ratio<i64>;

/// Wide exact rational used for overlap counts (products of grid sizes).
pub type WideRational = Ratio<i128>;

/// Tolerance for the validity verdicts on variance factor and PSD check.
pub const VALIDITY_TOL: f64 = 1e-8;

/// Errors from design construction and parsing.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum DesignError {
    /// Shape must have K ≥ 1 axes, each of size ≥ 2.
    #[error("invalid panel shape: {0}")]
    InvalidShape(String),
    /// Axis blocks must be sorted, disjoint, nonempty, and in bounds.
    #[error("invalid axis blocks: {0}")]
    InvalidBlocks(String),
    /// Higher-order expansion is only defined for single-axis groups.
    #[error("unsupported order {order} for a fixed-effect group on {axes:?}: higher-order expansion needs a single axis")]
    UnsupportedOrder { axes: Vec<usize>, order: usize },
    /// Equal blocks need the axis length to divide evenly.
    #[error("axis {axis} of length {dim} is not divisible into {parts} equal blocks")]
    IndivisibleAxis { axis: usize, dim: usize, parts: usize },
    /// Identification requires at least R + 2 subsamples.
    #[error("design needs at least {required} subsamples for {r} bias terms, got {m}")]
    TooFewSubsamples { m: usize, r: usize, required: usize },
    /// The first subsample must select the entire grid.
    #[error("the first subsample must be the full sample")]
    FirstSubsampleNotFull,
    /// Arity of a component does not match the panel dimension count.
    #[error("arity mismatch: {0}")]
    ArityMismatch(String),
    /// Exact loading evaluation supports integer and half-integer exponents.
    #[error("exact loading evaluation needs exponent denominators 1 or 2, got {0}")]
    UnsupportedExponent(Rational),
    /// A design file failed to parse.
    #[error("design file parse error: {0}")]
    Parse(String),
    /// A supplied covariance override is malformed.
    #[error("covariance override rejected: {0}")]
    CovarianceOverride(String),
}

/// Dimensions of the full panel index grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PanelShape {
    dims: Vec<usize>,
}

impl PanelShape {
    /// Validated constructor: K ≥ 1 axes, each of size ≥ 2.
    pub fn new(dims: Vec<usize>) -> Result<Self, DesignError> {
        if dims.is_empty() {
            return Err(DesignError::InvalidShape("need at least one axis".into()));
        }
        if let Some((k, &d)) = dims.iter().enumerate().find(|(_, &d)| d < 2) {
            return Err(DesignError::InvalidShape(format!("axis {k} has size {d} < 2")));
        }
        Ok(Self { dims })
    }

    /// Number of axes K.
    pub fn k(&self) -> usize {
        self.dims.len()
    }

    /// Axis sizes.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Total number of grid cells `N = Π_k N_k`.
    pub fn total(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Rate exponents of one bias term, one exact rational per axis.
///
/// A term with exponents `(e₁, …, e_K)` represents a bias component whose
/// magnitude scales like `Π_k N_k^{e_k}` relative to the estimator's noise
/// level; the unknown constant in front is never needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BiasTerm {
    exponents: Vec<Rational>,
}

impl BiasTerm {
    /// Build from per-axis exponents.
    pub fn new(exponents: Vec<Rational>) -> Self {
        Self { exponents }
    }

    /// Per-axis exponents.
    pub fn exponents(&self) -> &[Rational] {
        &self.exponents
    }
}

/// A group of fixed effects indexed by a set of axes, with an expansion
/// order for refining the induced bias into successive rate terms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixedEffectGroup {
    /// Axes (0-based) the effect is indexed by.
    pub axes: Vec<usize>,
    /// Expansion order ℓ ≥ 1; orders above 1 need a single-axis group.
    pub order: usize,
}

impl FixedEffectGroup {
    /// First-order group on the given axes.
    pub fn first_order(axes: Vec<usize>) -> Self {
        Self { axes, order: 1 }
    }
}

/// Selection on one axis: a sorted union of disjoint half-open `[lo, hi)`
/// index intervals.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AxisSelection {
    blocks: Vec<(usize, usize)>,
}

impl AxisSelection {
    /// Validated constructor against an axis of length `dim`.
    pub fn new(blocks: Vec<(usize, usize)>, dim: usize) -> Result<Self, DesignError> {
        if blocks.is_empty() {
            return Err(DesignError::InvalidBlocks("no blocks selected".into()));
        }
        for &(lo, hi) in &blocks {
            if lo >= hi || hi > dim {
                return Err(DesignError::InvalidBlocks(format!(
                    "block [{lo}, {hi}) invalid on an axis of length {dim}"
                )));
            }
        }
        for w in blocks.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(DesignError::InvalidBlocks(format!(
                    "blocks [{}, {}) and [{}, {}) are out of order or overlap",
                    w[0].0, w[0].1, w[1].0, w[1].1
                )));
            }
        }
        Ok(Self { blocks })
    }

    /// Selection of the entire axis.
    pub fn full(dim: usize) -> Self {
        Self { blocks: vec![(0, dim)] }
    }

    /// The sorted disjoint blocks.
    pub fn blocks(&self) -> &[(usize, usize)] {
        &self.blocks
    }

    /// Number of selected indices.
    pub fn count(&self) -> usize {
        self.blocks.iter().map(|&(lo, hi)| hi - lo).sum()
    }

    /// Number of indices selected by both selections.
    pub fn overlap_count(&self, other: &AxisSelection) -> usize {
        let mut total = 0;
        for &(alo, ahi) in &self.blocks {
            for &(blo, bhi) in &other.blocks {
                let lo = alo.max(blo);
                let hi = ahi.min(bhi);
                if lo < hi {
                    total += hi - lo;
                }
            }
        }
        total
    }

    /// Materialized selected indices, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.blocks.iter().flat_map(|&(lo, hi)| lo..hi).collect()
    }
}

/// One rectangular subsample: the Cartesian product of per-axis selections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsampleSpec {
    axes: Vec<AxisSelection>,
}

impl SubsampleSpec {
    /// Build from per-axis selections (one per axis, in axis order).
    pub fn new(axes: Vec<AxisSelection>) -> Self {
        Self { axes }
    }

    /// The full sample for a shape.
    pub fn full(shape: &PanelShape) -> Self {
        Self { axes: shape.dims().iter().map(|&d| AxisSelection::full(d)).collect() }
    }

    /// Per-axis selections.
    pub fn axes(&self) -> &[AxisSelection] {
        &self.axes
    }

    /// Number of axes this spec covers.
    pub fn k(&self) -> usize {
        self.axes.len()
    }

    /// Subsample size `|S| = Π_k (selected count on axis k)`.
    pub fn size(&self) -> usize {
        self.axes.iter().map(AxisSelection::count).product()
    }

    /// Retained fraction on one axis, `κ_k = count_k / N_k`, exact.
    pub fn kappa(&self, axis: usize, shape: &PanelShape) -> Rational {
        Rational::new(self.axes[axis].count() as i64, shape.dims()[axis] as i64)
    }

    /// Whether this spec selects every index on every axis.
    pub fn is_full(&self, shape: &PanelShape) -> bool {
        self.axes.iter().zip(shape.dims()).all(|(sel, &d)| sel.count() == d)
    }
}

/// A complete subsampling design.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    shape: PanelShape,
    bias_terms: Vec<BiasTerm>,
    subsamples: Vec<SubsampleSpec>,
    rate_exponent: Rational,
}

impl Design {
    /// Validated constructor.
    ///
    /// Checks: every bias term and subsample covers all K axes; block lists
    /// are in bounds (selections must be built via [`AxisSelection::new`]);
    /// `m ≥ R + 2`; and the first subsample is the full sample. The default
    /// rate-exponent metadata is 1/2 (a √N-consistent full-sample estimator);
    /// it is informational only and cancels in every reported statistic.
    pub fn new(
        shape: PanelShape,
        bias_terms: Vec<BiasTerm>,
        subsamples: Vec<SubsampleSpec>,
    ) -> Result<Self, DesignError> {
        let k = shape.k();
        if bias_terms.is_empty() {
            return Err(DesignError::ArityMismatch("need at least one bias term".into()));
        }
        if let Some(t) = bias_terms.iter().find(|t| t.exponents().len() != k) {
            return Err(DesignError::ArityMismatch(format!(
                "bias term has {} exponents for a {k}-axis shape",
                t.exponents().len()
            )));
        }
        if let Some(s) = subsamples.iter().find(|s| s.k() != k) {
            return Err(DesignError::ArityMismatch(format!(
                "subsample covers {} axes for a {k}-axis shape",
                s.k()
            )));
        }
        for s in &subsamples {
            for (axis, sel) in s.axes().iter().enumerate() {
                let dim = shape.dims()[axis];
                if sel.blocks().iter().any(|&(_, hi)| hi > dim) {
                    return Err(DesignError::InvalidBlocks(format!(
                        "subsample block exceeds axis {axis} length {dim}"
                    )));
                }
            }
        }
        let (m, r) = (subsamples.len(), bias_terms.len());
        if m < r + 2 {
            return Err(DesignError::TooFewSubsamples { m, r, required: r + 2 });
        }
        if !subsamples[0].is_full(&shape) {
            return Err(DesignError::FirstSubsampleNotFull);
        }
        Ok(Self { shape, bias_terms, subsamples, rate_exponent: Rational::new(1, 2) })
    }

    /// Override the informational rate-exponent metadata.
    pub fn with_rate_exponent(mut self, rho: Rational) -> Self {
        self.rate_exponent = rho;
        self
    }

    /// Panel shape.
    pub fn shape(&self) -> &PanelShape {
        &self.shape
    }

    /// Bias terms (R of them).
    pub fn bias_terms(&self) -> &[BiasTerm] {
        &self.bias_terms
    }

    /// Ordered subsamples; index 0 is the full sample.
    pub fn subsamples(&self) -> &[SubsampleSpec] {
        &self.subsamples
    }

    /// Number of subsamples m.
    pub fn m(&self) -> usize {
        self.subsamples.len()
    }

    /// Number of bias terms R.
    pub fn r(&self) -> usize {
        self.bias_terms.len()
    }

    /// Informational convergence-rate exponent ρ (the full-sample estimator
    /// converges at N^ρ). Cancels in every computed statistic.
    pub fn rate_exponent(&self) -> Rational {
        self.rate_exponent
    }
}

/// Expand fixed-effect groups into bias terms.
///
/// A first-order group `G` produces a single term with exponent `+1/2` on
/// axes in `G` and `−1/2` elsewhere (the effect count grows like the product
/// of the group's axis sizes while the noise shrinks like the root of the
/// total size). An order-ℓ single-axis group `{j}` produces ℓ terms: term
/// `l ∈ {1..ℓ}` has `e_j = 1/2 − (l−1)/2` and `−1/2` elsewhere, the
/// successive refinements of the leading rate on that axis.
///
/// # Errors
/// `UnsupportedOrder` when `order > 1` is requested for a multi-axis group.
pub fn expand_fixed_effects(
    k: usize,
    groups: &[FixedEffectGroup],
) -> Result<Vec<BiasTerm>, DesignError> {
    if groups.is_empty() {
        return Err(DesignError::ArityMismatch("need at least one fixed-effect group".into()));
    }
    let mut terms = Vec::new();
    for g in groups {
        if g.axes.is_empty() {
            return Err(DesignError::ArityMismatch("fixed-effect group with no axes".into()));
        }
        let mut seen = vec![false; k];
        for &a in &g.axes {
            if a >= k {
                return Err(DesignError::ArityMismatch(format!(
                    "axis {a} out of range for a {k}-axis shape"
                )));
            }
            if seen[a] {
                return Err(DesignError::ArityMismatch(format!("axis {a} repeated in group")));
            }
            seen[a] = true;
        }
        if g.order == 0 {
            return Err(DesignError::ArityMismatch("group order must be ≥ 1".into()));
        }
        if g.order > 1 && g.axes.len() > 1 {
            return Err(DesignError::UnsupportedOrder { axes: g.axes.clone(), order: g.order });
        }
        if g.order == 1 {
            let exps: Vec<Rational> = (0..k)
                .map(|ax| {
                    if seen[ax] {
                        Rational::new(1, 2)
                    } else {
                        Rational::new(-1, 2)
                    }
                })
                .collect();
            terms.push(BiasTerm::new(exps));
        } else {
            let j = g.axes[0];
            for l in 1..=g.order {
                let exps: Vec<Rational> = (0..k)
                    .map(|ax| {
                        if ax == j {
                            Rational::new(1, 2) - Rational::new(l as i64 - 1, 2)
                        } else {
                            Rational::new(-1, 2)
                        }
                    })
                    .collect();
                terms.push(BiasTerm::new(exps));
            }
        }
    }
    Ok(terms)
}

/// An exact value of the form `rational × √(sqrt_of)`.
///
/// Supports the integer and half-integer exponents produced by
/// [`expand_fixed_effects`]; `sqrt_of` is 1 whenever the value is rational.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExactValue {
    /// Rational factor.
    pub rational: Rational,
    /// Argument of the residual square root (1 when none).
    pub sqrt_of: Rational,
}

impl ExactValue {
    /// The multiplicative identity.
    pub fn one() -> Self {
        Self { rational: Rational::new(1, 1), sqrt_of: Rational::new(1, 1) }
    }

    /// Multiply by `base^exp` for a positive rational base and an exponent
    /// with denominator 1 or 2.
    fn mul_pow(&mut self, base: Rational, exp: Rational) -> Result<(), DesignError> {
        match *exp.denom() {
            1 => {
                self.rational *= ratio_int_pow(base, *exp.numer());
            }
            2 => {
                let n = *exp.numer();
                let whole = n.div_euclid(2);
                let half = n.rem_euclid(2); // 0 or 1
                self.rational *= ratio_int_pow(base, whole);
                if half == 1 {
                    self.sqrt_of *= base;
                }
            }
            _ => return Err(DesignError::UnsupportedExponent(exp)),
        }
        Ok(())
    }

    /// Convert to a float.
    pub fn to_f64(&self) -> f64 {
        let r = self.rational.to_f64().expect("rational fits in f64");
        let s = self.sqrt_of.to_f64().expect("rational fits in f64");
        r * s.sqrt()
    }
}

/// `base^e` for integer `e` (positive rational base).
fn ratio_int_pow(base: Rational, e: i64) -> Rational {
    assert!(!base.numer().is_zero(), "rational power needs a nonzero base");
    let p = e.unsigned_abs() as u32;
    let powed = Rational::new(base.numer().pow(p), base.denom().pow(p));
    if e >= 0 {
        powed
    } else {
        powed.recip()
    }
}

/// Exact bias-loading entries: `A[j,r] = Π_k κ_{j,k}^(e_{r,k} − 1/2)`.
///
/// # Errors
/// `UnsupportedExponent` when a bias-term exponent has a denominator other
/// than 1 or 2 (possible only via user overrides).
pub fn bias_loading_exact(design: &Design) -> Result<Vec<Vec<ExactValue>>, DesignError> {
    let shape = design.shape();
    let half = Rational::new(1, 2);
    design
        .subsamples()
        .iter()
        .map(|s| {
            design
                .bias_terms()
                .iter()
                .map(|term| {
                    let mut acc = ExactValue::one();
                    for (axis, &e) in term.exponents().iter().enumerate() {
                        acc.mul_pow(s.kappa(axis, shape), e - half)?;
                    }
                    Ok(acc)
                })
                .collect()
        })
        .collect()
}

/// Bias-loading matrix `A` (m×R) as floats.
///
/// Entries come from the exact evaluation when every exponent is an integer
/// or half-integer, and from direct floating-point powers otherwise. Row 0
/// (the full sample, all κ = 1) is all ones.
pub fn bias_loading_matrix(design: &Design) -> Matrix {
    match bias_loading_exact(design) {
        Ok(exact) => Matrix::from_fn(design.m(), design.r(), |j, r| exact[j][r].to_f64()),
        Err(_) => {
            let shape = design.shape();
            Matrix::from_fn(design.m(), design.r(), |j, r| {
                let s = &design.subsamples()[j];
                design.bias_terms()[r]
                    .exponents()
                    .iter()
                    .enumerate()
                    .map(|(axis, &e)| {
                        let kappa = s.kappa(axis, shape).to_f64().expect("kappa fits in f64");
                        let exp = (e - Rational::new(1, 2)).to_f64().expect("exponent fits");
                        kappa.powf(exp)
                    })
                    .product()
            })
        }
    }
}

/// Exact overlap covariance: `C[a,b] = N · |S_a ∩ S_b| / (|S_a| · |S_b|)`
/// with the intersection size factorized across axes.
pub fn overlap_covariance_exact(design: &Design) -> Vec<Vec<WideRational>> {
    let m = design.m();
    let n_total = design.shape().total() as i128;
    let subs = design.subsamples();
    let sizes: Vec<i128> = subs.iter().map(|s| s.size() as i128).collect();
    let mut c = vec![vec![WideRational::zero(); m]; m];
    for a in 0..m {
        for b in a..m {
            let overlap: i128 = subs[a]
                .axes()
                .iter()
                .zip(subs[b].axes())
                .map(|(x, y)| x.overlap_count(y) as i128)
                .product();
            let val = WideRational::new(n_total * overlap, sizes[a] * sizes[b]);
            c[a][b] = val;
            c[b][a] = val;
        }
    }
    c
}

/// Overlap covariance `C` (m×m) as floats. Symmetric, with row/column 0 all
/// ones (every subsample overlaps the full sample by its own size).
pub fn overlap_covariance(design: &Design) -> Matrix {
    let exact = overlap_covariance_exact(design);
    Matrix::from_fn(design.m(), design.m(), |a, b| {
        exact[a][b].to_f64().expect("overlap ratio fits in f64")
    })
}

/// Split one axis into `parts` equal disjoint blocks, full on other axes.
///
/// # Errors
/// `IndivisibleAxis` when the axis length is not a multiple of `parts`.
pub fn partition_axis(
    shape: &PanelShape,
    axis: usize,
    parts: usize,
) -> Result<Vec<SubsampleSpec>, DesignError> {
    if axis >= shape.k() {
        return Err(DesignError::ArityMismatch(format!(
            "axis {axis} out of range for a {}-axis shape",
            shape.k()
        )));
    }
    let dim = shape.dims()[axis];
    if parts == 0 || dim % parts != 0 {
        return Err(DesignError::IndivisibleAxis { axis, dim, parts });
    }
    let len = dim / parts;
    Ok((0..parts)
        .map(|j| {
            let axes = shape
                .dims()
                .iter()
                .enumerate()
                .map(|(ax, &d)| {
                    if ax == axis {
                        AxisSelection::new(vec![(j * len, (j + 1) * len)], d)
                            .expect("block within bounds by construction")
                    } else {
                        AxisSelection::full(d)
                    }
                })
                .collect();
            SubsampleSpec::new(axes)
        })
        .collect())
}

/// Nested-prefix ladder on one axis for an order-ℓ expansion.
///
/// The axis is cut into ℓ+1 equal blocks; subsample `j ∈ {1..ℓ}` keeps the
/// first `j` blocks (κ = j/(ℓ+1)) and everything on the other axes.
///
/// # Errors
/// `IndivisibleAxis` when the axis length is not a multiple of ℓ+1.
pub fn ladder_design(
    shape: &PanelShape,
    axis: usize,
    order: usize,
) -> Result<Vec<SubsampleSpec>, DesignError> {
    if axis >= shape.k() {
        return Err(DesignError::ArityMismatch(format!(
            "axis {axis} out of range for a {}-axis shape",
            shape.k()
        )));
    }
    if order == 0 {
        return Err(DesignError::ArityMismatch("ladder order must be ≥ 1".into()));
    }
    let dim = shape.dims()[axis];
    let parts = order + 1;
    if dim % parts != 0 {
        return Err(DesignError::IndivisibleAxis { axis, dim, parts });
    }
    let len = dim / parts;
    Ok((1..=order)
        .map(|j| {
            let axes = shape
                .dims()
                .iter()
                .enumerate()
                .map(|(ax, &d)| {
                    if ax == axis {
                        AxisSelection::new(vec![(0, j * len)], d)
                            .expect("prefix within bounds by construction")
                    } else {
                        AxisSelection::full(d)
                    }
                })
                .collect();
            SubsampleSpec::new(axes)
        })
        .collect())
}

/// Identification diagnostics for a design.
///
/// The design is usable by the weight solver exactly when
/// [`DesignDiagnostics::is_valid`] holds: the bias loadings must have full
/// rank `R`, the constant vector must not be expressible through them, at
/// least one level-and-bias-free direction must carry variance, and `C` must
/// be (numerically) positive semidefinite with positive minimized variance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignDiagnostics {
    /// Numerical rank of `A` (should equal R).
    pub rank_a: usize,
    /// Number of bias terms R the design declares.
    pub bias_term_count: usize,
    /// Whether `ι_m` lies in the column space of `A` (must be false).
    pub iota_in_col_a: bool,
    /// Whether every direction of `null(Dᵀ)` is annihilated by `C`
    /// (must be false: some direction must carry variance).
    pub null_dt_in_null_c: bool,
    /// Minimized variance factor `v*ᵀCv*` (0.0 when the solve fails).
    pub min_variance_factor: f64,
    /// Number of admissible variance-weight directions.
    pub q_max: usize,
    /// Most negative eigenvalue of `C` (≥ −tol for a PSD matrix).
    pub psd_violation: f64,
}

impl DesignDiagnostics {
    /// Overall verdict.
    pub fn is_valid(&self) -> bool {
        self.failure_reasons().is_empty()
    }

    /// Human-readable reasons the design fails, empty when valid.
    pub fn failure_reasons(&self) -> Vec<String> {
        let mut reasons = Vec::new();
        if self.rank_a != self.bias_term_count {
            reasons.push(format!(
                "rank(A) = {} but {} bias terms declared: redundant or conflicting terms",
                self.rank_a, self.bias_term_count
            ));
        }
        if self.iota_in_col_a {
            reasons.push(
                "ι_m in col(A): unbiasedness and the level constraint conflict; add subsamples \
                 with different retained fractions"
                    .into(),
            );
        }
        if self.null_dt_in_null_c {
            reasons.push(
                "null(Dᵀ) ⊆ null(C): no constraint-free direction carries variance".into(),
            );
        }
        if !(self.min_variance_factor > VALIDITY_TOL) {
            reasons.push(format!(
                "minimized variance factor {:.3e} is not positive",
                self.min_variance_factor
            ));
        }
        if self.psd_violation < -VALIDITY_TOL {
            reasons.push(format!(
                "C has a negative eigenvalue {:.3e}: not positive semidefinite",
                self.psd_violation
            ));
        }
        reasons
    }
}

/// Compute all identification diagnostics for a design.
///
/// Never fails: every probe degrades to a value that marks the design
/// invalid (for example, a failed weight solve reports
/// `min_variance_factor = 0`).
pub fn validate_design(design: &Design) -> DesignDiagnostics {
    let a = bias_loading_matrix(design);
    let c = overlap_covariance(design);
    validate_matrices(&a, &c, design.r())
}

/// Diagnostics from explicit `(A, C)` matrices (the design-file override and
/// raw-matrix CLI paths land here).
pub fn validate_matrices(a: &Matrix, c: &Matrix, bias_term_count: usize) -> DesignDiagnostics {
    let rank_a = linalg::rank(a, linalg::default_rank_tol(a));
    // ι ∈ col(A) ⇔ appending ι does not increase the rank.
    let iota = Matrix::from_fn(a.rows(), 1, |_, _| 1.0);
    let a_iota = a.hcat(&iota);
    let iota_in_col_a = linalg::rank(&a_iota, linalg::default_rank_tol(&a_iota)) == rank_a;

    let d_mat = weights::stack_constraints(a);
    let ns = linalg::nullspace_of_transpose(&d_mat, linalg::default_rank_tol(&d_mat));
    let (null_dt_in_null_c, q_max) = match ns.basis {
        None => (true, 0),
        Some(w) => {
            let g = w.transpose().mul(&c.mul(&w));
            match linalg::symmetric_eigenvalues(&g) {
                Ok(vals) => {
                    let lmax = vals.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
                    let cut = linalg::TOL_RANK_FACTOR * lmax.max(1.0);
                    let q_max = vals.iter().filter(|&&x| x > cut).count();
                    // All of null(Dᵀ) is C-annihilated iff WᵀCW ≈ 0.
                    (lmax <= VALIDITY_TOL, q_max)
                }
                Err(_) => (true, 0),
            }
        }
    };

    let min_variance_factor = match weights::solve_mvuj(a, c) {
        Ok(sol) => sol.variance_factor,
        Err(_) => 0.0,
    };
    let psd_violation = match symmetric_eigenvalues(c) {
        Ok(vals) => vals.first().copied().unwrap_or(0.0),
        Err(_) => f64::NEG_INFINITY,
    };

    DesignDiagnostics {
        rank_a,
        bias_term_count,
        iota_in_col_a,
        null_dt_in_null_c,
        min_variance_factor,
        q_max,
        psd_violation,
    }
}

// ---------------------------------------------------------------------------
// Design files (JSON)
// ---------------------------------------------------------------------------

/// A design parsed from a JSON file, plus the optional covariance override.
#[derive(Debug, Clone)]
pub struct LoadedDesign {
    /// The validated design.
    pub design: Design,
    /// User-supplied replacement for the overlap covariance, already checked
    /// for shape and symmetry against the final subsample list.
    pub c_override: Option<Matrix>,
}

impl LoadedDesign {
    /// The covariance to use: the override when present, otherwise the
    /// factorized overlap computation.
    pub fn effective_covariance(&self) -> Matrix {
        match &self.c_override {
            Some(c) => c.clone(),
            None => overlap_covariance(&self.design),
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DesignFileRaw {
    dims: Vec<usize>,
    #[serde(default)]
    fixed_effects: Option<Vec<FixedEffectRaw>>,
    #[serde(default)]
    bias_terms_override: Option<Vec<Vec<String>>>,
    subsamples: Vec<SubsampleRaw>,
    #[serde(default, rename = "C_override")]
    c_override: Option<Vec<Vec<f64>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixedEffectRaw {
    axes: Vec<usize>,
    #[serde(default = "default_order")]
    order: usize,
}

fn default_order() -> usize {
    1
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SubsampleRaw {
    axes: Vec<AxisRaw>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AxisRaw {
    blocks: Vec<[usize; 2]>,
}

/// Parse a design from its JSON file format.
///
/// Schema: `{"dims": [100, 10], "fixed_effects": [{"axes": [0], "order": 1}],
/// "bias_terms_override": [["1/2", "-1/2"], …], "subsamples": [{"axes":
/// [{"blocks": [[0, 100]]}, {"blocks": [[0, 5]]}]}, …], "C_override": [[…]]}`.
/// Axis indices are 0-based; blocks are half-open `[lo, hi)`. Bias terms come
/// from `bias_terms_override` when present, otherwise from expanding
/// `fixed_effects`. When the first listed subsample is not the full sample,
/// the loader prepends it (the full-sample estimate is always entry 0); a
/// `C_override` must then already account for that row and be m×m against
/// the final list.
pub fn design_from_json(text: &str) -> Result<LoadedDesign, DesignError> {
    let raw: DesignFileRaw =
        serde_json::from_str(text).map_err(|e| DesignError::Parse(e.to_string()))?;
    let shape = PanelShape::new(raw.dims)?;
    let k = shape.k();

    let bias_terms = match (&raw.bias_terms_override, &raw.fixed_effects) {
        (Some(over), _) => over
            .iter()
            .map(|exps| {
                let parsed: Result<Vec<Rational>, DesignError> = exps
                    .iter()
                    .map(|s| {
                        Rational::from_str(s.trim()).map_err(|e| {
                            DesignError::Parse(format!("bad rational {s:?}: {e}"))
                        })
                    })
                    .collect();
                let parsed = parsed?;
                if parsed.len() != k {
                    return Err(DesignError::ArityMismatch(format!(
                        "bias term override has {} exponents for a {k}-axis shape",
                        parsed.len()
                    )));
                }
                Ok(BiasTerm::new(parsed))
            })
            .collect::<Result<Vec<_>, _>>()?,
        (None, Some(fes)) => {
            let groups: Vec<FixedEffectGroup> = fes
                .iter()
                .map(|fe| FixedEffectGroup { axes: fe.axes.clone(), order: fe.order })
                .collect();
            expand_fixed_effects(k, &groups)?
        }
        (None, None) => {
            return Err(DesignError::Parse(
                "need either fixed_effects or bias_terms_override".into(),
            ))
        }
    };

    let mut subsamples: Vec<SubsampleSpec> = raw
        .subsamples
        .iter()
        .map(|s| {
            if s.axes.len() != k {
                return Err(DesignError::ArityMismatch(format!(
                    "subsample lists {} axes for a {k}-axis shape",
                    s.axes.len()
                )));
            }
            let axes: Result<Vec<AxisSelection>, DesignError> = s
                .axes
                .iter()
                .enumerate()
                .map(|(axis, a)| {
                    AxisSelection::new(
                        a.blocks.iter().map(|b| (b[0], b[1])).collect(),
                        shape.dims()[axis],
                    )
                })
                .collect();
            Ok(SubsampleSpec::new(axes?))
        })
        .collect::<Result<Vec<_>, _>>()?;

    if subsamples.first().map_or(true, |s| !s.is_full(&shape)) {
        subsamples.insert(0, SubsampleSpec::full(&shape));
    }

    let design = Design::new(shape, bias_terms, subsamples)?;

    let c_override = match raw.c_override {
        None => None,
        Some(rows) => {
            let m = design.m();
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(DesignError::CovarianceOverride(format!(
                    "must be {m}×{m} to cover the final subsample list \
                     (a full-sample row is prepended when missing)"
                )));
            }
            let mat = Matrix::from_nested(&rows)
                .map_err(|e| DesignError::CovarianceOverride(e.to_string()))?;
            if mat.max_asymmetry() > 1e-9 * mat.max_abs().max(1.0) {
                return Err(DesignError::CovarianceOverride("must be symmetric".into()));
            }
            Some(mat)
        }
    };

    Ok(LoadedDesign { design, c_override })
}
