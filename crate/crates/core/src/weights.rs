//! Unbiased jackknife weight solving.
//!
//! Given the bias-loading matrix `A` (m×R) and the subsample overlap
//! covariance `C` (m×m), this module produces:
//!
//! - the minimum-Euclidean-norm unbiased combination `v† = D(DᵀD)⁻¹d`,
//! - the minimum-variance unbiased combination `v*` solving
//!   `min vᵀCv  s.t.  Dᵀv = d`, where `D = (A, ι_m)` and `d = (0_R, 1)`,
//! - an m×q variance-direction basis `U*` whose columns kill the bias and the
//!   level constraint, are C-orthogonal to each other and to `v*`, and are
//!   scaled so each satisfies `u_lᵀCu_l = v*ᵀCv*`.
//!
//! With these, `v*ᵀφ̂` is the bias-corrected point estimate and
//! `(1/q)Σ_l (u_lᵀφ̂)²` its variance estimate; their ratio is Student-t with
//! `q` degrees of freedom in the large-panel limit.

use crate::linalg::{
    self, cholesky, cholesky_solve, dot, inf_norm, nullspace_of_transpose, solve_bordered_kkt,
    solve_linear, symmetric_eigen, LinAlgError, Matrix, TOL_SOLVE,
};
use thiserror::Error;

/// Threshold below which `v*ᵀCv*` counts as degenerate.
pub const TOL_VARIANCE: f64 = 1e-8;

/// Errors from the weight solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum WeightError {
    /// The stacked constraint matrix `D = (A, ι)` lost column rank.
    #[error("rank-deficient constraints: {0}")]
    RankDeficient(String),
    /// The inputs violate the identification conditions.
    #[error("invalid design: {0}")]
    InvalidDesign(String),
    /// The minimized variance factor is numerically zero.
    #[error("degenerate variance: v*ᵀCv* = {variance_factor:.3e} is below tolerance")]
    DegenerateVariance { variance_factor: f64 },
    /// More variance directions were requested than the design admits.
    #[error("insufficient variance directions: requested {requested}, design admits {available}")]
    InsufficientDirections { requested: usize, available: usize },
    /// Underlying dense-kernel failure.
    #[error(transparent)]
    LinAlg(#[from] LinAlgError),
}

/// Residual report for the weight conditions (all max-absolute values).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct WeightResiduals {
    /// `‖Dᵀv − d‖∞`: bias annihilation plus the unit-level constraint.
    pub unbiasedness: f64,
    /// `max |UᵀD|`: each variance direction kills bias and level.
    pub basis_bias: f64,
    /// `max |UᵀCU − (vᵀCv)·I|`: C-orthogonality and variance matching.
    pub variance_match: f64,
    /// `max |UᵀCv|`: variance directions are C-orthogonal to the estimate.
    pub cross_orthogonality: f64,
}

impl WeightResiduals {
    /// Largest of the four residuals.
    pub fn max(&self) -> f64 {
        self.unbiasedness
            .max(self.basis_bias)
            .max(self.variance_match)
            .max(self.cross_orthogonality)
    }
}

/// Complete weight solution for a design.
#[derive(Debug, Clone)]
pub struct WeightSolution {
    /// Minimum-variance unbiased combination weights (length m).
    pub v_star: Vec<f64>,
    /// Variance-direction basis, m×q.
    pub u_star: Matrix,
    /// `v*ᵀCv*`.
    pub variance_factor: f64,
    /// Number of variance directions used.
    pub q: usize,
    /// Stationarity multipliers π (length R+1).
    pub multipliers: Vec<f64>,
    /// Post-hoc residuals of all weight conditions.
    pub residuals: WeightResiduals,
}

/// Stack the constraint matrix `D = (A, ι_m)`.
pub fn stack_constraints(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols() + 1, |i, j| {
        if j < a.cols() {
            a.get(i, j)
        } else {
            1.0
        }
    })
}

/// Constraint right-hand side `d = (0_R, 1)`.
pub fn constraint_rhs(r: usize) -> Vec<f64> {
    let mut d = vec![0.0; r + 1];
    d[r] = 1.0;
    d
}

/// Minimum-Euclidean-norm unbiased weights `v† = D(DᵀD)⁻¹d`.
///
/// Satisfies `Aᵀv† = 0` and `ιᵀv† = 1` whenever `D` has full column rank.
///
/// # Errors
/// `RankDeficient` when `DᵀD` is singular within tolerance (for example when
/// `ι ∈ col(A)`).
pub fn min_norm_unbiased(a: &Matrix) -> Result<Vec<f64>, WeightError> {
    let d_mat = stack_constraints(a);
    let d_vec = constraint_rhs(a.cols());
    let gram = d_mat.transpose().mul(&d_mat);
    let y = solve_linear(&gram, &d_vec).map_err(|e| match e {
        LinAlgError::SingularMatrix { .. } => WeightError::RankDeficient(format!(
            "DᵀD singular for D = (A, ι) with {} columns; is ι in col(A)?",
            d_mat.cols()
        )),
        other => WeightError::LinAlg(other),
    })?;
    Ok(d_mat.mul_vec(&y))
}

/// Minimum-variance unbiased weights.
#[derive(Debug, Clone)]
pub struct MvujWeights {
    /// The optimizer v* (length m).
    pub v_star: Vec<f64>,
    /// `v*ᵀCv*`.
    pub variance_factor: f64,
    /// Stationarity multipliers (length R+1).
    pub multipliers: Vec<f64>,
}

/// Solve `min vᵀCv` subject to `Aᵀv = 0`, `ιᵀv = 1`.
///
/// When `C` is positive definite the closed form `C⁻¹D(DᵀC⁻¹D)⁻¹d` is used;
/// otherwise the bordered stationarity system is solved directly (returning
/// the minimum-norm optimizer when the system is singular). Either path is
/// verified post hoc against the stationarity and feasibility residuals.
///
/// # Errors
/// `InvalidDesign` when `D = (A, ι)` is column-rank-deficient or the residual
/// verification fails; `DegenerateVariance` when the minimized variance is
/// numerically zero.
pub fn solve_mvuj(a: &Matrix, c: &Matrix) -> Result<MvujWeights, WeightError> {
    let m = a.rows();
    if c.rows() != m || c.cols() != m {
        return Err(WeightError::InvalidDesign(format!(
            "C is {}×{} but A has {m} rows",
            c.rows(),
            c.cols()
        )));
    }
    let d_mat = stack_constraints(a);
    let d_vec = constraint_rhs(a.cols());
    let d_rank = linalg::rank(&d_mat, linalg::default_rank_tol(&d_mat));
    if d_rank < d_mat.cols() {
        return Err(WeightError::InvalidDesign(format!(
            "constraint matrix D = (A, ι) has rank {d_rank} < {} (is ι in col(A) or A rank-deficient?)",
            d_mat.cols()
        )));
    }

    let tol_psd = 1e-10 * c.max_abs().max(1.0);
    let (v, pi) = if let Some(l) = cholesky(c, tol_psd) {
        // PD closed form: v = C⁻¹D y with y = (DᵀC⁻¹D)⁻¹d, and π = −2y.
        let mut cinv_d = Matrix::zeros(m, d_mat.cols());
        for j in 0..d_mat.cols() {
            let col = cholesky_solve(&l, &d_mat.col(j));
            for i in 0..m {
                cinv_d.set(i, j, col[i]);
            }
        }
        let gram = d_mat.transpose().mul(&cinv_d);
        let y = solve_linear(&gram, &d_vec).map_err(|e| match e {
            LinAlgError::SingularMatrix { .. } => WeightError::InvalidDesign(
                "DᵀC⁻¹D singular despite full-rank D; C conditioning is pathological".into(),
            ),
            other => WeightError::LinAlg(other),
        })?;
        let v = cinv_d.mul_vec(&y);
        let pi: Vec<f64> = y.iter().map(|x| -2.0 * x).collect();
        (v, pi)
    } else {
        solve_bordered_kkt(c, &d_mat, &d_vec).map_err(|e| match e {
            LinAlgError::InfeasibleConstraints { residual, tol } => WeightError::InvalidDesign(
                format!("stationarity system inconsistent: residual {residual:.3e} > {tol:.3e}"),
            ),
            other => WeightError::LinAlg(other),
        })?
    };

    // Post-hoc verification of both optimality blocks.
    let feas = {
        let dt_v = d_mat.transpose().mul_vec(&v);
        dt_v.iter().zip(&d_vec).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    };
    let stat = {
        let cv = c.mul_vec(&v);
        let d_pi = d_mat.mul_vec(&pi);
        (0..m).map(|i| (2.0 * cv[i] + d_pi[i]).abs()).fold(0.0, f64::max)
    };
    let scale = 1.0 + c.norm_inf() * inf_norm(&v) + d_mat.norm_inf() * inf_norm(&pi).max(1.0);
    if feas > TOL_SOLVE * scale || stat > TOL_SOLVE * scale {
        return Err(WeightError::InvalidDesign(format!(
            "weight verification failed: feasibility {feas:.3e}, stationarity {stat:.3e}"
        )));
    }

    let cv = c.mul_vec(&v);
    let variance_factor = dot(&v, &cv);
    if variance_factor <= TOL_VARIANCE {
        return Err(WeightError::DegenerateVariance { variance_factor });
    }
    Ok(MvujWeights { v_star: v, variance_factor, multipliers: pi })
}

/// Number of admissible variance directions: the rank of `WᵀCW` where `W`
/// spans `null(Dᵀ)`.
pub fn max_variance_directions(a: &Matrix, c: &Matrix) -> Result<usize, WeightError> {
    Ok(variance_direction_spectrum(a, c)?.map_or(0, |(lams, _, _)| lams.len()))
}

/// Eigenstructure of `G = WᵀCW` restricted to its positive part: eigenvalues
/// descending with matching columns of `W·(eigenvectors)`, plus `W` itself.
/// Returns `None` when `null(Dᵀ)` is trivial.
#[allow(clippy::type_complexity)]
fn variance_direction_spectrum(
    a: &Matrix,
    c: &Matrix,
) -> Result<Option<(Vec<f64>, Matrix, Matrix)>, WeightError> {
    let d_mat = stack_constraints(a);
    let ns = nullspace_of_transpose(&d_mat, linalg::default_rank_tol(&d_mat));
    let w = match ns.basis {
        Some(w) => w,
        None => return Ok(None),
    };
    let g = w.transpose().mul(&c.mul(&w));
    let eig = symmetric_eigen(&g)?;
    let lmax = eig.values.iter().fold(0.0_f64, |acc, &x| acc.max(x.abs()));
    let cut = linalg::TOL_RANK_FACTOR * lmax.max(1.0);
    // Keep strictly positive eigenvalues, descending.
    let kept: Vec<usize> = (0..eig.values.len())
        .rev()
        .filter(|&j| eig.values[j] > cut)
        .collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let lams: Vec<f64> = kept.iter().map(|&j| eig.values[j]).collect();
    let dirs = Matrix::from_fn(w.rows(), kept.len(), |i, l| {
        (0..w.cols()).map(|k| w.get(i, k) * eig.vectors.get(k, kept[l])).sum()
    });
    Ok(Some((lams, dirs, w)))
}

/// Build the m×q variance-direction basis `U*`.
///
/// Columns are eigen-directions of `WᵀCW` (eigenvalues descending, `W` an
/// orthonormal basis of `null(Dᵀ)`), mapped back through `W` and rescaled so
/// `u_lᵀCu_l = v*ᵀCv*` exactly at the numerical level. The sign convention
/// makes the first nonzero coordinate of each column positive, so the basis
/// is deterministic for a fixed input.
///
/// # Errors
/// `InsufficientDirections` when `q` exceeds the admissible count.
pub fn variance_weight_basis(
    a: &Matrix,
    c: &Matrix,
    v_star: &[f64],
    q: usize,
) -> Result<Matrix, WeightError> {
    let spectrum = variance_direction_spectrum(a, c)?;
    let available = spectrum.as_ref().map_or(0, |(l, _, _)| l.len());
    if q == 0 || q > available {
        return Err(WeightError::InsufficientDirections { requested: q, available });
    }
    let (lams, dirs, _) = spectrum.expect("available > 0 implies spectrum");
    let cv = c.mul_vec(v_star);
    let vf = dot(v_star, &cv);
    if vf <= TOL_VARIANCE {
        return Err(WeightError::DegenerateVariance { variance_factor: vf });
    }

    let m = a.rows();
    let mut u = Matrix::zeros(m, q);
    for l in 0..q {
        let scale = (vf / lams[l]).sqrt();
        let mut col: Vec<f64> = (0..m).map(|i| dirs.get(i, l) * scale).collect();
        // Sign convention: first nonzero coordinate positive.
        let thresh = 1e-9 * inf_norm(&col);
        if let Some(&first) = col.iter().find(|x| x.abs() > thresh) {
            if first < 0.0 {
                for x in &mut col {
                    *x = -*x;
                }
            }
        }
        for i in 0..m {
            u.set(i, l, col[i]);
        }
    }
    Ok(u)
}

/// Residuals of all four weight conditions for given `v` and optional `U`.
///
/// Useful to certify externally supplied weight vectors; the basis residuals
/// are zero when `u` is `None`.
pub fn verify_weight_conditions(
    a: &Matrix,
    c: &Matrix,
    v: &[f64],
    u: Option<&Matrix>,
) -> WeightResiduals {
    let d_mat = stack_constraints(a);
    let d_vec = constraint_rhs(a.cols());
    let dt_v = d_mat.transpose().mul_vec(v);
    let unbiasedness =
        dt_v.iter().zip(&d_vec).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);

    let cv = c.mul_vec(v);
    let vf = dot(v, &cv);
    let (basis_bias, variance_match, cross_orthogonality) = match u {
        None => (0.0, 0.0, 0.0),
        Some(u) => {
            let ut_d = u.transpose().mul(&d_mat);
            let bb = ut_d.max_abs();
            let ut_cu = u.transpose().mul(&c.mul(u));
            let mut vm = 0.0_f64;
            for i in 0..ut_cu.rows() {
                for j in 0..ut_cu.cols() {
                    let want = if i == j { vf } else { 0.0 };
                    vm = vm.max((ut_cu.get(i, j) - want).abs());
                }
            }
            let ut_cv = u.transpose().mul_vec(&cv);
            (bb, vm, inf_norm(&ut_cv))
        }
    };
    WeightResiduals { unbiasedness, basis_bias, variance_match, cross_orthogonality }
}

/// Solve the complete weight problem: `v*`, `U*` with `q` directions
/// (defaulting to the maximum the design admits), multipliers, and residuals.
pub fn solve_weights(
    a: &Matrix,
    c: &Matrix,
    q: Option<usize>,
) -> Result<WeightSolution, WeightError> {
    let mvuj = solve_mvuj(a, c)?;
    let q_max = max_variance_directions(a, c)?;
    if q_max == 0 {
        return Err(WeightError::InsufficientDirections { requested: q.unwrap_or(1), available: 0 });
    }
    let q = q.unwrap_or(q_max);
    let u_star = variance_weight_basis(a, c, &mvuj.v_star, q)?;
    let residuals = verify_weight_conditions(a, c, &mvuj.v_star, Some(&u_star));
    Ok(WeightSolution {
        v_star: mvuj.v_star,
        u_star,
        variance_factor: mvuj.variance_factor,
        q,
        multipliers: mvuj.multipliers,
        residuals,
    })
}

/// Tolerance for accepting user-supplied weight vectors.
pub const TOL_EXPLICIT: f64 = 1e-10;

impl WeightSolution {
    /// Wrap explicitly supplied weight vectors after checking every weight
    /// condition against the design's `(A, C)`.
    ///
    /// `u_cols` holds the variance directions as q vectors of length m; they
    /// are used verbatim (no rescaling), so each must already satisfy
    /// `u_lᵀCu_l = v*ᵀCv*`. Intended for hand-constructed schemes whose
    /// weights differ from the solver's canonical choice.
    ///
    /// # Errors
    /// `InvalidDesign` when any condition residual exceeds [`TOL_EXPLICIT`]
    /// relative to the matrix scale, or when dimensions disagree.
    pub fn from_explicit(
        v_star: Vec<f64>,
        u_cols: &[Vec<f64>],
        a: &Matrix,
        c: &Matrix,
    ) -> Result<Self, WeightError> {
        let m = a.rows();
        if v_star.len() != m || u_cols.iter().any(|u| u.len() != m) {
            return Err(WeightError::InvalidDesign(format!(
                "weight vectors must have length m = {m}"
            )));
        }
        if u_cols.is_empty() {
            return Err(WeightError::InsufficientDirections { requested: 1, available: 0 });
        }
        let q = u_cols.len();
        let u_star = Matrix::from_fn(m, q, |i, l| u_cols[l][i]);
        let residuals = verify_weight_conditions(a, c, &v_star, Some(&u_star));
        let scale = c.max_abs().max(1.0);
        if residuals.max() > TOL_EXPLICIT * scale {
            return Err(WeightError::InvalidDesign(format!(
                "explicit weights violate the weight conditions: max residual {:.3e}",
                residuals.max()
            )));
        }
        let cv = c.mul_vec(&v_star);
        let variance_factor = dot(&v_star, &cv);
        if variance_factor <= TOL_VARIANCE {
            return Err(WeightError::DegenerateVariance { variance_factor });
        }
        Ok(Self { v_star, u_star, variance_factor, q, multipliers: Vec::new(), residuals })
    }
}
