//! Minimal dense linear algebra kernel for small weight-solving problems.
//!
//! Everything here targets tiny, near-integer matrices (a handful of rows and
//! columns): the bias-loading matrix `A` (m×R), the overlap covariance `C`
//! (m×m), the stacked constraint matrix `D = (A, ι_m)`, and the bordered
//! stationarity system
//!
//! ```text
//! [ 2C  D ] [ v ]   [ 0 ]
//! [ Dᵀ  0 ] [ π ] = [ d ]
//! ```
//!
//! Provided factorizations: row-pivoted Gaussian elimination, Householder QR
//! with deterministic column pivoting (rank + orthonormal null-space basis),
//! and cyclic Jacobi for symmetric eigenvalues/eigenvectors. All operations
//! are pure functions of their inputs and safe to call from multiple threads.

use thiserror::Error;

/// Relative factor for rank decisions: `tol = 1e−10 × (largest column norm)`.
pub const TOL_RANK_FACTOR: f64 = 1e-10;
/// Relative residual tolerance for linear solves.
pub const TOL_SOLVE: f64 = 1e-9;
/// Eigenvalue sweep termination: off-diagonal Frobenius norm ≤ `1e−12 × ‖S‖F`.
pub const TOL_EIG_FACTOR: f64 = 1e-12;
/// Elimination pivot threshold: `|pivot| ≤ 1e−13 × (row max)` is singular.
pub const TOL_PIVOT_FACTOR: f64 = 1e-13;
/// Symmetry tolerance: `‖S − Sᵀ‖∞ ≤ 1e−9 × max(1, ‖S‖∞)`.
pub const TOL_SYM_FACTOR: f64 = 1e-9;

/// Errors produced by the dense kernel.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinAlgError {
    /// Operand shapes do not conform.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    /// A matrix entry is NaN or infinite.
    #[error("matrix entries must be finite")]
    NonFinite,
    /// An elimination pivot fell below the scaled threshold.
    #[error("singular matrix: pivot {pivot:.3e} below tolerance {tol:.3e} at step {step}")]
    SingularMatrix { step: usize, pivot: f64, tol: f64 },
    /// The symmetry precondition failed.
    #[error("matrix is not symmetric: max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    /// The bordered system has no solution for the given right-hand side.
    #[error("infeasible constraints: residual {residual:.3e} exceeds tolerance {tol:.3e}")]
    InfeasibleConstraints { residual: f64, tol: f64 },
    /// The Jacobi sweep limit was exhausted (not expected for real inputs).
    #[error("eigenvalue iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
}

/// Dense row-major matrix of `f64` entries.
///
/// Invariants: `rows ≥ 1`, `cols ≥ 1`, `entries.len() == rows × cols`, and
/// every entry is finite. The checked constructors enforce all four; the
/// generator constructors (`zeros`, `identity`, `from_fn`) uphold them by
/// construction provided the generator returns finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major entries, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinAlgError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(LinAlgError::DimensionMismatch(format!(
                "{rows}×{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(LinAlgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    /// Build from nested rows (each inner vector is one row).
    pub fn from_nested(rows: &[Vec<f64>]) -> Result<Self, LinAlgError> {
        if rows.is_empty() || rows[0].is_empty() {
            return Err(LinAlgError::DimensionMismatch("empty matrix".into()));
        }
        let cols = rows[0].len();
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LinAlgError::DimensionMismatch("ragged rows".into()));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data)
    }

    /// Matrix of zeros.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Build entry-wise from a generator `f(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, f(i, j));
            }
        }
        m
    }

    /// Column vector (n×1) from a slice.
    pub fn column(v: &[f64]) -> Self {
        Self::from_fn(v.len(), 1, |i, _| v[i])
    }

    /// Number of rows.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Number of columns.
    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Entry at (row, col).
    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    /// Set entry at (row, col).
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy column `c` into a new vector.
    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    /// Row-major entries.
    pub fn entries(&self) -> &[f64] {
        &self.data
    }

    /// Rows as nested vectors (for serialization).
    pub fn to_nested(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Transpose.
    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Matrix product `self × other`.
    pub fn mul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}×{} by {}×{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    let v = out.get(i, j) + aik * other.get(k, j);
                    out.set(i, j, v);
                }
            }
        }
        out
    }

    /// Matrix–vector product `self × v`.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        Matrix::from_fn(self.rows, self.cols + other.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                other.get(i, j - self.cols)
            }
        })
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Operator ∞-norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|r| self.row(r).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Frobenius norm.
    pub fn norm_frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest Euclidean column norm.
    pub fn max_col_norm(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).powi(2)).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute asymmetry `‖self − selfᵀ‖∞` (entrywise max).
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }
}

/// Dot product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Maximum absolute entry of a slice (∞-norm).
pub fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Default absolute rank tolerance for a matrix: `1e−10 × max column norm`.
pub fn default_rank_tol(m: &Matrix) -> f64 {
    TOL_RANK_FACTOR * m.max_col_norm()
}

/// Numerical rank and an orthonormal basis of `null(Mᵀ)`.
///
/// `basis` has `m − rank` columns; they are mutually orthonormal and each is
/// orthogonal to every column of the input to within the rank tolerance.
#[derive(Debug, Clone)]
pub struct NullspaceBasis {
    /// Numerical rank of the input matrix.
    pub rank: usize,
    /// Orthonormal columns spanning `{w : wᵀM = 0}`; `m×(m − rank)`, or `None`
    /// when the null space is trivial.
    pub basis: Option<Matrix>,
}

impl NullspaceBasis {
    /// Number of basis columns (the null-space dimension).
    pub fn dim(&self) -> usize {
        self.basis.as_ref().map_or(0, Matrix::cols)
    }
}

/// Householder QR with deterministic column pivoting.
///
/// Returns `(q, rank, perm)` where `q` is the full m×m orthogonal factor and
/// `perm[i]` records which original column was reduced at step `i`. Columns
/// `0..rank` of `q` span the column space of `m`; columns `rank..m` span the
/// null space of `mᵀ`. Pivoting recomputes trailing column norms each step and
/// picks the lowest-index column within `tol` of the largest norm, so the
/// factorization is reproducible bit-for-bit for a fixed input.
fn householder_qr(m: &Matrix, tol: f64) -> (Matrix, usize, Vec<usize>) {
    let rows = m.rows();
    let cols = m.cols();
    let steps = rows.min(cols);
    let mut work = m.clone();
    let mut q = Matrix::identity(rows);
    let mut perm: Vec<usize> = (0..cols).collect();
    let mut rank = 0;

    for i in 0..steps {
        // Trailing column norms over rows i..rows.
        let norms: Vec<f64> = (i..cols)
            .map(|c| (i..rows).map(|r| work.get(r, c).powi(2)).sum::<f64>().sqrt())
            .collect();
        let nmax = norms.iter().fold(0.0_f64, |a, &b| a.max(b));
        if nmax <= tol {
            break;
        }
        // Lowest index among candidates within tol of the maximum.
        let rel = norms.iter().position(|&n| n >= nmax - tol).expect("candidate exists");
        let pivot = i + rel;
        if pivot != i {
            for r in 0..rows {
                let tmp = work.get(r, i);
                work.set(r, i, work.get(r, pivot));
                work.set(r, pivot, tmp);
            }
            perm.swap(i, pivot);
        }

        // Householder vector for column i, rows i..rows.
        let x0 = work.get(i, i);
        let norm_x = (i..rows).map(|r| work.get(r, i).powi(2)).sum::<f64>().sqrt();
        if norm_x == 0.0 {
            break;
        }
        let alpha = if x0 >= 0.0 { -norm_x } else { norm_x };
        let mut v: Vec<f64> = (i..rows).map(|r| work.get(r, i)).collect();
        v[0] -= alpha;
        let vtv = dot(&v, &v);
        if vtv > 0.0 {
            let beta = 2.0 / vtv;
            // Apply H = I − β v vᵀ to the trailing block of `work`.
            for c in i..cols {
                let s: f64 = (i..rows).map(|r| v[r - i] * work.get(r, c)).sum();
                let bs = beta * s;
                for r in i..rows {
                    let val = work.get(r, c) - bs * v[r - i];
                    work.set(r, c, val);
                }
            }
            // Accumulate Q ← Q·H.
            for r in 0..rows {
                let s: f64 = (i..rows).map(|c| q.get(r, c) * v[c - i]).sum();
                let bs = beta * s;
                for c in i..rows {
                    let val = q.get(r, c) - bs * v[c - i];
                    q.set(r, c, val);
                }
            }
        }
        rank += 1;
    }
    (q, rank, perm)
}

/// Numerical rank of a matrix at the given absolute tolerance.
pub fn rank(m: &Matrix, tol_rank: f64) -> usize {
    householder_qr(m, tol_rank).1
}

/// Rank and orthonormal basis of the null space of `Mᵀ`.
///
/// The basis is the trailing block of the orthogonal factor of a
/// column-pivoted Householder QR of `M`; pivot ties within `tol_rank` break to
/// the lowest index, and each basis column is sign-normalized so its largest
/// absolute component is positive, making the output deterministic.
///
/// `tol_rank` is an absolute threshold on trailing column norms; use
/// [`default_rank_tol`] for the standard scale-relative choice. A full-rank
/// input yields an empty basis.
pub fn nullspace_of_transpose(m: &Matrix, tol_rank: f64) -> NullspaceBasis {
    let (q, rank, _) = householder_qr(m, tol_rank);
    let rows = m.rows();
    if rank >= rows {
        return NullspaceBasis { rank, basis: None };
    }
    let mut basis = Matrix::from_fn(rows, rows - rank, |i, j| q.get(i, rank + j));
    for c in 0..basis.cols() {
        canonicalize_column_sign(&mut basis, c);
    }
    NullspaceBasis { rank, basis: Some(basis) }
}

/// Orthonormal basis of the column space of `m` (the leading QR block).
///
/// Used for subspace-membership tests such as `ι ∈ col(A)`.
pub fn orthonormal_range(m: &Matrix, tol_rank: f64) -> Matrix {
    let (q, rank, _) = householder_qr(m, tol_rank);
    let r = rank.max(1).min(m.rows());
    Matrix::from_fn(m.rows(), r, |i, j| q.get(i, j))
}

/// Flip the sign of column `c` so its largest-magnitude entry is positive.
fn canonicalize_column_sign(m: &mut Matrix, c: usize) {
    let mut best = 0usize;
    let mut best_abs = 0.0_f64;
    for r in 0..m.rows() {
        let a = m.get(r, c).abs();
        if a > best_abs {
            best_abs = a;
            best = r;
        }
    }
    if m.get(best, c) < 0.0 {
        for r in 0..m.rows() {
            let v = -m.get(r, c);
            m.set(r, c, v);
        }
    }
}

/// Solve the square system `M x = b` by Gaussian elimination with scaled
/// partial pivoting.
///
/// The residual satisfies `‖Mx − b‖∞ ≤ tol_solve × (‖M‖∞‖x‖∞ + ‖b‖∞)` on
/// well-conditioned inputs.
///
/// # Errors
/// `SingularMatrix` when a pivot magnitude falls below
/// `tol_pivot × (row scale)`, `DimensionMismatch` when shapes do not conform.
pub fn solve_linear(m: &Matrix, b: &[f64]) -> Result<Vec<f64>, LinAlgError> {
    let n = m.rows();
    if m.cols() != n {
        return Err(LinAlgError::DimensionMismatch(format!(
            "solve_linear needs a square matrix, got {}×{}",
            m.rows(),
            m.cols()
        )));
    }
    if b.len() != n {
        return Err(LinAlgError::DimensionMismatch(format!(
            "right-hand side length {} does not match n = {n}",
            b.len()
        )));
    }

    let mut a = m.clone();
    let mut rhs = b.to_vec();
    // Row scales from the original matrix; all-zero rows are singular at once.
    let scales: Vec<f64> = (0..n).map(|r| inf_norm(a.row(r))).collect();
    let mut rows: Vec<usize> = (0..n).collect();

    for k in 0..n {
        // Pick the remaining row with the largest scaled pivot.
        let (best_pos, best_ratio) = (k..n)
            .map(|p| {
                let r = rows[p];
                let s = scales[r];
                let ratio = if s > 0.0 { a.get(r, k).abs() / s } else { 0.0 };
                (p, ratio)
            })
            .fold((k, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        let _ = best_ratio;
        rows.swap(k, best_pos);
        let prow = rows[k];
        let pivot = a.get(prow, k);
        let tol = TOL_PIVOT_FACTOR * scales[prow];
        if pivot.abs() <= tol {
            return Err(LinAlgError::SingularMatrix { step: k, pivot: pivot.abs(), tol });
        }
        for p in (k + 1)..n {
            let r = rows[p];
            let factor = a.get(r, k) / pivot;
            if factor == 0.0 {
                continue;
            }
            a.set(r, k, 0.0);
            for c in (k + 1)..n {
                let val = a.get(r, c) - factor * a.get(prow, c);
                a.set(r, c, val);
            }
            rhs[r] -= factor * rhs[prow];
        }
    }

    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let r = rows[k];
        let mut acc = rhs[r];
        for c in (k + 1)..n {
            acc -= a.get(r, c) * x[c];
        }
        x[k] = acc / a.get(r, k);
    }
    Ok(x)
}

/// Symmetric eigendecomposition (values ascending, matching eigenvector
/// columns) computed by cyclic Jacobi rotations.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Eigenvalues in ascending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors; column `j` pairs with `values[j]`. Each
    /// column's largest-magnitude entry is made positive for determinism.
    pub vectors: Matrix,
}

/// Eigenvalues of a symmetric matrix, sorted ascending.
///
/// Sweeps cyclic Jacobi rotations until the off-diagonal Frobenius norm drops
/// below `1e−12 × ‖S‖F`.
///
/// # Errors
/// `NotSymmetric` when `‖S − Sᵀ‖∞` exceeds the symmetry tolerance.
pub fn symmetric_eigenvalues(s: &Matrix) -> Result<Vec<f64>, LinAlgError> {
    Ok(symmetric_eigen(s)?.values)
}

/// Full symmetric eigendecomposition via cyclic Jacobi (see
/// [`symmetric_eigenvalues`] for the termination rule).
pub fn symmetric_eigen(s: &Matrix) -> Result<SymmetricEigen, LinAlgError> {
    let n = s.rows();
    if s.cols() != n {
        return Err(LinAlgError::DimensionMismatch(format!(
            "eigendecomposition needs a square matrix, got {}×{}",
            s.rows(),
            s.cols()
        )));
    }
    let asym = s.max_asymmetry();
    let tol_sym = TOL_SYM_FACTOR * s.max_abs().max(1.0);
    if asym > tol_sym {
        return Err(LinAlgError::NotSymmetric(asym));
    }

    // Work on the symmetrized copy so tiny input asymmetries cannot bias sweeps.
    let mut a = Matrix::from_fn(n, n, |i, j| 0.5 * (s.get(i, j) + s.get(j, i)));
    let mut v = Matrix::identity(n);
    let tol = TOL_EIG_FACTOR * a.norm_frobenius();

    const MAX_SWEEPS: usize = 100;
    let mut converged = n <= 1 || off_diagonal_frobenius(&a) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= MAX_SWEEPS {
            return Err(LinAlgError::NoConvergence(MAX_SWEEPS));
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;

                a.set(p, p, app - t * apq);
                a.set(q, q, aqq + t * apq);
                a.set(p, q, 0.0);
                a.set(q, p, 0.0);
                for r in 0..n {
                    if r == p || r == q {
                        continue;
                    }
                    let arp = a.get(r, p);
                    let arq = a.get(r, q);
                    a.set(r, p, c * arp - sn * arq);
                    a.set(p, r, c * arp - sn * arq);
                    a.set(r, q, sn * arp + c * arq);
                    a.set(q, r, sn * arp + c * arq);
                }
                for r in 0..n {
                    let vrp = v.get(r, p);
                    let vrq = v.get(r, q);
                    v.set(r, p, c * vrp - sn * vrq);
                    v.set(r, q, sn * vrp + c * vrq);
                }
            }
        }
        sweeps += 1;
        converged = off_diagonal_frobenius(&a) <= tol;
    }

    // Sort ascending with a stable index tie-break, canonicalize vector signs.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        a.get(i, i).partial_cmp(&a.get(j, j)).expect("finite eigenvalues").then(i.cmp(&j))
    });
    let values: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = Matrix::from_fn(n, n, |r, c| v.get(r, order[c]));
    for c in 0..n {
        canonicalize_column_sign(&mut vectors, c);
    }
    Ok(SymmetricEigen { values, vectors })
}

fn off_diagonal_frobenius(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut acc = 0.0;
    for p in 0..n {
        for q in 0..n {
            if p != q {
                acc += a.get(p, q).powi(2);
            }
        }
    }
    acc.sqrt()
}

/// Attempt a Cholesky factorization, reporting whether the matrix is positive
/// definite at the pivot threshold `tol_psd` (absolute, on the pivots).
///
/// On success returns the lower factor `L` with `LLᵀ = S`.
pub fn cholesky(s: &Matrix, tol_psd: f64) -> Option<Matrix> {
    let n = s.rows();
    if s.cols() != n {
        return None;
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = s.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k).powi(2);
        }
        if diag <= tol_psd {
            return None;
        }
        let dsqrt = diag.sqrt();
        l.set(j, j, dsqrt);
        for i in (j + 1)..n {
            let mut acc = s.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / dsqrt);
        }
    }
    Some(l)
}

/// Solve `L Lᵀ x = b` given a Cholesky factor `L`.
pub fn cholesky_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    debug_assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut acc = b[i];
        for k in 0..i {
            acc -= l.get(i, k) * y[k];
        }
        y[i] = acc / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = y[i];
        for k in (i + 1)..n {
            acc -= l.get(k, i) * x[k];
        }
        x[i] = acc / l.get(i, i);
    }
    x
}

/// Symmetric positive semidefinite square root `S^{1/2}` via the Jacobi
/// eigendecomposition; negative eigenvalues within noise are clamped to zero.
pub fn psd_sqrt(s: &Matrix) -> Result<Matrix, LinAlgError> {
    let eig = symmetric_eigen(s)?;
    let n = s.rows();
    let v = &eig.vectors;
    let roots: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0).sqrt()).collect();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += v.get(i, k) * roots[k] * v.get(j, k);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// Solve the bordered stationarity system
///
/// ```text
/// [ 2C  D ] [ v ]   [ 0 ]
/// [ Dᵀ  0 ] [ π ] = [ d ]
/// ```
///
/// `C` must be symmetric (m×m); `D` is m×p; `d` has length p. When the
/// bordered matrix is nonsingular the unique solution is returned (row-pivoted
/// elimination). When it is singular, the minimum-Euclidean-norm solution of
/// the consistent system is computed through the rank-revealing symmetric
/// eigendecomposition of the bordered matrix (pseudo-inverse apply), which is
/// deterministic for a fixed input.
///
/// # Errors
/// `NotSymmetric` when `C` fails the symmetry tolerance; `DimensionMismatch`
/// on nonconforming shapes; `InfeasibleConstraints` when the right-hand side
/// is not in the range of the bordered operator.
pub fn solve_bordered_kkt(
    c: &Matrix,
    d_mat: &Matrix,
    d_vec: &[f64],
) -> Result<(Vec<f64>, Vec<f64>), LinAlgError> {
    let m = c.rows();
    if c.cols() != m {
        return Err(LinAlgError::DimensionMismatch("C must be square".into()));
    }
    let asym = c.max_asymmetry();
    let tol_sym = TOL_SYM_FACTOR * c.max_abs().max(1.0);
    if asym > tol_sym {
        return Err(LinAlgError::NotSymmetric(asym));
    }
    if d_mat.rows() != m {
        return Err(LinAlgError::DimensionMismatch(format!(
            "D has {} rows but C is {m}×{m}",
            d_mat.rows()
        )));
    }
    let p = d_mat.cols();
    if d_vec.len() != p {
        return Err(LinAlgError::DimensionMismatch(format!(
            "d has length {} but D has {p} columns",
            d_vec.len()
        )));
    }

    let n = m + p;
    let mut k = Matrix::zeros(n, n);
    for i in 0..m {
        for j in 0..m {
            k.set(i, j, 2.0 * c.get(i, j));
        }
        for j in 0..p {
            k.set(i, m + j, d_mat.get(i, j));
            k.set(m + j, i, d_mat.get(i, j));
        }
    }
    let mut rhs = vec![0.0; n];
    rhs[m..].copy_from_slice(d_vec);

    let x = match solve_linear(&k, &rhs) {
        Ok(x) => x,
        Err(LinAlgError::SingularMatrix { .. }) => {
            // Minimum-norm solution through the spectral pseudo-inverse.
            let eig = symmetric_eigen(&k)?;
            let lmax = eig.values.iter().fold(0.0_f64, |a, &b| a.max(b.abs()));
            let cut = TOL_RANK_FACTOR * lmax.max(1.0);
            let vt_rhs: Vec<f64> = (0..n)
                .map(|j| (0..n).map(|i| eig.vectors.get(i, j) * rhs[i]).sum::<f64>())
                .collect();
            (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| eig.values[j].abs() > cut)
                        .map(|j| eig.vectors.get(i, j) * vt_rhs[j] / eig.values[j])
                        .sum::<f64>()
                })
                .collect()
        }
        Err(e) => return Err(e),
    };

    // Verify both KKT blocks; an inconsistent (singular) system shows up here.
    let resid = {
        let kx = k.mul_vec(&x);
        kx.iter().zip(&rhs).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    };
    let scale = k.norm_inf() * inf_norm(&x) + inf_norm(&rhs);
    let tol = TOL_SOLVE * scale.max(1.0);
    if resid > tol {
        return Err(LinAlgError::InfeasibleConstraints { residual: resid, tol });
    }

    Ok((x[..m].to_vec(), x[m..].to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "expected {b}, got {a} (tol {tol})");
    }

    /// Stacked constraint matrix for the one-way half-split: columns
    /// (1,2,2)ᵀ and (1,1,1)ᵀ.
    fn oneway_d() -> Matrix {
        Matrix::from_nested(&[vec![1.0, 1.0], vec![2.0, 1.0], vec![2.0, 1.0]]).unwrap()
    }

    fn oneway_c() -> Matrix {
        Matrix::from_nested(&[
            vec![1.0, 1.0, 1.0],
            vec![1.0, 2.0, 0.0],
            vec![1.0, 0.0, 2.0],
        ])
        .unwrap()
    }

    /// 5×5 overlap matrix of the two-way half-split design.
    fn twoway_c() -> Matrix {
        Matrix::from_nested(&[
            vec![1.0, 1.0, 1.0, 1.0, 1.0],
            vec![1.0, 2.0, 0.0, 1.0, 1.0],
            vec![1.0, 0.0, 2.0, 1.0, 1.0],
            vec![1.0, 1.0, 1.0, 2.0, 0.0],
            vec![1.0, 1.0, 1.0, 0.0, 2.0],
        ])
        .unwrap()
    }

    fn twoway_d() -> Matrix {
        Matrix::from_nested(&[
            vec![1.0, 1.0, 1.0],
            vec![2.0, 1.0, 1.0],
            vec![2.0, 1.0, 1.0],
            vec![1.0, 2.0, 1.0],
            vec![1.0, 2.0, 1.0],
        ])
        .unwrap()
    }

    #[test]
    fn solve_identity_returns_rhs() {
        let m = Matrix::identity(2);
        let x = solve_linear(&m, &[3.0, -1.0]).unwrap();
        assert_eq!(x, vec![3.0, -1.0]);
    }

    #[test]
    fn solve_two_by_two_hand_elimination() {
        // [[2,1],[1,3]] (1,1)ᵀ = (3,4)ᵀ.
        let m = Matrix::from_nested(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let x = solve_linear(&m, &[3.0, 4.0]).unwrap();
        assert_close(x[0], 1.0, 1e-14);
        assert_close(x[1], 1.0, 1e-14);
    }

    #[test]
    fn solve_detects_rank_deficiency() {
        let m = Matrix::from_nested(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let err = solve_linear(&m, &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, LinAlgError::SingularMatrix { .. }));
    }

    #[test]
    fn nullspace_of_oneway_design() {
        // null(Dᵀ) = span((0, 1, −1)ᵀ/√2).
        let ns = nullspace_of_transpose(&oneway_d(), default_rank_tol(&oneway_d()));
        assert_eq!(ns.rank, 2);
        assert_eq!(ns.dim(), 1);
        let basis = ns.basis.unwrap();
        let w = basis.col(0);
        let r = 0.5_f64.sqrt();
        assert_close(w[0].abs(), 0.0, 1e-12);
        assert_close(w[1].abs(), r, 1e-12);
        assert_close(w[2].abs(), r, 1e-12);
        assert_close(w[1] + w[2], 0.0, 1e-12);
    }

    #[test]
    fn nullspace_of_twoway_design_is_two_dimensional() {
        let d = twoway_d();
        let ns = nullspace_of_transpose(&d, default_rank_tol(&d));
        assert_eq!(ns.rank, 3);
        assert_eq!(ns.dim(), 2);
        let basis = ns.basis.unwrap();
        // Orthonormal within machine precision, and wᵀD = 0 for every column.
        for a in 0..2 {
            for b in 0..2 {
                let g = dot(&basis.col(a), &basis.col(b));
                assert_close(g, if a == b { 1.0 } else { 0.0 }, 1e-12);
            }
            for c in 0..d.cols() {
                assert_close(dot(&basis.col(a), &d.col(c)), 0.0, 1e-10);
            }
            // Every null vector here contrasts within-axis halves: entry 0 is 0.
            assert_close(basis.col(a)[0], 0.0, 1e-10);
        }
    }

    #[test]
    fn nullspace_of_full_rank_matrix_is_empty() {
        let m = Matrix::identity(3);
        let ns = nullspace_of_transpose(&m, default_rank_tol(&m));
        assert_eq!(ns.rank, 3);
        assert_eq!(ns.dim(), 0);
        assert!(ns.basis.is_none());
    }

    #[test]
    fn eigenvalues_of_oneway_overlap() {
        let vals = symmetric_eigenvalues(&oneway_c()).unwrap();
        assert_close(vals[0], 0.0, 1e-12);
        assert_close(vals[1], 2.0, 1e-12);
        assert_close(vals[2], 3.0, 1e-12);
    }

    #[test]
    fn eigenvalues_of_twoway_overlap() {
        // Multiset {0, 0, 2, 2, 5} with distinct values {0, 2, 5}.
        let vals = symmetric_eigenvalues(&twoway_c()).unwrap();
        let expected = [0.0, 0.0, 2.0, 2.0, 5.0];
        for (got, want) in vals.iter().zip(expected) {
            assert_close(*got, want, 1e-10);
        }
    }

    #[test]
    fn eigenvalues_of_identity() {
        let vals = symmetric_eigenvalues(&Matrix::identity(4)).unwrap();
        assert_eq!(vals, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn eigen_rejects_asymmetric_input() {
        let m = Matrix::from_nested(&[vec![1.0, 2.0], vec![0.5, 1.0]]).unwrap();
        assert!(matches!(symmetric_eigenvalues(&m), Err(LinAlgError::NotSymmetric(_))));
    }

    #[test]
    fn eigenvectors_reconstruct_the_matrix() {
        let s = oneway_c();
        let eig = symmetric_eigen(&s).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += eig.vectors.get(i, k) * eig.values[k] * eig.vectors.get(j, k);
                }
                assert_close(acc, s.get(i, j), 1e-10);
            }
        }
    }

    #[test]
    fn kkt_reproduces_oneway_weights() {
        let (v, _pi) = solve_bordered_kkt(&oneway_c(), &oneway_d(), &[0.0, 1.0]).unwrap();
        assert_close(v[0], 2.0, 1e-10);
        assert_close(v[1], -0.5, 1e-10);
        assert_close(v[2], -0.5, 1e-10);
    }

    #[test]
    fn kkt_reproduces_twoway_weights() {
        let (v, _pi) =
            solve_bordered_kkt(&twoway_c(), &twoway_d(), &[0.0, 0.0, 1.0]).unwrap();
        assert_close(v[0], 3.0, 1e-10);
        for j in 1..5 {
            assert_close(v[j], -0.5, 1e-10);
        }
    }

    #[test]
    fn kkt_trivial_average() {
        // C = I, D = ι, d = (1) → the plain average ι/m.
        let c = Matrix::identity(4);
        let d = Matrix::from_fn(4, 1, |_, _| 1.0);
        let (v, _) = solve_bordered_kkt(&c, &d, &[1.0]).unwrap();
        for vi in v {
            assert_close(vi, 0.25, 1e-12);
        }
    }

    #[test]
    fn kkt_singular_system_returns_min_norm() {
        // C = 0 makes every feasible v optimal; the canonical representative
        // is the minimum-norm one: (1/2, 1/2).
        let c = Matrix::zeros(2, 2);
        let d = Matrix::from_fn(2, 1, |_, _| 1.0);
        let (v, pi) = solve_bordered_kkt(&c, &d, &[1.0]).unwrap();
        assert_close(v[0], 0.5, 1e-10);
        assert_close(v[1], 0.5, 1e-10);
        assert_close(pi[0], 0.0, 1e-10);
    }

    #[test]
    fn kkt_detects_inconsistent_constraints() {
        // Duplicated constraint columns demanding different values: no v has
        // ιᵀv = 0 and ιᵀv = 1 at once. (Deliberately violates the full-rank
        // precondition to reach the inconsistent branch.)
        let c = Matrix::zeros(2, 2);
        let d = Matrix::from_nested(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let err = solve_bordered_kkt(&c, &d, &[0.0, 1.0]).unwrap_err();
        assert!(matches!(err, LinAlgError::InfeasibleConstraints { .. }));
    }

    #[test]
    fn cholesky_accepts_pd_and_rejects_singular() {
        let pd = Matrix::from_nested(&[vec![4.0, 2.0], vec![2.0, 3.0]]).unwrap();
        let l = cholesky(&pd, 1e-12).unwrap();
        let back = l.mul(&l.transpose());
        assert_close(back.get(0, 0), 4.0, 1e-12);
        assert_close(back.get(1, 0), 2.0, 1e-12);
        assert!(cholesky(&oneway_c(), 1e-12).is_none());
    }

    #[test]
    fn psd_sqrt_squares_back() {
        let c = twoway_c();
        let root = psd_sqrt(&c).unwrap();
        let back = root.mul(&root);
        for i in 0..5 {
            for j in 0..5 {
                assert_close(back.get(i, j), c.get(i, j), 1e-9);
            }
        }
    }

    #[test]
    fn matrix_constructor_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(LinAlgError::NonFinite)
        ));
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    proptest! {
        /// Multiply-back residual stays within tolerance on diagonally
        /// dominant (hence well-conditioned) random systems.
        #[test]
        fn solve_linear_multiply_back(seed in 0u64..500) {
            let n = 1 + (seed as usize % 6);
            let mut vals = Vec::with_capacity(n * n);
            let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            for _ in 0..n * n {
                vals.push(next());
            }
            let mut m = Matrix::new(n, n, vals).unwrap();
            for i in 0..n {
                let rowsum: f64 = m.row(i).iter().map(|x| x.abs()).sum();
                m.set(i, i, rowsum + 1.0);
            }
            let b: Vec<f64> = (0..n).map(|_| next()).collect();
            let x = solve_linear(&m, &b).unwrap();
            let r = m.mul_vec(&x);
            let scale = m.norm_inf() * inf_norm(&x) + inf_norm(&b);
            for (ri, bi) in r.iter().zip(&b) {
                prop_assert!((ri - bi).abs() <= TOL_SOLVE * scale.max(1.0));
            }
        }

        /// Null-space basis is orthonormal and annihilates the input columns.
        #[test]
        fn nullspace_basis_is_orthonormal(seed in 0u64..500) {
            let m_rows = 3 + (seed as usize % 5);
            let m_cols = 1 + (seed as usize % 3);
            let mut state = seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(7);
            let mut next = || {
                state ^= state << 13;
                state ^= state >> 7;
                state ^= state << 17;
                (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
            };
            let vals: Vec<f64> = (0..m_rows * m_cols).map(|_| next()).collect();
            let m = Matrix::new(m_rows, m_cols, vals).unwrap();
            let ns = nullspace_of_transpose(&m, default_rank_tol(&m));
            prop_assert_eq!(ns.rank + ns.dim(), m_rows);
            if let Some(basis) = ns.basis {
                for a in 0..basis.cols() {
                    for b in 0..basis.cols() {
                        let g = dot(&basis.col(a), &basis.col(b));
                        let want = if a == b { 1.0 } else { 0.0 };
                        prop_assert!((g - want).abs() <= 1e-12);
                    }
                    for c in 0..m.cols() {
                        let r = dot(&basis.col(a), &m.col(c));
                        prop_assert!(r.abs() <= default_rank_tol(&m).max(1e-12));
                    }
                }
            }
        }
    }
}
