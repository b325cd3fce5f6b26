//! Deterministic left SVD with a fixed sign convention, and the incremental
//! update that extends the left SVD of `A` to that of `[A B]` from
//! `(U_A, Σ_A, B)` alone.
//!
//! The dense SVD kernel is faer's, run single-threaded. Everything around it
//! (ordering, rank handling, basis completion, signs) is fixed here so
//! results are reproducible bit for bit.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Residual columns with norm at or below this fraction of `‖B‖_F` count as zero.
pub const RESIDUAL_RANK_TOL: f64 = 1e-12;

/// A full left singular basis and its singular values.
///
/// `u` is m×m orthonormal; `s` has length m, sorted descending, padded with
/// zeros past the rank. In each column of `u` the entry of largest magnitude
/// is positive (first such row on exact ties).
#[derive(Debug, Clone, PartialEq)]
pub struct SingularState {
    u: Matrix,
    s: Vec<f64>,
}

impl SingularState {
    /// Validates shape, ordering and sign convention; orthonormality is checked to 1e-10.
    pub fn new(u: Matrix, s: Vec<f64>) -> Result<Self> {
        let m = u.nrows();
        if u.ncols() != m || s.len() != m || m == 0 {
            return Err(Error::DimMismatch(format!(
                "singular state needs an m x m basis and m values, got {}x{} and {}",
                u.nrows(),
                u.ncols(),
                s.len()
            )));
        }
        if s.iter().any(|v| !v.is_finite() || *v < 0.0) || s.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "singular values must be finite, nonnegative and descending".into(),
            ));
        }
        let state = SingularState { u, s };
        let err = state.orthonormality_error();
        if err > 1e-10 {
            return Err(Error::Numerical(format!("basis not orthonormal (error {err:e})")));
        }
        Ok(state)
    }

    pub fn u(&self) -> &Matrix {
        &self.u
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.s
    }

    pub fn dim(&self) -> usize {
        self.s.len()
    }

    pub fn energy(&self) -> f64 {
        self.s.iter().map(|v| v * v).sum()
    }

    pub fn orthonormality_error(&self) -> f64 {
        let m = self.dim();
        (self.u.transpose() * &self.u - Matrix::identity(m, m)).amax()
    }

    pub fn into_parts(self) -> (Matrix, Vec<f64>) {
        (self.u, self.s)
    }
}

fn check_finite(a: &Matrix, what: &'static str) -> Result<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Flips columns so each column's largest-magnitude entry is positive.
pub fn apply_sign_convention(u: &mut Matrix) {
    for mut col in u.column_iter_mut() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > best_abs {
                best_abs = v.abs();
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.neg_mut();
        }
    }
}

/// Extends the orthonormal columns of `basis` to a full m×m basis by
/// orthonormalizing coordinate directions in index order.
fn complete_basis(basis: Matrix, m: usize) -> Matrix {
    let mut cols: Vec<DVector<f64>> = basis.column_iter().map(|c| c.into_owned()).collect();
    // Some coordinate direction always clears this bar while the basis is incomplete.
    let accept = 0.5 / (m as f64).sqrt();
    for i in 0..m {
        if cols.len() == m {
            break;
        }
        let mut v = DVector::zeros(m);
        v[i] = 1.0;
        for _ in 0..2 {
            for c in &cols {
                let d = c.dot(&v);
                v.axpy(-d, c, 1.0);
            }
        }
        let norm = v.norm();
        if norm > accept {
            cols.push(v / norm);
        }
    }
    debug_assert_eq!(cols.len(), m);
    Matrix::from_columns(&cols)
}

/// Thin left factor and singular values from faer's SVD (nalgebra's
/// Golub–Kahan kernel loses accuracy on some small dense inputs).
fn thin_svd(a: &Matrix) -> Result<(Matrix, Vec<f64>)> {
    let (m, k) = a.shape();
    let fa = faer::Mat::<f64>::from_fn(m, k, |i, j| a[(i, j)]);
    let svd = fa
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s) = (svd.U(), svd.S().column_vector());
    let u_thin = Matrix::from_fn(m, u.ncols(), |i, j| u[(i, j)]);
    Ok((u_thin, (0..s.nrows()).map(|i| s[i]).collect()))
}

/// Full left m×m basis and m singular values of an m×k matrix.
pub fn left_svd(a: &Matrix) -> Result<SingularState> {
    let (m, k) = (a.nrows(), a.ncols());
    if m == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("cannot factor a {m}x{k} matrix")));
    }
    check_finite(a, "SVD input")?;
    let (u_thin, raw) = thin_svd(a)?;

    // descending, ties kept in backend order
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&i, &j| raw[j].total_cmp(&raw[i]).then(i.cmp(&j)));

    let s_max = order.first().map(|&i| raw[i]).unwrap_or(0.0);
    let rank_tol = (m.max(k) as f64) * f64::EPSILON * s_max;
    let kept: Vec<usize> = order.iter().copied().filter(|&i| raw[i] > rank_tol).collect();

    let mut s: Vec<f64> = order.iter().map(|&i| raw[i].max(0.0)).collect();
    s.resize(m, 0.0);

    let mut basis = Matrix::zeros(m, kept.len());
    for (c, &i) in kept.iter().enumerate() {
        basis.set_column(c, &u_thin.column(i));
    }
    let mut u = if kept.len() == m { basis } else { complete_basis(basis, m) };
    apply_sign_convention(&mut u);
    Ok(SingularState { u, s })
}

/// Left SVD plus a right factor `v` (k×m) with `a ≈ u·diag(s)·vᵀ`.
///
/// Columns of `v` belonging to numerically zero singular values are zero.
pub fn svd_full(a: &Matrix) -> Result<(SingularState, Matrix)> {
    let state = left_svd(a)?;
    let m = state.dim();
    let s_max = state.s.first().copied().unwrap_or(0.0);
    let tol = (m.max(a.ncols()) as f64) * f64::EPSILON * s_max;
    let atu = a.transpose() * &state.u;
    let mut v = Matrix::zeros(a.ncols(), m);
    for (j, &sj) in state.s.iter().enumerate() {
        if sj > tol {
            v.set_column(j, &(atu.column(j) / sj));
        }
    }
    Ok((state, v))
}

/// Left SVD of `[A B]` from the left SVD of `A` and the new columns `B`.
///
/// 1. residual `R = B − U_A U_Aᵀ B`;
/// 2. column-normalize `R` into `Ř`, leaving (numerically) zero columns at zero;
/// 3. SVD of `M = [[Σ_A, U_AᵀB], [0, E]]` with `E = diag(‖r_j‖)`;
/// 4. `U_C` = first m columns of `[U_A Ř]·U_M`, `Σ_C` = first m singular values.
///
/// Rows of `M` belonging to zero residual columns are identically zero and
/// are dropped before the SVD; they do not change `U_M`'s leading block.
pub fn incremental_update(state: &SingularState, b: &Matrix) -> Result<SingularState> {
    let m = state.dim();
    if b.nrows() != m {
        return Err(Error::DimMismatch(format!(
            "update block has {} rows, basis has {m}",
            b.nrows()
        )));
    }
    check_finite(b, "update block")?;
    let p = b.ncols();
    if p == 0 {
        return Ok(state.clone());
    }

    let utb = state.u.transpose() * b;
    let residual = b - &state.u * &utb;
    let cutoff = RESIDUAL_RANK_TOL * b.norm();
    let nonzero: Vec<(usize, f64)> = residual
        .column_iter()
        .enumerate()
        .map(|(j, c)| (j, c.norm()))
        .filter(|&(_, n)| n > cutoff)
        .collect();
    let q = nonzero.len();

    let mut mm = Matrix::zeros(m + q, m + p);
    for (i, &si) in state.s.iter().enumerate() {
        mm[(i, i)] = si;
    }
    mm.view_mut((0, m), (m, p)).copy_from(&utb);
    for (row, &(j, norm)) in nonzero.iter().enumerate() {
        mm[(m + row, m + j)] = norm;
    }

    let inner = left_svd(&mm)?;
    let lead = inner.u.columns(0, m);
    let mut u_c = &state.u * lead.rows(0, m);
    if q > 0 {
        let r_check = Matrix::from_columns(
            &nonzero
                .iter()
                .map(|&(j, norm)| residual.column(j) / norm)
                .collect::<Vec<_>>(),
        );
        u_c += r_check * lead.rows(m, q);
    }
    apply_sign_convention(&mut u_c);
    let s_c = inner.s[..m].to_vec();
    Ok(SingularState { u: u_c, s: s_c })
}

/// First `p` columns of the basis.
pub fn truncate_left(state: &SingularState, p: usize) -> Result<Matrix> {
    if p == 0 || p > state.dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {p} of {} singular vectors",
            state.dim()
        )));
    }
    Ok(state.u.columns(0, p).into_owned())
}

/// Orthogonal projector `U Uᵀ` onto the column span of `u`.
pub fn projector(u: &Matrix) -> Matrix {
    u * u.transpose()
}

/// Copy of `a` with each column's sign chosen to best match the same column of `reference`.
pub fn align_columns(a: &Matrix, reference: &Matrix) -> Matrix {
    let mut out = a.clone();
    for (mut col, r) in out.column_iter_mut().zip(reference.column_iter()) {
        if col.dot(&r) < 0.0 {
            col.neg_mut();
        }
    }
    out
}

/// Largest entrywise difference between `a` and `b` after per-column sign alignment.
pub fn max_abs_diff_up_to_sign(a: &Matrix, b: &Matrix) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    (align_columns(a, b) - b).amax()
}
