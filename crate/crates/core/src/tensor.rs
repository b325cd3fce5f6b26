//! Dense order-N tensors and the multilinear algebra MPCA is built on.
//!
//! Storage is first-index-fastest: element `(i_1, .., i_N)` (0-based here)
//! lives at `Σ_n i_n · Π_{m<n} I_m`. Mode indices in this API are 0-based.
//!
//! Mode-n matricization orders the columns so that, among the remaining
//! indices, `i_{n-1}` varies fastest, then `i_{n-2}` down to `i_0`, then
//! `i_{N-1}` down to `i_{n+1}` (slowest). With that ordering
//!
//! ```text
//! (X ×_0 U_0ᵀ … ×_{N-1} U_{N-1}ᵀ)_(n) = U_nᵀ · X_(n) · (U_{n+1} ⊗ … ⊗ U_{N-1} ⊗ U_0 ⊗ … ⊗ U_{n-1})
//! ```
//!
//! which is the identity [`phi_kron`] is built for.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Column-major (first-index-fastest) real matrix.
pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::InvalidArgument("tensor order must be at least 1".into()));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("zero-length mode in dims {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        let len = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![0.0; len])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let mut t = Tensor::zeros(dims)?;
        let mut idx = vec![0usize; dims.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            increment(&mut idx, dims);
        }
        Ok(t)
    }

    /// Order-2 tensor holding the matrix entries.
    pub fn from_matrix(m: &Matrix) -> Self {
        Tensor {
            dims: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        let mut off = 0;
        let mut stride = 1;
        for (&i, &d) in idx.iter().zip(&self.dims) {
            debug_assert!(i < d);
            off += i * stride;
            stride *= d;
        }
        off
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets an order-2 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        match self.dims.as_slice() {
            [r, c] => Ok(Matrix::from_column_slice(*r, *c, &self.data)),
            [r] => Ok(Matrix::from_column_slice(*r, 1, &self.data)),
            _ => Err(Error::DimMismatch(format!(
                "expected an order-2 tensor, got dims {:?}",
                self.dims
            ))),
        }
    }

    fn check_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Tensor { dims: self.dims.clone(), data })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    pub fn add_assign_scaled(&mut self, other: &Tensor, c: f64) -> Result<()> {
        self.check_same_dims(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
        Ok(())
    }

    /// Keeps the first `len` slices along `mode`.
    pub fn truncate_mode(&self, mode: usize, len: usize) -> Result<Tensor> {
        check_mode(mode, self.order())?;
        if len == 0 || len > self.dims[mode] {
            return Err(Error::InvalidArgument(format!(
                "cannot keep {len} of {} slices along mode {mode}",
                self.dims[mode]
            )));
        }
        let mut dims = self.dims.clone();
        dims[mode] = len;
        Tensor::from_fn(&dims, |idx| self.get(idx))
    }
}

/// Odometer increment, first index fastest.
fn increment(idx: &mut [usize], dims: &[usize]) {
    for (i, &d) in idx.iter_mut().zip(dims) {
        *i += 1;
        if *i < d {
            return;
        }
        *i = 0;
    }
}

fn check_mode(mode: usize, order: usize) -> Result<()> {
    if mode >= order {
        return Err(Error::ModeOutOfRange { mode, order });
    }
    Ok(())
}

/// Column strides of the mode-n unfolding, indexed by mode (entry `mode` unused).
fn unfolding_strides(dims: &[usize], mode: usize) -> Vec<usize> {
    let n = dims.len();
    let mut strides = vec![0usize; n];
    let mut stride = 1;
    // fastest to slowest: mode-1 .. 0, then N-1 .. mode+1
    for m in (0..mode).rev().chain((mode + 1..n).rev()) {
        strides[m] = stride;
        stride *= dims[m];
    }
    strides
}

pub fn mode_n_matricize(x: &Tensor, mode: usize) -> Result<Matrix> {
    check_mode(mode, x.order())?;
    let dims = x.dims();
    let rows = dims[mode];
    let cols = x.len() / rows;
    let strides = unfolding_strides(dims, mode);
    let mut out = Matrix::zeros(rows, cols);
    let mut idx = vec![0usize; dims.len()];
    for &v in x.data() {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out[(idx[mode], col)] = v;
        increment(&mut idx, dims);
    }
    Ok(out)
}

pub fn mode_n_fold(m: &Matrix, mode: usize, dims: &[usize]) -> Result<Tensor> {
    check_mode(mode, dims.len())?;
    let total: usize = dims.iter().product();
    if m.nrows() != dims[mode] || m.nrows() * m.ncols() != total {
        return Err(Error::DimMismatch(format!(
            "{}x{} matrix cannot fold into {dims:?} along mode {mode}",
            m.nrows(),
            m.ncols()
        )));
    }
    let strides = unfolding_strides(dims, mode);
    let mut out = Tensor::zeros(dims)?;
    let mut idx = vec![0usize; dims.len()];
    for v in out.data.iter_mut() {
        let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        *v = m[(idx[mode], col)];
        increment(&mut idx, dims);
    }
    Ok(out)
}

/// `x ×_mode u`: replaces dimension `I_mode` by `u.nrows()`.
pub fn mode_n_product(x: &Tensor, u: &Matrix, mode: usize) -> Result<Tensor> {
    check_mode(mode, x.order())?;
    mode_product_impl(x, u, mode, false)
}

/// `x ×_mode uᵀ` without materializing the transpose.
pub fn mode_n_product_transposed(x: &Tensor, u: &Matrix, mode: usize) -> Result<Tensor> {
    check_mode(mode, x.order())?;
    mode_product_impl(x, u, mode, true)
}

fn mode_product_impl(x: &Tensor, u: &Matrix, mode: usize, transpose: bool) -> Result<Tensor> {
    let dims = x.dims();
    let inner = dims[mode];
    let (out_len, in_len) = if transpose {
        (u.ncols(), u.nrows())
    } else {
        (u.nrows(), u.ncols())
    };
    if in_len != inner {
        return Err(Error::DimMismatch(format!(
            "mode-{mode} product needs {inner} matrix {}, got {}x{}",
            if transpose { "rows" } else { "columns" },
            u.nrows(),
            u.ncols()
        )));
    }
    let left: usize = dims[..mode].iter().product();
    let right: usize = dims[mode + 1..].iter().product();
    let mut out_dims = dims.to_vec();
    out_dims[mode] = out_len;
    let mut out = vec![0.0; left * out_len * right];
    let xd = x.data();
    for r in 0..right {
        for i in 0..inner {
            let src = &xd[left * (i + inner * r)..left * (i + inner * r) + left];
            for j in 0..out_len {
                let w = if transpose { u[(i, j)] } else { u[(j, i)] };
                if w == 0.0 {
                    continue;
                }
                let dst = &mut out[left * (j + out_len * r)..left * (j + out_len * r) + left];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    Tensor::new(out_dims, out)
}

/// The N per-mode factor matrices `U_n ∈ R^{I_n × P_n}` of a multilinear projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    factors: Vec<Matrix>,
}

impl ProjectionSet {
    /// Checks shapes only (`1 ≤ P_n ≤ I_n`); see [`ProjectionSet::check_orthonormal`].
    pub fn new(factors: Vec<Matrix>) -> Result<Self> {
        if factors.is_empty() {
            return Err(Error::InvalidArgument("projection set needs at least one factor".into()));
        }
        for (n, f) in factors.iter().enumerate() {
            if f.ncols() == 0 || f.nrows() == 0 || f.ncols() > f.nrows() {
                return Err(Error::InvalidArgument(format!(
                    "factor {n} has shape {}x{}; need 1 <= P_n <= I_n",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        Ok(ProjectionSet { factors })
    }

    pub fn identity(dims: &[usize]) -> Self {
        ProjectionSet {
            factors: dims.iter().map(|&d| Matrix::identity(d, d)).collect(),
        }
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn factors(&self) -> &[Matrix] {
        &self.factors
    }

    pub fn factor(&self, mode: usize) -> &Matrix {
        &self.factors[mode]
    }

    pub fn set_factor(&mut self, mode: usize, u: Matrix) -> Result<()> {
        check_mode(mode, self.order())?;
        if u.nrows() != self.factors[mode].nrows() || u.ncols() == 0 || u.ncols() > u.nrows() {
            return Err(Error::DimMismatch(format!(
                "replacement factor {}x{} for mode {mode} with {} rows",
                u.nrows(),
                u.ncols(),
                self.factors[mode].nrows()
            )));
        }
        self.factors[mode] = u;
        Ok(())
    }

    pub fn input_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.ncols()).collect()
    }

    /// Largest deviation of any `UᵀU` from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        self.factors
            .iter()
            .map(|f| {
                let g = f.transpose() * f;
                let id = Matrix::identity(g.nrows(), g.ncols());
                (g - id).amax()
            })
            .fold(0.0, f64::max)
    }

    pub fn check_orthonormal(&self, tol: f64) -> Result<()> {
        let err = self.orthonormality_error();
        if err > tol {
            return Err(Error::Numerical(format!(
                "projection factors deviate from orthonormal by {err:e}"
            )));
        }
        Ok(())
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        if self.input_dims() != dims {
            return Err(Error::DimMismatch(format!(
                "projection expects {:?}, tensor has {dims:?}",
                self.input_dims()
            )));
        }
        Ok(())
    }
}

/// Applies `×_n U_nᵀ` (when `transpose`) or `×_n U_n` for every mode in ascending order.
pub fn multi_mode_project(x: &Tensor, p: &ProjectionSet, transpose: bool) -> Result<Tensor> {
    if transpose {
        p.check_input(x.dims())?;
    } else if p.ranks() != x.dims() {
        return Err(Error::DimMismatch(format!(
            "reconstruction expects {:?}, tensor has {:?}",
            p.ranks(),
            x.dims()
        )));
    }
    let mut y = x.clone();
    for (n, u) in p.factors().iter().enumerate() {
        y = mode_product_impl(&y, u, n, transpose)?;
    }
    Ok(y)
}

/// `X_(n) · phi_kron(p, n)` computed through mode products on every mode but `n`,
/// without forming the Kronecker chain.
pub fn partial_projection_unfolding(x: &Tensor, p: &ProjectionSet, mode: usize) -> Result<Matrix> {
    check_mode(mode, x.order())?;
    p.check_input(x.dims())?;
    let mut y = x.clone();
    for (m, u) in p.factors().iter().enumerate() {
        if m != mode {
            y = mode_product_impl(&y, u, m, true)?;
        }
    }
    mode_n_matricize(&y, mode)
}

pub fn kronecker(a: &Matrix, b: &Matrix) -> Matrix {
    let (p, q) = (b.nrows(), b.ncols());
    let mut out = Matrix::zeros(a.nrows() * p, a.ncols() * q);
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for l in 0..q {
                for k in 0..p {
                    out[(i * p + k, j * q + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

/// Column-wise Kronecker product of two matrices with equal column counts.
pub fn khatri_rao(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.ncols() != b.ncols() {
        return Err(Error::DimMismatch(format!(
            "Khatri-Rao needs equal column counts, got {} and {}",
            a.ncols(),
            b.ncols()
        )));
    }
    let mut out = Matrix::zeros(a.nrows() * b.nrows(), a.ncols());
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            for k in 0..b.nrows() {
                out[(i * b.nrows() + k, j)] = a[(i, j)] * b[(k, j)];
            }
        }
    }
    Ok(out)
}

/// `U_{n+1} ⊗ … ⊗ U_{N-1} ⊗ U_0 ⊗ … ⊗ U_{n-1}`; the 1×1 identity when N = 1.
pub fn phi_kron(p: &ProjectionSet, mode: usize) -> Result<Matrix> {
    let n = p.order();
    check_mode(mode, n)?;
    let mut acc = Matrix::identity(1, 1);
    for m in (mode + 1..n).chain(0..mode) {
        acc = kronecker(&acc, p.factor(m));
    }
    Ok(acc)
}

/// Mode-0 fibers stacked, i.e. the storage order.
pub fn vectorize(x: &Tensor) -> Vec<f64> {
    x.data().to_vec()
}

pub fn inner_product(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.check_same_dims(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum())
}

pub fn frobenius_norm(x: &Tensor) -> f64 {
    squared_norm(x).sqrt()
}

pub fn squared_norm(x: &Tensor) -> f64 {
    x.data().iter().map(|v| v * v).sum()
}

/// Arithmetic mean of equally-shaped tensors, accumulated in input order.
pub fn mean_tensor(xs: &[Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty sample set".into()))?;
    let mut acc = Tensor::zeros(first.dims())?;
    for x in xs {
        acc.add_assign_scaled(x, 1.0)?;
    }
    Ok(acc.scale(1.0 / xs.len() as f64))
}
