//! Dense multilinear algebra shared by the samplers: B-spline design
//! matrices with curvature penalties, Kronecker and Khatri-Rao products,
//! and mode-wise matricizations of third-order tensors.
//!
//! Conventions used throughout the crate:
//! * a basis design stores evaluations as an `L x K` matrix `theta`, one
//!   row per basis function, one column per grid point;
//! * `Tensor3` holds `(N, J, K)` data in row-major (C) order, `k` fastest;
//! * `vec` of a matrix means column-major stacking, which is exactly
//!   nalgebra's storage order.

mod bspline;

pub use bspline::{build_bspline_basis, build_penalty_matrix};

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Ordered observation times on the unit interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    /// Strictly increasing, finite points inside `[0, 1]`.
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "time grid needs at least 2 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite() || *t < 0.0 || *t > 1.0) {
            return Err(Error::InvalidConfig(
                "time grid points must be finite and lie in [0, 1]".into(),
            ));
        }
        if points.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "time grid points must be strictly increasing".into(),
            ));
        }
        Ok(TimeGrid { points })
    }

    /// The grid `{1/K, 2/K, ..., 1}` used by the simulation generators.
    pub fn uniform(k: usize) -> Self {
        let points = (1..=k).map(|i| i as f64 / k as f64).collect();
        TimeGrid { points }
    }

    /// Build a grid from raw times by affinely rescaling them onto `[0, 1]`.
    /// Input must be strictly increasing; the span must be positive.
    pub fn from_raw_times(raw: &[f64]) -> Result<Self> {
        if raw.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 distinct observation times, got {}",
                raw.len()
            )));
        }
        if raw.iter().any(|t| !t.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation time".into()));
        }
        if raw.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(
                "observation times must be strictly increasing".into(),
            ));
        }
        let (lo, hi) = (raw[0], raw[raw.len() - 1]);
        let span = hi - lo;
        let points = raw.iter().map(|t| ((t - lo) / span).clamp(0.0, 1.0)).collect();
        Ok(TimeGrid { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }
}

/// A spline basis evaluated on a grid together with its curvature penalty.
///
/// `theta` is `L x K` (basis functions in rows), `penalty` is the `L x L`
/// Gram matrix of second derivatives. `knots` is the full clamped knot
/// vector of length `L + degree + 1`; it is empty for the identity design.
#[derive(Debug, Clone)]
pub struct SplineDesign {
    pub theta: DMatrix<f64>,
    pub penalty: DMatrix<f64>,
    pub degree: usize,
    pub knots: Vec<f64>,
}

impl SplineDesign {
    pub fn basis_dim(&self) -> usize {
        self.theta.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.theta.ncols()
    }

    /// The unsmoothed design: `theta = I_K`, zero penalty. Coefficient
    /// draws then amount to one free value per grid point.
    pub fn identity(k: usize) -> Self {
        SplineDesign {
            theta: DMatrix::identity(k, k),
            penalty: DMatrix::zeros(k, k),
            degree: 0,
            knots: Vec::new(),
        }
    }

    /// True when this is exactly the identity design, which unlocks a
    /// cheaper per-column coefficient draw.
    pub(crate) fn is_identity(&self) -> bool {
        let l = self.theta.nrows();
        if l != self.theta.ncols() {
            return false;
        }
        if self.penalty.iter().any(|v| *v != 0.0) {
            return false;
        }
        self.theta == DMatrix::identity(l, l)
    }
}

/// Kronecker product `A (x) B`.
pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let (p, q) = b.shape();
    let mut out = DMatrix::zeros(m * p, n * q);
    for i in 0..m {
        for j in 0..n {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let mut block = out.view_mut((i * p, j * q), (p, q));
            for s in 0..p {
                for t in 0..q {
                    block[(s, t)] = aij * b[(s, t)];
                }
            }
        }
    }
    out
}

/// Column-wise Khatri-Rao product: column `r` of the result is
/// `kron(a_col_r, b_col_r)`. Both inputs must have the same column count.
pub fn khatri_rao(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "khatri_rao: column counts differ ({} vs {})",
            a.ncols(),
            b.ncols()
        )));
    }
    let (m, r) = a.shape();
    let n = b.nrows();
    let mut out = DMatrix::zeros(m * n, r);
    for c in 0..r {
        for i in 0..m {
            let aic = a[(i, c)];
            for j in 0..n {
                out[(i * n + j, c)] = aic * b[(j, c)];
            }
        }
    }
    Ok(out)
}

/// Matricization mode of a third-order tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    One,
    Two,
    Three,
}

/// Dense third-order tensor with dimensions `(N, J, K)`, stored row-major
/// (`k` fastest, then `j`, then `i`).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    dims: (usize, usize, usize),
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: (usize, usize, usize)) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(dims: (usize, usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::InvalidInput(format!(
                "tensor data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn from_fn(dims: (usize, usize, usize), mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut t = Tensor3::zeros(dims);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    let v = f(i, j, k);
                    t.set(i, j, k, v);
                }
            }
        }
        t
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims.1 + j) * self.dims.2 + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Sum of squared entries.
    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Rank-R CP reconstruction from factor matrices `V (N x R)`,
    /// `W (J x R)` and `U (K x R)`:
    /// `X[i,j,k] = sum_r V[i,r] W[j,r] U[k,r]`.
    pub fn from_cp(v: &DMatrix<f64>, w: &DMatrix<f64>, u: &DMatrix<f64>) -> Result<Self> {
        let r = v.ncols();
        if w.ncols() != r || u.ncols() != r {
            return Err(Error::InvalidInput(
                "from_cp: factor matrices must share the same column count".into(),
            ));
        }
        let dims = (v.nrows(), w.nrows(), u.nrows());
        let mut t = Tensor3::zeros(dims);
        for i in 0..dims.0 {
            for j in 0..dims.1 {
                for k in 0..dims.2 {
                    let mut acc = 0.0;
                    for c in 0..r {
                        acc += v[(i, c)] * w[(j, c)] * u[(k, c)];
                    }
                    t.set(i, j, k, acc);
                }
            }
        }
        Ok(t)
    }

    /// Mode-wise unfolding. Column orderings are fixed so that for a CP
    /// tensor with factors `(V, W, U)`:
    /// * mode 1 (`N x JK`, column `k*J + j`): `X_(1) = V * khatri_rao(U, W)^T`
    /// * mode 2 (`J x NK`, column `k*N + i`): `X_(2) = W * khatri_rao(U, V)^T`
    /// * mode 3 (`K x NJ`, column `j*N + i`): `X_(3) = U * khatri_rao(W, V)^T`
    pub fn matricize(&self, mode: Mode) -> DMatrix<f64> {
        let (n, j_dim, k_dim) = self.dims;
        match mode {
            Mode::One => DMatrix::from_fn(n, j_dim * k_dim, |i, c| {
                let (k, j) = (c / j_dim, c % j_dim);
                self.get(i, j, k)
            }),
            Mode::Two => DMatrix::from_fn(j_dim, n * k_dim, |j, c| {
                let (k, i) = (c / n, c % n);
                self.get(i, j, k)
            }),
            Mode::Three => DMatrix::from_fn(k_dim, n * j_dim, |k, c| {
                let (j, i) = (c / n, c % n);
                self.get(i, j, k)
            }),
        }
    }

    /// Inverse of [`Tensor3::matricize`] for the given dimensions.
    pub fn from_matricization(
        mat: &DMatrix<f64>,
        mode: Mode,
        dims: (usize, usize, usize),
    ) -> Result<Self> {
        let (n, j_dim, k_dim) = dims;
        let expect = match mode {
            Mode::One => (n, j_dim * k_dim),
            Mode::Two => (j_dim, n * k_dim),
            Mode::Three => (k_dim, n * j_dim),
        };
        if mat.shape() != expect {
            return Err(Error::InvalidInput(format!(
                "from_matricization: expected shape {:?}, got {:?}",
                expect,
                mat.shape()
            )));
        }
        let mut t = Tensor3::zeros(dims);
        for i in 0..n {
            for j in 0..j_dim {
                for k in 0..k_dim {
                    let v = match mode {
                        Mode::One => mat[(i, k * j_dim + j)],
                        Mode::Two => mat[(j, k * n + i)],
                        Mode::Three => mat[(k, j * n + i)],
                    };
                    t.set(i, j, k, v);
                }
            }
        }
        Ok(t)
    }
}

/// Observation mask for a third-order tensor, same layout as [`Tensor3`].
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    dims: (usize, usize, usize),
    data: Vec<bool>,
}

impl Mask3 {
    pub fn filled(dims: (usize, usize, usize), value: bool) -> Self {
        Mask3 {
            dims,
            data: vec![value; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn from_data(dims: (usize, usize, usize), data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.0 * dims.1 * dims.2 {
            return Err(Error::InvalidInput(format!(
                "mask data length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        Ok(Mask3 { dims, data })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.data[(i * self.dims.1 + j) * self.dims.2 + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: bool) {
        let o = (i * self.dims.1 + j) * self.dims.2 + k;
        self.data[o] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count_observed(&self) -> usize {
        self.data.iter().filter(|b| **b).count()
    }
}
