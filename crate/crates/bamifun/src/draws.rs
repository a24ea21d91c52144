//! Shared conditional-draw kernels for the Gibbs samplers.
//!
//! Both the single-level and the multiway sampler reduce to the same two
//! Gaussian draws: independent rows with a common Gram matrix, and a
//! vectorized spline-coefficient draw whose precision is a Kronecker sum.
//! Keeping them here guarantees the multiway sampler collapses exactly to
//! the single-level one when the feature mode is trivial.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};
use crate::multilinear::{kronecker, SplineDesign};

/// Inverse-gamma rates are clamped at this floor instead of producing a
/// degenerate zero-rate draw.
pub(crate) const RATE_FLOOR: f64 = 1e-12;

/// Gram matrices with a larger condition number get ridge-stabilized.
pub(crate) const CONDITION_LIMIT: f64 = 1e12;

/// Relative ridge added to an ill-conditioned Gram's diagonal.
const GRAM_RIDGE: f64 = 1e-11;

/// A Gram eigenvalue below this fraction of the largest counts as zero:
/// the matrix is rank deficient at 64-bit resolution.
const SINGULAR_TOL: f64 = 1e-15;

fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Guard a symmetric Gram matrix before factorization: genuine rank
/// deficiency is an error, while a merely ill-conditioned Gram — which a
/// chain running an over-specified rank on nearly noiseless data can
/// produce transiently — gets a tiny relative ridge so the sweep survives.
fn stabilize_gram(mut gram: DMatrix<f64>, op: &'static str) -> Result<DMatrix<f64>> {
    let eig = gram.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.eigenvalues.iter().cloned().fold(f64::MAX, f64::min);
    if !(max.is_finite() && min.is_finite()) || max <= 0.0 || min <= max * SINGULAR_TOL {
        return Err(Error::SingularDesign {
            op,
            detail: format!("Gram matrix is singular (eigenvalue range {min:.3e} to {max:.3e})"),
        });
    }
    if max / min > CONDITION_LIMIT {
        let ridge = max * GRAM_RIDGE;
        log::warn!(
            "{op}: Gram condition number {:.3e} exceeds {CONDITION_LIMIT:.0e}; stabilizing with ridge {ridge:.3e}",
            max / min
        );
        for i in 0..gram.nrows() {
            gram[(i, i)] += ridge;
        }
    }
    Ok(gram)
}

/// Draw every row of an `n x r` coefficient matrix whose rows have
/// independent full conditionals
/// `N((G^T G)^{-1} G^T y_i, noise_var (G^T G)^{-1})`,
/// where `y_i` is row `i` of `y` (`n x m`) and `G` is `m x r`.
///
/// Rows are drawn in order, so the random stream is identical for any
/// caller presenting the same inputs.
pub(crate) fn draw_gaussian_rows<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    g: &DMatrix<f64>,
    noise_var: f64,
    op: &'static str,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if y.ncols() != g.nrows() {
        return Err(Error::InvalidInput(format!(
            "{op}: row length {} does not match design rows {}",
            y.ncols(),
            g.nrows()
        )));
    }
    let r = g.ncols();
    let gram = stabilize_gram(g.transpose() * g, op)?;
    let chol = Cholesky::new(gram).ok_or_else(|| Error::SingularDesign {
        op,
        detail: "Cholesky factorization of the Gram matrix failed".into(),
    })?;
    // all posterior means at once: (G^T G)^{-1} G^T Y^T is r x n
    let means = chol.solve(&(g.transpose() * y.transpose()));
    let sd = noise_var.max(0.0).sqrt();
    let l_t = chol.l().transpose();
    let mut out = DMatrix::zeros(y.nrows(), r);
    for i in 0..y.nrows() {
        let z = standard_normal_vector(r, rng) * sd;
        let noise = l_t
            .solve_upper_triangular(&z)
            .ok_or_else(|| Error::NumericalFailure {
                op,
                detail: "triangular solve failed while sampling".into(),
            })?;
        for c in 0..r {
            out[(i, c)] = means[(c, i)] + noise[c];
        }
    }
    Ok(out)
}

/// Draw the spline coefficient matrix `B` (`r x l`) of the model
/// `Y = G (B Theta) + E`, with `Y` an `n x k` data matrix and `G` the
/// `n x r` latent design. Stacking the rows of `B` into a vector `b`, the
/// full conditional is Gaussian with precision
/// `(G^T G (x) Theta Theta^T) / noise_var + (I_r (x) P) / smooth_var`
/// and mean solving `Q mu = vec(Theta Y^T G) / noise_var`.
///
/// For the identity design (no smoothing) the precision is block diagonal
/// per grid point and the draw falls back to independent column draws.
///
/// If the precision Cholesky fails, `1e-10 * trace(Q) / dim` is added to
/// the diagonal once; a second failure is an error.
pub(crate) fn draw_coeff_matrix<R: Rng + ?Sized>(
    y: &DMatrix<f64>,
    g: &DMatrix<f64>,
    design: &SplineDesign,
    noise_var: f64,
    smooth_var: f64,
    op: &'static str,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let r = g.ncols();
    let l = design.basis_dim();
    if y.ncols() != design.grid_len() {
        return Err(Error::InvalidInput(format!(
            "{op}: data has {} grid columns but the design covers {}",
            y.ncols(),
            design.grid_len()
        )));
    }
    if y.nrows() != g.nrows() {
        return Err(Error::InvalidInput(format!(
            "{op}: data rows {} do not match latent design rows {}",
            y.nrows(),
            g.nrows()
        )));
    }
    if noise_var <= 0.0 || smooth_var <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "{op}: variances must be positive (noise {noise_var}, smooth {smooth_var})"
        )));
    }
    if design.is_identity() {
        // per-column conditionals: column k of B is a row draw against G
        let bt = draw_gaussian_rows(&y.transpose(), g, noise_var, op, rng)?;
        return Ok(bt.transpose());
    }

    let gram_g = g.transpose() * g;
    let gram_t = &design.theta * design.theta.transpose();
    let mut q = kronecker(&gram_g, &gram_t);
    q /= noise_var;
    for block in 0..r {
        let base = block * l;
        for i in 0..l {
            for j in 0..l {
                q[(base + i, base + j)] += design.penalty[(i, j)] / smooth_var;
            }
        }
    }
    // linear term: columns of Theta Y^T G line up with the rows of B
    let m = &design.theta * y.transpose() * g;
    let eta = DVector::from_column_slice(m.as_slice()) / noise_var;

    let chol = cholesky_with_jitter(q, op)?;
    let mu = chol.solve(&eta);
    let z = standard_normal_vector(r * l, rng);
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NumericalFailure {
            op,
            detail: "triangular solve failed while sampling coefficients".into(),
        })?;
    let b = mu + noise;
    Ok(DMatrix::from_fn(r, l, |rr, ll| b[rr * l + ll]))
}

/// Cholesky with the one-shot diagonal jitter policy.
pub(crate) fn cholesky_with_jitter(
    q: DMatrix<f64>,
    op: &'static str,
) -> Result<Cholesky<f64, Dyn>> {
    let dim = q.nrows();
    match Cholesky::new(q.clone()) {
        Some(c) => Ok(c),
        None => {
            let jitter = 1e-10 * q.trace() / dim as f64;
            log::warn!("{op}: precision Cholesky failed, retrying with jitter {jitter:.3e}");
            let mut q2 = q;
            for i in 0..dim {
                q2[(i, i)] += jitter;
            }
            Cholesky::new(q2).ok_or_else(|| Error::NumericalFailure {
                op,
                detail: "precision matrix is not positive definite even after jitter".into(),
            })
        }
    }
}

/// Inverse-gamma draw parameterized by shape and rate, so the density is
/// proportional to `x^{-shape-1} exp(-rate / x)` and the mean (for
/// `shape > 1`) is `rate / (shape - 1)`.
pub(crate) fn draw_inverse_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let gamma = Gamma::new(shape, 1.0).map_err(|e| Error::NumericalFailure {
        op: "draw_inverse_gamma",
        detail: format!("invalid shape {shape}: {e}"),
    })?;
    Ok(rate / gamma.sample(rng))
}

/// Clamp a non-positive or underflowed inverse-gamma rate, warning once
/// per occurrence.
pub(crate) fn clamp_rate(rate: f64, op: &'static str) -> f64 {
    if rate < RATE_FLOOR {
        log::warn!("{op}: rate {rate:.3e} clamped to {RATE_FLOOR:.0e}");
        RATE_FLOOR
    } else {
        rate
    }
}
