//! Turning retained draws into interval estimates.
//!
//! Three layers build on the draw archive: per-entry credible intervals
//! straight from the empirical quantiles of the completed datasets,
//! a penalized scalar-on-function regression fit to any one completed
//! dataset, and pooling of per-dataset fits into a single interval
//! estimate whose width accounts for both the within-fit sampling
//! variance and the spread across completed datasets.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::draws::cholesky_with_jitter;
use crate::error::{Error, Result};
use crate::multilinear::{Mask3, SplineDesign, TimeGrid};
use crate::single_gibbs::DrawArchive;

/// Empirical interval bounds from a sample.
///
/// With `S` sorted draws and `alpha = (1 - level) / 2`, the bounds sit at
/// the 1-based fractional order-statistic positions
/// `0.5 + (S - 1) * alpha` and `S + 0.5 - (S - 1) * alpha`, linearly
/// interpolated and clamped to the observed range. For draws `{1..100}`
/// at level 0.95 this gives (2.975, 98.025).
pub fn empirical_interval(draws: &[f64], level: f64) -> Result<(f64, f64)> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    if draws.is_empty() {
        return Err(Error::InvalidInput("no draws to summarize".into()));
    }
    let mut sorted = draws.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    let s = sorted.len() as f64;
    let alpha = (1.0 - level) / 2.0;
    let h_low = 0.5 + (s - 1.0) * alpha;
    let h_high = s + 0.5 - (s - 1.0) * alpha;
    Ok((
        order_stat_interp(&sorted, h_low),
        order_stat_interp(&sorted, h_high),
    ))
}

/// Value at a 1-based fractional order-statistic position, linearly
/// interpolated between neighbors and clamped to the sample range.
fn order_stat_interp(sorted: &[f64], h: f64) -> f64 {
    let s = sorted.len();
    let h = h.clamp(1.0, s as f64);
    let lo = h.floor() as usize;
    let frac = h - h.floor();
    if lo >= s {
        sorted[s - 1]
    } else {
        sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
    }
}

/// Point estimate and credible bounds for one imputed entry.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryInterval {
    pub subject: usize,
    /// Feature index; `None` for single-level (matrix) archives.
    pub feature: Option<usize>,
    pub time: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Which entries of the original data were missing (false = missing).
#[derive(Debug, Clone, Copy)]
pub enum MissingMask<'a> {
    Matrix(&'a DMatrix<bool>),
    Tensor(&'a Mask3),
}

/// Posterior mean and empirical credible interval for every missing
/// entry, computed across the retained completed datasets.
///
/// Needs at least 20 retained draws; below 40 the quantile estimates are
/// noisy and a warning is logged.
pub fn entry_credible_intervals(
    archive: &DrawArchive,
    mask: MissingMask<'_>,
    level: f64,
) -> Result<Vec<EntryInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }
    let s = archive.len();
    if s < 20 {
        return Err(Error::InvalidInput(format!(
            "{s} retained draws are too few for quantile intervals (need 20)"
        )));
    }
    if s < 40 {
        log::warn!("{s} retained draws give noisy interval endpoints; 40 or more are recommended");
    }
    let mut out = Vec::new();
    let mut draws = vec![0.0; s];
    match mask {
        MissingMask::Matrix(m) => {
            let mats = archive.matrices()?;
            if mats[0].shape() != m.shape() {
                return Err(Error::InvalidInput(format!(
                    "mask shape {:?} does not match archive data {:?}",
                    m.shape(),
                    mats[0].shape()
                )));
            }
            for i in 0..m.nrows() {
                for k in 0..m.ncols() {
                    if m[(i, k)] {
                        continue;
                    }
                    for (d, mat) in draws.iter_mut().zip(mats) {
                        *d = mat[(i, k)];
                    }
                    let mean = draws.iter().sum::<f64>() / s as f64;
                    let (lower, upper) = empirical_interval(&draws, level)?;
                    out.push(EntryInterval {
                        subject: i,
                        feature: None,
                        time: k,
                        mean,
                        lower,
                        upper,
                    });
                }
            }
        }
        MissingMask::Tensor(m) => {
            let tensors = archive.tensors()?;
            if tensors[0].dims() != m.dims() {
                return Err(Error::InvalidInput(format!(
                    "mask dims {:?} do not match archive data {:?}",
                    m.dims(),
                    tensors[0].dims()
                )));
            }
            let (n, j, k) = m.dims();
            for i in 0..n {
                for f in 0..j {
                    for t in 0..k {
                        if m.get(i, f, t) {
                            continue;
                        }
                        for (d, tensor) in draws.iter_mut().zip(tensors) {
                            *d = tensor.get(i, f, t);
                        }
                        let mean = draws.iter().sum::<f64>() / s as f64;
                        let (lower, upper) = empirical_interval(&draws, level)?;
                        out.push(EntryInterval {
                            subject: i,
                            feature: Some(f),
                            time: t,
                            mean,
                            lower,
                            upper,
                        });
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Degrees-of-freedom convention for the pooled t-intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DofRule {
    /// `(S-1) (1 + V_W / ((1 + 1/S) V_B))^2` — the standard small-sample
    /// form, used by default.
    Squared,
    /// The same expression without the square, provided for comparison
    /// with software that prints the linear form.
    Unsquared,
}

/// A pooled functional estimate with its variance decomposition.
#[derive(Debug, Clone)]
pub struct PooledFunctional {
    pub grid: TimeGrid,
    pub level: f64,
    /// Pooled point estimate per gridpoint.
    pub estimate: DVector<f64>,
    /// Mean of the per-fit sampling variances.
    pub within_var: DVector<f64>,
    /// Variance of the per-fit estimates.
    pub between_var: DVector<f64>,
    /// `within + (1 + 1/S) * between`.
    pub total_var: DVector<f64>,
    /// Per-gridpoint t degrees of freedom; infinite where the between
    /// variance vanishes.
    pub dof: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
}

/// Pool per-dataset estimates and variances into interval estimates,
/// with the default degrees-of-freedom rule.
///
/// `estimates` and `variances` are `S x G`: one row per completed-data
/// fit, one column per gridpoint.
pub fn pool_rubin(
    grid: &TimeGrid,
    estimates: &DMatrix<f64>,
    variances: &DMatrix<f64>,
    level: f64,
) -> Result<PooledFunctional> {
    pool_rubin_with(grid, estimates, variances, level, DofRule::Squared)
}

/// [`pool_rubin`] with an explicit degrees-of-freedom convention.
pub fn pool_rubin_with(
    grid: &TimeGrid,
    estimates: &DMatrix<f64>,
    variances: &DMatrix<f64>,
    level: f64,
    dof_rule: DofRule,
) -> Result<PooledFunctional> {
    let (s, g) = estimates.shape();
    if s < 2 {
        return Err(Error::InvalidInput(format!(
            "pooling requires at least 2 fits, got {s}"
        )));
    }
    if variances.shape() != (s, g) {
        return Err(Error::InvalidInput(format!(
            "estimates shape {:?} does not match variances shape {:?}",
            estimates.shape(),
            variances.shape()
        )));
    }
    if grid.len() != g {
        return Err(Error::InvalidInput(format!(
            "grid has {} points but estimates have {g} columns",
            grid.len()
        )));
    }
    if let Some(v) = variances.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::InvalidInput(format!(
            "variances must be finite and nonnegative, found {v}"
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "interval level must lie in (0, 1), got {level}"
        )));
    }

    let sf = s as f64;
    let mut estimate = DVector::zeros(g);
    let mut within = DVector::zeros(g);
    let mut between = DVector::zeros(g);
    let mut total = DVector::zeros(g);
    let mut dof = DVector::zeros(g);
    let mut lower = DVector::zeros(g);
    let mut upper = DVector::zeros(g);
    let p = (1.0 + level) / 2.0;
    let z = Normal::standard().inverse_cdf(p);

    for c in 0..g {
        let mean = estimates.column(c).sum() / sf;
        let v_w = variances.column(c).sum() / sf;
        let v_b = estimates
            .column(c)
            .iter()
            .map(|e| (e - mean) * (e - mean))
            .sum::<f64>()
            / (sf - 1.0);
        let inflation = (1.0 + 1.0 / sf) * v_b;
        let v_t = v_w + inflation;
        let (nu, quantile) = if inflation > 0.0 {
            let base = (sf - 1.0) * (1.0 + v_w / inflation);
            let nu = match dof_rule {
                DofRule::Squared => (sf - 1.0) * (1.0 + v_w / inflation).powi(2),
                DofRule::Unsquared => base,
            };
            // beyond ~1e12 degrees of freedom the t quantile is the
            // normal quantile to machine precision
            let q = if nu > 1e12 {
                z
            } else {
                StudentsT::new(0.0, 1.0, nu)
                    .map_err(|e| Error::NumericalFailure {
                        op: "pool_rubin",
                        detail: format!("t distribution with {nu} dof: {e}"),
                    })?
                    .inverse_cdf(p)
            };
            (nu, q)
        } else {
            (f64::INFINITY, z)
        };
        let half = quantile * v_t.sqrt();
        estimate[c] = mean;
        within[c] = v_w;
        between[c] = v_b;
        total[c] = v_t;
        dof[c] = nu;
        lower[c] = mean - half;
        upper[c] = mean + half;
    }

    Ok(PooledFunctional {
        grid: grid.clone(),
        level,
        estimate,
        within_var: within,
        between_var: between,
        total_var: total,
        dof,
        lower,
        upper,
    })
}

/// How the regression smoothing weight is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SofrSmoothing {
    /// Generalized cross-validation over a 20-point log-spaced grid.
    Auto,
    /// A fixed penalty weight.
    Fixed(f64),
}

/// A fitted scalar-on-function regression
/// `E[y_i] = intercept + (1/K) sum_k beta(t_k) x_i(t_k)`.
#[derive(Debug, Clone)]
pub struct SofrFit {
    /// Coefficient function on the grid.
    pub coeff: DVector<f64>,
    /// Pointwise sampling variance of the coefficient function.
    pub pointwise_var: DVector<f64>,
    /// The penalty weight used (selected or supplied).
    pub smooth_param: f64,
    pub intercept: f64,
    /// Spline coefficients behind `coeff`.
    pub basis_coeffs: DVector<f64>,
    /// Residual variance estimate.
    pub residual_var: f64,
    /// Effective degrees of freedom of the fit (including the intercept).
    pub edf: f64,
}

/// Fit the scalar-on-function regression on one completed data matrix.
///
/// The integral is discretized by the rectangle rule with weight `1/K`,
/// the coefficient function is expanded in `design_beta`, and the
/// curvature-penalized normal equations are solved after centering both
/// the outcome and the integrated covariates. Pointwise variances come
/// from the sandwich form
/// `sigma^2 * theta^T M^{-1} C^T C M^{-1} theta` with
/// `M = C^T C + lambda P`.
pub fn fit_sofr(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    design_beta: &SplineDesign,
    smooth: SofrSmoothing,
) -> Result<SofrFit> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(Error::InvalidInput(format!(
            "outcome length {} does not match {n} subjects",
            y.len()
        )));
    }
    if design_beta.grid_len() != k {
        return Err(Error::InvalidInput(format!(
            "coefficient design covers {} grid points but data has {k}",
            design_beta.grid_len()
        )));
    }
    if n < 3 {
        return Err(Error::InvalidInput(format!(
            "{n} subjects are too few for the regression"
        )));
    }
    if let Some(v) = x.iter().chain(y.iter()).find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value {v} in the regression inputs (use a completed dataset)"
        )));
    }
    if let SofrSmoothing::Fixed(v) = smooth {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "fixed smoothing weight must be nonnegative, got {v}"
            )));
        }
    }

    let l = design_beta.basis_dim();
    // integrated covariates: row i holds (1/K) sum_k x_ik theta_l(t_k)
    let c = x * design_beta.theta.transpose() / k as f64;
    let col_means = DVector::from_fn(l, |j, _| c.column(j).sum() / n as f64);
    let mut c_tilde = c;
    for i in 0..n {
        for j in 0..l {
            c_tilde[(i, j)] -= col_means[j];
        }
    }
    let y_mean = y.sum() / n as f64;
    let y_tilde = y.map(|v| v - y_mean);

    let m0 = c_tilde.transpose() * &c_tilde;
    let cty = c_tilde.transpose() * &y_tilde;

    let candidates: Vec<f64> = match smooth {
        SofrSmoothing::Fixed(v) => vec![v],
        SofrSmoothing::Auto => {
            let p_trace = design_beta.penalty.trace();
            let scale = if p_trace > 0.0 {
                m0.trace() / p_trace
            } else {
                1.0
            };
            (0..20)
                .map(|i| scale * 10f64.powf(-8.0 + 12.0 * i as f64 / 19.0))
                .collect()
        }
    };

    let mut best: Option<(f64, f64, f64, f64, DVector<f64>)> = None; // (gcv, lambda, rss, edf, b)
    for &lambda in &candidates {
        let m = &m0 + &design_beta.penalty * lambda;
        let chol = cholesky_with_jitter(m, "fit_sofr")?;
        let b = chol.solve(&cty);
        let resid = &y_tilde - &c_tilde * &b;
        let rss: f64 = resid.norm_squared();
        let edf = chol.solve(&m0).trace() + 1.0;
        let denom = n as f64 - edf;
        let gcv = if denom > 0.0 {
            n as f64 * rss / (denom * denom)
        } else {
            f64::INFINITY
        };
        let better = match &best {
            None => true,
            Some((g, ..)) => gcv < *g,
        };
        if better {
            best = Some((gcv, lambda, rss, edf, b));
        }
    }
    let (_, lambda, rss, edf, b) = best.expect("candidate list is nonempty");

    let denom = n as f64 - edf;
    if denom <= 0.0 {
        return Err(Error::NumericalFailure {
            op: "fit_sofr",
            detail: format!("effective degrees of freedom {edf} exhaust the {n} observations"),
        });
    }
    let residual_var = rss / denom;

    // sandwich covariance of the basis coefficients
    let m = &m0 + &design_beta.penalty * lambda;
    let chol = cholesky_with_jitter(m, "fit_sofr")?;
    let inner = chol.solve(&m0);
    let cov = chol.solve(&inner.transpose()) * residual_var; // M^{-1} M0 M^{-1} sigma^2
    let coeff = design_beta.theta.transpose() * &b;
    let pointwise_var = DVector::from_fn(k, |t, _| {
        let theta_t = design_beta.theta.column(t);
        (theta_t.transpose() * &cov * theta_t)[(0, 0)].max(0.0)
    });
    let intercept = y_mean - col_means.dot(&b);

    Ok(SofrFit {
        coeff,
        pointwise_var,
        smooth_param: lambda,
        intercept,
        basis_coeffs: b,
        residual_var,
        edf,
    })
}

/// Fit the regression on every completed dataset in the archive and pool
/// the fits. The fits are independent and run concurrently. `grid` is
/// the time grid the coefficient design was built on; it only labels the
/// pooled output.
pub fn pooled_sofr(
    archive: &DrawArchive,
    y: &DVector<f64>,
    design_beta: &SplineDesign,
    grid: &TimeGrid,
    smooth: SofrSmoothing,
    level: f64,
) -> Result<PooledFunctional> {
    let mats = archive.matrices()?;
    if mats.is_empty() {
        return Err(Error::InvalidInput("archive is empty".into()));
    }
    let fits: Result<Vec<SofrFit>> = mats
        .par_iter()
        .map(|m| fit_sofr(m, y, design_beta, smooth))
        .collect();
    let fits = fits?;
    let s = fits.len();
    let k = design_beta.grid_len();
    let estimates = DMatrix::from_fn(s, k, |i, c| fits[i].coeff[c]);
    let variances = DMatrix::from_fn(s, k, |i, c| fits[i].pointwise_var[c]);
    pool_rubin(grid, &estimates, &variances, level)
}
