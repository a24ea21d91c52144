//! Gibbs sampler for low-rank penalized-spline imputation of a partially
//! observed subject-by-time matrix.
//!
//! The model is `X = V U^T + E` with `U^T = B Theta` constrained to a
//! spline basis, elementwise Gaussian noise with variance `sigma^2`, and a
//! curvature prior on each row of `B` controlled by `sigma_B^2`. One sweep
//! draws, in order: scores `V`, coefficients `B`, the noise variance, the
//! smoothing variance, fresh imputations for the missing entries, and
//! finally rescales so every latent function `(B Theta)_r` has unit norm
//! with `V` absorbing the scale. Observed entries are copied into every
//! retained dataset unchanged.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::draws::{
    clamp_rate, draw_coeff_matrix, draw_gaussian_rows, draw_inverse_gamma,
};
use crate::error::{Error, Result};
use crate::multilinear::{SplineDesign, Tensor3, TimeGrid};

/// A partially observed subject-by-time data matrix.
///
/// `values` holds observed measurements where `mask` is true; entries at
/// unobserved positions are ignored. Every subject must carry at least
/// one observation (two or more are recommended and a warning is logged
/// below that).
#[derive(Debug, Clone)]
pub struct ObservedFunctionalMatrix {
    values: DMatrix<f64>,
    mask: DMatrix<bool>,
    grid: TimeGrid,
}

impl ObservedFunctionalMatrix {
    pub fn new(values: DMatrix<f64>, mask: DMatrix<bool>, grid: TimeGrid) -> Result<Self> {
        if values.shape() != mask.shape() {
            return Err(Error::InvalidInput(format!(
                "values shape {:?} does not match mask shape {:?}",
                values.shape(),
                mask.shape()
            )));
        }
        if grid.len() != values.ncols() {
            return Err(Error::InvalidInput(format!(
                "grid has {} points but data has {} columns",
                grid.len(),
                values.ncols()
            )));
        }
        if values.nrows() == 0 {
            return Err(Error::InvalidInput("data has no subjects".into()));
        }
        let mut thin_rows = 0usize;
        for i in 0..values.nrows() {
            let observed = (0..values.ncols()).filter(|&k| mask[(i, k)]).count();
            if observed == 0 {
                return Err(Error::InvalidInput(format!(
                    "subject {i} has no observed entries"
                )));
            }
            if observed < 2 {
                thin_rows += 1;
            }
            for k in 0..values.ncols() {
                if mask[(i, k)] && !values[(i, k)].is_finite() {
                    return Err(Error::InvalidInput(format!(
                        "non-finite observed value at ({i}, {k})"
                    )));
                }
            }
        }
        if thin_rows > 0 {
            log::warn!("{thin_rows} subject(s) carry a single observation; score draws will lean entirely on the model");
        }
        Ok(ObservedFunctionalMatrix { values, mask, grid })
    }

    pub fn n_subjects(&self) -> usize {
        self.values.nrows()
    }

    pub fn grid_len(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_observed(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn n_missing(&self) -> usize {
        self.mask.len() - self.n_observed()
    }

    /// Observed-entry mean fill: missing cells take their column's
    /// observed mean (the overall observed mean when a column is empty).
    pub fn mean_filled(&self) -> DMatrix<f64> {
        let (n, k) = self.values.shape();
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            for c in 0..k {
                if self.mask[(i, c)] {
                    total += self.values[(i, c)];
                    count += 1;
                }
            }
        }
        let global = if count > 0 { total / count as f64 } else { 0.0 };
        let mut filled = self.values.clone();
        for c in 0..k {
            let mut sum = 0.0;
            let mut m = 0usize;
            for i in 0..n {
                if self.mask[(i, c)] {
                    sum += self.values[(i, c)];
                    m += 1;
                }
            }
            let fill = if m > 0 { sum / m as f64 } else { global };
            for i in 0..n {
                if !self.mask[(i, c)] {
                    filled[(i, c)] = fill;
                }
            }
        }
        filled
    }
}

/// How the smoothing variance evolves along the chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothVarMode {
    /// Draw `sigma_B^2` from its inverse-gamma full conditional each sweep.
    Sampled,
    /// Hold it fixed, as the cross-validated selection workflow does.
    Fixed(f64),
}

/// Chain-length and reproducibility settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub burn_in: usize,
    pub draws: usize,
    pub thinning: usize,
    pub seed: u64,
    pub smooth_mode: SmoothVarMode,
    /// Subtract observed column means before sampling and add them back to
    /// every retained dataset. Off by default; the CLI enables it.
    pub pre_center: bool,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            burn_in: 500,
            draws: 100,
            thinning: 5,
            seed: 0,
            smooth_mode: SmoothVarMode::Sampled,
            pre_center: false,
        }
    }
}

impl McmcConfig {
    /// Shorter chains used inside cross-validation loops.
    pub fn cv_default() -> Self {
        McmcConfig {
            burn_in: 200,
            draws: 50,
            thinning: 1,
            ..McmcConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 {
            return Err(Error::InvalidConfig("draws must be at least 1".into()));
        }
        if self.thinning == 0 {
            return Err(Error::InvalidConfig("thinning must be at least 1".into()));
        }
        if let SmoothVarMode::Fixed(v) = self.smooth_mode {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "fixed smoothing variance must be positive, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn total_iterations(&self) -> usize {
        self.burn_in + self.draws * self.thinning
    }
}

/// Current state of a single-level chain.
#[derive(Debug, Clone)]
pub struct SingleChainState {
    /// Subject scores `V`, `N x R`.
    pub scores: DMatrix<f64>,
    /// Spline coefficients `B`, `R x L`.
    pub coeffs: DMatrix<f64>,
    pub noise_var: f64,
    pub smooth_var: f64,
    /// The completed data matrix the next sweep conditions on.
    pub completed: DMatrix<f64>,
}

/// Starting values for a chain: latent functions evaluated on the grid
/// (`K x R`) and subject scores (`N x R`).
#[derive(Debug, Clone)]
pub struct ChainInit {
    pub eigenfunctions: DMatrix<f64>,
    pub scores: DMatrix<f64>,
}

/// Parameter draws retained alongside each completed dataset.
#[derive(Debug, Clone)]
pub struct DrawRecord {
    pub scores: DMatrix<f64>,
    /// Feature-mode loadings; present only for multiway chains.
    pub feature_scores: Option<DMatrix<f64>>,
    pub coeffs: DMatrix<f64>,
    pub noise_var: f64,
    pub smooth_var: f64,
}

/// Completed datasets retained by a chain.
#[derive(Debug, Clone)]
pub enum ArchiveData {
    Matrices(Vec<DMatrix<f64>>),
    Tensors(Vec<Tensor3>),
}

/// Sampler settings echoed into an archive so downstream consumers can
/// reproduce or audit a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveMeta {
    /// `[N, K]` for matrices, `[N, J, K]` for tensors.
    pub dims: Vec<usize>,
    pub rank: usize,
    pub basis_dim: usize,
    pub degree: usize,
    pub burn_in: usize,
    pub draws: usize,
    pub thinning: usize,
    pub seed: u64,
}

/// Retained draws of the completed data plus the parameter trace.
///
/// Archives loaded back from disk carry an empty `params` trace; only the
/// completed datasets are persisted.
#[derive(Debug, Clone)]
pub struct DrawArchive {
    pub data: ArchiveData,
    pub params: Vec<DrawRecord>,
    pub meta: ArchiveMeta,
}

impl DrawArchive {
    pub fn len(&self) -> usize {
        match &self.data {
            ArchiveData::Matrices(v) => v.len(),
            ArchiveData::Tensors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrices(&self) -> Result<&[DMatrix<f64>]> {
        match &self.data {
            ArchiveData::Matrices(v) => Ok(v),
            ArchiveData::Tensors(_) => Err(Error::InvalidInput(
                "archive holds tensors, not matrices".into(),
            )),
        }
    }

    pub fn tensors(&self) -> Result<&[Tensor3]> {
        match &self.data {
            ArchiveData::Tensors(v) => Ok(v),
            ArchiveData::Matrices(_) => Err(Error::InvalidInput(
                "archive holds matrices, not tensors".into(),
            )),
        }
    }

    /// Mean of the retained completed matrices.
    pub fn posterior_mean_matrix(&self) -> Result<DMatrix<f64>> {
        let mats = self.matrices()?;
        if mats.is_empty() {
            return Err(Error::InvalidInput("archive is empty".into()));
        }
        let mut acc = mats[0].clone();
        for m in &mats[1..] {
            acc += m;
        }
        Ok(acc / mats.len() as f64)
    }

    /// Mean of the retained completed tensors.
    pub fn posterior_mean_tensor(&self) -> Result<Tensor3> {
        let tensors = self.tensors()?;
        if tensors.is_empty() {
            return Err(Error::InvalidInput("archive is empty".into()));
        }
        let dims = tensors[0].dims();
        let mut acc = vec![0.0; dims.0 * dims.1 * dims.2];
        for t in tensors {
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let s = tensors.len() as f64;
        acc.iter_mut().for_each(|v| *v /= s);
        Tensor3::from_data(dims, acc)
    }
}

/// Draw subject scores: row `i` of `V` has full conditional
/// `N((U^T U)^{-1} U^T x_i, noise_var (U^T U)^{-1})` with `U` the current
/// latent functions (`K x R`) and `x_i` the completed row.
pub fn draw_scores<R: Rng + ?Sized>(
    completed: &DMatrix<f64>,
    eigenfunctions: &DMatrix<f64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    draw_gaussian_rows(completed, eigenfunctions, noise_var, "draw_scores", rng)
}

/// Draw the spline coefficient matrix `B` given scores; see the module
/// docs for the precision structure.
pub fn draw_coeffs<R: Rng + ?Sized>(
    completed: &DMatrix<f64>,
    scores: &DMatrix<f64>,
    design: &SplineDesign,
    noise_var: f64,
    smooth_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    draw_coeff_matrix(
        completed,
        scores,
        design,
        noise_var,
        smooth_var,
        "draw_coeffs",
        rng,
    )
}

/// Draw the noise variance from `IG(N K / 2, ||completed - fitted||_F^2 / 2)`.
pub fn draw_noise_var<R: Rng + ?Sized>(
    completed: &DMatrix<f64>,
    fitted: &DMatrix<f64>,
    rng: &mut R,
) -> Result<f64> {
    if completed.shape() != fitted.shape() {
        return Err(Error::InvalidInput(format!(
            "draw_noise_var: completed shape {:?} vs fitted shape {:?}",
            completed.shape(),
            fitted.shape()
        )));
    }
    let sse: f64 = completed
        .iter()
        .zip(fitted.iter())
        .map(|(c, f)| (c - f) * (c - f))
        .sum();
    let shape = completed.len() as f64 / 2.0;
    let rate = clamp_rate(sse / 2.0, "draw_noise_var");
    draw_inverse_gamma(shape, rate, rng)
}

/// Total curvature of the latent functions: `sum_r B_r P B_r^T`.
pub fn roughness(coeffs: &DMatrix<f64>, penalty: &DMatrix<f64>) -> f64 {
    let mut acc = 0.0;
    for r in 0..coeffs.nrows() {
        let row = coeffs.row(r);
        acc += (row * penalty * row.transpose())[(0, 0)];
    }
    acc
}

/// Draw the smoothing variance from `IG(R L / 2, sum_r B_r P B_r^T)`.
/// The rate carries no 1/2 factor; the curvature prior is parameterized
/// without one.
pub fn draw_smooth_var<R: Rng + ?Sized>(
    coeffs: &DMatrix<f64>,
    design: &SplineDesign,
    rng: &mut R,
) -> Result<f64> {
    let shape = (coeffs.nrows() * coeffs.ncols()) as f64 / 2.0;
    let rate = clamp_rate(roughness(coeffs, &design.penalty), "draw_smooth_var");
    draw_inverse_gamma(shape, rate, rng)
}

/// Complete the data matrix: observed entries are copied exactly, missing
/// entries are drawn from `N(fitted, noise_var)`. Draws scan the matrix in
/// row-major order.
pub fn impute_missing<R: Rng + ?Sized>(
    data: &ObservedFunctionalMatrix,
    fitted: &DMatrix<f64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let (n, k) = data.values().shape();
    if fitted.shape() != (n, k) {
        return Err(Error::InvalidInput(format!(
            "impute_missing: fitted shape {:?} does not match data {:?}",
            fitted.shape(),
            (n, k)
        )));
    }
    let sd = noise_var.max(0.0).sqrt();
    let normal = Normal::new(0.0, sd).map_err(|e| Error::NumericalFailure {
        op: "impute_missing",
        detail: format!("invalid noise variance {noise_var}: {e}"),
    })?;
    let mut completed = DMatrix::zeros(n, k);
    for i in 0..n {
        for c in 0..k {
            completed[(i, c)] = if data.mask()[(i, c)] {
                data.values()[(i, c)]
            } else {
                fitted[(i, c)] + normal.sample(rng)
            };
        }
    }
    Ok(completed)
}

/// Fix the scale indeterminacy: rescale each latent function
/// `(B Theta)_r` to unit norm and let the scores absorb the norms. The
/// product `V (B Theta)` is unchanged up to floating point.
pub fn rescale(
    scores: &DMatrix<f64>,
    coeffs: &DMatrix<f64>,
    design: &SplineDesign,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let funcs = coeffs * &design.theta;
    let mut new_scores = scores.clone();
    let mut new_coeffs = coeffs.clone();
    for r in 0..coeffs.nrows() {
        let norm = funcs.row(r).norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::DegenerateComponent {
                index: r,
                detail: format!("latent function norm {norm} cannot be rescaled"),
            });
        }
        for l in 0..coeffs.ncols() {
            new_coeffs[(r, l)] /= norm;
        }
        for i in 0..scores.nrows() {
            new_scores[(i, r)] *= norm;
        }
    }
    Ok((new_scores, new_coeffs))
}

/// Observed column means (zero for columns with no observations).
fn observed_column_means(data: &ObservedFunctionalMatrix) -> DVector<f64> {
    let (n, k) = data.values().shape();
    DVector::from_fn(k, |c, _| {
        let mut sum = 0.0;
        let mut m = 0usize;
        for i in 0..n {
            if data.mask()[(i, c)] {
                sum += data.values()[(i, c)];
                m += 1;
            }
        }
        if m > 0 {
            sum / m as f64
        } else {
            0.0
        }
    })
}

/// Run the single-level sampler and return the retained draws.
///
/// When `init` is `None` the chain starts from the spectral initializer in
/// [`crate::selection::init_single`]. The noise variance starts at 1. The
/// random stream is a ChaCha generator seeded from `mcmc.seed`, so equal
/// configurations reproduce archives bit for bit.
pub fn run_single_chain(
    data: &ObservedFunctionalMatrix,
    rank: usize,
    design: &SplineDesign,
    mcmc: &McmcConfig,
    init: Option<ChainInit>,
) -> Result<DrawArchive> {
    mcmc.validate()?;
    let (n, k) = data.values().shape();
    if design.grid_len() != k {
        return Err(Error::InvalidConfig(format!(
            "design covers {} grid points but data has {k}",
            design.grid_len()
        )));
    }
    if rank == 0 || rank > n.min(k) {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} must lie in 1..={}",
            n.min(k)
        )));
    }

    // optional pre-centering: work on shifted observed values
    let col_means = if mcmc.pre_center {
        Some(observed_column_means(data))
    } else {
        None
    };
    let working;
    let data = if let Some(means) = &col_means {
        let mut values = data.values().clone();
        for i in 0..n {
            for c in 0..k {
                if data.mask()[(i, c)] {
                    values[(i, c)] -= means[c];
                }
            }
        }
        working = ObservedFunctionalMatrix::new(values, data.mask().clone(), data.grid().clone())?;
        &working
    } else {
        data
    };

    let init = match init {
        Some(init) => init,
        None => crate::selection::init_single(data, rank, design)?,
    };
    if init.eigenfunctions.shape() != (k, rank) || init.scores.shape() != (n, rank) {
        return Err(Error::InvalidConfig(format!(
            "init shapes {:?}/{:?} do not match (K, R) = ({k}, {rank}) and (N, R) = ({n}, {rank})",
            init.eigenfunctions.shape(),
            init.scores.shape()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    let mut eigen = init.eigenfunctions;
    let mut scores = init.scores;
    let mut noise_var = 1.0;
    let mut smooth_var = match mcmc.smooth_mode {
        SmoothVarMode::Fixed(v) => v,
        SmoothVarMode::Sampled => 1.0,
    };

    // initial completion from the starting fit
    let mut completed = data.values().clone();
    let fit0 = &scores * eigen.transpose();
    for i in 0..n {
        for c in 0..k {
            if !data.mask()[(i, c)] {
                completed[(i, c)] = fit0[(i, c)];
            }
        }
    }

    let mut datasets = Vec::with_capacity(mcmc.draws);
    let mut params = Vec::with_capacity(mcmc.draws);
    let total = mcmc.total_iterations();
    for iter in 0..total {
        let step = (|| -> Result<()> {
            scores = draw_scores(&completed, &eigen, noise_var, &mut rng)?;
            let coeffs = draw_coeffs(&completed, &scores, design, noise_var, smooth_var, &mut rng)?;
            let funcs = &coeffs * &design.theta;
            let fitted = &scores * &funcs;
            noise_var = draw_noise_var(&completed, &fitted, &mut rng)?;
            smooth_var = match mcmc.smooth_mode {
                SmoothVarMode::Sampled => draw_smooth_var(&coeffs, design, &mut rng)?,
                SmoothVarMode::Fixed(v) => v,
            };
            completed = impute_missing(data, &fitted, noise_var, &mut rng)?;
            let (s2, b2) = rescale(&scores, &coeffs, design)?;
            scores = s2;
            eigen = (&b2 * &design.theta).transpose();
            if iter >= mcmc.burn_in && (iter - mcmc.burn_in) % mcmc.thinning == mcmc.thinning - 1 {
                let mut out = completed.clone();
                if let Some(means) = &col_means {
                    for i in 0..n {
                        for c in 0..k {
                            out[(i, c)] += means[c];
                        }
                    }
                }
                datasets.push(out);
                params.push(DrawRecord {
                    scores: scores.clone(),
                    feature_scores: None,
                    coeffs: b2,
                    noise_var,
                    smooth_var,
                });
            }
            Ok(())
        })();
        step.map_err(|e| e.at_iteration(iter))?;
    }

    Ok(DrawArchive {
        data: ArchiveData::Matrices(datasets),
        params,
        meta: ArchiveMeta {
            dims: vec![n, k],
            rank,
            basis_dim: design.basis_dim(),
            degree: design.degree,
            burn_in: mcmc.burn_in,
            draws: mcmc.draws,
            thinning: mcmc.thinning,
            seed: mcmc.seed,
        },
    })
}
