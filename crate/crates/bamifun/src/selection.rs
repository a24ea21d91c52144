//! Chain initialization and cross-validated model selection.
//!
//! Rank selection holds out a random 40% of the observed entries, fits a
//! short chain per candidate rank on the remainder, and scores the
//! posterior-mean imputations against the held-out values. The same split
//! protocol selects a fixed smoothing variance from a small grid. The
//! hold-out split is drawn once, so every candidate trains on identical
//! data, and all randomness derives from the seed in the supplied
//! [`McmcConfig`], making selection reproducible.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::draws::cholesky_with_jitter;
use crate::error::{Error, Result};
use crate::multilinear::SplineDesign;
use crate::single_gibbs::{
    run_single_chain, ChainInit, McmcConfig, ObservedFunctionalMatrix, SmoothVarMode,
};

/// Fraction of observed entries held out as validation.
pub const VALIDATION_FRACTION: f64 = 0.4;

/// Validation MSEs closer than this are treated as ties.
pub const MSE_TIE_TOLERANCE: f64 = 1e-12;

/// Relative weight of the curvature penalty in the initializer's
/// projection step.
const INIT_PENALTY_WEIGHT: f64 = 1e-4;

/// Stream-separation constant for the hold-out split RNG, so the split
/// never shares a stream with any candidate chain.
const SPLIT_STREAM: u64 = 0x5EED_5711;

/// Golden-ratio multiplier for deriving per-candidate chain seeds.
const CANDIDATE_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;

fn candidate_seed(base: u64, index: usize) -> u64 {
    base ^ (index as u64 + 1).wrapping_mul(CANDIDATE_STREAM)
}

/// Spectral starting values: mean-fill the missing entries, take the
/// top-`rank` right singular vectors, project each onto the spline space
/// by lightly penalized least squares, renormalize, and score by
/// projection.
pub fn init_single(
    data: &ObservedFunctionalMatrix,
    rank: usize,
    design: &SplineDesign,
) -> Result<ChainInit> {
    let (n, k) = data.values().shape();
    if rank == 0 || rank > n.min(k) {
        return Err(Error::InvalidConfig(format!(
            "initial rank {rank} must lie in 1..={}",
            n.min(k)
        )));
    }
    if design.grid_len() != k {
        return Err(Error::InvalidConfig(format!(
            "design covers {} grid points but data has {k}",
            design.grid_len()
        )));
    }
    let filled = data.mean_filled();
    let raw = top_gram_eigenvectors(&filled, rank);

    // project every component onto the spline space: minimize
    // ||Theta^T b - u||^2 + w b^T P b
    let theta = &design.theta;
    let gram = theta * theta.transpose();
    let penalty_trace = design.penalty.trace();
    let weight = if penalty_trace > 0.0 {
        INIT_PENALTY_WEIGHT * gram.trace() / penalty_trace
    } else {
        0.0
    };
    let system = &gram + &design.penalty * weight;
    let chol = cholesky_with_jitter(system, "init_single")?;
    let coeffs = chol.solve(&(theta * &raw)); // L x R
    let mut eigen = theta.transpose() * &coeffs; // K x R
    for r in 0..rank {
        let norm = eigen.column(r).norm();
        if !(norm.is_finite() && norm > 0.0) {
            return Err(Error::DegenerateComponent {
                index: r,
                detail: format!("initial component has norm {norm} after projection"),
            });
        }
        for i in 0..k {
            eigen[(i, r)] /= norm;
        }
    }
    let scores = &filled * &eigen;
    Ok(ChainInit {
        eigenfunctions: eigen,
        scores,
    })
}

/// Top-`rank` right singular vectors as columns, ordered by decreasing
/// singular value. Computed through the symmetric eigendecomposition of
/// the Gram matrix `X^T X`, which stays well behaved on rank-deficient
/// input where the general SVD routine can fail to converge.
pub(crate) fn top_gram_eigenvectors(m: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let gram = m.transpose() * m;
    let eig = gram.symmetric_eigen();
    let evals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mut order: Vec<usize> = (0..evals.len()).collect();
    order.sort_by(|&a, &b| evals[b].partial_cmp(&evals[a]).unwrap_or(std::cmp::Ordering::Equal));
    let k = m.ncols();
    DMatrix::from_fn(k, rank, |i, r| eig.eigenvectors[(i, order[r])])
}

/// Number of singular values of the mean-filled matrix needed to explain
/// 99% of its total variance; a stand-in initial rank when none is given.
pub fn default_initial_rank(data: &ObservedFunctionalMatrix) -> usize {
    let filled = data.mean_filled();
    let gram = filled.transpose() * &filled;
    let mut energies: Vec<f64> = gram
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .map(|e| e.max(0.0))
        .collect();
    energies.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    let total: f64 = energies.iter().sum();
    if total <= 0.0 {
        return 1;
    }
    let mut acc = 0.0;
    for (i, e) in energies.iter().enumerate() {
        acc += e;
        if acc >= 0.99 * total {
            return i + 1;
        }
    }
    energies.len().max(1)
}

/// Candidate ranks tried by default: the three ranks just below the
/// initial estimate, clipped at 1, deduplicated, ascending.
pub fn default_rank_grid(r_init: usize) -> Vec<usize> {
    if r_init < 2 {
        log::warn!("initial rank {r_init} leaves no smaller candidates; trying rank 1 only");
        return vec![1];
    }
    let mut grid: Vec<usize> = (1..=3)
        .rev()
        .map(|d| r_init.saturating_sub(d).max(1))
        .collect();
    grid.dedup();
    grid
}

/// Default grid of fixed smoothing variances.
pub fn default_smooth_var_grid() -> Vec<f64> {
    vec![0.001, 0.01, 0.05, 0.1, 1.0]
}

/// One candidate's cross-validation outcome.
#[derive(Debug, Clone)]
pub struct RankCvEntry {
    pub rank: usize,
    pub validation_mse: f64,
    /// Posterior-mean completion from this candidate's training fit.
    pub posterior_mean: DMatrix<f64>,
}

/// Outcome of [`cross_validate_rank`].
#[derive(Debug, Clone)]
pub struct RankSelection {
    pub selected: usize,
    pub table: Vec<RankCvEntry>,
    /// Entries held out for validation (always a subset of the observed
    /// entries).
    pub validation_mask: DMatrix<bool>,
}

/// One smoothing-variance candidate's cross-validation outcome.
#[derive(Debug, Clone)]
pub struct SmoothCvEntry {
    pub smooth_var: f64,
    pub validation_mse: f64,
    pub posterior_mean: DMatrix<f64>,
}

/// Outcome of [`grid_select_smooth_var`].
#[derive(Debug, Clone)]
pub struct SmoothSelection {
    pub selected: f64,
    pub table: Vec<SmoothCvEntry>,
    pub validation_mask: DMatrix<bool>,
}

/// Hold out `VALIDATION_FRACTION` of the observed entries, re-drawing up
/// to `max_attempts` times until every subject keeps at least one
/// training observation.
fn draw_validation_split(
    mask: &DMatrix<bool>,
    rng: &mut ChaCha8Rng,
    max_attempts: usize,
) -> Result<DMatrix<bool>> {
    let (n, k) = mask.shape();
    let observed: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..k).map(move |c| (i, c)))
        .filter(|&(i, c)| mask[(i, c)])
        .collect();
    let n_val = (VALIDATION_FRACTION * observed.len() as f64).floor() as usize;
    if n_val == 0 {
        return Err(Error::InvalidInput(format!(
            "{} observed entries are too few to hold out a validation set",
            observed.len()
        )));
    }
    for _ in 0..max_attempts {
        let mut idx: Vec<usize> = (0..observed.len()).collect();
        for j in 0..n_val {
            let pick = rng.random_range(j..idx.len());
            idx.swap(j, pick);
        }
        let mut validation = DMatrix::from_element(n, k, false);
        for &t in &idx[..n_val] {
            let (i, c) = observed[t];
            validation[(i, c)] = true;
        }
        let every_row_trains = (0..n).all(|i| {
            (0..k).any(|c| mask[(i, c)] && !validation[(i, c)])
        });
        if every_row_trains {
            return Ok(validation);
        }
    }
    Err(Error::SplitFailed {
        attempts: max_attempts,
        detail: "a subject lost every observation to the validation set on each attempt".into(),
    })
}

/// Fit one candidate on the training portion and score its posterior-mean
/// imputations on the held-out entries.
fn evaluate_candidate(
    data: &ObservedFunctionalMatrix,
    validation: &DMatrix<bool>,
    rank: usize,
    design: &SplineDesign,
    mcmc: &McmcConfig,
) -> Result<(f64, DMatrix<f64>)> {
    let (n, k) = data.values().shape();
    let train_mask = DMatrix::from_fn(n, k, |i, c| data.mask()[(i, c)] && !validation[(i, c)]);
    let train =
        ObservedFunctionalMatrix::new(data.values().clone(), train_mask, data.grid().clone())?;
    let archive = run_single_chain(&train, rank, design, mcmc, None)?;
    let mean = archive.posterior_mean_matrix()?;
    Ok((validation_mse(data, validation, &mean)?, mean))
}

/// Mean squared error of `imputed` against the observed values on the
/// validation entries.
pub fn validation_mse(
    data: &ObservedFunctionalMatrix,
    validation: &DMatrix<bool>,
    imputed: &DMatrix<f64>,
) -> Result<f64> {
    let (n, k) = data.values().shape();
    let mut sse = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for c in 0..k {
            if validation[(i, c)] {
                let d = imputed[(i, c)] - data.values()[(i, c)];
                sse += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric(
            "validation set is empty".into(),
        ));
    }
    Ok(sse / count as f64)
}

/// Select the rank by hold-out cross-validation. Ties within
/// `MSE_TIE_TOLERANCE` of the minimum go to the smaller rank.
pub fn cross_validate_rank(
    data: &ObservedFunctionalMatrix,
    grid: &[usize],
    design: &SplineDesign,
    mcmc: &McmcConfig,
) -> Result<RankSelection> {
    if grid.is_empty() {
        return Err(Error::InvalidConfig("rank grid is empty".into()));
    }
    if let Some(&bad) = grid.iter().find(|&&r| r == 0) {
        return Err(Error::InvalidConfig(format!("candidate rank {bad} is invalid")));
    }
    mcmc.validate()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(mcmc.seed ^ SPLIT_STREAM);
    let validation = draw_validation_split(data.mask(), &mut split_rng, 10)?;

    let fits: Result<Vec<RankCvEntry>> = grid
        .par_iter()
        .enumerate()
        .map(|(idx, &rank)| {
            let candidate_mcmc = McmcConfig {
                seed: candidate_seed(mcmc.seed, idx),
                ..mcmc.clone()
            };
            let (validation_mse, posterior_mean) =
                evaluate_candidate(data, &validation, rank, design, &candidate_mcmc)?;
            Ok(RankCvEntry {
                rank,
                validation_mse,
                posterior_mean,
            })
        })
        .collect();
    let table = fits?;

    let min_mse = table
        .iter()
        .map(|e| e.validation_mse)
        .fold(f64::INFINITY, f64::min);
    let selected = table
        .iter()
        .filter(|e| e.validation_mse <= min_mse + MSE_TIE_TOLERANCE)
        .map(|e| e.rank)
        .min()
        .expect("nonempty table");
    Ok(RankSelection {
        selected,
        table,
        validation_mask: validation,
    })
}

/// Select a fixed smoothing variance by the same hold-out protocol; the
/// candidate chains run with the smoothing variance held at each value.
/// Ties go to the larger variance — the lighter smoothing bias.
pub fn grid_select_smooth_var(
    data: &ObservedFunctionalMatrix,
    candidates: &[f64],
    rank: usize,
    design: &SplineDesign,
    mcmc: &McmcConfig,
) -> Result<SmoothSelection> {
    if candidates.is_empty() {
        return Err(Error::InvalidConfig(
            "smoothing-variance grid is empty".into(),
        ));
    }
    if let Some(&bad) = candidates.iter().find(|&&v| !(v.is_finite() && v > 0.0)) {
        return Err(Error::InvalidConfig(format!(
            "smoothing-variance candidate {bad} must be positive"
        )));
    }
    mcmc.validate()?;
    let mut split_rng = ChaCha8Rng::seed_from_u64(mcmc.seed ^ SPLIT_STREAM);
    let validation = draw_validation_split(data.mask(), &mut split_rng, 10)?;

    let fits: Result<Vec<SmoothCvEntry>> = candidates
        .par_iter()
        .enumerate()
        .map(|(idx, &smooth_var)| {
            let candidate_mcmc = McmcConfig {
                seed: candidate_seed(mcmc.seed, idx),
                smooth_mode: SmoothVarMode::Fixed(smooth_var),
                ..mcmc.clone()
            };
            let (validation_mse, posterior_mean) =
                evaluate_candidate(data, &validation, rank, design, &candidate_mcmc)?;
            Ok(SmoothCvEntry {
                smooth_var,
                validation_mse,
                posterior_mean,
            })
        })
        .collect();
    let table = fits?;

    let min_mse = table
        .iter()
        .map(|e| e.validation_mse)
        .fold(f64::INFINITY, f64::min);
    let selected = table
        .iter()
        .filter(|e| e.validation_mse <= min_mse + MSE_TIE_TOLERANCE)
        .map(|e| e.smooth_var)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(SmoothSelection {
        selected,
        table,
        validation_mask: validation,
    })
}
