//! Gibbs sampler for multiway (tensor) functional data.
//!
//! Data are an `N x J x K` array of curves — subject by feature by time —
//! observed at scattered cells. The model is a rank-`R` multilinear
//! factorization `X[i,j,k] = sum_r V[i,r] W[j,r] U[k,r] + noise` whose
//! time factors `U = (B Theta)^T` are penalized splines, exactly as in
//! the single-level sampler. Every full conditional reduces to one of the
//! shared Gaussian or inverse-gamma kernels by matricizing the completed
//! tensor: each mode's factor matrix is a least-squares-like row draw
//! against the Khatri-Rao product of the other two factors.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::draws::{
    clamp_rate, cholesky_with_jitter, draw_coeff_matrix, draw_gaussian_rows, draw_inverse_gamma,
};
use crate::error::{Error, Result};
use crate::multilinear::{khatri_rao, Mask3, Mode, SplineDesign, Tensor3};
use crate::single_gibbs::{
    draw_smooth_var, ArchiveData, ArchiveMeta, DrawArchive, DrawRecord, McmcConfig, SmoothVarMode,
};

/// Sparsely observed tensor data: values plus an observation mask
/// (`true` = observed).
#[derive(Debug, Clone)]
pub struct ObservedFunctionalTensor {
    values: Tensor3,
    mask: Mask3,
}

impl ObservedFunctionalTensor {
    /// Validates that the mask matches the values, observed cells are
    /// finite, and every subject has at least one observed cell. A fully
    /// missing subject-feature curve is allowed (the factorization still
    /// ties it to the rest of the subject) but logged.
    pub fn new(values: Tensor3, mask: Mask3) -> Result<Self> {
        if values.dims() != mask.dims() {
            return Err(Error::InvalidInput(format!(
                "values dims {:?} do not match mask dims {:?}",
                values.dims(),
                mask.dims()
            )));
        }
        let (n, j_dim, k_dim) = values.dims();
        if n == 0 || j_dim == 0 || k_dim == 0 {
            return Err(Error::InvalidInput("empty tensor".into()));
        }
        for i in 0..n {
            let mut subject_obs = 0;
            for j in 0..j_dim {
                let mut curve_obs = 0;
                for k in 0..k_dim {
                    if mask.get(i, j, k) {
                        let v = values.get(i, j, k);
                        if !v.is_finite() {
                            return Err(Error::InvalidInput(format!(
                                "observed cell ({i}, {j}, {k}) is not finite: {v}"
                            )));
                        }
                        curve_obs += 1;
                    }
                }
                if curve_obs == 0 {
                    log::warn!("subject {i}, feature {j}: curve has no observed cells");
                }
                subject_obs += curve_obs;
            }
            if subject_obs == 0 {
                return Err(Error::InvalidInput(format!(
                    "subject {i} has no observed cells in any feature"
                )));
            }
        }
        Ok(ObservedFunctionalTensor { values, mask })
    }

    pub fn values(&self) -> &Tensor3 {
        &self.values
    }

    pub fn mask(&self) -> &Mask3 {
        &self.mask
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.values.dims()
    }

    pub fn n_observed(&self) -> usize {
        self.mask.count_observed()
    }

    pub fn n_missing(&self) -> usize {
        let (n, j, k) = self.dims();
        n * j * k - self.n_observed()
    }

    /// Missing cells replaced by the observed mean of their `(feature,
    /// time)` slot across subjects; slots nobody observed fall back to
    /// the grand observed mean.
    pub fn mean_filled(&self) -> Tensor3 {
        let (n, j_dim, k_dim) = self.dims();
        let mut grand_sum = 0.0;
        let mut grand_count = 0usize;
        let mut slot_mean = vec![0.0; j_dim * k_dim];
        for j in 0..j_dim {
            for k in 0..k_dim {
                let mut sum = 0.0;
                let mut count = 0usize;
                for i in 0..n {
                    if self.mask.get(i, j, k) {
                        sum += self.values.get(i, j, k);
                        count += 1;
                    }
                }
                grand_sum += sum;
                grand_count += count;
                slot_mean[j * k_dim + k] = if count > 0 {
                    sum / count as f64
                } else {
                    f64::NAN
                };
            }
        }
        let grand_mean = if grand_count > 0 {
            grand_sum / grand_count as f64
        } else {
            0.0
        };
        Tensor3::from_fn((n, j_dim, k_dim), |i, j, k| {
            if self.mask.get(i, j, k) {
                self.values.get(i, j, k)
            } else {
                let m = slot_mean[j * k_dim + k];
                if m.is_finite() {
                    m
                } else {
                    grand_mean
                }
            }
        })
    }
}

/// Current state of a multiway chain.
#[derive(Debug, Clone)]
pub struct MultiwayChainState {
    /// Subject loadings `V`, `N x R`.
    pub subj: DMatrix<f64>,
    /// Feature loadings `W`, `J x R`.
    pub feat: DMatrix<f64>,
    /// Spline coefficients `B`, `R x L`; time factors are `(B Theta)^T`.
    pub coeffs: DMatrix<f64>,
    pub noise_var: f64,
    pub smooth_var: f64,
    /// The completed tensor the next sweep conditions on.
    pub completed: Tensor3,
}

/// Starting factor matrices for a multiway chain.
#[derive(Debug, Clone)]
pub struct MultiwayInit {
    pub subj: DMatrix<f64>,
    pub feat: DMatrix<f64>,
    pub coeffs: DMatrix<f64>,
}

/// Draw the rows of one factor matrix given the matricized completed
/// tensor `ymat` and the Khatri-Rao product `g` of the other two
/// factors: row `i` comes from
/// `N((G^T G)^{-1} G^T ymat_i, noise_var (G^T G)^{-1})`.
pub fn draw_factor_rows<R: Rng + ?Sized>(
    ymat: &DMatrix<f64>,
    g: &DMatrix<f64>,
    noise_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    draw_gaussian_rows(ymat, g, noise_var, "draw_factor_rows", rng)
}

/// Draw the spline coefficient matrix `B` from its full conditional.
///
/// The mode-3 matricization turns the tensor model into the same
/// row-stacked Gaussian system as the single-level coefficient draw,
/// with the Khatri-Rao product `khatri_rao(W, V)` playing the role of
/// the score matrix.
pub fn draw_multiway_coeffs<R: Rng + ?Sized>(
    completed: &Tensor3,
    subj: &DMatrix<f64>,
    feat: &DMatrix<f64>,
    design: &SplineDesign,
    noise_var: f64,
    smooth_var: f64,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let g = khatri_rao(feat, subj)?;
    let y = completed.matricize(Mode::Three).transpose(); // NJ x K
    draw_coeff_matrix(
        &y,
        &g,
        design,
        noise_var,
        smooth_var,
        "draw_multiway_coeffs",
        rng,
    )
}

/// Draw the noise variance from its inverse-gamma full conditional with
/// shape `NJK / 2` and rate `||completed - fitted||_F^2 / 2`.
pub fn draw_multiway_noise_var<R: Rng + ?Sized>(
    completed: &Tensor3,
    fitted: &Tensor3,
    rng: &mut R,
) -> Result<f64> {
    if completed.dims() != fitted.dims() {
        return Err(Error::InvalidInput(format!(
            "draw_multiway_noise_var: completed dims {:?} vs fitted dims {:?}",
            completed.dims(),
            fitted.dims()
        )));
    }
    let (n, j, k) = completed.dims();
    let sse: f64 = completed
        .data()
        .iter()
        .zip(fitted.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let shape = (n * j * k) as f64 / 2.0;
    let rate = clamp_rate(sse / 2.0, "draw_multiway_noise_var");
    draw_inverse_gamma(shape, rate, rng)
}

/// Fill missing cells with draws from `N(fitted, noise_var)`; observed
/// cells are copied through untouched. Cells are visited subject-major
/// (then feature, then time) so the draw order is deterministic.
pub fn impute_missing_cells<R: Rng + ?Sized>(
    data: &ObservedFunctionalTensor,
    fitted: &Tensor3,
    noise_var: f64,
    rng: &mut R,
) -> Result<Tensor3> {
    if fitted.dims() != data.dims() {
        return Err(Error::InvalidInput(format!(
            "impute_missing_cells: fitted dims {:?} vs data dims {:?}",
            fitted.dims(),
            data.dims()
        )));
    }
    if !(noise_var.is_finite() && noise_var > 0.0) {
        return Err(Error::InvalidInput(format!(
            "impute_missing_cells: noise variance {noise_var} must be positive"
        )));
    }
    let sd = noise_var.sqrt();
    let (n, j_dim, k_dim) = data.dims();
    let mut out = data.values().clone();
    for i in 0..n {
        for j in 0..j_dim {
            for k in 0..k_dim {
                if !data.mask().get(i, j, k) {
                    let z: f64 = rng.sample(StandardNormal);
                    out.set(i, j, k, fitted.get(i, j, k) + sd * z);
                }
            }
        }
    }
    Ok(out)
}

/// Rescale each component triple so the subject, feature, and time
/// factors share the norm `(|v_r| |w_r| |u_r|)^{1/3}`. The fitted tensor
/// is unchanged; the common norm absorbs the component's scale the way a
/// singular value would.
pub fn rebalance_norms(
    subj: &DMatrix<f64>,
    feat: &DMatrix<f64>,
    coeffs: &DMatrix<f64>,
    design: &SplineDesign,
) -> Result<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> {
    let rank = subj.ncols();
    if feat.ncols() != rank || coeffs.nrows() != rank {
        return Err(Error::InvalidInput(format!(
            "rebalance_norms: component counts differ ({rank}, {}, {})",
            feat.ncols(),
            coeffs.nrows()
        )));
    }
    let time_factors = (coeffs * &design.theta).transpose(); // K x R
    let mut subj = subj.clone();
    let mut feat = feat.clone();
    let mut coeffs = coeffs.clone();
    for r in 0..rank {
        let nv = subj.column(r).norm();
        let nw = feat.column(r).norm();
        let nu = time_factors.column(r).norm();
        if !(nv.is_finite() && nv > 0.0 && nw.is_finite() && nw > 0.0 && nu.is_finite() && nu > 0.0)
        {
            return Err(Error::DegenerateComponent {
                index: r,
                detail: format!("factor norms ({nv}, {nw}, {nu}) cannot be rebalanced"),
            });
        }
        let common = (nv * nw * nu).powf(1.0 / 3.0);
        let (sv, sw, su) = (common / nv, common / nw, common / nu);
        for i in 0..subj.nrows() {
            subj[(i, r)] *= sv;
        }
        for j in 0..feat.nrows() {
            feat[(j, r)] *= sw;
        }
        for l in 0..coeffs.ncols() {
            coeffs[(r, l)] *= su;
        }
    }
    Ok((subj, feat, coeffs))
}

/// Deterministic starting point: mean-fill the tensor, take leading
/// eigendirections of the mode-2 and mode-3 matricizations for the
/// feature and time factors, refine all three factors with a few
/// alternating least-squares sweeps, and project the time factors onto
/// the spline space.
pub fn init_multiway(
    data: &ObservedFunctionalTensor,
    rank: usize,
    design: &SplineDesign,
) -> Result<MultiwayInit> {
    let (n, j_dim, k_dim) = data.dims();
    validate_rank(rank, n, j_dim, k_dim)?;
    if design.grid_len() != k_dim {
        return Err(Error::InvalidConfig(format!(
            "design covers {} grid points but data has {k_dim}",
            design.grid_len()
        )));
    }
    let filled = data.mean_filled();
    let x1 = filled.matricize(Mode::One);
    let x2 = filled.matricize(Mode::Two);
    let x3 = filled.matricize(Mode::Three);

    let mut feat = padded_eigenvectors(&x2, rank);
    let mut time = padded_eigenvectors(&x3, rank);
    let mut subj = DMatrix::zeros(n, rank);

    // alternating least squares on the filled tensor; factors other than
    // the subject one are renormalized so scale accumulates in `subj`
    for _ in 0..ALS_SWEEPS {
        subj = least_squares_factor(&x1, &khatri_rao(&time, &feat)?)?;
        feat = least_squares_factor(&x2, &khatri_rao(&time, &subj)?)?;
        normalize_columns(&mut feat);
        time = least_squares_factor(&x3, &khatri_rao(&feat, &subj)?)?;
        normalize_columns(&mut time);
    }

    // express the time factors in the spline basis, lightly penalized
    let theta = &design.theta;
    let gram = theta * theta.transpose();
    let penalty_trace = design.penalty.trace();
    let weight = if penalty_trace > 0.0 {
        INIT_PENALTY_WEIGHT * gram.trace() / penalty_trace
    } else {
        0.0
    };
    let system = &gram + &design.penalty * weight;
    let chol = cholesky_with_jitter(system, "init_multiway")?;
    let coeffs = chol.solve(&(theta * &time)).transpose(); // R x L

    Ok(MultiwayInit { subj, feat, coeffs })
}

const ALS_SWEEPS: usize = 10;
const INIT_PENALTY_WEIGHT: f64 = 1e-4;

fn validate_rank(rank: usize, n: usize, j: usize, k: usize) -> Result<()> {
    let cap = (j * k).min(n * k).min(n * j);
    if rank == 0 || rank > cap {
        return Err(Error::InvalidConfig(format!(
            "rank {rank} must lie in 1..={cap} for a {n} x {j} x {k} tensor"
        )));
    }
    Ok(())
}

/// Leading eigendirections of `m m^T` as columns, padded with perturbed
/// unit vectors when more components are requested than the matrix has
/// rows.
fn padded_eigenvectors(m: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let dim = m.nrows();
    let lead = rank.min(dim);
    let eig = crate::selection::top_gram_eigenvectors(&m.transpose(), lead);
    DMatrix::from_fn(dim, rank, |i, r| {
        if r < lead {
            eig[(i, r)]
        } else {
            // arbitrary but deterministic fill-in, kept off the exact
            // eigendirections so the Khatri-Rao products stay full rank
            let spike = if i == r % dim { 1.0 } else { 0.0 };
            spike + 1e-3 * ((r * dim + i) as f64 + 1.0).sin()
        }
    })
}

fn least_squares_factor(ymat: &DMatrix<f64>, g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = g.transpose() * g;
    let chol = cholesky_with_jitter(gram, "init_multiway")?;
    Ok(chol.solve(&(g.transpose() * ymat.transpose())).transpose())
}

fn normalize_columns(m: &mut DMatrix<f64>) {
    for c in 0..m.ncols() {
        let norm = m.column(c).norm();
        if norm.is_finite() && norm > 0.0 {
            for i in 0..m.nrows() {
                m[(i, c)] /= norm;
            }
        }
    }
}

/// Run the multiway Gibbs sampler and retain completed tensors.
///
/// Sweep order: subject rows, feature rows, spline coefficients, noise
/// variance, smoothing variance, imputation, rebalancing. Retention and
/// seeding follow the single-level chain exactly.
pub fn run_multiway_chain(
    data: &ObservedFunctionalTensor,
    rank: usize,
    design: &SplineDesign,
    mcmc: &McmcConfig,
    init: Option<MultiwayInit>,
) -> Result<DrawArchive> {
    mcmc.validate()?;
    let (n, j_dim, k_dim) = data.dims();
    validate_rank(rank, n, j_dim, k_dim)?;
    if design.grid_len() != k_dim {
        return Err(Error::InvalidConfig(format!(
            "design covers {} grid points but data has {k_dim}",
            design.grid_len()
        )));
    }

    // optional pre-centering by each (feature, time) slot's observed mean
    let slot_means = if mcmc.pre_center {
        Some(observed_slot_means(data))
    } else {
        None
    };
    let working;
    let data = if let Some(means) = &slot_means {
        let values = Tensor3::from_fn((n, j_dim, k_dim), |i, j, k| {
            if data.mask().get(i, j, k) {
                data.values().get(i, j, k) - means[(j, k)]
            } else {
                data.values().get(i, j, k)
            }
        });
        working = ObservedFunctionalTensor::new(values, data.mask().clone())?;
        &working
    } else {
        data
    };

    let init = match init {
        Some(init) => init,
        None => init_multiway(data, rank, design)?,
    };
    let l = design.basis_dim();
    if init.subj.shape() != (n, rank)
        || init.feat.shape() != (j_dim, rank)
        || init.coeffs.shape() != (rank, l)
    {
        return Err(Error::InvalidConfig(format!(
            "init shapes {:?}/{:?}/{:?} do not match N={n}, J={j_dim}, R={rank}, L={l}",
            init.subj.shape(),
            init.feat.shape(),
            init.coeffs.shape()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    let mut state = MultiwayChainState {
        completed: {
            let time = (&init.coeffs * &design.theta).transpose();
            let fit0 = Tensor3::from_cp(&init.subj, &init.feat, &time)?;
            let mut completed = data.values().clone();
            for i in 0..n {
                for j in 0..j_dim {
                    for k in 0..k_dim {
                        if !data.mask().get(i, j, k) {
                            completed.set(i, j, k, fit0.get(i, j, k));
                        }
                    }
                }
            }
            completed
        },
        subj: init.subj,
        feat: init.feat,
        coeffs: init.coeffs,
        noise_var: 1.0,
        smooth_var: match mcmc.smooth_mode {
            SmoothVarMode::Fixed(v) => v,
            SmoothVarMode::Sampled => 1.0,
        },
    };

    let mut datasets = Vec::with_capacity(mcmc.draws);
    let mut params = Vec::with_capacity(mcmc.draws);
    let total = mcmc.total_iterations();
    for iter in 0..total {
        let step = (|| -> Result<()> {
            let time = (&state.coeffs * &design.theta).transpose();
            state.subj = draw_factor_rows(
                &state.completed.matricize(Mode::One),
                &khatri_rao(&time, &state.feat)?,
                state.noise_var,
                &mut rng,
            )?;
            state.feat = draw_factor_rows(
                &state.completed.matricize(Mode::Two),
                &khatri_rao(&time, &state.subj)?,
                state.noise_var,
                &mut rng,
            )?;
            state.coeffs = draw_multiway_coeffs(
                &state.completed,
                &state.subj,
                &state.feat,
                design,
                state.noise_var,
                state.smooth_var,
                &mut rng,
            )?;
            let time = (&state.coeffs * &design.theta).transpose();
            let fitted = Tensor3::from_cp(&state.subj, &state.feat, &time)?;
            state.noise_var = draw_multiway_noise_var(&state.completed, &fitted, &mut rng)?;
            state.smooth_var = match mcmc.smooth_mode {
                SmoothVarMode::Sampled => draw_smooth_var(&state.coeffs, design, &mut rng)?,
                SmoothVarMode::Fixed(v) => v,
            };
            state.completed = impute_missing_cells(data, &fitted, state.noise_var, &mut rng)?;
            let (subj, feat, coeffs) =
                rebalance_norms(&state.subj, &state.feat, &state.coeffs, design)?;
            state.subj = subj;
            state.feat = feat;
            state.coeffs = coeffs;
            if iter >= mcmc.burn_in && (iter - mcmc.burn_in) % mcmc.thinning == mcmc.thinning - 1 {
                let mut out = state.completed.clone();
                if let Some(means) = &slot_means {
                    for i in 0..n {
                        for j in 0..j_dim {
                            for k in 0..k_dim {
                                out.set(i, j, k, out.get(i, j, k) + means[(j, k)]);
                            }
                        }
                    }
                }
                datasets.push(out);
                params.push(DrawRecord {
                    scores: state.subj.clone(),
                    feature_scores: Some(state.feat.clone()),
                    coeffs: state.coeffs.clone(),
                    noise_var: state.noise_var,
                    smooth_var: state.smooth_var,
                });
            }
            Ok(())
        })();
        step.map_err(|e| e.at_iteration(iter))?;
    }

    Ok(DrawArchive {
        data: ArchiveData::Tensors(datasets),
        params,
        meta: ArchiveMeta {
            dims: vec![n, j_dim, k_dim],
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

/// Observed mean of each `(feature, time)` slot, `J x K`; zero where a
/// slot has no observations.
fn observed_slot_means(data: &ObservedFunctionalTensor) -> DMatrix<f64> {
    let (n, j_dim, k_dim) = data.dims();
    DMatrix::from_fn(j_dim, k_dim, |j, k| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..n {
            if data.mask().get(i, j, k) {
                sum += data.values().get(i, j, k);
                count += 1;
            }
        }
        if count > 0 {
            sum / count as f64
        } else {
            0.0
        }
    })
}
