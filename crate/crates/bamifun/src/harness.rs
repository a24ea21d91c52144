//! Simulation scenarios, metrics, and the replication runner.
//!
//! The generators produce curves as score-weighted combinations of an
//! orthonormal Fourier system plus white noise, mask a fixed fraction of
//! each curve, and hand the masked data to the imputation methods under
//! study. Metrics compare imputations against the *noisy* data (the
//! quantity actually missing), and the runner repeats the whole pipeline
//! over independently seeded replicates.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::inference::{
    entry_credible_intervals, fit_sofr, pooled_sofr, EntryInterval, MissingMask, SofrSmoothing,
};
use crate::multilinear::{build_bspline_basis, Mask3, SplineDesign, Tensor3, TimeGrid};
use crate::multiway_gibbs::{run_multiway_chain, ObservedFunctionalTensor};
use crate::single_gibbs::{
    run_single_chain, DrawArchive, McmcConfig, ObservedFunctionalMatrix, SmoothVarMode,
};

/// Which data-generating process a scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenarioKind {
    /// Curves only.
    Single,
    /// Curves plus a scalar outcome driven by the quadratic coefficient
    /// function.
    SingleWithOutcome,
    /// Tensor with an exact rank-4 signal.
    MultiwayLowRank,
    /// Tensor whose per-feature terms break the low-rank structure.
    MultiwayNonLowRank,
}

impl ScenarioKind {
    pub fn is_multiway(self) -> bool {
        matches!(
            self,
            ScenarioKind::MultiwayLowRank | ScenarioKind::MultiwayNonLowRank
        )
    }
}

/// A fully specified simulation setting.
#[derive(Debug, Clone)]
pub struct SimScenario {
    pub kind: ScenarioKind,
    /// Subjects.
    pub n: usize,
    /// Features (ignored for single-level kinds).
    pub j: usize,
    /// Grid points per curve.
    pub k: usize,
    /// Fraction of each curve that is masked.
    pub missing_prop: f64,
    /// Score variances, one per signal component, nonincreasing.
    pub eigen_values: Vec<f64>,
    pub noise_var: f64,
    pub seed: u64,
}

/// Score variances used by the single-level scenarios: three strong,
/// three moderate, three weak, three near-noise components.
pub const SINGLE_EIGENVALUES: [f64; 12] =
    [2.0, 2.0, 2.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.1, 0.1, 0.1];

/// Component variances used by the multiway scenarios.
pub const MULTIWAY_EIGENVALUES: [f64; 4] = [2.0, 1.0, 0.5, 0.1];

impl SimScenario {
    pub fn single(n: usize, k: usize, missing_prop: f64, seed: u64) -> Self {
        SimScenario {
            kind: ScenarioKind::Single,
            n,
            j: 1,
            k,
            missing_prop,
            eigen_values: SINGLE_EIGENVALUES.to_vec(),
            noise_var: 1.0,
            seed,
        }
    }

    pub fn single_with_outcome(n: usize, k: usize, missing_prop: f64, seed: u64) -> Self {
        SimScenario {
            kind: ScenarioKind::SingleWithOutcome,
            ..SimScenario::single(n, k, missing_prop, seed)
        }
    }

    pub fn multiway_low_rank(n: usize, j: usize, k: usize, missing_prop: f64, seed: u64) -> Self {
        SimScenario {
            kind: ScenarioKind::MultiwayLowRank,
            n,
            j,
            k,
            missing_prop,
            eigen_values: MULTIWAY_EIGENVALUES.to_vec(),
            noise_var: 1.0,
            seed,
        }
    }

    pub fn multiway_non_low_rank(
        n: usize,
        j: usize,
        k: usize,
        missing_prop: f64,
        seed: u64,
    ) -> Self {
        SimScenario {
            kind: ScenarioKind::MultiwayNonLowRank,
            ..SimScenario::multiway_low_rank(n, j, k, missing_prop, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::InvalidConfig(
                "scenario needs at least one subject and one grid point".into(),
            ));
        }
        if self.kind.is_multiway() && self.j == 0 {
            return Err(Error::InvalidConfig(
                "multiway scenario needs at least one feature".into(),
            ));
        }
        if !(self.missing_prop > 0.0 && self.missing_prop < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "missing proportion must lie in (0, 1), got {}",
                self.missing_prop
            )));
        }
        if self.eigen_values.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidConfig(
                "eigenvalues must be positive and finite".into(),
            ));
        }
        if self.eigen_values.windows(2).any(|w| w[0] < w[1]) {
            return Err(Error::InvalidConfig(
                "eigenvalues must be nonincreasing".into(),
            ));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise variance must be nonnegative, got {}",
                self.noise_var
            )));
        }
        if self.kind == ScenarioKind::MultiwayNonLowRank && self.eigen_values.len() < 4 {
            return Err(Error::InvalidConfig(
                "the non-low-rank generator needs four component variances".into(),
            ));
        }
        Ok(())
    }
}

/// First `h` functions of the orthonormal Fourier system evaluated on
/// the `k`-point uniform grid, as columns.
///
/// The raw system starts at frequency zero — the constant function —
/// and continues with `sqrt(2) sin(2 pi f t)` / `sqrt(2) cos(2 pi f t)`
/// pairs of increasing frequency. The leading constant matters for the
/// outcome scenarios: real functional components typically carry an
/// overall-level mode, and without one the quadratic regression
/// coefficient would have an unidentifiable mean. Columns are
/// Gram-Schmidt orthonormalized in the discrete inner product
/// `<u, v> = (1/k) sum_t u(t) v(t)`, so `U^T U = k I`. Keeping the
/// columns at unit *functional* norm (pointwise magnitude around
/// `sqrt(2)`) preserves the intended signal-to-noise ratio of the score
/// variances.
pub fn make_eigenfunctions(k: usize, h: usize) -> Result<DMatrix<f64>> {
    if h == 0 || h > k {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= component count <= {k}, got {h}"
        )));
    }
    let grid = TimeGrid::uniform(k);
    let mut u = DMatrix::from_fn(k, h, |i, c| {
        if c == 0 {
            return 1.0;
        }
        let t = grid.points()[i];
        let freq = ((c + 1) / 2) as f64;
        let phase = 2.0 * std::f64::consts::PI * freq * t;
        if c % 2 == 1 {
            std::f64::consts::SQRT_2 * phase.sin()
        } else {
            std::f64::consts::SQRT_2 * phase.cos()
        }
    });
    let inner = |a: &DVector<f64>, b: &DVector<f64>| a.dot(b) / k as f64;
    for c in 0..h {
        let mut col = DVector::from_column_slice(u.column(c).as_slice());
        for p in 0..c {
            let prev = DVector::from_column_slice(u.column(p).as_slice());
            let proj = inner(&prev, &col);
            col -= prev * proj;
        }
        let norm = inner(&col, &col).sqrt();
        if !(norm.is_finite() && norm > 1e-12) {
            return Err(Error::NumericalFailure {
                op: "make_eigenfunctions",
                detail: format!("column {c} collapsed during orthonormalization (norm {norm})"),
            });
        }
        for i in 0..k {
            u[(i, c)] = col[i] / norm;
        }
    }
    Ok(u)
}

/// The quadratic coefficient function `beta(t) = -10 t^2 + 10 t + 0.34`
/// evaluated on a grid; drives the simulated scalar outcome.
pub fn outcome_coefficient(grid: &TimeGrid) -> DVector<f64> {
    DVector::from_iterator(
        grid.len(),
        grid.points().iter().map(|t| -10.0 * t * t + 10.0 * t + 0.34),
    )
}

/// One simulated single-level dataset.
#[derive(Debug, Clone)]
pub struct SingleDataset {
    /// Noiseless signal curves.
    pub truth: DMatrix<f64>,
    /// Signal plus measurement noise — the matrix entries that go
    /// missing, and the reference the metrics compare against.
    pub observed: DMatrix<f64>,
    /// Scalar outcomes, present for outcome scenarios.
    pub outcome: Option<DVector<f64>>,
}

/// Simulate curves (and optionally outcomes) for a single-level
/// scenario. Scores, noise, and outcome noise are drawn in a fixed
/// order, so `scenario` plus the generator seed determine everything.
pub fn generate_single<R: Rng + ?Sized>(
    scenario: &SimScenario,
    rng: &mut R,
) -> Result<SingleDataset> {
    scenario.validate()?;
    if scenario.kind.is_multiway() {
        return Err(Error::InvalidConfig(
            "generate_single called with a multiway scenario".into(),
        ));
    }
    let (n, k) = (scenario.n, scenario.k);
    let h = scenario.eigen_values.len();
    let truth = if h == 0 {
        DMatrix::zeros(n, k)
    } else {
        let u = make_eigenfunctions(k, h)?;
        let sds: Vec<f64> = scenario.eigen_values.iter().map(|v| v.sqrt()).collect();
        // subject-major draw order keeps the stream layout stable
        let mut scores = DMatrix::zeros(n, h);
        for i in 0..n {
            for c in 0..h {
                let z: f64 = rng.sample(StandardNormal);
                scores[(i, c)] = sds[c] * z;
            }
        }
        scores * u.transpose()
    };
    let noise_sd = scenario.noise_var.sqrt();
    let mut observed = truth.clone();
    for i in 0..n {
        for c in 0..k {
            let z: f64 = rng.sample(StandardNormal);
            observed[(i, c)] += noise_sd * z;
        }
    }
    let outcome = if scenario.kind == ScenarioKind::SingleWithOutcome {
        let beta = outcome_coefficient(&TimeGrid::uniform(k));
        let mut y = DVector::zeros(n);
        for i in 0..n {
            let integral = truth.row(i).transpose().dot(&beta) / k as f64;
            let z: f64 = rng.sample(StandardNormal);
            y[i] = integral + z;
        }
        Some(y)
    } else {
        None
    };
    Ok(SingleDataset {
        truth,
        observed,
        outcome,
    })
}

/// One simulated multiway dataset.
#[derive(Debug, Clone)]
pub struct MultiwayDataset {
    pub truth: Tensor3,
    pub observed: Tensor3,
}

/// Simulate a tensor scenario.
///
/// The low-rank kind draws one subject factor per component with the
/// scenario's variances, feature factors with unit variance, and
/// combines them with the Fourier time factors. The non-low-rank kind
/// adds per-subject-feature curves built from the *next* block of
/// Fourier functions, which no rank-4 factorization can absorb.
pub fn generate_multiway<R: Rng + ?Sized>(
    scenario: &SimScenario,
    rng: &mut R,
) -> Result<MultiwayDataset> {
    scenario.validate()?;
    let (n, j, k) = (scenario.n, scenario.j, scenario.k);
    let truth = match scenario.kind {
        ScenarioKind::MultiwayLowRank => {
            let h = scenario.eigen_values.len();
            let u = make_eigenfunctions(k, h)?;
            let sds: Vec<f64> = scenario.eigen_values.iter().map(|v| v.sqrt()).collect();
            let mut subj = DMatrix::zeros(n, h);
            for i in 0..n {
                for r in 0..h {
                    let z: f64 = rng.sample(StandardNormal);
                    subj[(i, r)] = sds[r] * z;
                }
            }
            let mut feat = DMatrix::zeros(j, h);
            for jj in 0..j {
                for r in 0..h {
                    feat[(jj, r)] = rng.sample(StandardNormal);
                }
            }
            Tensor3::from_cp(&subj, &feat, &u)?
        }
        ScenarioKind::MultiwayNonLowRank => {
            let u = make_eigenfunctions(k, 8)?;
            let sds: Vec<f64> = scenario.eigen_values.iter().map(|v| v.sqrt()).collect();
            let mut subj = DMatrix::zeros(n, 2);
            for i in 0..n {
                for r in 0..2 {
                    let z: f64 = rng.sample(StandardNormal);
                    subj[(i, r)] = sds[r] * z;
                }
            }
            let mut visit = vec![0.0; n * j * 4];
            for i in 0..n {
                for jj in 0..j {
                    for r in 0..4 {
                        let z: f64 = rng.sample(StandardNormal);
                        visit[(i * j + jj) * 4 + r] = sds[r] * z;
                    }
                }
            }
            Tensor3::from_fn((n, j, k), |i, jj, kk| {
                let shared: f64 = (0..2).map(|r| subj[(i, r)] * u[(kk, r)]).sum();
                let own: f64 = (0..4)
                    .map(|r| visit[(i * j + jj) * 4 + r] * u[(kk, r + 4)])
                    .sum();
                shared + own
            })
        }
        _ => {
            return Err(Error::InvalidConfig(
                "generate_multiway called with a single-level scenario".into(),
            ))
        }
    };
    let noise_sd = scenario.noise_var.sqrt();
    let mut observed = truth.clone();
    for i in 0..n {
        for jj in 0..j {
            for kk in 0..k {
                let z: f64 = rng.sample(StandardNormal);
                observed.set(i, jj, kk, observed.get(i, jj, kk) + noise_sd * z);
            }
        }
    }
    Ok(MultiwayDataset { truth, observed })
}

/// Default minimum observed points per curve.
pub const DEFAULT_MIN_OBS: usize = 2;

/// Number of grid points masked per curve for missing proportion `s`,
/// lowered (with a warning) when it would leave fewer than `min_obs`
/// observed points.
fn masked_count(k: usize, s: f64, min_obs: usize) -> Result<usize> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "missing proportion must lie in (0, 1), got {s}"
        )));
    }
    if min_obs == 0 {
        return Err(Error::InvalidConfig("min_obs must be at least 1".into()));
    }
    if k < min_obs {
        return Err(Error::InvalidConfig(format!(
            "cannot keep {min_obs} observed points on a {k}-point grid"
        )));
    }
    let raw = (s * k as f64).floor() as usize;
    if k - raw < min_obs {
        let adjusted = k - min_obs;
        log::warn!(
            "missing proportion {s} leaves fewer than {min_obs} observed points; \
             masking {adjusted}/{k} instead"
        );
        Ok(adjusted)
    } else {
        Ok(raw)
    }
}

/// Mask exactly `floor(s * k)` uniformly chosen points in each row.
/// Returns the observation mask (`true` = observed); every row keeps at
/// least `min_obs` observed points by construction.
pub fn missingness_mask<R: Rng + ?Sized>(
    n: usize,
    k: usize,
    s: f64,
    min_obs: usize,
    rng: &mut R,
) -> Result<DMatrix<bool>> {
    let masked = masked_count(k, s, min_obs)?;
    let mut mask = DMatrix::from_element(n, k, true);
    let mut indices: Vec<usize> = (0..k).collect();
    for i in 0..n {
        for pos in 0..masked {
            let swap = rng.random_range(pos..k);
            indices.swap(pos, swap);
            mask[(i, indices[pos])] = false;
        }
    }
    Ok(mask)
}

/// Tensor analog of [`missingness_mask`]: each subject-feature curve is
/// masked independently.
pub fn missingness_mask_tensor<R: Rng + ?Sized>(
    dims: (usize, usize, usize),
    s: f64,
    min_obs: usize,
    rng: &mut R,
) -> Result<Mask3> {
    let (n, j, k) = dims;
    let masked = masked_count(k, s, min_obs)?;
    let mut mask = Mask3::filled(dims, true);
    let mut indices: Vec<usize> = (0..k).collect();
    for i in 0..n {
        for jj in 0..j {
            for pos in 0..masked {
                let swap = rng.random_range(pos..k);
                indices.swap(pos, swap);
                mask.set(i, jj, indices[pos], false);
            }
        }
    }
    Ok(mask)
}

/// Relative mean squared error over the masked entries:
/// `sum (truth - imputed)^2 / sum truth^2`, both sums over cells with
/// `mask = false`. `truth` is the noisy data matrix — the values that
/// actually went missing.
pub fn relative_mse(
    truth: &DMatrix<f64>,
    imputed: &DMatrix<f64>,
    mask: &DMatrix<bool>,
) -> Result<f64> {
    if truth.shape() != imputed.shape() || truth.shape() != mask.shape() {
        return Err(Error::InvalidInput(format!(
            "relative_mse: shapes {:?} / {:?} / {:?} differ",
            truth.shape(),
            imputed.shape(),
            mask.shape()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut masked = 0usize;
    for i in 0..truth.nrows() {
        for c in 0..truth.ncols() {
            if !mask[(i, c)] {
                let d = truth[(i, c)] - imputed[(i, c)];
                num += d * d;
                den += truth[(i, c)] * truth[(i, c)];
                masked += 1;
            }
        }
    }
    if masked == 0 {
        return Err(Error::UndefinedMetric(
            "relative_mse: no masked entries".into(),
        ));
    }
    if den <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relative_mse: masked entries of the reference are all zero".into(),
        ));
    }
    Ok(num / den)
}

/// Tensor analog of [`relative_mse`].
pub fn relative_mse_tensor(truth: &Tensor3, imputed: &Tensor3, mask: &Mask3) -> Result<f64> {
    if truth.dims() != imputed.dims() || truth.dims() != mask.dims() {
        return Err(Error::InvalidInput(format!(
            "relative_mse_tensor: dims {:?} / {:?} / {:?} differ",
            truth.dims(),
            imputed.dims(),
            mask.dims()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    let mut masked = 0usize;
    for ((t, m), b) in truth.data().iter().zip(imputed.data()).zip(mask.data()) {
        if !b {
            let d = t - m;
            num += d * d;
            den += t * t;
            masked += 1;
        }
    }
    if masked == 0 {
        return Err(Error::UndefinedMetric(
            "relative_mse_tensor: no masked entries".into(),
        ));
    }
    if den <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relative_mse_tensor: masked entries of the reference are all zero".into(),
        ));
    }
    Ok(num / den)
}

/// Fraction of intervals containing the corresponding entry of `truth`.
pub fn coverage_rate(truth: &DMatrix<f64>, intervals: &[EntryInterval]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::UndefinedMetric("coverage_rate: no intervals".into()));
    }
    let mut hit = 0usize;
    for e in intervals {
        if e.feature.is_some() {
            return Err(Error::InvalidInput(
                "coverage_rate: tensor interval checked against matrix data".into(),
            ));
        }
        if e.subject >= truth.nrows() || e.time >= truth.ncols() {
            return Err(Error::InvalidInput(format!(
                "coverage_rate: interval at ({}, {}) outside {:?}",
                e.subject,
                e.time,
                truth.shape()
            )));
        }
        let v = truth[(e.subject, e.time)];
        if e.lower <= v && v <= e.upper {
            hit += 1;
        }
    }
    Ok(hit as f64 / intervals.len() as f64)
}

/// Tensor analog of [`coverage_rate`].
pub fn coverage_rate_tensor(truth: &Tensor3, intervals: &[EntryInterval]) -> Result<f64> {
    if intervals.is_empty() {
        return Err(Error::UndefinedMetric(
            "coverage_rate_tensor: no intervals".into(),
        ));
    }
    let (n, j, k) = truth.dims();
    let mut hit = 0usize;
    for e in intervals {
        let f = e.feature.ok_or_else(|| {
            Error::InvalidInput(
                "coverage_rate_tensor: matrix interval checked against tensor data".into(),
            )
        })?;
        if e.subject >= n || f >= j || e.time >= k {
            return Err(Error::InvalidInput(format!(
                "coverage_rate_tensor: interval at ({}, {f}, {}) outside {:?}",
                e.subject,
                e.time,
                truth.dims()
            )));
        }
        let v = truth.get(e.subject, f, e.time);
        if e.lower <= v && v <= e.upper {
            hit += 1;
        }
    }
    Ok(hit as f64 / intervals.len() as f64)
}

/// Relative integrated squared error of a coefficient estimate on a
/// shared grid: `sum (est - truth)^2 / sum truth^2` (the rectangle-rule
/// weights cancel).
pub fn relative_ise(estimate: &DVector<f64>, truth: &DVector<f64>) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "relative_ise: grid lengths {} and {} differ",
            estimate.len(),
            truth.len()
        )));
    }
    let num: f64 = (estimate - truth).norm_squared();
    let den: f64 = truth.norm_squared();
    if den <= 0.0 {
        return Err(Error::UndefinedMetric(
            "relative_ise: reference function is zero".into(),
        ));
    }
    Ok(num / den)
}

/// Imputation methods the replication runner can benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// The full sampler: spline-smoothed components, multiple completed
    /// datasets, quantile intervals.
    Bamifun,
    /// Same sampler with the identity basis and no penalty — a
    /// low-rank-only baseline without functional smoothness.
    NoSmoothProxy,
    /// Posterior mean as a single imputation, intervals from one draw's
    /// noise variance only.
    SingleImputeProxy,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bamifun => "bamifun",
            Method::NoSmoothProxy => "no-smooth-proxy",
            Method::SingleImputeProxy => "single-impute-proxy",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bamifun" => Ok(Method::Bamifun),
            "no-smooth-proxy" => Ok(Method::NoSmoothProxy),
            "single-impute-proxy" => Ok(Method::SingleImputeProxy),
            other => Err(Error::InvalidConfig(format!(
                "unknown method '{other}' (expected bamifun, no-smooth-proxy, or single-impute-proxy)"
            ))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sampler and analysis settings for one replication study.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    /// Components fitted by the sampler.
    pub rank: usize,
    /// Spline basis size for the latent functions.
    pub basis_dim: usize,
    pub degree: usize,
    pub burn_in: usize,
    /// Retained completed datasets per replicate.
    pub draws: usize,
    pub thinning: usize,
    /// Credible / confidence level for all intervals.
    pub level: f64,
    /// Spline basis size for the outcome regression coefficient.
    pub beta_basis_dim: usize,
    pub min_obs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            rank: 9,
            basis_dim: 15,
            degree: 3,
            burn_in: 500,
            draws: 100,
            thinning: 5,
            level: 0.95,
            beta_basis_dim: 15,
            min_obs: DEFAULT_MIN_OBS,
        }
    }
}

/// Metrics from one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Relative MSE of the point imputation over masked cells.
    pub relative_mse: f64,
    /// Interval coverage: per-entry intervals over masked cells, except
    /// for outcome scenarios where it is the pointwise coverage of the
    /// pooled coefficient band.
    pub coverage: f64,
    /// Relative integrated squared error of the pooled coefficient
    /// estimate; outcome scenarios only.
    pub relative_ise: Option<f64>,
    /// Wall-clock seconds for the replicate.
    pub runtime: f64,
}

/// One replicate's identity and outcome; failures carry the rendered
/// error instead of aborting the study.
#[derive(Debug, Clone)]
pub struct ReplicateRow {
    pub replicate: usize,
    pub seed: u64,
    pub outcome: std::result::Result<MetricsReport, String>,
}

/// All replicates of one (scenario, method) study.
#[derive(Debug, Clone)]
pub struct ReplicationStudy {
    pub method: Method,
    pub rows: Vec<ReplicateRow>,
}

/// Mean/SE aggregation over the successful replicates.
#[derive(Debug, Clone)]
pub struct StudySummary {
    pub completed: usize,
    pub failed: usize,
    pub mean_relative_mse: f64,
    pub se_relative_mse: f64,
    pub mean_coverage: f64,
    pub se_coverage: f64,
    pub mean_relative_ise: Option<f64>,
    pub se_relative_ise: Option<f64>,
    pub total_runtime: f64,
}

impl ReplicationStudy {
    pub fn successes(&self) -> impl Iterator<Item = &MetricsReport> {
        self.rows.iter().filter_map(|r| r.outcome.as_ref().ok())
    }

    pub fn summary(&self) -> StudySummary {
        let ok: Vec<&MetricsReport> = self.successes().collect();
        let failed = self.rows.len() - ok.len();
        let mean_se = |vals: &[f64]| -> (f64, f64) {
            if vals.is_empty() {
                return (f64::NAN, f64::NAN);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            if vals.len() < 2 {
                return (mean, 0.0);
            }
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            (mean, (var / n).sqrt())
        };
        let (mean_relative_mse, se_relative_mse) =
            mean_se(&ok.iter().map(|m| m.relative_mse).collect::<Vec<_>>());
        let (mean_coverage, se_coverage) =
            mean_se(&ok.iter().map(|m| m.coverage).collect::<Vec<_>>());
        let ises: Vec<f64> = ok.iter().filter_map(|m| m.relative_ise).collect();
        let (mean_relative_ise, se_relative_ise) = if ises.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_se(&ises);
            (Some(m), Some(s))
        };
        StudySummary {
            completed: ok.len(),
            failed,
            mean_relative_mse,
            se_relative_mse,
            mean_coverage,
            se_coverage,
            mean_relative_ise,
            se_relative_ise,
            total_runtime: ok.iter().map(|m| m.runtime).sum(),
        }
    }
}

/// Keeps the sampler's RNG stream disjoint from the data-generating
/// stream that shares the replicate seed.
const CHAIN_STREAM: u64 = 0xB5E1_7A2F_4C9D_0381;

/// Run `reps` independent replicates of a scenario under one method.
///
/// Replicate `r` derives its seed as `scenario.seed + r`, so studies can
/// be re-run or extended without disturbing earlier replicates.
/// Replicates run concurrently; a failed replicate is recorded in its
/// row rather than aborting the study.
pub fn run_replication_study(
    scenario: &SimScenario,
    method: Method,
    reps: usize,
    config: &StudyConfig,
) -> Result<ReplicationStudy> {
    scenario.validate()?;
    if reps == 0 {
        return Err(Error::InvalidConfig("need at least one replicate".into()));
    }
    if !(config.level > 0.0 && config.level < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "interval level must lie in (0, 1), got {}",
            config.level
        )));
    }
    let rows: Vec<ReplicateRow> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let seed = scenario.seed.wrapping_add(r as u64);
            let outcome = run_replicate(scenario, method, config, seed).map_err(|e| e.to_string());
            ReplicateRow {
                replicate: r,
                seed,
                outcome,
            }
        })
        .collect();
    Ok(ReplicationStudy { method, rows })
}

/// One full replicate: generate, mask, impute, score.
pub fn run_replicate(
    scenario: &SimScenario,
    method: Method,
    config: &StudyConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let start = Instant::now();
    let report = if scenario.kind.is_multiway() {
        run_multiway_replicate(scenario, method, config, seed)?
    } else {
        run_single_replicate(scenario, method, config, seed)?
    };
    Ok(MetricsReport {
        runtime: start.elapsed().as_secs_f64(),
        ..report
    })
}

fn sampler_config(config: &StudyConfig, method: Method, seed: u64) -> McmcConfig {
    McmcConfig {
        burn_in: config.burn_in,
        draws: config.draws,
        thinning: config.thinning,
        seed: seed ^ CHAIN_STREAM,
        smooth_mode: match method {
            // without a penalty the smoothing variance is meaningless;
            // fix it so the draw is skipped
            Method::NoSmoothProxy => SmoothVarMode::Fixed(1.0),
            _ => SmoothVarMode::Sampled,
        },
        pre_center: false,
    }
}

fn method_design(config: &StudyConfig, method: Method, grid: &TimeGrid) -> Result<SplineDesign> {
    match method {
        Method::NoSmoothProxy => Ok(SplineDesign::identity(grid.len())),
        _ => build_bspline_basis(grid, config.basis_dim, config.degree),
    }
}

fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf((1.0 + level) / 2.0)
}

/// Per-entry intervals for the single-imputation baseline: posterior
/// mean plus-minus a normal quantile times one draw's noise SD. The
/// spread of the completed datasets is deliberately ignored — that is
/// the failure mode this baseline exists to demonstrate.
fn single_impute_intervals_matrix(
    archive: &DrawArchive,
    mask: &DMatrix<bool>,
    level: f64,
) -> Result<Vec<EntryInterval>> {
    let mean = archive.posterior_mean_matrix()?;
    let noise_var = archive
        .params
        .last()
        .map(|p| p.noise_var)
        .ok_or_else(|| Error::InvalidInput("archive carries no parameter trace".into()))?;
    let half = normal_quantile(level) * noise_var.sqrt();
    let mut out = Vec::new();
    for i in 0..mask.nrows() {
        for c in 0..mask.ncols() {
            if !mask[(i, c)] {
                let m = mean[(i, c)];
                out.push(EntryInterval {
                    subject: i,
                    feature: None,
                    time: c,
                    mean: m,
                    lower: m - half,
                    upper: m + half,
                });
            }
        }
    }
    Ok(out)
}

fn single_impute_intervals_tensor(
    archive: &DrawArchive,
    mask: &Mask3,
    level: f64,
) -> Result<Vec<EntryInterval>> {
    let mean = archive.posterior_mean_tensor()?;
    let noise_var = archive
        .params
        .last()
        .map(|p| p.noise_var)
        .ok_or_else(|| Error::InvalidInput("archive carries no parameter trace".into()))?;
    let half = normal_quantile(level) * noise_var.sqrt();
    let (n, j, k) = mask.dims();
    let mut out = Vec::new();
    for i in 0..n {
        for f in 0..j {
            for t in 0..k {
                if !mask.get(i, f, t) {
                    let m = mean.get(i, f, t);
                    out.push(EntryInterval {
                        subject: i,
                        feature: Some(f),
                        time: t,
                        mean: m,
                        lower: m - half,
                        upper: m + half,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn run_single_replicate(
    scenario: &SimScenario,
    method: Method,
    config: &StudyConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = generate_single(scenario, &mut rng)?;
    let grid = TimeGrid::uniform(scenario.k);
    let mask = missingness_mask(
        scenario.n,
        scenario.k,
        scenario.missing_prop,
        config.min_obs,
        &mut rng,
    )?;
    let data = ObservedFunctionalMatrix::new(dataset.observed.clone(), mask.clone(), grid.clone())?;
    let design = method_design(config, method, &grid)?;
    let mcmc = sampler_config(config, method, seed);
    let archive = run_single_chain(&data, config.rank, &design, &mcmc, None)?;

    let point = archive.posterior_mean_matrix()?;
    let rel_mse = relative_mse(&dataset.observed, &point, &mask)?;

    // outcome scenarios grade the pooled regression instead of the
    // per-entry intervals
    if let Some(y) = &dataset.outcome {
        let beta_true = outcome_coefficient(&grid);
        let design_beta = build_bspline_basis(&grid, config.beta_basis_dim, config.degree)?;
        let (estimate, lower, upper) = match method {
            Method::SingleImputeProxy => {
                let fit = fit_sofr(&point, y, &design_beta, SofrSmoothing::Auto)?;
                let z = normal_quantile(config.level);
                let lower = DVector::from_fn(scenario.k, |t, _| {
                    fit.coeff[t] - z * fit.pointwise_var[t].sqrt()
                });
                let upper = DVector::from_fn(scenario.k, |t, _| {
                    fit.coeff[t] + z * fit.pointwise_var[t].sqrt()
                });
                (fit.coeff, lower, upper)
            }
            _ => {
                let pooled = pooled_sofr(
                    &archive,
                    y,
                    &design_beta,
                    &grid,
                    SofrSmoothing::Auto,
                    config.level,
                )?;
                (pooled.estimate, pooled.lower, pooled.upper)
            }
        };
        let covered = (0..scenario.k)
            .filter(|&t| lower[t] <= beta_true[t] && beta_true[t] <= upper[t])
            .count();
        return Ok(MetricsReport {
            relative_mse: rel_mse,
            coverage: covered as f64 / scenario.k as f64,
            relative_ise: Some(relative_ise(&estimate, &beta_true)?),
            runtime: 0.0,
        });
    }

    let intervals = match method {
        Method::SingleImputeProxy => {
            single_impute_intervals_matrix(&archive, &mask, config.level)?
        }
        _ => entry_credible_intervals(&archive, MissingMask::Matrix(&mask), config.level)?,
    };
    let coverage = coverage_rate(&dataset.observed, &intervals)?;
    Ok(MetricsReport {
        relative_mse: rel_mse,
        coverage,
        relative_ise: None,
        runtime: 0.0,
    })
}

fn run_multiway_replicate(
    scenario: &SimScenario,
    method: Method,
    config: &StudyConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dataset = generate_multiway(scenario, &mut rng)?;
    let dims = dataset.observed.dims();
    let grid = TimeGrid::uniform(scenario.k);
    let mask = missingness_mask_tensor(dims, scenario.missing_prop, config.min_obs, &mut rng)?;
    let data = ObservedFunctionalTensor::new(dataset.observed.clone(), mask.clone())?;
    let design = method_design(config, method, &grid)?;
    let mcmc = sampler_config(config, method, seed);
    let archive = run_multiway_chain(&data, config.rank, &design, &mcmc, None)?;

    let point = archive.posterior_mean_tensor()?;
    let rel_mse = relative_mse_tensor(&dataset.observed, &point, &mask)?;
    let intervals = match method {
        Method::SingleImputeProxy => {
            single_impute_intervals_tensor(&archive, &mask, config.level)?
        }
        _ => entry_credible_intervals(&archive, MissingMask::Tensor(&mask), config.level)?,
    };
    let coverage = coverage_rate_tensor(&dataset.observed, &intervals)?;
    Ok(MetricsReport {
        relative_mse: rel_mse,
        coverage,
        relative_ise: None,
        runtime: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn eigenfunctions_are_orthonormal_in_the_discrete_inner_product() {
        for (k, h) in [(100usize, 12usize), (50, 8), (20, 4)] {
            let u = make_eigenfunctions(k, h).unwrap();
            let gram = u.transpose() * &u / k as f64;
            for a in 0..h {
                for b in 0..h {
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!(
                        (gram[(a, b)] - want).abs() < 1e-10,
                        "gram[{a},{b}] = {}",
                        gram[(a, b)]
                    );
                }
            }
        }
    }

    #[test]
    fn leading_eigenfunctions_are_the_constant_and_the_sine() {
        let k = 60;
        let u = make_eigenfunctions(k, 2).unwrap();
        let first = DVector::from_column_slice(u.column(0).as_slice());
        for i in 0..k {
            assert!((first[i] - 1.0).abs() < 1e-12, "constant mode entry {i}");
        }
        let grid = TimeGrid::uniform(k);
        let raw = DVector::from_iterator(
            k,
            grid.points()
                .iter()
                .map(|t| std::f64::consts::SQRT_2 * (2.0 * std::f64::consts::PI * t).sin()),
        );
        let col = DVector::from_column_slice(u.column(1).as_slice());
        let norm = (col.dot(&col) / k as f64).sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let cos = col.dot(&raw) / (col.norm() * raw.norm());
        assert!(cos.abs() > 1.0 - 1e-12, "not collinear with the sine: {cos}");
    }

    #[test]
    fn eigenfunctions_match_a_qr_oracle() {
        let (k, h) = (40, 6);
        let u = make_eigenfunctions(k, h).unwrap();
        let grid = TimeGrid::uniform(k);
        let raw = DMatrix::from_fn(k, h, |i, c| {
            if c == 0 {
                return 1.0;
            }
            let t = grid.points()[i];
            let freq = ((c + 1) / 2) as f64;
            let phase = 2.0 * std::f64::consts::PI * freq * t;
            if c % 2 == 1 {
                std::f64::consts::SQRT_2 * phase.sin()
            } else {
                std::f64::consts::SQRT_2 * phase.cos()
            }
        });
        let q = raw.qr().q();
        for c in 0..h {
            // align signs, rescale from Euclidean to discrete norm
            let qc = DVector::from_column_slice(q.column(c).as_slice()) * (k as f64).sqrt();
            let uc = DVector::from_column_slice(u.column(c).as_slice());
            let sign = if qc.dot(&uc) < 0.0 { -1.0 } else { 1.0 };
            assert!(
                (qc * sign - uc).abs().max() < 1e-10,
                "column {c} disagrees with QR"
            );
        }
    }

    #[test]
    fn eigenfunctions_reject_too_many_components() {
        assert!(make_eigenfunctions(10, 11).is_err());
        assert!(make_eigenfunctions(10, 0).is_err());
    }

    #[test]
    fn generated_variance_decomposes_into_signal_plus_noise() {
        let mut scenario = SimScenario::single(10_000, 30, 0.5, 9);
        scenario.noise_var = 1.0;
        let mut r = rng(scenario.seed);
        let ds = generate_single(&scenario, &mut r).unwrap();
        let u = make_eigenfunctions(30, 12).unwrap();
        for k in [0usize, 14, 29] {
            let col = ds.observed.column(k);
            let mean = col.sum() / 10_000.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9_999.0;
            let expect: f64 = (0..12)
                .map(|h| SINGLE_EIGENVALUES[h] * u[(k, h)] * u[(k, h)])
                .sum::<f64>()
                + 1.0;
            assert!(
                (var - expect).abs() / expect < 0.05,
                "column {k}: var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn empty_eigenvalues_give_pure_noise() {
        let mut scenario = SimScenario::single(50, 20, 0.5, 10);
        scenario.eigen_values.clear();
        let mut r = rng(scenario.seed);
        let ds = generate_single(&scenario, &mut r).unwrap();
        assert!(ds.truth.abs().max() == 0.0);
        assert!(ds.observed.abs().max() > 0.0);
    }

    #[test]
    fn outcome_uses_the_quadratic_coefficient() {
        let grid = TimeGrid::uniform(10);
        let beta = outcome_coefficient(&grid);
        // t = 0.5 sits at index 4 of {0.1, ..., 1.0}
        assert!((beta[4] - 2.84).abs() < 1e-12);

        let scenario = SimScenario::single_with_outcome(200, 20, 0.5, 11);
        let mut r = rng(scenario.seed);
        let ds = generate_single(&scenario, &mut r).unwrap();
        let y = ds.outcome.unwrap();
        assert_eq!(y.len(), 200);
        // outcome variance ~ integral variance + 1; both O(1), so the
        // sample variance must exceed the pure-noise floor
        let mean = y.sum() / 200.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 199.0;
        assert!(var > 0.5, "outcome variance {var}");
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let scenario = SimScenario::single_with_outcome(20, 15, 0.5, 12);
        let a = generate_single(&scenario, &mut rng(12)).unwrap();
        let b = generate_single(&scenario, &mut rng(12)).unwrap();
        assert_eq!(a.observed, b.observed);
        assert_eq!(a.outcome.unwrap(), b.outcome.unwrap());

        let scenario = SimScenario::multiway_low_rank(10, 3, 15, 0.5, 13);
        let a = generate_multiway(&scenario, &mut rng(13)).unwrap();
        let b = generate_multiway(&scenario, &mut rng(13)).unwrap();
        assert_eq!(a.observed, b.observed);
    }

    #[test]
    fn noiseless_low_rank_tensor_has_rank_four() {
        let mut scenario = SimScenario::multiway_low_rank(30, 4, 40, 0.5, 14);
        scenario.noise_var = 0.0;
        let mut r = rng(scenario.seed);
        let ds = generate_multiway(&scenario, &mut r).unwrap();
        assert_eq!(ds.truth.data(), ds.observed.data());
        for mode in [crate::multilinear::Mode::One, crate::multilinear::Mode::Three] {
            let m = ds.truth.matricize(mode);
            let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
            assert!(sv[3] > 1e-3, "4th singular value unexpectedly small");
            assert!(sv[4] < 1e-8, "5th singular value {}", sv[4]);
        }
    }

    #[test]
    fn non_low_rank_tensor_exceeds_rank_four() {
        let mut scenario = SimScenario::multiway_non_low_rank(30, 4, 40, 0.5, 15);
        scenario.noise_var = 0.0;
        let mut r = rng(scenario.seed);
        let ds = generate_multiway(&scenario, &mut r).unwrap();
        // per-feature terms live on u_5..u_8: mode-3 rank is 2 + 4 = 6
        let m = ds.truth.matricize(crate::multilinear::Mode::Three);
        let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
        sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
        assert!(sv[4] > 1e-3, "5th singular value {} should be real", sv[4]);
        assert!(sv[5] > 1e-3, "6th singular value {} should be real", sv[5]);
        assert!(sv[6] < 1e-8, "7th singular value {} should vanish", sv[6]);
    }

    #[test]
    fn multiway_cell_variance_matches_the_component_formula() {
        // subjects are the replicates: J = 1 so each generator call
        // draws fresh subject and feature factors
        let k = 20;
        let mut cells = vec![Vec::with_capacity(10_000); 3];
        let checks = [0usize, 9, 19];
        for rep in 0..10_000u64 {
            let scenario = SimScenario::multiway_low_rank(1, 1, k, 0.5, rep);
            let ds = generate_multiway(&scenario, &mut rng(rep)).unwrap();
            for (slot, &kk) in checks.iter().enumerate() {
                cells[slot].push(ds.observed.get(0, 0, kk));
            }
        }
        let u = make_eigenfunctions(k, 4).unwrap();
        for (slot, &kk) in checks.iter().enumerate() {
            let vals = &cells[slot];
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (vals.len() - 1) as f64;
            let expect: f64 = (0..4)
                .map(|r| MULTIWAY_EIGENVALUES[r] * u[(kk, r)] * u[(kk, r)])
                .sum::<f64>()
                + 1.0;
            assert!(
                (var - expect).abs() / expect < 0.05,
                "cell {kk}: var {var} vs {expect}"
            );
        }
    }

    #[test]
    fn masking_respects_exact_counts_and_min_obs() {
        let mut r = rng(16);
        let mask = missingness_mask(50, 100, 0.8, 2, &mut r).unwrap();
        for i in 0..50 {
            let observed = (0..100).filter(|&c| mask[(i, c)]).count();
            assert_eq!(observed, 20);
        }

        // infeasible proportion is lowered, never below min_obs
        let mask = missingness_mask(30, 10, 0.95, 2, &mut r).unwrap();
        for i in 0..30 {
            let observed = (0..10).filter(|&c| mask[(i, c)]).count();
            assert_eq!(observed, 2);
        }

        assert!(missingness_mask(5, 1, 0.5, 2, &mut r).is_err());
        assert!(missingness_mask(5, 10, 0.0, 2, &mut r).is_err());
        assert!(missingness_mask(5, 10, 1.0, 2, &mut r).is_err());
    }

    #[test]
    fn masking_fraction_matches_the_target() {
        let mut r = rng(17);
        let (n, k, s) = (1000usize, 200usize, 0.815);
        let mask = missingness_mask(n, k, s, 2, &mut r).unwrap();
        let missing = mask.iter().filter(|b| !**b).count();
        let frac = missing as f64 / (n * k) as f64;
        assert!((frac - s).abs() < 0.005, "missing fraction {frac}");
    }

    #[test]
    fn tensor_masking_treats_each_curve_separately() {
        let mut r = rng(18);
        let mask = missingness_mask_tensor((20, 3, 50), 0.9, 2, &mut r).unwrap();
        for i in 0..20 {
            for j in 0..3 {
                let observed = (0..50).filter(|&k| mask.get(i, j, k)).count();
                assert_eq!(observed, 5);
            }
        }
    }

    #[test]
    fn relative_mse_matches_a_hand_loop() {
        let mut r = rng(19);
        let truth = DMatrix::from_fn(3, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        let imputed = DMatrix::from_fn(3, 3, |_, _| r.sample::<f64, _>(StandardNormal));
        let mask = DMatrix::from_fn(3, 3, |i, c| (i + c) % 2 == 0);
        let got = relative_mse(&truth, &imputed, &mask).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..3 {
            for c in 0..3 {
                if !mask[(i, c)] {
                    num += (truth[(i, c)] - imputed[(i, c)]).powi(2);
                    den += truth[(i, c)].powi(2);
                }
            }
        }
        assert!((got - num / den).abs() < 1e-14);

        assert_eq!(relative_mse(&truth, &truth, &mask).unwrap(), 0.0);
        let zeros = DMatrix::zeros(3, 3);
        assert!((relative_mse(&truth, &zeros, &mask).unwrap() - 1.0).abs() < 1e-14);
        let all = DMatrix::from_element(3, 3, true);
        assert!(relative_mse(&truth, &imputed, &all).is_err());
    }

    #[test]
    fn tensor_mse_agrees_with_matrix_mse_when_j_is_one() {
        let mut r = rng(20);
        let truth = Tensor3::from_fn((4, 1, 5), |_, _, _| r.sample(StandardNormal));
        let imputed = Tensor3::from_fn((4, 1, 5), |_, _, _| r.sample(StandardNormal));
        let mut mask = Mask3::filled((4, 1, 5), true);
        mask.set(0, 0, 1, false);
        mask.set(2, 0, 3, false);
        mask.set(3, 0, 0, false);
        let tensor_val = relative_mse_tensor(&truth, &imputed, &mask).unwrap();

        let tm = truth.matricize(crate::multilinear::Mode::One);
        let im = imputed.matricize(crate::multilinear::Mode::One);
        let mm = DMatrix::from_fn(4, 5, |i, k| mask.get(i, 0, k));
        let matrix_val = relative_mse(&tm, &im, &mm).unwrap();
        assert!((tensor_val - matrix_val).abs() < 1e-14);
    }

    #[test]
    fn coverage_handles_degenerate_and_infinite_intervals() {
        let truth = DMatrix::from_fn(2, 2, |i, c| (i * 2 + c) as f64);
        let make = |lower: f64, upper: f64| EntryInterval {
            subject: 1,
            feature: None,
            time: 1,
            mean: 0.0,
            lower,
            upper,
        };
        // truth[(1,1)] = 3
        assert_eq!(
            coverage_rate(&truth, &[make(f64::NEG_INFINITY, f64::INFINITY)]).unwrap(),
            1.0
        );
        assert_eq!(coverage_rate(&truth, &[make(3.0, 3.0)]).unwrap(), 1.0);
        assert_eq!(coverage_rate(&truth, &[make(4.0, 4.0)]).unwrap(), 0.0);
        assert!(coverage_rate(&truth, &[]).is_err());
    }

    #[test]
    fn coverage_of_exact_normal_intervals_is_nominal() {
        let n = 100_000;
        let mut r = rng(21);
        let truth = DMatrix::from_fn(n, 1, |_, _| r.sample::<f64, _>(StandardNormal));
        let intervals: Vec<EntryInterval> = (0..n)
            .map(|i| EntryInterval {
                subject: i,
                feature: None,
                time: 0,
                mean: 0.0,
                lower: -1.959963984540054,
                upper: 1.959963984540054,
            })
            .collect();
        let c = coverage_rate(&truth, &intervals).unwrap();
        assert!((c - 0.95).abs() < 0.005, "coverage {c}");
    }

    #[test]
    fn relative_ise_matches_a_hand_loop() {
        let mut r = rng(22);
        let truth = DVector::from_fn(17, |_, _| r.sample::<f64, _>(StandardNormal));
        let est = DVector::from_fn(17, |_, _| r.sample::<f64, _>(StandardNormal));
        let got = relative_ise(&est, &truth).unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..17 {
            num += (est[i] - truth[i]).powi(2);
            den += truth[i].powi(2);
        }
        assert!((got - num / den).abs() < 1e-14);
        assert_eq!(relative_ise(&truth, &truth).unwrap(), 0.0);
        let double = &truth * 2.0;
        assert!((relative_ise(&double, &truth).unwrap() - 1.0).abs() < 1e-14);
        assert!(relative_ise(&truth, &DVector::zeros(17)).is_err());
    }

    fn small_config() -> StudyConfig {
        StudyConfig {
            rank: 2,
            basis_dim: 8,
            degree: 3,
            burn_in: 80,
            draws: 25,
            thinning: 1,
            level: 0.95,
            beta_basis_dim: 8,
            min_obs: 2,
        }
    }

    fn small_scenario(seed: u64) -> SimScenario {
        let mut s = SimScenario::single(24, 30, 0.6, seed);
        s.eigen_values = vec![2.0, 1.0];
        s.noise_var = 0.25;
        s
    }

    #[test]
    fn replication_study_is_deterministic_and_indexed_by_seed() {
        let scenario = small_scenario(40);
        let config = small_config();
        let a = run_replication_study(&scenario, Method::Bamifun, 3, &config).unwrap();
        let b = run_replication_study(&scenario, Method::Bamifun, 3, &config).unwrap();
        assert_eq!(a.rows.len(), 3);
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_eq!(ra.seed, rb.seed);
            let (ma, mb) = (ra.outcome.as_ref().unwrap(), rb.outcome.as_ref().unwrap());
            assert_eq!(ma.relative_mse, mb.relative_mse);
            assert_eq!(ma.coverage, mb.coverage);
        }
        assert_eq!(a.rows[0].seed, 40);
        assert_eq!(a.rows[2].seed, 42);

        // one replicate alone reproduces row 0
        let single = run_replication_study(&scenario, Method::Bamifun, 1, &config).unwrap();
        let (m1, m3) = (
            single.rows[0].outcome.as_ref().unwrap(),
            a.rows[0].outcome.as_ref().unwrap(),
        );
        assert_eq!(m1.relative_mse, m3.relative_mse);
        assert_eq!(m1.coverage, m3.coverage);
    }

    #[test]
    fn replication_study_produces_sane_metrics() {
        let scenario = small_scenario(50);
        let config = small_config();
        for method in [Method::Bamifun, Method::NoSmoothProxy, Method::SingleImputeProxy] {
            let study = run_replication_study(&scenario, method, 2, &config).unwrap();
            let summary = study.summary();
            assert_eq!(summary.completed, 2, "{method} failed: {:?}", study.rows);
            assert!(summary.mean_relative_mse > 0.0 && summary.mean_relative_mse < 1.0);
            assert!(summary.mean_coverage > 0.5 && summary.mean_coverage <= 1.0);
            assert!(summary.total_runtime > 0.0);
            assert!(summary.mean_relative_ise.is_none());
        }
    }

    #[test]
    fn outcome_scenario_reports_coefficient_metrics() {
        let mut scenario = small_scenario(60);
        scenario.kind = ScenarioKind::SingleWithOutcome;
        scenario.n = 60;
        let config = small_config();
        let study = run_replication_study(&scenario, Method::Bamifun, 1, &config).unwrap();
        let m = study.rows[0].outcome.as_ref().unwrap();
        let ise = m.relative_ise.expect("outcome scenario must report ISE");
        assert!(ise >= 0.0 && ise < 1.0, "relative ISE {ise}");
        assert!(m.coverage >= 0.0 && m.coverage <= 1.0);
        let summary = study.summary();
        assert!(summary.mean_relative_ise.is_some());
    }

    #[test]
    fn multiway_replicates_run_end_to_end() {
        let mut scenario = SimScenario::multiway_low_rank(12, 3, 25, 0.5, 70);
        scenario.noise_var = 0.25;
        let mut config = small_config();
        config.rank = 4;
        let study = run_replication_study(&scenario, Method::Bamifun, 1, &config).unwrap();
        let summary = study.summary();
        assert_eq!(summary.completed, 1, "rows: {:?}", study.rows);
        assert!(summary.mean_relative_mse < 1.0);
        assert!(summary.mean_coverage > 0.5);
    }

    #[test]
    fn failed_replicates_are_recorded_not_fatal() {
        let scenario = small_scenario(80);
        let mut config = small_config();
        config.rank = 0; // every chain rejects this
        let study = run_replication_study(&scenario, Method::Bamifun, 3, &config).unwrap();
        let summary = study.summary();
        assert_eq!(summary.completed, 0);
        assert_eq!(summary.failed, 3);
        for row in &study.rows {
            assert!(row.outcome.is_err());
        }

        // study-level misconfiguration still fails fast
        assert!(run_replication_study(&scenario, Method::Bamifun, 0, &small_config()).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Bamifun, Method::NoSmoothProxy, Method::SingleImputeProxy] {
            let parsed: Method = m.name().parse().unwrap();
            assert_eq!(parsed, m);
        }
        assert!("pace".parse::<Method>().is_err());
    }
}
