//! Command-line front end: imputation runs, model selection, pooled
//! regression, interval extraction, and the simulation harness.
//!
//! Settings resolve in three layers: built-in defaults, then a
//! `--config` key=value file, then same-named command-line flags.
//! Exit codes: 0 on success, 1 for usage or input problems, 2 for
//! numerical failures while sampling.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bamifun::harness::{
    self, generate_multiway, generate_single, missingness_mask, missingness_mask_tensor,
    run_replication_study, Method, ScenarioKind, SimScenario, StudyConfig,
};
use bamifun::inference::{entry_credible_intervals, pooled_sofr, SofrSmoothing};
use bamifun::io::{
    load_archive, parse_smooth_var, read_config_file, read_multiway_csv, read_outcome_csv,
    read_single_csv, save_archive, write_intervals_csv, write_multiway_long_csv,
    write_single_long_csv, ArchiveMask, ArchiveSidecar, DataFormat, RunSettings,
};
use bamifun::multilinear::{build_bspline_basis, TimeGrid};
use bamifun::multiway_gibbs::{run_multiway_chain, ObservedFunctionalTensor};
use bamifun::selection::{
    cross_validate_rank, default_initial_rank, default_rank_grid, default_smooth_var_grid,
    grid_select_smooth_var,
};
use bamifun::single_gibbs::{run_single_chain, McmcConfig, ObservedFunctionalMatrix};
use bamifun::{Error, Result};

#[derive(Parser)]
#[command(
    name = "bamifun",
    version,
    about = "Bayesian multiple imputation for sparsely observed functional data"
)]
struct Cli {
    /// Flat key=value settings file; flags override its entries
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Base RNG seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for all outputs (created if absent)
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out_dir: PathBuf,

    /// Encoding for archive draw files
    #[arg(long, global = true, value_name = "bin|csv")]
    format: Option<String>,

    #[command(subcommand)]
    command: Command,
}

/// Sampler flags shared by the imputation-style subcommands; every flag
/// mirrors a config-file key of the same name.
#[derive(Args, Clone, Default)]
struct SamplerArgs {
    /// Latent components; omit to select by cross-validation
    #[arg(long)]
    rank: Option<usize>,

    /// Spline basis dimension
    #[arg(long = "basis-dim")]
    basis_dim: Option<usize>,

    /// Spline degree
    #[arg(long)]
    degree: Option<usize>,

    #[arg(long = "burn-in")]
    burn_in: Option<usize>,

    /// Retained completed datasets
    #[arg(long)]
    draws: Option<usize>,

    #[arg(long)]
    thinning: Option<usize>,

    /// Credible-interval level
    #[arg(long)]
    level: Option<f64>,

    /// Minimum observed points per curve
    #[arg(long = "min-obs")]
    min_obs: Option<usize>,

    /// Subtract observed column means before sampling (true/false)
    #[arg(long = "pre-center")]
    pre_center: Option<bool>,

    /// 'sampled' or a fixed positive smoothing variance
    #[arg(long = "smooth-var")]
    smooth_var: Option<String>,
}

/// Scenario flags for `simulate` and `replicate`.
#[derive(Args, Clone)]
struct ScenarioArgs {
    /// single | single+outcome | multiway-lowrank | multiway-nonlowrank
    #[arg(long, default_value = "single")]
    kind: String,

    /// Subjects
    #[arg(long, default_value_t = 100)]
    n: usize,

    /// Features (multiway kinds only)
    #[arg(long, default_value_t = 4)]
    j: usize,

    /// Grid points per curve
    #[arg(long, default_value_t = 100)]
    k: usize,

    /// Fraction of each curve to mask
    #[arg(long = "missing-prop", default_value_t = 0.8)]
    missing_prop: f64,

    /// Measurement-noise variance
    #[arg(long = "noise-var", default_value_t = 1.0)]
    noise_var: f64,

    /// Comma-separated component variances (defaults depend on kind)
    #[arg(long = "eigen-values")]
    eigen_values: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Impute a single-level dataset and write a draw archive
    ImputeSingle {
        /// Long CSV: subject,time,value
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Impute a multiway dataset and write a draw archive
    ImputeMultiway {
        /// Long CSV: subject,feature,time,value
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Choose the number of components by hold-out cross-validation
    CvRank {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated candidate ranks (default: derived from the data)
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Choose a fixed smoothing variance by hold-out cross-validation
    CvSmooth {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated candidate variances
        #[arg(long)]
        grid: Option<String>,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
    /// Pool a scalar-on-function regression across archive draws
    PoolSofr {
        #[arg(long)]
        archive: PathBuf,
        /// CSV: subject,value
        #[arg(long)]
        outcome: PathBuf,
        /// Basis dimension for the coefficient function
        #[arg(long = "beta-basis-dim")]
        beta_basis_dim: Option<usize>,
        #[arg(long)]
        level: Option<f64>,
        /// 'auto' or a fixed ridge value
        #[arg(long = "smooth")]
        smooth: Option<String>,
    },
    /// Per-entry credible intervals for the missing cells of an archive
    Intervals {
        #[arg(long)]
        archive: PathBuf,
        #[arg(long)]
        level: Option<f64>,
    },
    /// Generate one synthetic dataset and write it as CSV tables
    Simulate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Minimum observed points kept per curve
        #[arg(long = "min-obs", default_value_t = harness::DEFAULT_MIN_OBS)]
        min_obs: usize,
    },
    /// Run a replication study and write per-replicate metrics
    Replicate {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// bamifun | no-smooth-proxy | single-impute-proxy
        #[arg(long, default_value = "bamifun")]
        method: String,
        #[arg(long, default_value_t = 10)]
        reps: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
    },
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version land here too; they are not usage errors
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<()> {
    std::fs::create_dir_all(&cli.out_dir)?;
    let format: DataFormat = match &cli.format {
        Some(raw) => raw.parse()?,
        None => DataFormat::Bin,
    };
    match &cli.command {
        Command::ImputeSingle { data, sampler } => {
            let settings = resolve_settings(&cli, sampler)?;
            impute_single(&cli.out_dir, format, data, &settings)
        }
        Command::ImputeMultiway { data, sampler } => {
            let settings = resolve_settings(&cli, sampler)?;
            impute_multiway(&cli.out_dir, format, data, &settings)
        }
        Command::CvRank {
            data,
            grid,
            sampler,
        } => {
            let settings = resolve_settings(&cli, sampler)?;
            cv_rank(&cli.out_dir, data, grid.as_deref(), &settings)
        }
        Command::CvSmooth {
            data,
            grid,
            sampler,
        } => {
            let settings = resolve_settings(&cli, sampler)?;
            cv_smooth(&cli.out_dir, data, grid.as_deref(), &settings)
        }
        Command::PoolSofr {
            archive,
            outcome,
            beta_basis_dim,
            level,
            smooth,
        } => {
            let settings = resolve_settings(&cli, &SamplerArgs::default())?;
            pool_sofr(
                &cli.out_dir,
                archive,
                outcome,
                beta_basis_dim.unwrap_or(settings.basis_dim),
                settings.degree,
                level.unwrap_or(settings.level),
                smooth.as_deref(),
            )
        }
        Command::Intervals { archive, level } => {
            let settings = resolve_settings(&cli, &SamplerArgs::default())?;
            intervals(&cli.out_dir, archive, level.unwrap_or(settings.level))
        }
        Command::Simulate { scenario, min_obs } => {
            let settings = resolve_settings(&cli, &SamplerArgs::default())?;
            let spec = scenario.to_scenario(settings.seed)?;
            simulate(&cli.out_dir, &spec, *min_obs)
        }
        Command::Replicate {
            scenario,
            method,
            reps,
            sampler,
        } => {
            let settings = resolve_settings(&cli, sampler)?;
            let spec = scenario.to_scenario(settings.seed)?;
            let method: Method = method.parse()?;
            replicate(&cli.out_dir, &spec, method, *reps, &settings)
        }
    }
}

/// Defaults, then the config file, then command-line flags.
fn resolve_settings(cli: &Cli, sampler: &SamplerArgs) -> Result<RunSettings> {
    let mut settings = RunSettings::default();
    if let Some(path) = &cli.config {
        let entries = read_config_file(path)?;
        settings.apply_entries(&entries)?;
    }
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if sampler.rank.is_some() {
        settings.rank = sampler.rank;
    }
    if let Some(v) = sampler.basis_dim {
        settings.basis_dim = v;
    }
    if let Some(v) = sampler.degree {
        settings.degree = v;
    }
    if let Some(v) = sampler.burn_in {
        settings.burn_in = v;
    }
    if let Some(v) = sampler.draws {
        settings.draws = v;
    }
    if let Some(v) = sampler.thinning {
        settings.thinning = v;
    }
    if let Some(v) = sampler.level {
        settings.level = v;
    }
    if let Some(v) = sampler.min_obs {
        settings.min_obs = v;
    }
    if let Some(v) = sampler.pre_center {
        settings.pre_center = v;
    }
    if let Some(raw) = &sampler.smooth_var {
        settings.smooth_var = parse_smooth_var(raw)?;
    }
    Ok(settings)
}

fn mcmc_config(settings: &RunSettings) -> McmcConfig {
    McmcConfig {
        burn_in: settings.burn_in,
        draws: settings.draws,
        thinning: settings.thinning,
        seed: settings.seed,
        smooth_mode: settings.smooth_var,
        pre_center: settings.pre_center,
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>> {
    raw.split(',')
        .map(|f| {
            f.trim()
                .parse::<T>()
                .map_err(|_| Error::InvalidConfig(format!("bad {what} entry '{}'", f.trim())))
        })
        .collect()
}

impl ScenarioArgs {
    fn to_scenario(&self, seed: u64) -> Result<SimScenario> {
        let kind = match self.kind.as_str() {
            "single" => ScenarioKind::Single,
            "single+outcome" | "single-outcome" => ScenarioKind::SingleWithOutcome,
            "multiway-lowrank" => ScenarioKind::MultiwayLowRank,
            "multiway-nonlowrank" => ScenarioKind::MultiwayNonLowRank,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown scenario kind '{other}' (expected single, single+outcome, \
                     multiway-lowrank, or multiway-nonlowrank)"
                )))
            }
        };
        let mut scenario = match kind {
            ScenarioKind::Single => SimScenario::single(self.n, self.k, self.missing_prop, seed),
            ScenarioKind::SingleWithOutcome => {
                SimScenario::single_with_outcome(self.n, self.k, self.missing_prop, seed)
            }
            ScenarioKind::MultiwayLowRank => {
                SimScenario::multiway_low_rank(self.n, self.j, self.k, self.missing_prop, seed)
            }
            ScenarioKind::MultiwayNonLowRank => {
                SimScenario::multiway_non_low_rank(self.n, self.j, self.k, self.missing_prop, seed)
            }
        };
        scenario.noise_var = self.noise_var;
        if let Some(raw) = &self.eigen_values {
            scenario.eigen_values = parse_list(raw, "eigen-values")?;
        }
        scenario.validate()?;
        Ok(scenario)
    }
}

fn numbered_labels(prefix: &str, count: usize) -> Vec<String> {
    (1..=count).map(|i| format!("{prefix}{i}")).collect()
}

fn impute_single(
    out_dir: &Path,
    format: DataFormat,
    data_path: &Path,
    settings: &RunSettings,
) -> Result<()> {
    let table = read_single_csv(data_path)?;
    let data = ObservedFunctionalMatrix::new(
        table.values.clone(),
        table.mask.clone(),
        table.grid.clone(),
    )?;
    let design = build_bspline_basis(&table.grid, settings.basis_dim, settings.degree)?;
    let mcmc = mcmc_config(settings);
    let rank = match settings.rank {
        Some(r) => r,
        None => {
            let grid = default_rank_grid(default_initial_rank(&data));
            let cv = cross_validate_rank(&data, &grid, &design, &McmcConfig {
                seed: settings.seed,
                ..McmcConfig::cv_default()
            })?;
            println!(
                "cross-validated rank: {} (candidates {:?})",
                cv.selected, grid
            );
            cv.selected
        }
    };
    let archive = run_single_chain(&data, rank, &design, &mcmc, None)?;
    let sidecar = ArchiveSidecar {
        mask: ArchiveMask::Matrix(table.mask.clone()),
        grid: table.grid.clone(),
        raw_times: table.raw_times.clone(),
        subjects: table.subjects.clone(),
        features: Vec::new(),
    };
    let archive_dir = out_dir.join("archive");
    save_archive(&archive_dir, &archive, &sidecar, format)?;
    let mean_path = out_dir.join("imputed_mean.csv");
    write_single_long_csv(
        &mean_path,
        &archive.posterior_mean_matrix()?,
        None,
        &table.subjects,
        &table.raw_times,
    )?;
    println!(
        "imputed {} subjects x {} times (rank {rank}, {} draws)",
        table.subjects.len(),
        table.raw_times.len(),
        archive.len()
    );
    println!("archive: {}", archive_dir.display());
    println!("posterior mean: {}", mean_path.display());
    Ok(())
}

fn impute_multiway(
    out_dir: &Path,
    format: DataFormat,
    data_path: &Path,
    settings: &RunSettings,
) -> Result<()> {
    let table = read_multiway_csv(data_path)?;
    let rank = settings.rank.ok_or_else(|| {
        Error::InvalidConfig("impute-multiway needs --rank (or rank= in the config)".into())
    })?;
    let data = ObservedFunctionalTensor::new(table.values.clone(), table.mask.clone())?;
    let design = build_bspline_basis(&table.grid, settings.basis_dim, settings.degree)?;
    let mcmc = mcmc_config(settings);
    let archive = run_multiway_chain(&data, rank, &design, &mcmc, None)?;
    let sidecar = ArchiveSidecar {
        mask: ArchiveMask::Tensor(table.mask.clone()),
        grid: table.grid.clone(),
        raw_times: table.raw_times.clone(),
        subjects: table.subjects.clone(),
        features: table.features.clone(),
    };
    let archive_dir = out_dir.join("archive");
    save_archive(&archive_dir, &archive, &sidecar, format)?;
    let mean_path = out_dir.join("imputed_mean.csv");
    write_multiway_long_csv(
        &mean_path,
        &archive.posterior_mean_tensor()?,
        None,
        &table.subjects,
        &table.features,
        &table.raw_times,
    )?;
    println!(
        "imputed {} subjects x {} features x {} times (rank {rank}, {} draws)",
        table.subjects.len(),
        table.features.len(),
        table.raw_times.len(),
        archive.len()
    );
    println!("archive: {}", archive_dir.display());
    println!("posterior mean: {}", mean_path.display());
    Ok(())
}

fn cv_rank(
    out_dir: &Path,
    data_path: &Path,
    grid: Option<&str>,
    settings: &RunSettings,
) -> Result<()> {
    let table = read_single_csv(data_path)?;
    let data = ObservedFunctionalMatrix::new(
        table.values.clone(),
        table.mask.clone(),
        table.grid.clone(),
    )?;
    let candidates = match grid {
        Some(raw) => parse_list::<usize>(raw, "rank grid")?,
        None => default_rank_grid(default_initial_rank(&data)),
    };
    let design = build_bspline_basis(&table.grid, settings.basis_dim, settings.degree)?;
    let mcmc = mcmc_config(settings);
    let selection = cross_validate_rank(&data, &candidates, &design, &mcmc)?;
    let out = out_dir.join("cv_rank.csv");
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["rank", "validation_mse", "selected"])?;
    for entry in &selection.table {
        w.write_record([
            entry.rank.to_string(),
            entry.validation_mse.to_string(),
            (entry.rank == selection.selected).to_string(),
        ])?;
    }
    w.flush()?;
    println!("selected rank: {}", selection.selected);
    println!("table: {}", out.display());
    Ok(())
}

fn cv_smooth(
    out_dir: &Path,
    data_path: &Path,
    grid: Option<&str>,
    settings: &RunSettings,
) -> Result<()> {
    let table = read_single_csv(data_path)?;
    let data = ObservedFunctionalMatrix::new(
        table.values.clone(),
        table.mask.clone(),
        table.grid.clone(),
    )?;
    let candidates = match grid {
        Some(raw) => parse_list::<f64>(raw, "smoothing grid")?,
        None => default_smooth_var_grid(),
    };
    let rank = match settings.rank {
        Some(r) => r,
        None => default_initial_rank(&data),
    };
    let design = build_bspline_basis(&table.grid, settings.basis_dim, settings.degree)?;
    let mcmc = mcmc_config(settings);
    let selection = grid_select_smooth_var(&data, &candidates, rank, &design, &mcmc)?;
    let out = out_dir.join("cv_smooth.csv");
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record(["smooth_var", "validation_mse", "selected"])?;
    for entry in &selection.table {
        w.write_record([
            entry.smooth_var.to_string(),
            entry.validation_mse.to_string(),
            (entry.smooth_var == selection.selected).to_string(),
        ])?;
    }
    w.flush()?;
    println!("selected smoothing variance: {}", selection.selected);
    println!("table: {}", out.display());
    Ok(())
}

fn pool_sofr(
    out_dir: &Path,
    archive_dir: &Path,
    outcome_path: &Path,
    beta_basis_dim: usize,
    degree: usize,
    level: f64,
    smooth: Option<&str>,
) -> Result<()> {
    let (archive, sidecar) = load_archive(archive_dir)?;
    if archive.matrices().is_err() {
        return Err(Error::InvalidInput(
            "pool-sofr needs a single-level archive".into(),
        ));
    }
    let y = read_outcome_csv(outcome_path, &sidecar.subjects)?;
    let design_beta = build_bspline_basis(&sidecar.grid, beta_basis_dim, degree)?;
    let smoothing = match smooth {
        None => SofrSmoothing::Auto,
        Some(raw) if raw.eq_ignore_ascii_case("auto") => SofrSmoothing::Auto,
        Some(raw) => {
            let v: f64 = raw.parse().map_err(|_| {
                Error::InvalidConfig(format!("--smooth must be 'auto' or a number, got '{raw}'"))
            })?;
            SofrSmoothing::Fixed(v)
        }
    };
    let pooled = pooled_sofr(&archive, &y, &design_beta, &sidecar.grid, smoothing, level)?;
    let out = out_dir.join("pooled_beta.csv");
    let mut w = csv::Writer::from_path(&out)?;
    w.write_record([
        "time",
        "estimate",
        "lower",
        "upper",
        "within_var",
        "between_var",
        "total_var",
        "dof",
    ])?;
    for t in 0..sidecar.raw_times.len() {
        w.write_record([
            sidecar.raw_times[t].to_string(),
            pooled.estimate[t].to_string(),
            pooled.lower[t].to_string(),
            pooled.upper[t].to_string(),
            pooled.within_var[t].to_string(),
            pooled.between_var[t].to_string(),
            pooled.total_var[t].to_string(),
            pooled.dof[t].to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "pooled coefficient over {} draws at level {level}",
        archive.len()
    );
    println!("table: {}", out.display());
    Ok(())
}

fn intervals(out_dir: &Path, archive_dir: &Path, level: f64) -> Result<()> {
    let (archive, sidecar) = load_archive(archive_dir)?;
    let intervals = entry_credible_intervals(&archive, sidecar.mask.missing_mask(), level)?;
    let out = out_dir.join("intervals.csv");
    let features = if sidecar.features.is_empty() {
        None
    } else {
        Some(sidecar.features.as_slice())
    };
    write_intervals_csv(&out, &intervals, &sidecar.subjects, features, &sidecar.raw_times)?;
    println!(
        "{} missing-entry intervals at level {level}",
        intervals.len()
    );
    println!("table: {}", out.display());
    Ok(())
}

fn simulate(out_dir: &Path, scenario: &SimScenario, min_obs: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let raw_times: Vec<f64> = TimeGrid::uniform(scenario.k).points().to_vec();
    let subjects = numbered_labels("s", scenario.n);
    if scenario.kind.is_multiway() {
        let dataset = generate_multiway(scenario, &mut rng)?;
        let mask = missingness_mask_tensor(
            dataset.observed.dims(),
            scenario.missing_prop,
            min_obs,
            &mut rng,
        )?;
        let features = numbered_labels("f", scenario.j);
        let data = out_dir.join("data.csv");
        write_multiway_long_csv(
            &data,
            &dataset.observed,
            Some(&mask),
            &subjects,
            &features,
            &raw_times,
        )?;
        let complete = out_dir.join("complete.csv");
        write_multiway_long_csv(
            &complete,
            &dataset.observed,
            None,
            &subjects,
            &features,
            &raw_times,
        )?;
        let signal = out_dir.join("signal.csv");
        write_multiway_long_csv(&signal, &dataset.truth, None, &subjects, &features, &raw_times)?;
        println!(
            "simulated {} x {} x {} tensor, masked {:.1}% of each curve",
            scenario.n,
            scenario.j,
            scenario.k,
            100.0 * (1.0 - mask.count_observed() as f64 / (scenario.n * scenario.j * scenario.k) as f64)
        );
        for p in [&data, &complete, &signal] {
            println!("wrote {}", p.display());
        }
    } else {
        let dataset = generate_single(scenario, &mut rng)?;
        let mask = missingness_mask(scenario.n, scenario.k, scenario.missing_prop, min_obs, &mut rng)?;
        let data = out_dir.join("data.csv");
        write_single_long_csv(&data, &dataset.observed, Some(&mask), &subjects, &raw_times)?;
        let complete = out_dir.join("complete.csv");
        write_single_long_csv(&complete, &dataset.observed, None, &subjects, &raw_times)?;
        let signal = out_dir.join("signal.csv");
        write_single_long_csv(&signal, &dataset.truth, None, &subjects, &raw_times)?;
        let observed = mask.iter().filter(|b| **b).count();
        println!(
            "simulated {} x {} matrix, masked {:.1}% of each curve",
            scenario.n,
            scenario.k,
            100.0 * (1.0 - observed as f64 / (scenario.n * scenario.k) as f64)
        );
        let mut written = vec![data, complete, signal];
        if let Some(y) = &dataset.outcome {
            let path = out_dir.join("outcome.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["subject", "value"])?;
            for (label, v) in subjects.iter().zip(y.iter()) {
                w.write_record([label.as_str(), &v.to_string()])?;
            }
            w.flush()?;
            written.push(path);
        }
        for p in &written {
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn replicate(
    out_dir: &Path,
    scenario: &SimScenario,
    method: Method,
    reps: usize,
    settings: &RunSettings,
) -> Result<()> {
    let config = StudyConfig {
        rank: settings
            .rank
            .unwrap_or(if scenario.kind.is_multiway() { 4 } else { 9 }),
        basis_dim: settings.basis_dim,
        degree: settings.degree,
        burn_in: settings.burn_in,
        draws: settings.draws,
        thinning: settings.thinning,
        level: settings.level,
        beta_basis_dim: settings.basis_dim,
        min_obs: settings.min_obs,
    };
    let study = run_replication_study(scenario, method, reps, &config)?;

    let metrics_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&metrics_path)?;
    w.write_record([
        "replicate",
        "seed",
        "status",
        "relative_mse",
        "coverage",
        "relative_ise",
        "runtime_s",
        "note",
    ])?;
    for row in &study.rows {
        match &row.outcome {
            Ok(m) => w.write_record([
                row.replicate.to_string(),
                row.seed.to_string(),
                "ok".to_string(),
                m.relative_mse.to_string(),
                m.coverage.to_string(),
                m.relative_ise.map_or(String::new(), |v| v.to_string()),
                m.runtime.to_string(),
                String::new(),
            ])?,
            Err(msg) => w.write_record([
                row.replicate.to_string(),
                row.seed.to_string(),
                "error".to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                msg.clone(),
            ])?,
        }
    }
    w.flush()?;

    let summary = study.summary();
    let summary_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.write_record([
        "method",
        "completed",
        "failed",
        "mean_relative_mse",
        "se_relative_mse",
        "mean_coverage",
        "se_coverage",
        "mean_relative_ise",
        "se_relative_ise",
        "total_runtime_s",
    ])?;
    w.write_record([
        method.to_string(),
        summary.completed.to_string(),
        summary.failed.to_string(),
        summary.mean_relative_mse.to_string(),
        summary.se_relative_mse.to_string(),
        summary.mean_coverage.to_string(),
        summary.se_coverage.to_string(),
        summary.mean_relative_ise.map_or(String::new(), |v| v.to_string()),
        summary.se_relative_ise.map_or(String::new(), |v| v.to_string()),
        summary.total_runtime.to_string(),
    ])?;
    w.flush()?;

    println!(
        "{method}: {} of {} replicates completed; mean relative MSE {:.4}, mean coverage {:.4}",
        summary.completed, reps, summary.mean_relative_mse, summary.mean_coverage
    );
    if let Some(ise) = summary.mean_relative_ise {
        println!("mean relative ISE {ise:.4}");
    }
    println!("metrics: {}", metrics_path.display());
    println!("summary: {}", summary_path.display());
    Ok(())
}
