//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 invalid configuration or input, 3 sampler or
//! runtime failure, 4 I/O failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::diagnostics::{fit_report, summarize, FitReport};
use crate::exposure::KernelKind;
use crate::geometry::Point;
use crate::io::{self, IoError};
use crate::model::{
    change_in_odds, FunctionalGrid, HazardModel, ModelError, ModelSpec, OmegaPrior, SurveyDataset,
};
use crate::sampler::{run_chains, Posterior, SamplerConfig, SamplerError};
use crate::simstudy::{
    self, discretization_study, three_canal_cell_counts, three_canal_model_network, FitSettings,
    HouseholdLayout, SimError, StudyScenario, DEFAULT_M_LADDER,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(
    name = "hazardfield",
    version,
    about = "Exposure to extensive environmental hazards"
)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed (overrides the `seed` key).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "HAZARDFIELD_THREADS")]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Print the resolved plan without executing.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Override any configuration key, `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with its ground truth.
    Simulate,
    /// Fit the model to a dataset.
    Fit {
        /// Directory with households.csv and observations.csv.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        chains: Option<usize>,
    },
    /// Recompute the diagnostics report from draws files.
    Diagnose {
        /// A draws CSV or a directory of them.
        #[arg(long)]
        draws: Option<PathBuf>,
    },
    /// Discretized versus quadrature exposure over a grid-resolution ladder.
    Validate,
    /// Replicated simulation study over a scenario grid.
    Study,
    /// Change in odds along a ray of locations.
    Functional {
        #[arg(long)]
        draws: Option<PathBuf>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Self::Simulate => "simulate",
            Self::Fit { .. } => "fit",
            Self::Diagnose { .. } => "diagnose",
            Self::Validate => "validate",
            Self::Study => "study",
            Self::Functional { .. } => "functional",
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Validation(_) => 2,
            Self::Runtime(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Self::Io(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match &e {
            IoError::Parse { .. } => Self::Validation(e.to_string()),
            IoError::Csv { source, .. } if !source.is_io_error() => Self::Validation(e.to_string()),
            _ => Self::Io(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Gp(_) | ModelError::NonFiniteState { .. } => Self::Runtime(e.to_string()),
            _ => Self::Validation(e.to_string()),
        }
    }
}

impl From<SamplerError> for CliError {
    fn from(e: SamplerError) -> Self {
        match e {
            SamplerError::Config(_) => Self::Validation(e.to_string()),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Scenario(_) | SimError::Mismatch(_) => Self::Validation(e.to_string()),
            SimError::Io { .. } | SimError::Format { .. } => Self::Io(e.to_string()),
            SimError::Model(m) => m.into(),
            SimError::Sampler(s) => s.into(),
            _ => Self::Runtime(e.to_string()),
        }
    }
}

fn io_fail(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

/// Provenance record written into every output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: u64,
    pub version: String,
    pub inputs: Vec<InputDigest>,
    pub output_dir: String,
    pub resolved: std::collections::BTreeMap<String, String>,
    pub started_unix: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

fn digests(paths: &[PathBuf]) -> Result<Vec<InputDigest>, CliError> {
    paths
        .iter()
        .map(|p| {
            Ok(InputDigest {
                path: p.display().to_string(),
                sha256: io::sha256_file(p)?,
            })
        })
        .collect()
}

struct Run {
    cfg: Config,
    config_path: Option<PathBuf>,
    out: PathBuf,
    dry_run: bool,
    command: &'static str,
}

impl Run {
    fn seed(&mut self) -> Result<u64, CliError> {
        Ok(self.cfg.get_or("seed", 1u64, "unsigned integer")?)
    }

    /// Prints the plan for `--dry-run`; returns true when execution should stop.
    fn dry(&self, extra: &[String]) -> bool {
        if !self.dry_run {
            return false;
        }
        println!("command: {}", self.command);
        println!("output: {}", self.out.display());
        for (k, v) in self.cfg.resolved() {
            println!("{k} = {v}");
        }
        for line in extra {
            println!("{line}");
        }
        true
    }

    fn prepare_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out).map_err(io_fail(&self.out))
    }

    fn write_manifest(&mut self, inputs: &[PathBuf]) -> Result<(), CliError> {
        let seed = self.seed()?;
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            seed,
            version: VERSION.to_string(),
            inputs: digests(inputs)?,
            output_dir: self.out.display().to_string(),
            resolved: self.cfg.resolved().clone(),
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
        };
        let path = self.out.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(io_fail(&path))
    }
}

fn parse_kernel(cfg: &mut Config) -> Result<KernelKind, CliError> {
    let raw: String = cfg.get_or(
        "kernel",
        KernelKind::Exponential.as_str().to_string(),
        "kernel name",
    )?;
    raw.parse()
        .map_err(|e: crate::exposure::ExposureError| CliError::Validation(e.to_string()))
}

fn positive_even_cells(cfg: &mut Config, default: usize) -> Result<usize, CliError> {
    let m = cfg.get_or("cells", default, "even integer")?;
    three_canal_cell_counts(m)?;
    Ok(m)
}

/// Model spec from configuration keys (grid resolution M included).
pub fn model_spec(cfg: &mut Config) -> Result<ModelSpec, CliError> {
    let m = positive_even_cells(cfg, 40)?;
    model_spec_with_cells(cfg, m)
}

/// Model spec from every key except `cells`.
fn model_spec_with_cells(cfg: &mut Config, m: usize) -> Result<ModelSpec, CliError> {
    let mut spec = ModelSpec::new(three_canal_cell_counts(m)?);
    spec.kernel = parse_kernel(cfg)?;
    spec.lambda_scale = cfg.get_or("lambda_scale", spec.lambda_scale, "number")?;
    spec.gamma_scale = cfg.get_or("gamma_scale", spec.gamma_scale, "number")?;
    spec.rho_scale = cfg.get_or("rho_scale", spec.rho_scale, "number")?;
    spec.beta_local_scale = cfg.get_or("beta_local_scale", spec.beta_local_scale, "number")?;
    spec.alpha = cfg.get_or("alpha", spec.alpha, "number")?;
    spec.cell_nugget = cfg.get_or("cell_nugget", spec.cell_nugget, "number")?;
    spec.group_baselines = cfg.get_or("group_baselines", false, "true or false")?;
    let omega: String = cfg.get_or("omega", "gamma".to_string(), "`gamma` or a number")?;
    spec.omega = if omega == "gamma" {
        OmegaPrior::Gamma {
            shape: cfg.get_or("omega_shape", 4.0, "number")?,
            rate: cfg.get_or("omega_rate", 1.0, "number")?,
        }
    } else {
        OmegaPrior::Fixed(omega.parse().map_err(|_| {
            CliError::Validation(format!(
                "key `omega`: expected `gamma` or a number, got `{omega}`"
            ))
        })?)
    };
    Ok(spec)
}

/// Sampler settings from configuration keys.
pub fn sampler_config(cfg: &mut Config, seed: u64) -> Result<SamplerConfig, CliError> {
    let d = SamplerConfig::default();
    let c = SamplerConfig {
        chains: cfg.get_or("chains", d.chains, "integer")?,
        warmup_iters: cfg.get_or("warmup", d.warmup_iters, "integer")?,
        sampling_iters: cfg.get_or("samples", d.sampling_iters, "integer")?,
        target_accept: cfg.get_or("target_accept", d.target_accept, "number")?,
        max_tree_depth: cfg.get_or("max_tree_depth", d.max_tree_depth, "integer")?,
        divergence_threshold: cfg.get_or("divergence_threshold", d.divergence_threshold, "number")?,
        seed,
    };
    c.validate()?;
    if c.sampling_iters == 0 {
        return Err(CliError::Validation("samples must be at least 1".into()));
    }
    Ok(c)
}

fn scenario_base(cfg: &mut Config, seed: u64) -> Result<(f64, usize), CliError> {
    let _ = seed;
    let lateral_sd = cfg.get_or("lateral_sd", 0.25, "number")?;
    let population = cfg.get_or("population", 200_000usize, "integer")?;
    Ok((lateral_sd, population))
}

fn cmd_simulate(run: &mut Run) -> Result<(), CliError> {
    let seed = run.seed()?;
    let (lateral_sd, population) = scenario_base(&mut run.cfg, seed)?;
    let layout: HouseholdLayout = run
        .cfg
        .get_or("layout", "clustered".to_string(), "`uniform` or `clustered`")?
        .parse()?;
    let mut scenario = StudyScenario::new(
        run.cfg.get_or("households", 200usize, "integer")?,
        run.cfg.get_or("obs_per_household", 10usize, "integer")?,
        layout,
        2,
    );
    scenario.seed = seed;
    scenario.lateral_sd = lateral_sd;
    scenario.population = population;
    let rep = run.cfg.get_or("replication", 0u64, "integer")?;
    scenario.validate()?;
    if run.dry(&[]) {
        return Ok(());
    }
    run.prepare_out()?;
    let inputs: Vec<PathBuf> = run.config_path.iter().cloned().collect();
    run.write_manifest(&inputs)?;
    let (dataset, truth) = simstudy::generate_dataset(&scenario, rep)?;
    io::write_households(&run.out.join("households.csv"), dataset.households())?;
    io::write_observations(&run.out.join("observations.csv"), dataset.observations())?;
    io::write_truth(
        &run.out.join("truth_exposure.csv"),
        &run.out.join("truth_params.csv"),
        &truth,
    )?;
    eprintln!(
        "simulated {} households, {} observations -> {}",
        dataset.households().len(),
        dataset.observations().len(),
        run.out.display()
    );
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<(SurveyDataset, Vec<PathBuf>), CliError> {
    let h = dir.join("households.csv");
    let o = dir.join("observations.csv");
    let households = io::read_households(&h)?;
    let observations = io::read_observations(&o)?;
    if households.is_empty() {
        return Err(CliError::Validation(format!("{}: no households", h.display())));
    }
    Ok((SurveyDataset::new(households, observations)?, vec![h, o]))
}

fn write_report(path: &Path, report: &FitReport) -> Result<(), CliError> {
    let f = std::fs::File::create(path).map_err(io_fail(path))?;
    report
        .write_csv(f)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn cmd_fit(run: &mut Run, data: Option<PathBuf>, chains: Option<usize>) -> Result<(), CliError> {
    if let Some(d) = data {
        run.cfg.set("data", d.display())?;
    }
    if let Some(c) = chains {
        run.cfg.set("chains", c)?;
    }
    let seed = run.seed()?;
    let data: PathBuf = run.cfg.require("data", "directory path")?;
    let spec = model_spec(&mut run.cfg)?;
    let sampler = sampler_config(&mut run.cfg, seed)?;
    if run.dry(&[]) {
        return Ok(());
    }
    let (dataset, mut inputs) = load_dataset(&data)?;
    run.prepare_out()?;
    inputs.extend(run.config_path.iter().cloned());
    run.write_manifest(&inputs)?;
    let model = HazardModel::new(three_canal_model_network(), &dataset, spec)?;
    let outputs = run_chains(&model, &sampler)?;
    let names = model.param_names();
    for c in &outputs {
        io::write_chain_draws(&run.out.join(format!("draws_chain{}.csv", c.chain)), &names, c)?;
    }
    let report = fit_report(names, &outputs, sampler.max_tree_depth);
    write_report(&run.out.join("report.csv"), &report)?;
    let path = run.out.join("sampler.csv");
    let mut w =
        csv::Writer::from_path(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let rec = |w: &mut csv::Writer<std::fs::File>, r: &[String]| {
        w.write_record(r)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
    };
    rec(
        &mut w,
        &[
            "chain",
            "divergences",
            "warmup_divergences",
            "treedepth_saturations",
            "stepsize",
            "mean_accept_stat",
        ]
        .map(String::from),
    )?;
    for c in &outputs {
        let n = c.accept_stat.len().max(1) as f64;
        rec(
            &mut w,
            &[
                c.chain.to_string(),
                c.divergences().to_string(),
                c.warmup_divergences.to_string(),
                c.treedepth
                    .iter()
                    .filter(|d| **d >= sampler.max_tree_depth)
                    .count()
                    .to_string(),
                c.stepsize.last().copied().unwrap_or(f64::NAN).to_string(),
                (c.accept_stat.iter().sum::<f64>() / n).to_string(),
            ],
        )?;
    }
    w.flush().map_err(io_fail(&path))?;
    eprintln!(
        "fit: {} chains x {} draws, {} divergences, max R-hat {} -> {}",
        outputs.len(),
        sampler.sampling_iters,
        report.divergences,
        report.max_rhat().map_or("NA".into(), |r| format!("{r:.4}")),
        run.out.display()
    );
    Ok(())
}

/// Draws files under `path`: the file itself, or every `draws*.csv` in a directory.
fn draw_files(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io_fail(path))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("draws") && n.ends_with(".csv"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(CliError::Validation(format!(
            "no draws files in {}",
            path.display()
        )));
    }
    Ok(files)
}

fn cmd_diagnose(run: &mut Run, draws: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(d) = draws {
        run.cfg.set("draws", d.display())?;
    }
    let src: PathBuf = run.cfg.require("draws", "path")?;
    let depth = run.cfg.get_or("max_tree_depth", 10u32, "integer")?;
    if run.dry(&[]) {
        return Ok(());
    }
    let files = draw_files(&src)?;
    run.prepare_out()?;
    run.write_manifest(&files)?;
    let (draws, stats) = io::read_draws(&files)?;
    let report = FitReport {
        params: summarize(&draws),
        divergences: stats.divergent,
        treedepth_saturations: stats.treedepth.iter().filter(|d| **d >= depth).count(),
    };
    write_report(&run.out.join("report.csv"), &report)?;
    eprintln!(
        "diagnose: {} parameters, {} divergences, max R-hat {}",
        report.params.len(),
        report.divergences,
        report.max_rhat().map_or("NA".into(), |r| format!("{r:.4}"))
    );
    Ok(())
}

fn cmd_validate(run: &mut Run) -> Result<(), CliError> {
    let seed = run.seed()?;
    let ladder: Vec<usize> =
        run.cfg
            .list_or("m_ladder", &DEFAULT_M_LADDER, "comma-separated even integers")?;
    for &m in &ladder {
        three_canal_cell_counts(m)?;
    }
    let configs = run.cfg.get_or("validate_configs", 100usize, "integer")?;
    if run.dry(&[]) {
        return Ok(());
    }
    run.prepare_out()?;
    let inputs: Vec<PathBuf> = run.config_path.iter().cloned().collect();
    run.write_manifest(&inputs)?;
    let study = discretization_study(&ladder, configs, seed)?;
    let path = run.out.join("validation.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.to_string()))?;
    let csv_fail = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record([
        "m",
        "config",
        "x",
        "y",
        "rho",
        "discretized",
        "quadrature",
        "error",
        "bound",
    ])
    .map_err(csv_fail)?;
    for r in &study.rows {
        w.write_record([
            r.m.to_string(),
            r.config.to_string(),
            r.location.x.to_string(),
            r.location.y.to_string(),
            r.rho.to_string(),
            r.discretized.to_string(),
            r.quadrature.to_string(),
            r.error.to_string(),
            r.bound.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(io_fail(&path))?;
    let path = run.out.join("convergence.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.to_string()))?;
    w.write_record(["m", "mean_error", "mean_bound", "slope"])
        .map_err(csv_fail)?;
    for (m, e, b) in &study.per_m {
        w.write_record([
            m.to_string(),
            e.to_string(),
            b.to_string(),
            study.slope.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(io_fail(&path))?;
    let violations = study.rows.iter().filter(|r| r.bound < r.error).count();
    eprintln!(
        "validate: log-log slope {:.3}, {} bound violations over {} rows",
        study.slope,
        violations,
        study.rows.len()
    );
    Ok(())
}

fn cmd_study(run: &mut Run) -> Result<(), CliError> {
    let seed = run.seed()?;
    let (lateral_sd, population) = scenario_base(&mut run.cfg, seed)?;
    let js: Vec<usize> = run.cfg.list_or("households", &[100], "integers")?;
    let is: Vec<usize> = run.cfg.list_or("obs_per_household", &[10], "integers")?;
    let layouts: Vec<String> = run
        .cfg
        .list_or("layout", &["clustered".to_string()], "layout names")?;
    let ms: Vec<usize> = run.cfg.list_or("cells", &[20, 40], "even integers")?;
    let reps = run.cfg.get_or("replications", 5usize, "integer")?;
    let keep_draws = run.cfg.get_or("keep_draws", false, "true or false")?;
    // run_replication swaps in each scenario's own cell counts
    let spec = model_spec_with_cells(&mut run.cfg, ms.first().copied().unwrap_or(20))?;
    let sampler = sampler_config(&mut run.cfg, seed)?;
    let mut scenarios = Vec::new();
    for &j in &js {
        for &i in &is {
            for l in &layouts {
                for &m in &ms {
                    let mut s = StudyScenario::new(j, i, l.parse()?, m);
                    s.replications = reps;
                    s.seed = seed;
                    s.lateral_sd = lateral_sd;
                    s.population = population;
                    s.validate()?;
                    scenarios.push(s);
                }
            }
        }
    }
    let grid: Vec<String> = scenarios
        .iter()
        .map(|s| format!("scenario {} ({} replications)", s.name(), s.replications))
        .collect();
    if run.dry(&grid) {
        return Ok(());
    }
    run.prepare_out()?;
    let inputs: Vec<PathBuf> = run.config_path.iter().cloned().collect();
    run.write_manifest(&inputs)?;
    let settings = FitSettings { sampler, spec };
    let reports = simstudy::run_study(&scenarios, &settings, &run.out, keep_draws)?;
    for r in &reports {
        eprintln!(
            "study {}: {} ok, {} failed, {} flagged",
            r.scenario.name(),
            r.results.len(),
            r.failures.len(),
            r.results.iter().filter(|x| x.flagged()).count()
        );
    }
    Ok(())
}

fn cmd_functional(run: &mut Run, draws: Option<PathBuf>) -> Result<(), CliError> {
    if let Some(d) = draws {
        run.cfg.set("draws", d.display())?;
    }
    let src: PathBuf = run.cfg.require("draws", "path")?;
    let m = positive_even_cells(&mut run.cfg, 40)?;
    let kernel = parse_kernel(&mut run.cfg)?;
    let origin = run.cfg.pair_or("ray_origin", (2.5, 0.0))?;
    let dir = run.cfg.pair_or("ray_direction", (0.0, 1.0))?;
    let dmin = run.cfg.get_or("distance_min", 0.01, "number")?;
    let dmax = run.cfg.get_or("distance_max", 1.0, "number")?;
    let npts = run.cfg.get_or("distance_points", 100usize, "integer")?;
    let norm = dir.0.hypot(dir.1);
    if !(norm > 0.0) || !(dmin >= 0.0 && dmax >= dmin) || npts == 0 {
        return Err(CliError::Validation(
            "need a non-zero ray direction, 0 ≤ distance_min ≤ distance_max and distance_points ≥ 1".into(),
        ));
    }
    if run.dry(&[]) {
        return Ok(());
    }
    let files = draw_files(&src)?;
    run.prepare_out()?;
    run.write_manifest(&files)?;
    let (draws, _) = io::read_draws(&files)?;
    let network = three_canal_model_network();
    let partition = crate::geometry::build_partition(&network, &three_canal_cell_counts(m)?)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let grid = FunctionalGrid {
        network: &network,
        partition: &partition,
        kernel,
    };
    let at = |d: f64| Point::new(origin.0 + d * dir.0 / norm, origin.1 + d * dir.1 / norm);
    let s1 = at(dmin);
    let path = run.out.join("functional.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io(e.to_string()))?;
    let csv_fail = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["distance", "x", "y", "mean", "q10", "q90"])
        .map_err(csv_fail)?;
    for k in 0..npts {
        let d = if npts == 1 {
            dmin
        } else {
            dmin + (dmax - dmin) * k as f64 / (npts - 1) as f64
        };
        let s2 = at(d);
        let oc = change_in_odds(&grid, &draws, s1, s2)?;
        w.write_record([
            d.to_string(),
            s2.x.to_string(),
            s2.y.to_string(),
            oc.mean.to_string(),
            oc.q10.to_string(),
            oc.q90.to_string(),
        ])
        .map_err(csv_fail)?;
    }
    w.flush().map_err(io_fail(&path))?;
    eprintln!("functional: {npts} distances -> {}", path.display());
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("--set expects KEY=VALUE, got `{o}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.set("seed", s)?;
    }
    if let Some(t) = cli.threads {
        cfg.set("threads", t)?;
    }
    if let Some(t) = cfg.get::<usize>("threads", "integer")? {
        if t == 0 {
            return Err(CliError::Validation("threads must be at least 1".into()));
        }
        // A pool may already exist when embedded in tests; that is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let mut run = Run {
        cfg,
        config_path: cli.config.clone(),
        out: cli.out.clone(),
        dry_run: cli.dry_run,
        command: cli.command.name(),
    };
    match cli.command {
        Command::Simulate => cmd_simulate(&mut run),
        Command::Fit { data, chains } => cmd_fit(&mut run, data, chains),
        Command::Diagnose { draws } => cmd_diagnose(&mut run, draws),
        Command::Validate => cmd_validate(&mut run),
        Command::Study => cmd_study(&mut run),
        Command::Functional { draws } => cmd_functional(&mut run, draws),
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> Vec<String> {
        std::iter::once("hazardfield")
            .chain(extra.iter().copied())
            .map(String::from)
            .collect()
    }

    #[test]
    fn zero_households_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        let code = run(args(&[
            "simulate",
            "--set",
            "households=0",
            "--out",
            out.to_str().unwrap(),
        ]));
        assert_eq!(code, 2);
        assert!(!out.exists());
    }

    #[test]
    fn unknown_key_and_bad_value_exit_2() {
        assert_eq!(run(args(&["simulate", "--set", "nonsense=1", "--dry-run"])), 2);
        assert_eq!(
            run(args(&["simulate", "--set", "households=ten", "--dry-run"])),
            2
        );
        assert_eq!(
            run(args(&["validate", "--set", "m_ladder=20,41", "--dry-run"])),
            2
        );
    }

    #[test]
    fn missing_data_dir_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let code = run(args(&[
            "fit",
            "--data",
            dir.path().join("absent").to_str().unwrap(),
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ]));
        assert_eq!(code, 4);
    }

    #[test]
    fn dry_run_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        assert_eq!(
            run(args(&["study", "--dry-run", "--out", out.to_str().unwrap()])),
            0
        );
        assert!(!out.exists());
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "seed = 5\nchains = 3\n").unwrap();
        let cli = Cli::try_parse_from(args(&[
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "8",
            "diagnose",
        ]))
        .unwrap();
        let mut c = Config::load(&cfg).unwrap();
        c.set("seed", cli.seed.unwrap()).unwrap();
        assert_eq!(c.get_or("seed", 1u64, "int").unwrap(), 8);
        assert_eq!(sampler_config(&mut c, 8).unwrap().chains, 3);
    }

    #[test]
    fn omega_key_selects_prior() {
        let mut c = Config::parse("omega = 2.5").unwrap();
        assert_eq!(model_spec(&mut c).unwrap().omega, OmegaPrior::Fixed(2.5));
        let mut c = Config::parse("omega = wide").unwrap();
        assert!(model_spec(&mut c).is_err());
        let mut c = Config::default();
        assert!(matches!(
            model_spec(&mut c).unwrap().omega,
            OmegaPrior::Gamma { .. }
        ));
    }
}
