//! Synthetic study on the three-canal geometry: ground truth, household
//! sampling, dataset generation, replicated fits and error estimators.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diagnostics::{fit_report, quantile};
use crate::exposure::{true_total_exposure, DistanceKernel, ExposureError, Intensity, KernelKind};
use crate::geometry::{
    CanalNetwork, CanalSegment, CellCounts, EndpointKind, GeometryError, PartitionedNetwork, Point,
};
use crate::model::{
    infection_prob, ConstrainedState, HazardModel, Household, ModelError, ModelSpec, Observation, OmegaPrior,
    SurveyDataset,
};
use crate::quadrature::QuadratureOptions;
use crate::sampler::{run_chains, Posterior, PosteriorDraws, SamplerConfig, SamplerError};

pub const TRUE_LAMBDA: f64 = 0.05;
pub const TRUE_RHO: f64 = 0.1;
pub const TRUE_GAMMA: f64 = -0.15;

/// Study region [0, 10] × [0, 4] km.
pub const REGION: (f64, f64) = (10.0, 4.0);

/// Height of the upper horizontal canal.
pub const X2_HEIGHT: f64 = 8.0 / 3.0;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("truth and fit disagree: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

fn straight(id: &str, a: (f64, f64), b: (f64, f64)) -> CanalSegment {
    CanalSegment::new(id, vec![Point::new(a.0, a.1), Point::new(b.0, b.1)]).expect("fixed geometry is valid")
}

/// The three-canal network: x1 along the bottom edge, y vertical through the
/// middle, x2 horizontal crossing y at height 8/3.
pub fn three_canal_geometry() -> CanalNetwork {
    CanalNetwork::from_named(
        vec![
            straight("x1", (0.0, 0.0), (10.0, 0.0)),
            straight("y", (5.0, 0.0), (5.0, 4.0)),
            straight("x2", (0.0, X2_HEIGHT), (10.0, X2_HEIGHT)),
        ],
        &[("x1", 5.0, "y", 0.0), ("x2", 5.0, "y", X2_HEIGHT)],
        &[
            ("x1", 0.0, EndpointKind::Source),
            ("x2", 0.0, EndpointKind::Source),
            ("y", 4.0, EndpointKind::Source),
            ("x1", 10.0, EndpointKind::Sink),
            ("x2", 10.0, EndpointKind::Sink),
        ],
    )
    .expect("fixed geometry is valid")
}

/// [`three_canal_geometry`] with y split at the x2 crossing into `y_lo` and `y_up`,
/// so every segment carries its own equal-width grid.
pub fn three_canal_model_network() -> CanalNetwork {
    three_canal_geometry()
        .split_segment("y", X2_HEIGHT, "y_lo", "y_up")
        .expect("split point is interior")
}

/// Cell counts for resolution `m`: m cells on x1 and x2, m/2 on each half of y.
pub fn three_canal_cell_counts(m: usize) -> Result<CellCounts, SimError> {
    if m < 2 || m % 2 != 0 {
        return Err(SimError::Scenario(format!(
            "grid resolution M must be even and at least 2, got {m}"
        )));
    }
    Ok([
        ("x1".to_string(), m),
        ("x2".to_string(), m),
        ("y_lo".to_string(), m / 2),
        ("y_up".to_string(), m / 2),
    ]
    .into_iter()
    .collect())
}

/// Generating intensities along each segment, as functions of arc length.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrueIntensity;

impl TrueIntensity {
    pub fn x1(c: f64) -> f64 {
        0.15 + c * c / 100.0
    }

    pub fn y(c: f64) -> f64 {
        Self::x1(5.0) + c * c / 16.0
    }

    pub fn x2(c: f64) -> f64 {
        Self::y(X2_HEIGHT) - 0.25 + c * c / 100.0
    }

    /// Intensity on segment `id` (either network's naming) at arc `c`.
    pub fn eval(&self, id: &str, c: f64) -> Option<f64> {
        match id {
            "x1" => Some(Self::x1(c)),
            "x2" => Some(Self::x2(c)),
            "y" | "y_lo" => Some(Self::y(c)),
            "y_up" => Some(Self::y(X2_HEIGHT + c)),
            _ => None,
        }
    }
}

/// Boxed per-segment truth aligned with `network.segments()`.
fn truth_functions(network: &CanalNetwork) -> Result<Vec<Box<dyn Fn(f64) -> f64 + Sync>>, SimError> {
    network
        .segments()
        .iter()
        .map(|s| {
            let id = s.id().to_string();
            TrueIntensity
                .eval(&id, 0.0)
                .ok_or_else(|| SimError::Scenario(format!("no true intensity for segment `{id}`")))?;
            Ok(
                Box::new(move |c: f64| TrueIntensity.eval(&id, c).unwrap_or(f64::NAN))
                    as Box<dyn Fn(f64) -> f64 + Sync>,
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HouseholdLayout {
    Uniform,
    Clustered,
}

impl HouseholdLayout {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Clustered => "clustered",
        }
    }
}

impl fmt::Display for HouseholdLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for HouseholdLayout {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "clustered" => Ok(Self::Clustered),
            other => Err(SimError::Scenario(format!(
                "household layout must be `uniform` or `clustered`, got `{other}`"
            ))),
        }
    }
}

/// One cell of the simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyScenario {
    pub households: usize,
    pub obs_per_household: usize,
    pub layout: HouseholdLayout,
    pub cells: usize,
    pub replications: usize,
    pub seed: u64,
    /// Lateral sd (km) of clustered households around the network.
    pub lateral_sd: f64,
    pub population: usize,
}

impl StudyScenario {
    pub fn new(households: usize, obs_per_household: usize, layout: HouseholdLayout, cells: usize) -> Self {
        Self {
            households,
            obs_per_household,
            layout,
            cells,
            replications: 5,
            seed: 1,
            lateral_sd: 0.25,
            population: 200_000,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::Scenario(m));
        if self.households == 0 {
            return bad("households (J) must be at least 1".into());
        }
        if self.obs_per_household == 0 {
            return bad("observations per household (I) must be at least 1".into());
        }
        if self.replications == 0 {
            return bad("replications (S) must be at least 1".into());
        }
        if self.population < self.households {
            return bad(format!(
                "population {} is smaller than the sample size {}",
                self.population, self.households
            ));
        }
        if !(self.lateral_sd > 0.0 && self.lateral_sd.is_finite()) {
            return bad(format!("lateral_sd must be positive, got {}", self.lateral_sd));
        }
        three_canal_cell_counts(self.cells)?;
        Ok(())
    }

    /// Stable label such as `J200_I10_clustered_M40`.
    pub fn name(&self) -> String {
        format!(
            "J{}_I{}_{}_M{}",
            self.households, self.obs_per_household, self.layout, self.cells
        )
    }
}

/// Ground truth of one generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub household_ids: Vec<String>,
    /// Exact exposure of each household under the true intensity.
    pub exposures: Vec<f64>,
    pub lambda: f64,
    pub rho: f64,
    pub gamma: Vec<f64>,
}

/// Random number stream for replication `rep` of a study seeded with `seed`.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

fn clustered_point<R: Rng + ?Sized>(network: &CanalNetwork, sd: f64, rng: &mut R) -> Point {
    let total = network.total_length();
    let lateral = Normal::new(0.0, sd).expect("sd validated");
    loop {
        let mut s = rng.random_range(0.0..total);
        let mut seg = &network.segments()[0];
        for candidate in network.segments() {
            seg = candidate;
            if s < candidate.length() {
                break;
            }
            s -= candidate.length();
        }
        let s = s.min(seg.length());
        let base = seg.point_at(s).expect("arc within segment");
        let t = seg.tangent_at(s).expect("arc within segment");
        let off: f64 = rng.sample(lateral);
        let p = Point::new(base.x - t.y * off, base.y + t.x * off);
        if (0.0..=REGION.0).contains(&p.x) && (0.0..=REGION.1).contains(&p.y) {
            return p;
        }
    }
}

/// Draws a population of locations, takes a simple random sample of J of
/// them and attaches one standard-normal covariate per household.
pub fn sample_households<R: Rng + ?Sized>(
    scenario: &StudyScenario,
    rng: &mut R,
) -> Result<Vec<Household>, SimError> {
    scenario.validate()?;
    let network = three_canal_geometry();
    let population: Vec<Point> = (0..scenario.population)
        .map(|_| match scenario.layout {
            HouseholdLayout::Uniform => {
                Point::new(rng.random_range(0.0..REGION.0), rng.random_range(0.0..REGION.1))
            }
            HouseholdLayout::Clustered => clustered_point(&network, scenario.lateral_sd, rng),
        })
        .collect();
    let mut chosen = sample_indices(rng, population.len(), scenario.households).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .enumerate()
        .map(|(j, i)| Household {
            id: format!("h{j}"),
            location: population[i],
            group: 0,
            covariates: vec![rng.sample(StandardNormal)],
        })
        .collect())
}

/// Exact exposure of each location under the true intensity and kernel.
pub fn true_exposures(locations: &[Point], rho: f64, opts: QuadratureOptions) -> Result<Vec<f64>, SimError> {
    let network = three_canal_geometry();
    let fns = truth_functions(&network)?;
    let refs: Vec<Intensity<'_>> = fns.iter().map(|b| b.as_ref() as Intensity<'_>).collect();
    let kernel = DistanceKernel::new(KernelKind::Exponential, rho)?;
    locations
        .par_iter()
        .map(|&p| Ok(true_total_exposure(&network, &refs, &kernel, p, opts)?))
        .collect()
}

/// Infection probability 1 − exp(−e^{xγ}(λ + 𝓔)).
pub fn true_probability(x: &[f64], gamma: &[f64], lambda: f64, exposure: f64) -> f64 {
    let lin: f64 = x.iter().zip(gamma).map(|(x, g)| x * g).sum();
    infection_prob(lin.exp() * (lambda + exposure))
}

/// Generates replication `rep` of a scenario: households, Bernoulli outcomes
/// and the exact exposures behind them.
pub fn generate_dataset(
    scenario: &StudyScenario,
    rep: u64,
) -> Result<(SurveyDataset, TruthRecord), SimError> {
    let mut rng = replication_rng(scenario.seed, rep);
    let households = sample_households(scenario, &mut rng)?;
    let locations: Vec<Point> = households.iter().map(|h| h.location).collect();
    let exposures = true_exposures(&locations, TRUE_RHO, QuadratureOptions::default())?;
    let gamma = vec![TRUE_GAMMA];
    let mut observations = Vec::with_capacity(households.len() * scenario.obs_per_household);
    for (h, e) in households.iter().zip(&exposures) {
        let p = true_probability(&h.covariates, &gamma, TRUE_LAMBDA, *e);
        for _ in 0..scenario.obs_per_household {
            observations.push(Observation {
                household_id: h.id.clone(),
                outcome: u8::from(rng.random::<f64>() < p),
            });
        }
    }
    let truth = TruthRecord {
        household_ids: households.iter().map(|h| h.id.clone()).collect(),
        exposures,
        lambda: TRUE_LAMBDA,
        rho: TRUE_RHO,
        gamma,
    };
    Ok((SurveyDataset::new(households, observations)?, truth))
}

/// One prior predictive draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPredictiveDraw {
    pub state: ConstrainedState,
    /// Infection probability of each household.
    pub probs: Vec<f64>,
    /// Simulated outcomes, `obs_per_household` per household, household-major.
    pub outcomes: Vec<u8>,
}

impl PriorPredictiveDraw {
    pub fn infected_fraction(&self) -> f64 {
        self.outcomes.iter().map(|&y| y as f64).sum::<f64>() / self.outcomes.len().max(1) as f64
    }
}

/// Unconstrained state drawn from the model's prior.
pub fn sample_prior_state<R: Rng + ?Sized>(model: &HazardModel, rng: &mut R) -> Vec<f64> {
    let spec = model.spec();
    let lay = model.layout();
    let mut q = vec![0.0; lay.dim()];
    let half_normal_log = |rng: &mut R, s: f64| {
        let u: f64 = rng.sample(StandardNormal);
        (s * u.abs()).ln()
    };
    for i in lay.baseline.clone() {
        q[i] = if spec.group_baselines {
            spec.beta_local_scale * rng.sample::<f64, _>(StandardNormal)
        } else {
            half_normal_log(rng, spec.lambda_scale)
        };
    }
    q[lay.log_rho] = half_normal_log(rng, spec.rho_scale);
    for i in lay.gamma.clone() {
        q[i] = spec.gamma_scale * rng.sample::<f64, _>(StandardNormal);
    }
    if let (Some(i), OmegaPrior::Gamma { shape, rate }) = (lay.log_omega, spec.omega) {
        let g = Gamma::new(shape, 1.0 / rate).expect("validated prior");
        q[i] = rng.sample(g).ln();
    }
    for i in lay.innovations() {
        q[i] = rng.sample(StandardNormal);
    }
    q
}

/// Draws parameters and field from the prior, then outcomes for every
/// household of the model's dataset.
pub fn prior_predictive<R: Rng + ?Sized>(
    model: &HazardModel,
    n: usize,
    obs_per_household: usize,
    rng: &mut R,
) -> Result<Vec<PriorPredictiveDraw>, SimError> {
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let q = sample_prior_state(model, rng);
        let state = model.constrained(&q)?;
        let probs: Vec<f64> = (0..model.n_households())
            .map(|j| infection_prob(model.per_obs_rate(&q, j, state.theta[j])))
            .collect();
        let mut outcomes = Vec::with_capacity(probs.len() * obs_per_household);
        for p in &probs {
            for _ in 0..obs_per_household {
                outcomes.push(u8::from(rng.random::<f64>() < *p));
            }
        }
        out.push(PriorPredictiveDraw {
            state,
            probs,
            outcomes,
        });
    }
    Ok(out)
}

/// Posterior point and interval summary of one estimand against its truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSummary {
    pub truth: f64,
    pub mean: f64,
    pub q10: f64,
    pub q90: f64,
}

impl PointSummary {
    pub fn from_draws(truth: f64, draws: &[f64]) -> Self {
        Self {
            truth,
            mean: draws.iter().sum::<f64>() / draws.len() as f64,
            q10: quantile(draws, 0.1).unwrap_or(f64::NAN),
            q90: quantile(draws, 0.9).unwrap_or(f64::NAN),
        }
    }

    /// `None` when the interval is degenerate.
    pub fn covered(&self) -> Option<bool> {
        if self.q10 < self.q90 {
            Some(self.q10 < self.truth && self.truth < self.q90)
        } else {
            None
        }
    }
}

/// Everything the estimators need from one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationResult {
    pub replication: u64,
    /// Scalar parameters keyed by name (`lambda`, `rho`, `gamma[0]`).
    pub params: BTreeMap<String, PointSummary>,
    /// Per-household exposure summaries.
    pub theta: Vec<PointSummary>,
    /// Cell-sum IMAE per model segment.
    pub imae: BTreeMap<String, f64>,
    pub max_rhat: Option<f64>,
    pub divergences: usize,
    pub draws: usize,
}

impl ReplicationResult {
    /// Flagged when the largest R-hat is at least 1.01 or undefined.
    pub fn flagged(&self) -> bool {
        self.max_rhat.is_none_or(|r| r >= 1.01)
    }

    pub fn theta_coverage(&self) -> Option<f64> {
        let c: Option<Vec<bool>> = self.theta.iter().map(PointSummary::covered).collect();
        let c = c?;
        Some(c.iter().filter(|b| **b).count() as f64 / c.len().max(1) as f64)
    }
}

/// Σ_m Δ_m·|mean(e^{z_m}) − Λ(centroid_m)| for each segment of the fitted grid.
pub fn imae(
    draws: &PosteriorDraws,
    network: &CanalNetwork,
    partition: &PartitionedNetwork,
) -> Result<BTreeMap<String, f64>, SimError> {
    let mut out = BTreeMap::new();
    for sp in partition.segments() {
        let id = network.segments()[sp.segment].id();
        let mut total = 0.0;
        for (i, cell) in sp.cells.iter().enumerate() {
            let name = format!("z[{id}][{i}]");
            let k = draws
                .index(&name)
                .ok_or_else(|| SimError::Mismatch(format!("draws lack `{name}`")))?;
            let v = draws.pooled(k);
            let mean = v.iter().map(|z| z.exp()).sum::<f64>() / v.len() as f64;
            let truth = TrueIntensity
                .eval(id, cell.centroid_arc)
                .ok_or_else(|| SimError::Mismatch(format!("no true intensity for `{id}`")))?;
            total += cell.width * (mean - truth).abs();
        }
        out.insert(id.to_string(), total);
    }
    Ok(out)
}

/// Condenses one fit against its truth.
pub fn summarize_replication(
    replication: u64,
    draws: &PosteriorDraws,
    truth: &TruthRecord,
    network: &CanalNetwork,
    partition: &PartitionedNetwork,
) -> Result<ReplicationResult, SimError> {
    let col = |name: &str| {
        draws
            .index(name)
            .map(|k| draws.pooled(k))
            .ok_or_else(|| SimError::Mismatch(format!("draws lack `{name}`")))
    };
    let mut params = BTreeMap::new();
    params.insert(
        "lambda".to_string(),
        PointSummary::from_draws(truth.lambda, &col("lambda")?),
    );
    params.insert(
        "rho".to_string(),
        PointSummary::from_draws(truth.rho, &col("rho")?),
    );
    for (i, g) in truth.gamma.iter().enumerate() {
        let name = format!("gamma[{i}]");
        params.insert(name.clone(), PointSummary::from_draws(*g, &col(&name)?));
    }
    let n_theta = draws.names().iter().filter(|n| n.starts_with("theta[")).count();
    if n_theta != truth.exposures.len() {
        return Err(SimError::Mismatch(format!(
            "{} households in truth, {} exposure columns in draws",
            truth.exposures.len(),
            n_theta
        )));
    }
    let theta = truth
        .exposures
        .iter()
        .enumerate()
        .map(|(j, e)| Ok(PointSummary::from_draws(*e, &col(&format!("theta[{j}]"))?)))
        .collect::<Result<Vec<_>, SimError>>()?;
    Ok(ReplicationResult {
        replication,
        params,
        theta,
        imae: imae(draws, network, partition)?,
        max_rhat: None,
        divergences: 0,
        draws: draws.rows().count(),
    })
}

/// Study-level error summary of one estimand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimandReport {
    pub estimand: String,
    pub bias: f64,
    pub mse: f64,
    pub coverage: Option<f64>,
    pub se_bias: Option<f64>,
    pub se_mse: Option<f64>,
    pub se_coverage: Option<f64>,
}

fn mean_se(v: &[f64]) -> (f64, Option<f64>) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, None);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, Some((var / n).sqrt()))
}

fn report_from(estimand: &str, bias: &[f64], sq: &[f64], cov: Option<Vec<f64>>) -> EstimandReport {
    let (b, se_bias) = mean_se(bias);
    let (m, se_mse) = mean_se(sq);
    let (coverage, se_coverage) = match cov {
        Some(c) => {
            let (c, se) = mean_se(&c);
            (Some(c), se)
        }
        None => (None, None),
    };
    EstimandReport {
        estimand: estimand.to_string(),
        bias: b,
        mse: m,
        coverage,
        se_bias,
        se_mse,
        se_coverage,
    }
}

/// Bias, MSE and 80% coverage over replications.
///
/// Scalars use the posterior mean as point estimator. The `theta` row
/// averages per-household errors and coverage within each replication first.
/// Coverage is `None` when any interval is degenerate.
pub fn estimators(results: &[ReplicationResult]) -> Result<Vec<EstimandReport>, SimError> {
    let Some(first) = results.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::new();
    for name in first.params.keys() {
        let mut bias = Vec::new();
        let mut cov = Some(Vec::new());
        for r in results {
            let p = r
                .params
                .get(name)
                .ok_or_else(|| SimError::Mismatch(format!("replication {} lacks `{name}`", r.replication)))?;
            bias.push(p.mean - p.truth);
            cov = match (cov, p.covered()) {
                (Some(mut c), Some(b)) => {
                    c.push(f64::from(u8::from(b)));
                    Some(c)
                }
                _ => None,
            };
        }
        let sq: Vec<f64> = bias.iter().map(|b| b * b).collect();
        out.push(report_from(name, &bias, &sq, cov));
    }
    let n = first.theta.len();
    if results.iter().any(|r| r.theta.len() != n) {
        return Err(SimError::Mismatch(
            "replications differ in household count".into(),
        ));
    }
    if n > 0 {
        let bias: Vec<f64> = results
            .iter()
            .map(|r| r.theta.iter().map(|p| p.mean - p.truth).sum::<f64>() / n as f64)
            .collect();
        let sq: Vec<f64> = results
            .iter()
            .map(|r| r.theta.iter().map(|p| (p.mean - p.truth).powi(2)).sum::<f64>() / n as f64)
            .collect();
        let cov: Option<Vec<f64>> = results.iter().map(ReplicationResult::theta_coverage).collect();
        out.push(report_from("theta", &bias, &sq, cov));
    }
    Ok(out)
}

/// Mean IMAE per segment with its standard error over replications.
pub fn imae_summary(results: &[ReplicationResult]) -> BTreeMap<String, (f64, Option<f64>)> {
    let mut per: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        for (k, v) in &r.imae {
            per.entry(k.clone()).or_default().push(*v);
        }
    }
    per.into_iter().map(|(k, v)| (k, mean_se(&v))).collect()
}

/// Model and sampler settings shared by every replication of a study.
#[derive(Debug, Clone)]
pub struct FitSettings {
    pub sampler: SamplerConfig,
    /// Template; the grid is replaced per scenario.
    pub spec: ModelSpec,
}

/// Sampler seed for replication `rep`, independent of the data stream.
pub fn replication_sampler_seed(seed: u64, rep: u64) -> u64 {
    let mut rng = replication_rng(seed ^ 0x5EED_F17D_A7A5_u64, rep);
    rng.random()
}

/// Generates, fits and condenses one replication.
pub fn run_replication(
    scenario: &StudyScenario,
    settings: &FitSettings,
    rep: u64,
) -> Result<(ReplicationResult, PosteriorDraws), SimError> {
    let (dataset, truth) = generate_dataset(scenario, rep)?;
    let mut spec = settings.spec.clone();
    spec.cells = three_canal_cell_counts(scenario.cells)?;
    let model = HazardModel::new(three_canal_model_network(), &dataset, spec)?;
    let mut cfg = settings.sampler.clone();
    cfg.seed = replication_sampler_seed(scenario.seed, rep);
    let chains = run_chains(&model, &cfg)?;
    let names = model.param_names();
    let report = fit_report(names.clone(), &chains, cfg.max_tree_depth);
    let draws = PosteriorDraws::from_chains(names, &chains);
    let mut result = summarize_replication(rep, &draws, &truth, model.network(), model.partition())?;
    result.max_rhat = report.max_rhat();
    result.divergences = report.divergences;
    Ok((result, draws))
}

/// Outcome of one scenario of a study.
#[derive(Debug, Clone)]
pub struct ScenarioReport {
    pub scenario: StudyScenario,
    pub results: Vec<ReplicationResult>,
    pub failures: Vec<(u64, String)>,
    pub estimates: Vec<EstimandReport>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SimError + '_ {
    move |source| SimError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Runs every scenario, writing under `out/<scenario name>/`:
/// `rep_<r>/result.json` (the resume marker), `rep_<r>/draws.csv` when
/// `keep_draws`, `failures.csv`, `estimates.csv` and `imae.csv`.
/// Replications with an existing result file are loaded instead of refit.
pub fn run_study(
    scenarios: &[StudyScenario],
    settings: &FitSettings,
    out: &Path,
    keep_draws: bool,
) -> Result<Vec<ScenarioReport>, SimError> {
    let mut reports = Vec::new();
    for scenario in scenarios {
        scenario.validate()?;
        let dir = out.join(scenario.name());
        std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let outcomes: Vec<Result<ReplicationResult, (u64, String)>> = (0..scenario.replications as u64)
            .into_par_iter()
            .map(|rep| {
                let rep_dir = dir.join(format!("rep_{rep}"));
                let marker = rep_dir.join("result.json");
                if let Ok(text) = std::fs::read_to_string(&marker) {
                    if let Ok(r) = serde_json::from_str::<ReplicationResult>(&text) {
                        return Ok(r);
                    }
                }
                let (result, draws) =
                    run_replication(scenario, settings, rep).map_err(|e| (rep, e.to_string()))?;
                let write = || -> Result<(), SimError> {
                    std::fs::create_dir_all(&rep_dir).map_err(io_err(&rep_dir))?;
                    if keep_draws {
                        let path = rep_dir.join("draws.csv");
                        crate::io::write_pooled_draws(&path, &draws).map_err(|e| SimError::Format {
                            path: path.clone(),
                            message: e.to_string(),
                        })?;
                    }
                    let text = serde_json::to_string_pretty(&result).expect("serializable");
                    std::fs::write(&marker, text).map_err(io_err(&marker))
                };
                write().map_err(|e| (rep, e.to_string()))?;
                Ok(result)
            })
            .collect();
        let mut results = Vec::new();
        let mut failures = Vec::new();
        for o in outcomes {
            match o {
                Ok(r) => results.push(r),
                Err(f) => failures.push(f),
            }
        }
        let estimates = estimators(&results)?;
        write_scenario_files(&dir, scenario, &results, &failures, &estimates)?;
        reports.push(ScenarioReport {
            scenario: scenario.clone(),
            results,
            failures,
            estimates,
        });
    }
    Ok(reports)
}

fn write_scenario_files(
    dir: &Path,
    scenario: &StudyScenario,
    results: &[ReplicationResult],
    failures: &[(u64, String)],
    estimates: &[EstimandReport],
) -> Result<(), SimError> {
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
    let csv_err = |path: &Path| {
        let path = path.to_path_buf();
        move |e: csv::Error| SimError::Format {
            path: path.clone(),
            message: e.to_string(),
        }
    };

    let path = dir.join("estimates.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "scenario",
        "estimand",
        "bias",
        "mse",
        "coverage",
        "se_bias",
        "se_mse",
        "se_coverage",
    ])
    .map_err(csv_err(&path))?;
    for e in estimates {
        w.write_record([
            scenario.name(),
            e.estimand.clone(),
            e.bias.to_string(),
            e.mse.to_string(),
            fmt_opt(e.coverage),
            fmt_opt(e.se_bias),
            fmt_opt(e.se_mse),
            fmt_opt(e.se_coverage),
        ])
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("imae.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record(["scenario", "segment", "imae", "se_imae"])
        .map_err(csv_err(&path))?;
    for (seg, (m, se)) in imae_summary(results) {
        w.write_record([scenario.name(), seg, m.to_string(), fmt_opt(se)])
            .map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    let path = dir.join("replications.csv");
    let mut w = csv::Writer::from_path(&path).map_err(csv_err(&path))?;
    w.write_record([
        "replication",
        "status",
        "max_rhat",
        "flagged",
        "divergences",
        "theta_coverage",
        "message",
    ])
    .map_err(csv_err(&path))?;
    let mut rows: Vec<(u64, Vec<String>)> = results
        .iter()
        .map(|r| {
            (
                r.replication,
                vec![
                    r.replication.to_string(),
                    "ok".into(),
                    fmt_opt(r.max_rhat),
                    r.flagged().to_string(),
                    r.divergences.to_string(),
                    fmt_opt(r.theta_coverage()),
                    String::new(),
                ],
            )
        })
        .collect();
    rows.extend(failures.iter().map(|(rep, msg)| {
        (
            *rep,
            vec![
                rep.to_string(),
                "failed".into(),
                "NA".into(),
                "true".into(),
                "NA".into(),
                "NA".into(),
                msg.clone(),
            ],
        )
    }));
    rows.sort_by_key(|r| r.0);
    for (_, r) in rows {
        w.write_record(&r).map_err(csv_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(())
}

/// One household/bandwidth configuration at one grid resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationRow {
    pub m: usize,
    pub config: usize,
    pub location: Point,
    pub rho: f64,
    pub discretized: f64,
    pub quadrature: f64,
    pub error: f64,
    pub bound: f64,
}

/// Refinement study of the discretized exposure against quadrature.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretizationStudy {
    pub rows: Vec<DiscretizationRow>,
    /// Per M: (M, mean error, mean bound).
    pub per_m: Vec<(usize, f64, f64)>,
    /// Least-squares slope of log mean error against log M.
    pub slope: f64,
}

pub const DEFAULT_M_LADDER: [usize; 5] = [20, 40, 80, 160, 320];

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Compares discretized and quadrature exposure for the true (smooth) log
/// intensity on the model network, over `configs` random households
/// (uniform in the region) with ρ uniform on [0.05, 0.5], at every M.
pub fn discretization_study(
    ladder: &[usize],
    configs: usize,
    seed: u64,
) -> Result<DiscretizationStudy, SimError> {
    if ladder.len() < 2 {
        return Err(SimError::Scenario(
            "the M ladder needs at least two resolutions".into(),
        ));
    }
    if configs == 0 {
        return Err(SimError::Scenario(
            "at least one configuration is required".into(),
        ));
    }
    let network = three_canal_model_network();
    let fns = truth_functions(&network)?;
    let refs: Vec<Intensity<'_>> = fns.iter().map(|b| b.as_ref() as Intensity<'_>).collect();
    let mut rng = replication_rng(seed, 0);
    let setups: Vec<(Point, f64)> = (0..configs)
        .map(|_| {
            let p = Point::new(rng.random_range(0.0..REGION.0), rng.random_range(0.0..REGION.1));
            (p, rng.random_range(0.05..0.5))
        })
        .collect();
    let exact: Vec<f64> = setups
        .par_iter()
        .map(|&(p, rho)| {
            let k = DistanceKernel::new(KernelKind::Exponential, rho)?;
            Ok(true_total_exposure(
                &network,
                &refs,
                &k,
                p,
                QuadratureOptions::default(),
            )?)
        })
        .collect::<Result<_, SimError>>()?;

    let mut rows = Vec::new();
    let mut per_m = Vec::new();
    for &m in ladder {
        let partition = crate::geometry::build_partition(&network, &three_canal_cell_counts(m)?)?;
        let mut field = Vec::with_capacity(partition.total_cells());
        for sp in partition.segments() {
            let id = network.segments()[sp.segment].id();
            for c in &sp.cells {
                let v = TrueIntensity.eval(id, c.centroid_arc).expect("known segment");
                field.push(v.ln());
            }
        }
        let locations: Vec<Point> = setups.iter().map(|s| s.0).collect();
        let tables = crate::exposure::ExposureTables::new(&partition, &locations);
        let these: Vec<DiscretizationRow> = setups
            .par_iter()
            .enumerate()
            .map(|(i, &(p, rho))| {
                let k = DistanceKernel::new(KernelKind::Exponential, rho)?;
                let d = crate::exposure::discretized_exposure(&field, &k, &tables, i)?;
                let bound =
                    crate::exposure::discretization_error_bound(&field, &k, &network, &partition, p, 8)?;
                Ok(DiscretizationRow {
                    m,
                    config: i,
                    location: p,
                    rho,
                    discretized: d,
                    quadrature: exact[i],
                    error: (d - exact[i]).abs(),
                    bound,
                })
            })
            .collect::<Result<_, SimError>>()?;
        let n = these.len() as f64;
        per_m.push((
            m,
            these.iter().map(|r| r.error).sum::<f64>() / n,
            these.iter().map(|r| r.bound).sum::<f64>() / n,
        ));
        rows.extend(these);
    }
    let xs: Vec<f64> = per_m.iter().map(|r| (r.0 as f64).ln()).collect();
    let ys: Vec<f64> = per_m.iter().map(|r| r.1.ln()).collect();
    Ok(DiscretizationStudy {
        rows,
        per_m,
        slope: ols_slope(&xs, &ys),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_matches_description() {
        let net = three_canal_geometry();
        let x1 = net.segment("x1").unwrap();
        let y = net.segment("y").unwrap();
        assert_eq!(x1.length(), 10.0);
        assert_eq!(y.length(), 4.0);
        let ix = net.intersections();
        assert_eq!(net.point(ix[0].a).unwrap(), Point::new(5.0, 0.0));
        assert_eq!(net.point(ix[1].a).unwrap(), Point::new(5.0, 8.0 / 3.0));
        assert_eq!(ix[1].b.arc, 8.0 / 3.0);
    }

    #[test]
    fn truth_values_and_continuity() {
        assert_eq!(TrueIntensity::x1(0.0), 0.15);
        assert!((TrueIntensity::x1(5.0) - 0.4).abs() < 1e-15);
        assert_eq!(TrueIntensity::y(0.0), TrueIntensity::x1(5.0));
        assert!((TrueIntensity::y(X2_HEIGHT) - TrueIntensity::x2(5.0)).abs() < 1e-12);
        let t = TrueIntensity;
        assert_eq!(t.eval("y_up", 0.0), t.eval("y", X2_HEIGHT));
        assert_eq!(t.eval("y_lo", 1.0), t.eval("y", 1.0));
        assert_eq!(t.eval("z", 1.0), None);
    }

    #[test]
    fn cell_counts_require_even_m() {
        assert!(three_canal_cell_counts(3).is_err());
        let c = three_canal_cell_counts(40).unwrap();
        assert_eq!(c["y_lo"], 20);
        assert_eq!(c["x2"], 40);
    }

    #[test]
    fn uniform_households_have_region_moments() {
        let mut s = StudyScenario::new(10_000, 1, HouseholdLayout::Uniform, 20);
        s.population = 20_000;
        let mut rng = replication_rng(11, 0);
        let hs = sample_households(&s, &mut rng).unwrap();
        let n = hs.len() as f64;
        let mx = hs.iter().map(|h| h.location.x).sum::<f64>() / n;
        let my = hs.iter().map(|h| h.location.y).sum::<f64>() / n;
        // sd of a uniform on [0, L] is L/√12
        assert!((mx - 5.0).abs() < 3.0 * 10.0 / 12f64.sqrt() / n.sqrt());
        assert!((my - 2.0).abs() < 3.0 * 4.0 / 12f64.sqrt() / n.sqrt());
    }

    #[test]
    fn clustered_households_hug_the_network() {
        let mut s = StudyScenario::new(5_000, 1, HouseholdLayout::Clustered, 20);
        s.population = 10_000;
        let mut rng = replication_rng(12, 0);
        let hs = sample_households(&s, &mut rng).unwrap();
        let net = three_canal_geometry();
        let near = hs.iter().filter(|h| net.min_distance(h.location) <= 0.75).count();
        assert!(near as f64 >= 0.9 * hs.len() as f64);
        assert!(hs
            .iter()
            .all(|h| (0.0..=10.0).contains(&h.location.x) && (0.0..=4.0).contains(&h.location.y)));
    }

    #[test]
    fn datasets_are_deterministic() {
        let mut s = StudyScenario::new(30, 3, HouseholdLayout::Clustered, 20);
        s.population = 1000;
        let a = generate_dataset(&s, 2).unwrap();
        let b = generate_dataset(&s, 2).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(&s, 3).unwrap();
        assert_ne!(a.1.exposures, c.1.exposures);
    }

    #[test]
    fn far_household_probability() {
        let e = true_exposures(&[Point::new(5.0, 14.0)], TRUE_RHO, Default::default()).unwrap()[0];
        let p = true_probability(&[0.0], &[TRUE_GAMMA], TRUE_LAMBDA, e);
        assert!((p - 0.048_770_575_499_285_99).abs() < 1e-12);
    }

    #[test]
    fn empirical_rate_matches_probability() {
        let loc = Point::new(3.0, 0.15);
        let e = true_exposures(&[loc], TRUE_RHO, Default::default()).unwrap()[0];
        let p = true_probability(&[0.4], &[TRUE_GAMMA], TRUE_LAMBDA, e);
        let mut rng = replication_rng(13, 0);
        let n = 100_000;
        let hits = (0..n).filter(|_| rng.random::<f64>() < p).count() as f64;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() < 3.0 * se);
    }

    #[test]
    fn probability_decreases_along_perpendicular_ray() {
        let pts: Vec<Point> = (1..=20).map(|k| Point::new(2.5, 0.05 * k as f64)).collect();
        let e = true_exposures(&pts, TRUE_RHO, Default::default()).unwrap();
        let p: Vec<f64> = e
            .iter()
            .map(|e| true_probability(&[0.0], &[TRUE_GAMMA], TRUE_LAMBDA, *e))
            .collect();
        assert!(p.windows(2).all(|w| w[0] >= w[1]), "{p:?}");
    }

    #[test]
    fn ols_slope_of_a_line() {
        assert!((ols_slope(&[1.0, 2.0, 3.0], &[5.0, 3.0, 1.0]) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn small_refinement_study_converges() {
        let s = discretization_study(&[20, 40, 80], 10, 3).unwrap();
        assert_eq!(s.rows.len(), 30);
        assert!(s.slope < -0.9, "{}", s.slope);
        assert!(s.rows.iter().all(|r| r.bound >= r.error));
    }

    #[test]
    fn zero_households_rejected() {
        let s = StudyScenario::new(0, 10, HouseholdLayout::Uniform, 20);
        assert!(matches!(s.validate(), Err(SimError::Scenario(_))));
    }

    fn toy_model(j: usize) -> (HazardModel, SurveyDataset) {
        let mut s = StudyScenario::new(j, 2, HouseholdLayout::Uniform, 4);
        s.population = 100;
        let (ds, _) = generate_dataset(&s, 0).unwrap();
        let model = HazardModel::new(
            three_canal_model_network(),
            &ds,
            ModelSpec::new(three_canal_cell_counts(4).unwrap()),
        )
        .unwrap();
        (model, ds)
    }

    #[test]
    fn prior_predictive_is_valid_and_deterministic() {
        let (model, _) = toy_model(8);
        let a = prior_predictive(&model, 20, 3, &mut replication_rng(5, 0)).unwrap();
        let b = prior_predictive(&model, 20, 3, &mut replication_rng(5, 0)).unwrap();
        assert_eq!(a, b);
        for d in &a {
            assert!(d.probs.iter().all(|p| (0.0..=1.0).contains(p)));
            assert_eq!(d.outcomes.len(), 24);
        }
    }

    #[test]
    fn prior_median_baseline_probability() {
        // Oracle: direct Monte Carlo of 1 − exp(−|N(0, 0.3)|), independent of the model code.
        let mut rng = replication_rng(21, 0);
        let mut direct: Vec<f64> = (0..20_000)
            .map(|_| {
                let u: f64 = rng.sample(StandardNormal);
                1.0 - (-(0.3 * u.abs())).exp()
            })
            .collect();
        direct.sort_by(f64::total_cmp);
        let oracle = direct[direct.len() / 2];
        // model pushforward with zero exposure and X = 0
        let (model, _) = toy_model(2);
        let mut rng = replication_rng(22, 0);
        let mut ps: Vec<f64> = (0..20_000)
            .map(|_| {
                let q = sample_prior_state(&model, &mut rng);
                infection_prob(q[model.layout().baseline.start].exp())
            })
            .collect();
        ps.sort_by(f64::total_cmp);
        let median = ps[ps.len() / 2];
        assert!((median - oracle).abs() < 0.01, "{median} vs {oracle}");
        assert!((oracle - (1.0 - (-0.3 * 0.674_489_75f64).exp())).abs() < 0.005);
    }

    fn result_with(rep: u64, lambda: (f64, f64, f64, f64)) -> ReplicationResult {
        let mut params = BTreeMap::new();
        params.insert(
            "lambda".to_string(),
            PointSummary {
                truth: lambda.0,
                mean: lambda.1,
                q10: lambda.2,
                q90: lambda.3,
            },
        );
        ReplicationResult {
            replication: rep,
            params,
            theta: vec![],
            imae: BTreeMap::new(),
            max_rhat: Some(1.0),
            divergences: 0,
            draws: 10,
        }
    }

    #[test]
    fn bias_and_mse_by_hand() {
        let r = [
            result_with(0, (0.05, 0.07, 0.01, 0.10)),
            result_with(1, (0.05, 0.04, 0.035, 0.045)),
        ];
        let e = estimators(&r).unwrap();
        let l = &e[0];
        // errors 0.02 and −0.01
        assert!((l.bias - 0.005).abs() < 1e-15);
        assert!((l.mse - (0.0004 + 0.0001) / 2.0).abs() < 1e-15);
        assert_eq!(l.coverage, Some(0.5));
        assert!((l.se_bias.unwrap() - 0.015).abs() < 1e-12);
    }

    #[test]
    fn perfect_oracle_is_degenerate() {
        let r = vec![result_with(0, (0.05, 0.05, 0.05, 0.05)); 3];
        let e = estimators(&r).unwrap();
        assert_eq!(e[0].bias, 0.0);
        assert_eq!(e[0].mse, 0.0);
        assert_eq!(e[0].coverage, None);
    }

    #[test]
    fn true_distribution_intervals_cover_eighty_percent() {
        let mut rng = replication_rng(31, 0);
        let results: Vec<ReplicationResult> = (0..200)
            .map(|rep| {
                let truth: f64 = rng.sample(StandardNormal);
                let draws: Vec<f64> = (0..400).map(|_| rng.sample(StandardNormal)).collect();
                let mut r = result_with(rep, (0.0, 0.0, 0.0, 0.0));
                r.params
                    .insert("x".to_string(), PointSummary::from_draws(truth, &draws));
                r
            })
            .collect();
        let e = estimators(&results).unwrap();
        let x = e.iter().find(|e| e.estimand == "x").unwrap();
        let c = x.coverage.unwrap();
        assert!((c - 0.8).abs() < 3.0 * (0.16f64 / 200.0).sqrt(), "{c}");
    }

    #[test]
    fn mse_is_mean_squared_bias() {
        let r: Vec<ReplicationResult> = (0..7)
            .map(|k| result_with(k, (1.0, 1.0 + 0.1 * k as f64 - 0.2, 0.0, 2.0)))
            .collect();
        let e = &estimators(&r).unwrap()[0];
        let direct = (0..7).map(|k| (0.1 * k as f64 - 0.2).powi(2)).sum::<f64>() / 7.0;
        assert_eq!(e.mse, direct);
    }

    #[test]
    fn mismatched_truth_is_rejected() {
        let (model, _) = toy_model(3);
        let names = model.param_names();
        let q = vec![0.0; model.layout().dim()];
        let draws = PosteriorDraws::new(names, vec![vec![model.constrain(&q); 4]]);
        let truth = TruthRecord {
            household_ids: vec!["a".into()],
            exposures: vec![0.1],
            lambda: 0.05,
            rho: 0.1,
            gamma: vec![-0.15],
        };
        assert!(matches!(
            summarize_replication(0, &draws, &truth, model.network(), model.partition()),
            Err(SimError::Mismatch(_))
        ));
    }
}
