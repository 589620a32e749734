//! Single-hit Bernoulli model with LGCP exposure, its priors, and the joint
//! log posterior on the unconstrained scale with exact gradients.
//!
//! Unconstrained state layout:
//!
//! ```text
//! [ log λ_b | β_local[0..K] ]  log ρ  γ[0..p]  [ log ω ]  anchor innovations  cell innovations
//! ```

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::exposure::{DistanceKernel, ExposureError, ExposureTables, KernelKind};
use crate::geometry::{build_partition, CanalNetwork, CellCounts, GeometryError, PartitionedNetwork, Point};
use crate::gp_field::{GpError, GpFactors, GpHyperparams, GpStructure, LatentField};
use crate::sampler::{LogDensity, Posterior, PosteriorDraws};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("state has non-finite coordinate {index}")]
    NonFiniteState { index: usize },
    #[error("state has {got} coordinates, expected {expected}")]
    StateDimension { expected: usize, got: usize },
    #[error("duplicate household id `{0}`")]
    DuplicateHousehold(String),
    #[error("observation references unknown household `{0}`")]
    UnknownHousehold(String),
    #[error("outcome must be 0 or 1, got {0}")]
    BadOutcome(i64),
    #[error("household `{id}` has {got} covariates, expected {expected}")]
    CovariateCount { id: String, expected: usize, got: usize },
    #[error("household `{0}` lies on the hazard; log distance is undefined (apply a distance floor)")]
    ZeroDistance(String),
    #[error("prior scale `{name}` must be positive and finite, got {value}")]
    BadScale { name: &'static str, value: f64 },
    #[error("draws lack parameter `{0}`")]
    MissingParameter(String),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Household {
    pub id: String,
    pub location: Point,
    pub group: usize,
    pub covariates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub household_id: String,
    pub outcome: u8,
}

/// Households with covariates and their binary outcomes.
#[derive(Debug, Clone, PartialEq)]
pub struct SurveyDataset {
    households: Vec<Household>,
    observations: Vec<Observation>,
    /// Per household: (infected, not infected) counts.
    counts: Vec<(u32, u32)>,
    n_covariates: usize,
}

impl SurveyDataset {
    pub fn new(households: Vec<Household>, observations: Vec<Observation>) -> Result<Self, ModelError> {
        let n_covariates = households.first().map_or(0, |h| h.covariates.len());
        let mut index: HashMap<&str, usize> = HashMap::new();
        for (i, h) in households.iter().enumerate() {
            if index.insert(h.id.as_str(), i).is_some() {
                return Err(ModelError::DuplicateHousehold(h.id.clone()));
            }
            if h.covariates.len() != n_covariates {
                return Err(ModelError::CovariateCount {
                    id: h.id.clone(),
                    expected: n_covariates,
                    got: h.covariates.len(),
                });
            }
        }
        let mut counts = vec![(0u32, 0u32); households.len()];
        for o in &observations {
            let j = *index
                .get(o.household_id.as_str())
                .ok_or_else(|| ModelError::UnknownHousehold(o.household_id.clone()))?;
            match o.outcome {
                1 => counts[j].0 += 1,
                0 => counts[j].1 += 1,
                y => return Err(ModelError::BadOutcome(y as i64)),
            }
        }
        Ok(Self {
            households,
            observations,
            counts,
            n_covariates,
        })
    }

    pub fn households(&self) -> &[Household] {
        &self.households
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn counts(&self) -> &[(u32, u32)] {
        &self.counts
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn n_groups(&self) -> usize {
        self.households.iter().map(|h| h.group + 1).max().unwrap_or(0)
    }

    pub fn locations(&self) -> Vec<Point> {
        self.households.iter().map(|h| h.location).collect()
    }
}

/// Length-scale handling: held fixed or sampled under Gamma(shape, rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaPrior {
    Fixed(f64),
    Gamma { shape: f64, rate: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub kernel: KernelKind,
    pub cells: CellCounts,
    /// Half-normal scale of λ_b.
    pub lambda_scale: f64,
    /// Normal scale of each γ coefficient.
    pub gamma_scale: f64,
    /// Half-normal scale of ρ.
    pub rho_scale: f64,
    /// Normal scale of the per-group log baselines.
    pub beta_local_scale: f64,
    pub omega: OmegaPrior,
    /// GP marginal sd (fixed).
    pub alpha: f64,
    /// Cell white-noise variance relative to α². Without it the Cholesky
    /// factors of fine grids are noisy functions of ω at the 1e-7 level.
    pub cell_nugget: f64,
    pub group_baselines: bool,
}

impl ModelSpec {
    pub fn new(cells: CellCounts) -> Self {
        Self {
            kernel: KernelKind::Exponential,
            cells,
            lambda_scale: 0.3,
            gamma_scale: 0.3,
            rho_scale: 0.5,
            beta_local_scale: 1.0,
            omega: OmegaPrior::Gamma {
                shape: 4.0,
                rate: 1.0,
            },
            alpha: 1.0,
            cell_nugget: 1e-5,
            group_baselines: false,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        let check = |name: &'static str, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(ModelError::BadScale { name, value })
            }
        };
        check("lambda_scale", self.lambda_scale)?;
        check("gamma_scale", self.gamma_scale)?;
        check("rho_scale", self.rho_scale)?;
        check("beta_local_scale", self.beta_local_scale)?;
        check("alpha", self.alpha)?;
        if !(self.cell_nugget >= 0.0 && self.cell_nugget.is_finite()) {
            return Err(ModelError::BadScale {
                name: "cell_nugget",
                value: self.cell_nugget,
            });
        }
        match self.omega {
            OmegaPrior::Fixed(w) => check("omega", w),
            OmegaPrior::Gamma { shape, rate } => {
                check("omega_shape", shape)?;
                check("omega_rate", rate)
            }
        }
    }
}

fn gp_hyper(spec: &ModelSpec, omega: f64) -> Result<GpHyperparams, ModelError> {
    Ok(GpHyperparams::new(omega, spec.alpha)?.with_nugget(spec.cell_nugget)?)
}

/// 1 − e^{−η}.
pub fn infection_prob(eta: f64) -> f64 {
    -(-eta).exp_m1()
}

/// log(1 − e^{−η}) without cancellation.
pub fn log1mexp(eta: f64) -> f64 {
    if eta < std::f64::consts::LN_2 {
        (-(-eta).exp_m1()).ln()
    } else {
        (-(-eta).exp()).ln_1p()
    }
}

/// Deterministic pairwise sum; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Index ranges of each block in the unconstrained state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub baseline: Range<usize>,
    pub log_rho: usize,
    pub gamma: Range<usize>,
    pub log_omega: Option<usize>,
    pub anchors: Range<usize>,
    pub cells: Range<usize>,
}

impl StateLayout {
    pub fn dim(&self) -> usize {
        self.cells.end
    }

    pub fn innovations(&self) -> Range<usize> {
        self.anchors.start..self.cells.end
    }
}

/// Constrained-scale values of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedState {
    pub baselines: Vec<f64>,
    pub rho: f64,
    pub gamma: Vec<f64>,
    pub omega: f64,
    pub field: LatentField,
    pub theta: Vec<f64>,
}

/// The full posterior for one dataset, network and spec.
pub struct HazardModel {
    spec: ModelSpec,
    network: CanalNetwork,
    partition: PartitionedNetwork,
    gp: GpStructure,
    tables: ExposureTables,
    layout: StateLayout,
    /// Row-major household × covariate.
    x: Vec<f64>,
    group: Vec<usize>,
    n1: Vec<f64>,
    n0: Vec<f64>,
    fixed_factors: Option<GpFactors>,
    names: Vec<String>,
}

/// Per-household pieces of the likelihood gradient.
struct HouseholdTerms {
    ll: f64,
    /// ∂ll/∂η · e^{γ′x}.
    c: f64,
    d_gamma_scale: f64,
    d_baseline: f64,
    d_logrho: f64,
}

impl HazardModel {
    pub fn new(network: CanalNetwork, dataset: &SurveyDataset, spec: ModelSpec) -> Result<Self, ModelError> {
        spec.validate()?;
        let partition = build_partition(&network, &spec.cells)?;
        let gp = GpStructure::new(&network, &partition)?;
        let tables = ExposureTables::new(&partition, &dataset.locations());
        let n_groups = if spec.group_baselines {
            dataset.n_groups().max(1)
        } else {
            1
        };
        let p = dataset.n_covariates();
        let baseline = 0..n_groups;
        let log_rho = n_groups;
        let gamma = log_rho + 1..log_rho + 1 + p;
        let mut next = gamma.end;
        let log_omega = match spec.omega {
            OmegaPrior::Fixed(_) => None,
            OmegaPrior::Gamma { .. } => {
                next += 1;
                Some(next - 1)
            }
        };
        let anchors = next..next + gp.n_anchors();
        let cells = anchors.end..anchors.end + gp.n_cells();
        let layout = StateLayout {
            baseline,
            log_rho,
            gamma,
            log_omega,
            anchors,
            cells,
        };
        let fixed_factors = match spec.omega {
            OmegaPrior::Fixed(w) => Some(gp.factors(gp_hyper(&spec, w)?, false)?),
            OmegaPrior::Gamma { .. } => None,
        };
        let x = dataset
            .households()
            .iter()
            .flat_map(|h| h.covariates.iter().copied())
            .collect();
        let group = dataset
            .households()
            .iter()
            .map(|h| if spec.group_baselines { h.group } else { 0 })
            .collect();
        let n1 = dataset.counts().iter().map(|c| c.0 as f64).collect();
        let n0 = dataset.counts().iter().map(|c| c.1 as f64).collect();
        let mut model = Self {
            spec,
            network,
            partition,
            gp,
            tables,
            layout,
            x,
            group,
            n1,
            n0,
            fixed_factors,
            names: Vec::new(),
        };
        model.names = model.build_names(n_groups, p);
        Ok(model)
    }

    fn build_names(&self, n_groups: usize, p: usize) -> Vec<String> {
        let mut names = Vec::new();
        if self.spec.group_baselines {
            names.extend((0..n_groups).map(|k| format!("beta_local[{k}]")));
        } else {
            names.push("lambda".to_string());
        }
        names.push("rho".to_string());
        names.extend((0..p).map(|i| format!("gamma[{i}]")));
        if self.layout.log_omega.is_some() {
            names.push("omega".to_string());
        }
        names.extend(self.gp.anchors().iter().map(|a| format!("Z[{}]", a.label)));
        for sp in self.partition.segments() {
            let id = self.network.segments()[sp.segment].id();
            names.extend((0..sp.cells.len()).map(|i| format!("z[{id}][{i}]")));
        }
        names.extend((0..self.tables.n_households()).map(|j| format!("theta[{j}]")));
        names
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn network(&self) -> &CanalNetwork {
        &self.network
    }

    pub fn partition(&self) -> &PartitionedNetwork {
        &self.partition
    }

    pub fn gp(&self) -> &GpStructure {
        &self.gp
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn tables(&self) -> &ExposureTables {
        &self.tables
    }

    pub fn n_households(&self) -> usize {
        self.tables.n_households()
    }

    fn check_state(&self, q: &[f64]) -> Result<(), ModelError> {
        if q.len() != self.layout.dim() {
            return Err(ModelError::StateDimension {
                expected: self.layout.dim(),
                got: q.len(),
            });
        }
        if let Some(index) = q.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteState { index });
        }
        Ok(())
    }

    fn omega(&self, q: &[f64]) -> f64 {
        match (self.spec.omega, self.layout.log_omega) {
            (OmegaPrior::Fixed(w), _) => w,
            (_, Some(i)) => q[i].exp(),
            _ => unreachable!("sampled ω has a slot"),
        }
    }

    fn baseline(&self, q: &[f64], k: usize) -> f64 {
        q[self.layout.baseline.start + k].exp()
    }

    /// Field values for a state.
    pub fn field(&self, q: &[f64]) -> Result<LatentField, ModelError> {
        self.check_state(q)?;
        let owned;
        let f = match &self.fixed_factors {
            Some(f) => f,
            None => {
                owned = self.gp.factors(gp_hyper(&self.spec, self.omega(q))?, false)?;
                &owned
            }
        };
        Ok(self.gp.push(f, &q[self.layout.innovations()])?)
    }

    /// Kernel for a state's ρ.
    pub fn kernel(&self, q: &[f64]) -> Result<DistanceKernel, ModelError> {
        Ok(DistanceKernel::new(
            self.spec.kernel,
            q[self.layout.log_rho].exp(),
        )?)
    }

    /// θ_j for every household at a state.
    pub fn exposures(&self, q: &[f64]) -> Result<Vec<f64>, ModelError> {
        let field = self.field(q)?;
        Ok(crate::exposure::all_exposures(
            &field.cells,
            &self.kernel(q)?,
            &self.tables,
        )?)
    }

    /// η_j = exp(γ′x_j)·(λ_b + θ_j).
    pub fn per_obs_rate(&self, q: &[f64], j: usize, theta: f64) -> f64 {
        let b = self.baseline(q, self.group[j]);
        self.susceptibility(q, j) * (b + theta)
    }

    fn susceptibility(&self, q: &[f64], j: usize) -> f64 {
        let p = self.layout.gamma.len();
        let gamma = &q[self.layout.gamma.clone()];
        let x = &self.x[j * p..(j + 1) * p];
        gamma.iter().zip(x).map(|(g, x)| g * x).sum::<f64>().exp()
    }

    /// Log likelihood and its gradient with respect to the unconstrained state.
    pub fn log_likelihood(&self, q: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        use rayon::prelude::*;

        self.check_state(q)?;
        let lay = &self.layout;
        let hyper = gp_hyper(&self.spec, self.omega(q))?;
        let owned;
        let sampled_omega = self.fixed_factors.is_none();
        let f = match &self.fixed_factors {
            Some(f) => f,
            None => {
                owned = self.gp.factors(hyper, true)?;
                &owned
            }
        };
        let innov = &q[lay.innovations()];
        let (field, tangent) = if sampled_omega {
            let (fl, t) = self.gp.push_with_tangent(f, innov)?;
            (fl, Some(t))
        } else {
            (self.gp.push(f, innov)?, None)
        };
        let kernel = self.kernel(q)?;
        let weights: Vec<f64> = field
            .cells
            .iter()
            .zip(self.tables.widths())
            .map(|(z, w)| z.exp() * w)
            .collect();
        let n = weights.len();
        let nh = self.n_households();

        let terms: Vec<(HouseholdTerms, Vec<f64>)> = (0..nh)
            .into_par_iter()
            .map(|j| {
                let d = self.tables.distances(j);
                let k: Vec<f64> = d.iter().map(|&d| kernel.eval(d)).collect();
                let kw: Vec<f64> = k.iter().zip(&weights).map(|(k, w)| k * w).collect();
                let theta = pairwise_sum(&kw);
                let s: Vec<f64> = kw
                    .iter()
                    .zip(d)
                    .map(|(v, &d)| v * kernel.dlog_dlogrho(d))
                    .collect();
                let s = pairwise_sum(&s);
                let sus = self.susceptibility(q, j);
                let b = self.baseline(q, self.group[j]);
                let eta = sus * (b + theta);
                let (n1, n0) = (self.n1[j], self.n0[j]);
                let ll = if n1 > 0.0 { n1 * log1mexp(eta) } else { 0.0 } - n0 * eta;
                let g = if n1 > 0.0 { n1 / eta.exp_m1() } else { 0.0 } - n0;
                (
                    HouseholdTerms {
                        ll,
                        c: g * sus,
                        d_gamma_scale: g * eta,
                        d_baseline: g * sus * b,
                        d_logrho: g * sus * s,
                    },
                    k,
                )
            })
            .collect();

        let mut grad = vec![0.0; lay.dim()];
        let lls: Vec<f64> = terms.iter().map(|t| t.0.ll).collect();
        let ll = pairwise_sum(&lls);
        let p = lay.gamma.len();
        for i in 0..p {
            let v: Vec<f64> = terms
                .iter()
                .enumerate()
                .map(|(j, t)| t.0.d_gamma_scale * self.x[j * p + i])
                .collect();
            grad[lay.gamma.start + i] = pairwise_sum(&v);
        }
        for k in 0..lay.baseline.len() {
            let v: Vec<f64> = terms
                .iter()
                .enumerate()
                .map(|(j, t)| if self.group[j] == k { t.0.d_baseline } else { 0.0 })
                .collect();
            grad[lay.baseline.start + k] = pairwise_sum(&v);
        }
        let v: Vec<f64> = terms.iter().map(|t| t.0.d_logrho).collect();
        grad[lay.log_rho] = pairwise_sum(&v);

        // ∂ll/∂z_m = e^{z_m}Δ_m Σ_j c_j K_jm
        let zbar: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|m| {
                let v: Vec<f64> = terms.iter().map(|t| t.0.c * t.1[m]).collect();
                weights[m] * pairwise_sum(&v)
            })
            .collect();
        let ubar = self.gp.pull_back(f, &vec![0.0; self.gp.n_anchors()], &zbar)?;
        grad[lay.innovations()].copy_from_slice(&ubar);
        if let (Some(i), Some(t)) = (lay.log_omega, tangent) {
            let v: Vec<f64> = zbar.iter().zip(&t.cells).map(|(a, b)| a * b).collect();
            grad[i] = hyper.omega * pairwise_sum(&v);
        }
        Ok((ll, grad))
    }

    /// Log prior (with log-Jacobians of the transforms) and its gradient.
    pub fn log_prior(&self, q: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        self.check_state(q)?;
        let lay = &self.layout;
        let spec = &self.spec;
        let mut grad = vec![0.0; lay.dim()];
        let mut lp = 0.0;
        let half_normal_log = |t: f64, s: f64| {
            let x = t.exp();
            let lp = std::f64::consts::LN_2 - LN_SQRT_2PI - s.ln() - 0.5 * (x / s).powi(2) + t;
            (lp, 1.0 - (x / s).powi(2))
        };
        let normal = |x: f64, s: f64| (-LN_SQRT_2PI - s.ln() - 0.5 * (x / s).powi(2), -x / (s * s));

        for i in lay.baseline.clone() {
            let (v, g) = if spec.group_baselines {
                normal(q[i], spec.beta_local_scale)
            } else {
                half_normal_log(q[i], spec.lambda_scale)
            };
            lp += v;
            grad[i] = g;
        }
        let (v, g) = half_normal_log(q[lay.log_rho], spec.rho_scale);
        lp += v;
        grad[lay.log_rho] = g;
        for i in lay.gamma.clone() {
            let (v, g) = normal(q[i], spec.gamma_scale);
            lp += v;
            grad[i] = g;
        }
        if let (Some(i), OmegaPrior::Gamma { shape, rate }) = (lay.log_omega, spec.omega) {
            let t = q[i];
            lp += shape * rate.ln() - ln_gamma(shape) + shape * t - rate * t.exp();
            grad[i] = shape - rate * t.exp();
        }
        for i in lay.innovations() {
            lp += -0.5 * q[i] * q[i] - LN_SQRT_2PI;
            grad[i] = -q[i];
        }
        Ok((lp, grad))
    }

    /// log_likelihood + log_prior, gradients added.
    pub fn log_posterior(&self, q: &[f64]) -> Result<(f64, Vec<f64>), ModelError> {
        let (ll, mut g) = self.log_likelihood(q)?;
        let (lp, gp) = self.log_prior(q)?;
        for (a, b) in g.iter_mut().zip(gp) {
            *a += b;
        }
        Ok((ll + lp, g))
    }

    /// Unconstrained state at the prior means of λ_b, ρ and ω, with γ and all
    /// innovations at zero.
    pub fn prior_mean_state(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.layout.dim()];
        let hn_mean = |s: f64| s * (2.0 / std::f64::consts::PI).sqrt();
        for i in self.layout.baseline.clone() {
            q[i] = if self.spec.group_baselines {
                0.0
            } else {
                hn_mean(self.spec.lambda_scale).ln()
            };
        }
        q[self.layout.log_rho] = hn_mean(self.spec.rho_scale).ln();
        if let (Some(i), OmegaPrior::Gamma { shape, rate }) = (self.layout.log_omega, self.spec.omega) {
            q[i] = (shape / rate).ln();
        }
        q
    }

    /// Maps an unconstrained state to named constrained values.
    pub fn constrained(&self, q: &[f64]) -> Result<ConstrainedState, ModelError> {
        let field = self.field(q)?;
        let kernel = self.kernel(q)?;
        let theta = crate::exposure::all_exposures(&field.cells, &kernel, &self.tables)?;
        let baselines = self.layout.baseline.clone().map(|i| {
            if self.spec.group_baselines {
                q[i]
            } else {
                q[i].exp()
            }
        });
        Ok(ConstrainedState {
            baselines: baselines.collect(),
            rho: kernel.rho,
            gamma: q[self.layout.gamma.clone()].to_vec(),
            omega: self.omega(q),
            field,
            theta,
        })
    }
}

impl LogDensity for HazardModel {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        match self.log_posterior(q) {
            Ok((lp, g)) if lp.is_finite() && g.iter().all(|v| v.is_finite()) => {
                grad.copy_from_slice(&g);
                lp
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

impl Posterior for HazardModel {
    fn param_names(&self) -> Vec<String> {
        self.names.clone()
    }

    fn constrain(&self, q: &[f64]) -> Vec<f64> {
        let Ok(c) = self.constrained(q) else {
            return vec![f64::NAN; self.names.len()];
        };
        let mut out = Vec::with_capacity(self.names.len());
        out.extend(&c.baselines);
        out.push(c.rho);
        out.extend(&c.gamma);
        if self.layout.log_omega.is_some() {
            out.push(c.omega);
        }
        out.extend(&c.field.anchors);
        out.extend(&c.field.cells);
        out.extend(&c.theta);
        out
    }
}

/// Posterior samples of the change in odds between locations `s1` and `s2`.
#[derive(Debug, Clone, PartialEq)]
pub struct OddsChange {
    pub samples: Vec<f64>,
    pub mean: f64,
    pub q10: f64,
    pub q90: f64,
}

/// Grid needed to recompute exposure from draws.
pub struct FunctionalGrid<'a> {
    pub network: &'a CanalNetwork,
    pub partition: &'a PartitionedNetwork,
    pub kernel: KernelKind,
}

impl FunctionalGrid<'_> {
    fn cell_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for sp in self.partition.segments() {
            let id = self.network.segments()[sp.segment].id();
            names.extend((0..sp.cells.len()).map(|i| format!("z[{id}][{i}]")));
        }
        names
    }
}

/// Per draw: (e^{−(λ+θ(s2))} − 1)/(e^{−(λ+θ(s1))} − 1) − 1, with θ recomputed
/// from the draw's ρ and cell values.
pub fn change_in_odds(
    grid: &FunctionalGrid<'_>,
    draws: &PosteriorDraws,
    s1: Point,
    s2: Point,
) -> Result<OddsChange, ModelError> {
    let baseline = if draws.index("lambda").is_some() {
        "lambda"
    } else {
        "beta_local[0]"
    };
    let col = |name: &str| {
        draws
            .index(name)
            .ok_or_else(|| ModelError::MissingParameter(name.to_string()))
    };
    let bi = col(baseline)?;
    let ri = col("rho")?;
    let zi = grid
        .cell_names()
        .iter()
        .map(|n| col(n))
        .collect::<Result<Vec<_>, _>>()?;
    let tables = ExposureTables::new(grid.partition, &[s1, s2]);
    let mut samples = Vec::new();
    for row in draws.rows() {
        let b = if baseline == "lambda" {
            row[bi]
        } else {
            row[bi].exp()
        };
        let kernel = DistanceKernel::new(grid.kernel, row[ri])?;
        let z: Vec<f64> = zi.iter().map(|&i| row[i]).collect();
        let t1 = crate::exposure::discretized_exposure(&z, &kernel, &tables, 0)?;
        let t2 = crate::exposure::discretized_exposure(&z, &kernel, &tables, 1)?;
        samples.push(odds_ratio_change(b, t1, t2));
    }
    let mean = samples.iter().sum::<f64>() / samples.len().max(1) as f64;
    let q10 = crate::diagnostics::quantile(&samples, 0.1).unwrap_or(f64::NAN);
    let q90 = crate::diagnostics::quantile(&samples, 0.9).unwrap_or(f64::NAN);
    Ok(OddsChange {
        samples,
        mean,
        q10,
        q90,
    })
}

/// (e^{−(λ+θ2)} − 1)/(e^{−(λ+θ1)} − 1) − 1.
pub fn odds_ratio_change(lambda: f64, theta1: f64, theta2: f64) -> f64 {
    (-(lambda + theta2)).exp_m1() / (-(lambda + theta1)).exp_m1() - 1.0
}

/// log of each household's minimum distance to the network.
pub fn min_distance_predictor(
    network: &CanalNetwork,
    dataset: &SurveyDataset,
) -> Result<Vec<f64>, ModelError> {
    dataset
        .households()
        .iter()
        .map(|h| {
            let d = network.min_distance(h.location);
            if d > 0.0 {
                Ok(d.ln())
            } else {
                Err(ModelError::ZeroDistance(h.id.clone()))
            }
        })
        .collect()
}

/// Per-group household counts, for reporting.
pub fn group_sizes(dataset: &SurveyDataset) -> BTreeMap<usize, usize> {
    let mut out = BTreeMap::new();
    for h in dataset.households() {
        *out.entry(h.group).or_insert(0) += 1;
    }
    out
}
