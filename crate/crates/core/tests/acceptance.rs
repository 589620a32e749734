//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line.
//!
//! The recovery fits (criteria 5 and 6) use `HAZARDFIELD_ACCEPT_WARMUP` and
//! `HAZARDFIELD_ACCEPT_SAMPLES` (default 500 each) so the suite fits a
//! single-core budget; set both to 2000 for the full-length run.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use hazardfield::diagnostics::{ess_bulk, split_rhat};
use hazardfield::geometry::Point;
use hazardfield::model::{HazardModel, Household, ModelSpec, Observation, SurveyDataset};
use hazardfield::sampler::{run_chains, LogDensity, Posterior, SamplerConfig};
use hazardfield::simstudy::{
    discretization_study, run_replication, sample_prior_state, three_canal_cell_counts,
    three_canal_model_network, FitSettings, HouseholdLayout, ReplicationResult, StudyScenario,
    DEFAULT_M_LADDER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Writes to the process stdout directly so the line survives test capture.
fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(n: u32, pass: bool, detail: &str, started: Instant) {
    say(&format!(
        "criterion {n}: {} {detail} ({:.1}s)",
        if pass { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    ));
}

fn random_dataset(rng: &mut ChaCha8Rng, j: usize, i: usize, p: usize) -> SurveyDataset {
    let households = (0..j)
        .map(|k| Household {
            id: format!("h{k}"),
            location: Point::new(rng.random_range(0.0..10.0), rng.random_range(0.0..4.0)),
            group: 0,
            covariates: (0..p).map(|_| rng.sample(StandardNormal)).collect(),
        })
        .collect();
    let observations = (0..j * i)
        .map(|k| Observation {
            household_id: format!("h{}", k % j),
            outcome: rng.random_range(0..2),
        })
        .collect();
    SurveyDataset::new(households, observations).unwrap()
}

fn fitted_model(ds: &SurveyDataset, m: usize) -> HazardModel {
    HazardModel::new(
        three_canal_model_network(),
        ds,
        ModelSpec::new(three_canal_cell_counts(m).unwrap()),
    )
    .unwrap()
}

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let ds = random_dataset(&mut rng, 20, 5, 2);
    let model = fitted_model(&ds, 20);
    let f = |q: &[f64]| model.log_posterior(q).unwrap();
    let mut worst = 0.0_f64;
    for _ in 0..20 {
        let q: Vec<f64> = (0..model.layout().dim())
            .map(|_| rng.random_range(-1.5..1.5))
            .collect();
        let (_, g) = f(&q);
        for i in 0..q.len() {
            let h = 1e-4;
            let at = |s: f64| {
                let mut x = q.clone();
                x[i] += s * h;
                f(&x).0
            };
            // five-point stencil
            let fd = (at(-2.0) - 8.0 * at(-1.0) + 8.0 * at(1.0) - at(2.0)) / (12.0 * h);
            let scale = g[i].abs().max(fd.abs());
            let err = if scale < 1e-8 {
                (g[i] - fd).abs() / 1e-8 * 1e-6
            } else {
                (g[i] - fd).abs() / scale
            };
            worst = worst.max(err);
        }
    }
    let pass = worst < 1e-6;
    report(1, pass, &format!("worst relative error {worst:.2e}"), t);
    assert!(pass);
}

/// Bernoulli log-pmf sum with θ_j formed directly from cell centroids.
fn oracle_log_likelihood(model: &HazardModel, ds: &SurveyDataset, q: &[f64]) -> f64 {
    let lay = model.layout();
    let lambda = q[lay.baseline.start].exp();
    let rho = q[lay.log_rho].exp();
    let field = model.field(q).unwrap();
    let part = model.partition();
    let centroids = part.centroids();
    let widths = part.widths();
    let mut total = 0.0;
    let index = |id: &str| ds.households().iter().position(|h| h.id == id).unwrap();
    for o in ds.observations() {
        let h = &ds.households()[index(&o.household_id)];
        let mut theta = 0.0;
        for m in 0..centroids.len() {
            let d =
                ((h.location.x - centroids[m].x).powi(2) + (h.location.y - centroids[m].y).powi(2)).sqrt();
            theta += (-d / rho).exp() * field.cells[m].exp() * widths[m];
        }
        let lin: f64 = h
            .covariates
            .iter()
            .zip(&q[lay.gamma.clone()])
            .map(|(x, g)| x * g)
            .sum();
        let eta = lin.exp() * (lambda + theta);
        total += if o.outcome == 1 {
            (-(-eta).exp_m1()).ln()
        } else {
            -eta
        };
    }
    total
}

#[test]
fn criterion_2_likelihood_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let j = rng.random_range(1..=10);
        let i = rng.random_range(1..=5);
        let p = rng.random_range(0..=2);
        let ds = random_dataset(&mut rng, j, i, p);
        let model = fitted_model(&ds, 10);
        let q: Vec<f64> = (0..model.layout().dim())
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let ll = model.log_likelihood(&q).unwrap().0;
        let oracle = oracle_log_likelihood(&model, &ds, &q);
        worst = worst.max((ll - oracle).abs() / oracle.abs().max(1.0));
    }
    let pass = worst <= 1e-12;
    report(2, pass, &format!("worst relative difference {worst:.2e}"), t);
    assert!(pass);
}

#[test]
fn criterion_3_discretization_convergence() {
    let t = Instant::now();
    let study = discretization_study(&DEFAULT_M_LADDER, 100, 303).unwrap();
    let violations = study.rows.iter().filter(|r| r.bound < r.error).count();
    let pass = study.slope <= -0.9 && violations == 0;
    report(
        3,
        pass,
        &format!(
            "slope {:.3}, bound violations {violations}/{}",
            study.slope,
            study.rows.len()
        ),
        t,
    );
    for (m, e, b) in &study.per_m {
        say(&format!("  M={m:<4} mean error {e:.3e}  mean bound {b:.3e}"));
    }
    assert!(pass);
}

struct StdNormal(usize);

impl LogDensity for StdNormal {
    fn dim(&self) -> usize {
        self.0
    }

    fn logp_grad(&self, q: &[f64], grad: &mut [f64]) -> f64 {
        for (g, x) in grad.iter_mut().zip(q) {
            *g = -x;
        }
        -0.5 * q.iter().map(|x| x * x).sum::<f64>()
    }
}

impl Posterior for StdNormal {
    fn param_names(&self) -> Vec<String> {
        (0..self.0).map(|i| format!("x{i}")).collect()
    }

    fn constrain(&self, q: &[f64]) -> Vec<f64> {
        q.to_vec()
    }
}

#[test]
fn criterion_4_sampler_calibration() {
    let t = Instant::now();
    let target = StdNormal(10);
    let cfg = SamplerConfig {
        seed: 404,
        ..SamplerConfig::default()
    };
    let out = run_chains(&target, &cfg).unwrap();
    let divergences: usize = out.iter().map(|c| c.divergences()).sum();
    let n: usize = out.iter().map(|c| c.accept_stat.len()).sum();
    let accept = out.iter().flat_map(|c| &c.accept_stat).sum::<f64>() / n as f64;
    let mut max_rhat = 0.0_f64;
    let mut worst_z = 0.0_f64;
    for i in 0..10 {
        let chains: Vec<Vec<f64>> = out
            .iter()
            .map(|c| c.draws.iter().map(|d| d[i]).collect())
            .collect();
        let pooled: Vec<f64> = chains.concat();
        let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
        let sd = (pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (pooled.len() - 1) as f64).sqrt();
        let ess = ess_bulk(&chains).unwrap();
        worst_z = worst_z.max(mean.abs() / (sd / ess.sqrt()));
        max_rhat = max_rhat.max(split_rhat(&chains).unwrap());
    }
    let pass = worst_z <= 3.0 && max_rhat < 1.01 && divergences == 0 && (accept - 0.95).abs() <= 0.07;
    report(
        4,
        pass,
        &format!(
            "max |mean|/(sd/sqrt(ESS)) {worst_z:.2}, max R-hat {max_rhat:.4}, divergences {divergences}, accept {accept:.3}"
        ),
        t,
    );
    assert!(pass);
}

fn env_usize(key: &str, default: usize) -> usize {
    std::env::var(key)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

struct RecoveryRuns {
    m20: Vec<ReplicationResult>,
    m40: Vec<ReplicationResult>,
    warmup: usize,
    samples: usize,
}

fn recovery_runs() -> &'static RecoveryRuns {
    static RUNS: OnceLock<RecoveryRuns> = OnceLock::new();
    RUNS.get_or_init(|| {
        let warmup = env_usize("HAZARDFIELD_ACCEPT_WARMUP", 500);
        let samples = env_usize("HAZARDFIELD_ACCEPT_SAMPLES", 500);
        let settings = FitSettings {
            sampler: SamplerConfig {
                warmup_iters: warmup,
                sampling_iters: samples,
                ..SamplerConfig::default()
            },
            spec: ModelSpec::new(three_canal_cell_counts(40).unwrap()),
        };
        let fits = |m: usize| -> Vec<ReplicationResult> {
            let mut s = StudyScenario::new(200, 10, HouseholdLayout::Clustered, m);
            s.seed = 505;
            (0..5)
                .map(|r| run_replication(&s, &settings, r).unwrap().0)
                .collect()
        };
        RecoveryRuns {
            m40: fits(40),
            m20: fits(20),
            warmup,
            samples,
        }
    })
}

fn mean_theta_coverage(results: &[ReplicationResult]) -> f64 {
    let c: Vec<f64> = results
        .iter()
        .filter_map(ReplicationResult::theta_coverage)
        .collect();
    c.iter().sum::<f64>() / c.len().max(1) as f64
}

#[test]
fn criterion_5_parameter_recovery() {
    let t = Instant::now();
    let runs = recovery_runs();
    let covers = |name: &str| {
        runs.m40
            .iter()
            .filter(|r| r.params.get(name).and_then(|p| p.covered()) == Some(true))
            .count()
    };
    let (rho, gamma) = (covers("rho"), covers("gamma[0]"));
    let theta = mean_theta_coverage(&runs.m40);
    for r in &runs.m40 {
        say(&format!(
            "  rep {}: rho {:.4} [{:.4}, {:.4}]  gamma {:.4} [{:.4}, {:.4}]  theta coverage {:.3}  max R-hat {:?}  divergences {}",
            r.replication,
            r.params["rho"].mean,
            r.params["rho"].q10,
            r.params["rho"].q90,
            r.params["gamma[0]"].mean,
            r.params["gamma[0]"].q10,
            r.params["gamma[0]"].q90,
            r.theta_coverage().unwrap_or(f64::NAN),
            r.max_rhat,
            r.divergences
        ));
    }
    let pass = rho >= 3 && gamma >= 3 && (0.60..=0.95).contains(&theta);
    report(
        5,
        pass,
        &format!(
            "rho covered {rho}/5, gamma covered {gamma}/5, mean theta coverage {theta:.3} (4 chains x {}/{})",
            runs.warmup, runs.samples
        ),
        t,
    );
    assert!(pass);
}

#[test]
fn criterion_6_grid_resolution_direction() {
    let t = Instant::now();
    let runs = recovery_runs();
    let (c20, c40) = (mean_theta_coverage(&runs.m20), mean_theta_coverage(&runs.m40));
    let pass = c40 >= c20 - 0.05;
    report(
        6,
        pass,
        &format!("theta coverage M=20 {c20:.3}, M=40 {c40:.3}"),
        t,
    );
    assert!(pass);
}

#[test]
fn criterion_7_intersections_exact() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let ds = random_dataset(&mut rng, 15, 4, 1);
    let model = fitted_model(&ds, 20);
    let network = model.network();
    assert!(!network.intersections().is_empty());
    let mut checked = 0usize;
    let mut mismatches = 0usize;
    let mut check = |q: &[f64]| {
        let field = model.field(q).unwrap();
        for ix in network.intersections() {
            let a = model.gp().value_at(&field, ix.a);
            let b = model.gp().value_at(&field, ix.b);
            checked += 1;
            match (a, b) {
                (Some(a), Some(b)) if a.to_bits() == b.to_bits() => {}
                _ => mismatches += 1,
            }
        }
    };
    for _ in 0..200 {
        check(&sample_prior_state(&model, &mut rng));
    }
    let cfg = SamplerConfig {
        chains: 2,
        warmup_iters: 150,
        sampling_iters: 150,
        seed: 7,
        ..SamplerConfig::default()
    };
    for chain in run_chains(&model, &cfg).unwrap() {
        for q in &chain.unconstrained {
            check(q);
        }
    }
    let pass = mismatches == 0;
    report(
        7,
        pass,
        &format!("{checked} intersection checks, {mismatches} mismatches"),
        t,
    );
    assert!(pass);
}

fn iid_chains(rng: &mut ChaCha8Rng, chains: usize, n: usize, shift: &[f64]) -> Vec<Vec<f64>> {
    (0..chains)
        .map(|c| {
            (0..n)
                .map(|_| rng.sample::<f64, _>(StandardNormal) + shift[c])
                .collect()
        })
        .collect()
}

#[test]
fn criterion_8_diagnostics_oracle() {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut ok = true;
    let mut lines = Vec::new();
    let n = 1000;
    for trial in 0..10 {
        let ch = iid_chains(&mut rng, 4, n, &[0.0; 4]);
        let r = split_rhat(&ch).unwrap();
        let e = ess_bulk(&ch).unwrap();
        let total = (4 * n) as f64;
        let cap = total * total.log10();
        let good = (0.999..=1.01).contains(&r) && e >= 0.8 * total && e <= (1.2 * total).min(cap);
        ok &= good;
        if !good {
            lines.push(format!("iid trial {trial}: R-hat {r:.4}, ESS {e:.0}"));
        }
    }
    let sep = iid_chains(&mut rng, 4, n, &[0.0, 0.0, 5.0, 5.0]);
    let r_sep = split_rhat(&sep).unwrap();
    ok &= r_sep > 1.5;
    let phi: f64 = 0.9;
    let ar: Vec<Vec<f64>> = (0..4)
        .map(|_| {
            let mut x: f64 = rng.sample::<f64, _>(StandardNormal) / (1.0 - phi * phi).sqrt();
            (0..5000)
                .map(|_| {
                    x = phi * x + rng.sample::<f64, _>(StandardNormal);
                    x
                })
                .collect()
        })
        .collect();
    let analytic = 4.0 * 5000.0 * (1.0 - phi) / (1.0 + phi);
    let e_ar = ess_bulk(&ar).unwrap();
    let ratio = e_ar / analytic;
    ok &= (1.0 / 1.5..=1.5).contains(&ratio);
    for l in &lines {
        say(&format!("  {l}"));
    }
    report(
        8,
        ok,
        &format!("separated R-hat {r_sep:.2}, AR(1) ESS {e_ar:.0} vs analytic {analytic:.0}"),
        t,
    );
    assert!(ok);
}

fn cli(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_hazardfield"))
        .args(args)
        .output()
        .unwrap();
    assert!(
        status.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&status.stderr)
    );
}

fn csv_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn criterion_9_reproducible_outputs() {
    let t = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let run = |tag: &str, threads: &str| {
        let data = tmp.path().join(format!("{tag}_data"));
        let fit = tmp.path().join(format!("{tag}_fit"));
        let common = ["--seed", "99", "--threads", threads];
        let d = data.to_str().unwrap();
        cli(&[
            &["simulate", "--out", d, "--set", "households=40"][..],
            &common[..],
        ]
        .concat());
        cli(&[
            &[
                "fit",
                "--data",
                d,
                "--out",
                fit.to_str().unwrap(),
                "--set",
                "cells=10",
                "--set",
                "warmup=150",
                "--set",
                "samples=100",
            ][..],
            &common[..],
        ]
        .concat());
        (csv_files(&data), csv_files(&fit))
    };
    let a = run("a", "1");
    let b = run("b", "1");
    let c = run("c", "4");
    let files = a.0.len() + a.1.len();
    let pass = files >= 8 && a == b && a == c;
    report(
        9,
        pass,
        &format!("{files} CSV files identical across runs and thread counts 1/4"),
        t,
    );
    assert!(pass);
}
