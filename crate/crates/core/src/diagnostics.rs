//! Convergence diagnostics and posterior summaries.
//!
//! R-hat and ESS use split, rank-normalized draws. Undefined results (zero
//! variance, too few draws) come back as `None` rather than NaN.

use std::io::Write;

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::sampler::{ChainOutput, PosteriorDraws};

/// Sample quantile by linear interpolation of order statistics (type 7).
pub fn quantile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() || !(0.0..=1.0).contains(&p) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, p))
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn variance(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() as f64 - 1.0)
}

/// Splits every chain into halves (the middle draw of an odd chain is dropped).
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let half = c.len() / 2;
        out.push(c[..half].to_vec());
        out.push(c[c.len() - half..].to_vec());
    }
    out
}

/// Replaces draws by normal scores of their pooled average ranks.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let normal = Normal::standard();
    let mut it = ranks
        .into_iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)));
    chains
        .iter()
        .map(|c| it.by_ref().take(c.len()).collect())
        .collect()
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|x| *x == first)
}

fn rhat_basic(chains: &[Vec<f64>]) -> Option<f64> {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = mean(&chains.iter().map(|c| variance(c)).collect::<Vec<_>>());
    if !(w > 0.0) {
        return None;
    }
    let b = n * variance(&means);
    Some(((b / w + n - 1.0) / n).sqrt())
}

/// Rank-normalized split R-hat.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || !well_formed(chains) || is_constant(chains) {
        return None;
    }
    rhat_basic(&rank_normalize(&split_chains(chains)))
}

/// Biased autocovariance at `lag` of one chain with known mean.
fn autocov(c: &[f64], m: f64, lag: usize) -> f64 {
    let n = c.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (c[i] - m) * (c[i + lag] - m);
    }
    s / n as f64
}

/// Multi-chain ESS with Geyer's initial monotone sequence, capped at
/// `S·log10(S)` for `S` total draws.
fn ess_raw(chains: &[Vec<f64>]) -> Option<f64> {
    let m = chains.len();
    let n = chains[0].len();
    if n < 4 {
        return None;
    }
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let acov_mean = |lag: usize| -> f64 {
        chains
            .iter()
            .zip(&means)
            .map(|(c, mu)| autocov(c, *mu, lag))
            .sum::<f64>()
            / m as f64
    };
    let acov0 = acov_mean(0);
    let mean_var = acov0 * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += variance(&means);
    }
    if !(var_plus > 0.0) {
        return None;
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - acov_mean(lag)) / var_plus;

    let mut rho = vec![0.0; n];
    let mut t = 0;
    let mut even = 1.0;
    rho[0] = even;
    let mut odd = rho_at(1);
    rho[1] = odd;
    while t + 5 < n && !(even + odd).is_nan() && even + odd > 0.0 {
        t += 2;
        even = rho_at(t);
        odd = rho_at(t + 1);
        if even + odd >= 0.0 {
            rho[t] = even;
            rho[t + 1] = odd;
        }
    }
    let max_t = t;
    if even > 0.0 {
        rho[max_t] = even;
    }
    let mut t = 0;
    while t + 4 <= max_t {
        t += 2;
        if rho[t] + rho[t + 1] > rho[t - 2] + rho[t - 1] {
            rho[t] = (rho[t - 2] + rho[t - 1]) / 2.0;
            rho[t + 1] = rho[t];
        }
    }
    let s = (m * n) as f64;
    let tau = -1.0 + 2.0 * rho[..max_t].iter().sum::<f64>() + rho[max_t];
    let tau = tau.max(1.0 / s.log10());
    Some(s / tau)
}

/// Bulk ESS on split, rank-normalized draws.
pub fn ess_bulk(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || !well_formed(chains) || is_constant(chains) {
        return None;
    }
    ess_raw(&rank_normalize(&split_chains(chains)))
}

/// Tail ESS: the smaller ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> Option<f64> {
    if chains.is_empty() || !well_formed(chains) || is_constant(chains) {
        return None;
    }
    let split = split_chains(chains);
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let mut out = f64::INFINITY;
    for p in [0.05, 0.95] {
        let q = quantile(&pooled, p)?;
        let ind: Vec<Vec<f64>> = split
            .iter()
            .map(|c| c.iter().map(|x| if *x <= q { 1.0 } else { 0.0 }).collect())
            .collect();
        if is_constant(&ind) {
            return None;
        }
        out = out.min(ess_raw(&ind)?);
    }
    Some(out)
}

/// Equal-length finite chains with at least 8 draws; one chain suffices since
/// splitting yields two halves.
fn well_formed(chains: &[Vec<f64>]) -> bool {
    chains.iter().all(|c| c.len() >= 8 && c.len() == chains[0].len())
        && chains.iter().flatten().all(|x| x.is_finite())
}

/// Summary of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// 1%, 10%, 50%, 90% and 99% quantiles.
    pub quantiles: [f64; 5],
    pub rhat: Option<f64>,
    pub ess_bulk: Option<f64>,
    pub ess_tail: Option<f64>,
}

pub const SUMMARY_PROBS: [f64; 5] = [0.01, 0.10, 0.50, 0.90, 0.99];

pub fn summarize_param(name: &str, chains: &[Vec<f64>]) -> ParamSummary {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let n = pooled.len();
    let m = if n > 0 { mean(&pooled) } else { f64::NAN };
    let sd = if n > 1 { variance(&pooled).sqrt() } else { 0.0 };
    pooled.sort_by(f64::total_cmp);
    let quantiles = if n > 0 {
        SUMMARY_PROBS.map(|p| quantile_sorted(&pooled, p))
    } else {
        [f64::NAN; 5]
    };
    ParamSummary {
        name: name.to_string(),
        mean: m,
        sd,
        quantiles,
        rhat: split_rhat(chains),
        ess_bulk: ess_bulk(chains),
        ess_tail: ess_tail(chains),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub params: Vec<ParamSummary>,
    pub divergences: usize,
    pub treedepth_saturations: usize,
}

impl FitReport {
    pub fn max_rhat(&self) -> Option<f64> {
        self.params.iter().filter_map(|p| p.rhat).max_by(f64::total_cmp)
    }

    pub fn min_ess_bulk(&self) -> Option<f64> {
        self.params
            .iter()
            .filter_map(|p| p.ess_bulk)
            .min_by(f64::total_cmp)
    }

    pub fn min_ess_tail(&self) -> Option<f64> {
        self.params
            .iter()
            .filter_map(|p| p.ess_tail)
            .min_by(f64::total_cmp)
    }

    pub fn get(&self, name: &str) -> Option<&ParamSummary> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Writes `name, mean, sd, q1, q10, q50, q90, q99, rhat, ess_bulk, ess_tail`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record([
            "name", "mean", "sd", "q1", "q10", "q50", "q90", "q99", "rhat", "ess_bulk", "ess_tail",
        ])?;
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| x.to_string());
        for p in &self.params {
            let mut rec = vec![p.name.clone(), p.mean.to_string(), p.sd.to_string()];
            rec.extend(p.quantiles.iter().map(|q| q.to_string()));
            rec.push(opt(p.rhat));
            rec.push(opt(p.ess_bulk));
            rec.push(opt(p.ess_tail));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Per-parameter summaries of all draws (parallel over parameters).
pub fn summarize(draws: &PosteriorDraws) -> Vec<ParamSummary> {
    draws
        .names()
        .par_iter()
        .enumerate()
        .map(|(i, name)| summarize_param(name, &draws.column(i)))
        .collect()
}

/// Full report including sampler statistics.
pub fn fit_report(names: Vec<String>, outputs: &[ChainOutput], max_tree_depth: u32) -> FitReport {
    let draws = PosteriorDraws::from_chains(names, outputs);
    FitReport {
        params: summarize(&draws),
        divergences: outputs.iter().map(|c| c.divergences()).sum(),
        treedepth_saturations: outputs
            .iter()
            .flat_map(|c| c.treedepth.iter())
            .filter(|d| **d >= max_tree_depth)
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(chains: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..chains)
            .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
            .collect()
    }

    fn ar1(chains: usize, n: usize, phi: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = (1.0 - phi * phi).sqrt();
        (0..chains)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        let e: f64 = rng.sample(StandardNormal);
                        x = phi * x + s * e;
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn iid_rhat_and_ess() {
        let c = iid(4, 1000, 1);
        let r = split_rhat(&c).unwrap();
        assert!((0.999..=1.01).contains(&r), "{r}");
        let e = ess_bulk(&c).unwrap();
        assert!((3200.0..=4800.0).contains(&e), "{e}");
        assert!(ess_tail(&c).unwrap() > 2000.0);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let mut c = iid(2, 1000, 2);
        c[1].iter_mut().for_each(|x| *x += 5.0);
        assert!(split_rhat(&c).unwrap() > 1.5);
    }

    #[test]
    fn constant_chains_are_undefined() {
        let c = vec![vec![3.0; 100]; 4];
        assert_eq!(split_rhat(&c), None);
        assert_eq!(ess_bulk(&c), None);
        assert_eq!(ess_tail(&c), None);
    }

    #[test]
    fn ar1_ess_matches_autocorrelation_time() {
        let phi = 0.9;
        let c = ar1(4, 5000, phi, 3);
        let n = 20000.0;
        let ratio = ess_bulk(&c).unwrap() / n / ((1.0 - phi) / (1.0 + phi));
        assert!((1.0 / 1.5..1.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn ess_decreases_with_autocorrelation() {
        let e: Vec<f64> = [0.0, 0.5, 0.9]
            .iter()
            .map(|&phi| ess_bulk(&ar1(4, 1000, phi, 4)).unwrap())
            .collect();
        assert!(e[0] > e[1] && e[1] > e[2], "{e:?}");
    }

    #[test]
    fn ess_respects_cap() {
        // strongly antithetic chains push the raw estimate above S
        let c: Vec<Vec<f64>> = (0..4)
            .map(|k| {
                (0..500)
                    .map(|i| if (i + k) % 2 == 0 { 1.0 } else { -1.0 } + 1e-3 * i as f64)
                    .collect()
            })
            .collect();
        let s = 2000.0f64;
        assert!(ess_bulk(&c).unwrap() <= s * s.log10() + 1e-9);
    }

    #[test]
    fn single_value_summary() {
        let s = summarize_param("a", &[vec![2.0; 10], vec![2.0; 10]]);
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.sd, 0.0);
        assert_eq!(s.rhat, None);
    }

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), Some(1.0));
        assert_eq!(quantile(&v, 1.0), Some(4.0));
        assert!((quantile(&v, 0.1).unwrap() - 1.3).abs() < 1e-12);
        assert_eq!(quantile(&[], 0.5), None);
    }

    #[test]
    fn streaming_mean_matches_batch() {
        let c = iid(1, 10_000, 5).remove(0);
        let mut m = 0.0;
        for (i, x) in c.iter().enumerate() {
            m += (x - m) / (i as f64 + 1.0);
        }
        assert!((m - summarize_param("x", &[c.clone()]).mean).abs() < 1e-12);
    }

    #[test]
    fn report_csv_marks_undefined() {
        let r = FitReport {
            params: vec![summarize_param("k", &[vec![1.0; 8], vec![1.0; 8]])],
            divergences: 0,
            treedepth_saturations: 0,
        };
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("name,mean,sd,q1,q10,q50,q90,q99,rhat,ess_bulk,ess_tail\n"));
        assert!(text.contains(",NA,NA,NA"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn rhat_is_rank_invariant(seed in 0u64..1000, shift in -5.0f64..5.0) {
            let c = iid(3, 60, seed);
            let t: Vec<Vec<f64>> = c.iter().map(|v| v.iter().map(|x| (x + shift).exp()).collect()).collect();
            let a = split_rhat(&c).unwrap();
            let b = split_rhat(&t).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn chain_permutation_invariance(seed in 0u64..1000) {
            let c = iid(4, 50, seed);
            let mut p = c.clone();
            p.reverse();
            let close = |a: Option<f64>, b: Option<f64>| (a.unwrap() - b.unwrap()).abs() < 1e-9;
            prop_assert!(close(split_rhat(&c), split_rhat(&p)));
            prop_assert!(close(ess_bulk(&c), ess_bulk(&p)));
            prop_assert!(close(ess_tail(&c), ess_tail(&p)));
        }

        #[test]
        fn quantiles_are_monotone(seed in 0u64..1000) {
            let c = iid(2, 40, seed);
            let s = summarize_param("x", &c);
            prop_assert!(s.quantiles.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(s.ess_bulk.unwrap() <= 80.0 * 80f64.log10() + 1e-9);
        }
    }
}
