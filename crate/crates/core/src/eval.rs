//! Exact-posterior metrics and the comparison experiments built on them.
//!
//! The judge of every experiment is the world itself: a sample's quality is
//! the exact clean-data posterior of the positive concept. Chains fan out
//! across seeds in parallel, and results are gathered in seed order so every
//! report is reproducible regardless of thread count.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, Continuous, ContinuousCDF, DiscreteCDF, Normal};
use statrs::statistics::Distribution as _;

use crate::chains::{chain_rng, Engine};
use crate::error::{Error, Result};
use crate::guidance::{GuidanceConfig, Strategy};
use crate::schedule::VarianceSchedule;
use crate::world::{log_sum_exp, ConceptId, ConceptWorld, Condition};

/// Summary of one configuration's samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub strategy: String,
    pub samples: usize,
    pub compliance_rate: f64,
    pub mean_log_odds: f64,
    pub mean_positive_posterior: f64,
    pub distance_to_target: f64,
    /// Total over all samples.
    pub denoiser_calls: u64,
    /// Never serialized, so reports written to disk stay reproducible.
    #[serde(skip)]
    pub wall_time: f64,
}

impl MetricsReport {
    /// Computes every metric of `samples` against concept `pos`.
    pub fn from_samples(
        strategy: impl Into<String>,
        samples: &[Vec<f64>],
        world: &ConceptWorld,
        sched: &VarianceSchedule,
        pos: ConceptId,
        denoiser_calls: u64,
    ) -> Result<Self> {
        let posteriors = positive_posteriors(samples, world, sched, pos)?;
        let n = samples.len() as f64;
        Ok(Self {
            strategy: strategy.into(),
            samples: samples.len(),
            compliance_rate: posteriors.iter().filter(|p| **p > 0.5).count() as f64 / n,
            mean_log_odds: mean_log_odds(samples, world, sched, pos)?,
            mean_positive_posterior: posteriors.iter().sum::<f64>() / n,
            distance_to_target: distance_to_target(samples, world, pos)?,
            denoiser_calls,
            wall_time: 0.0,
        })
    }

    pub fn calls_per_sample(&self) -> f64 {
        self.denoiser_calls as f64 / self.samples as f64
    }

    /// True when every metric except the label and wall time matches bitwise.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.samples == other.samples
            && self.compliance_rate.to_bits() == other.compliance_rate.to_bits()
            && self.mean_log_odds.to_bits() == other.mean_log_odds.to_bits()
            && self.mean_positive_posterior.to_bits() == other.mean_positive_posterior.to_bits()
            && self.distance_to_target.to_bits() == other.distance_to_target.to_bits()
            && self.denoiser_calls == other.denoiser_calls
    }
}

fn log_posteriors_at(world: &ConceptWorld, sched: &VarianceSchedule, z: &[f64], t: usize) -> Result<Vec<f64>> {
    world.diffused(sched.alpha_bar(t)?)?.log_posteriors(z)
}

/// `p(pos | z_t) / p(neg | z_t)`; `+inf` when the negative posterior underflows to zero.
pub fn odds_ratio(
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    z: &[f64],
    t: usize,
    pos: ConceptId,
    neg: ConceptId,
) -> Result<f64> {
    world.concept(pos)?;
    world.concept(neg)?;
    if pos == neg {
        return Err(Error::Parameter("odds ratio needs two distinct concepts".into()));
    }
    let lp = log_posteriors_at(world, sched, z, t)?;
    if lp[neg.0] == f64::NEG_INFINITY {
        return Ok(f64::INFINITY);
    }
    Ok((lp[pos.0] - lp[neg.0]).exp())
}

/// Unnormalized log density of the guided target at step `t`:
/// `log p(z) + s log p(pos|z)`, or with a negative,
/// `log p(z) + s (log p(pos|z) - log p(neg|z))`.
#[allow(clippy::too_many_arguments)]
pub fn tilted_log_density(
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    z: &[f64],
    t: usize,
    cond: ConceptId,
    s: f64,
    neg: Option<ConceptId>,
) -> Result<f64> {
    world.concept(cond)?;
    if let Some(n) = neg {
        world.concept(n)?;
    }
    let diffused = world.diffused(sched.alpha_bar(t)?)?;
    let base = diffused.log_density(z, Condition::Null)?;
    if s == 0.0 {
        return Ok(base);
    }
    let lp = diffused.log_posteriors(z)?;
    let log_ratio = match neg {
        Some(n) if n == cond => 0.0,
        Some(n) => lp[cond.0] - lp[n.0],
        None => lp[cond.0],
    };
    Ok(base + s * log_ratio)
}

/// Clean-data posterior of `pos` for each sample.
pub fn positive_posteriors(
    samples: &[Vec<f64>],
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    pos: ConceptId,
) -> Result<Vec<f64>> {
    world.concept(pos)?;
    let clean = world.diffused(sched.alpha_bar(0)?)?;
    samples.iter().map(|z| Ok(clean.log_posteriors(z)?[pos.0].exp())).collect()
}

fn nonempty(samples: &[Vec<f64>]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Parameter("metrics need at least one sample".into()));
    }
    Ok(())
}

/// Fraction of samples whose clean posterior of `pos` exceeds one half.
pub fn compliance_rate(
    samples: &[Vec<f64>],
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    pos: ConceptId,
) -> Result<f64> {
    nonempty(samples)?;
    let post = positive_posteriors(samples, world, sched, pos)?;
    Ok(post.iter().filter(|p| **p > 0.5).count() as f64 / samples.len() as f64)
}

/// Mean of `log p(pos|z) - log p(not pos|z)` at `t = 0`.
///
/// Infinite when `pos` is the only concept.
pub fn mean_log_odds(
    samples: &[Vec<f64>],
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    pos: ConceptId,
) -> Result<f64> {
    nonempty(samples)?;
    world.concept(pos)?;
    let clean = world.diffused(sched.alpha_bar(0)?)?;
    let mut total = 0.0;
    for z in samples {
        let lp = clean.log_posteriors(z)?;
        let rest = log_sum_exp(lp.iter().enumerate().filter(|(i, _)| *i != pos.0).map(|(_, v)| *v));
        total += lp[pos.0] - rest;
    }
    Ok(total / samples.len() as f64)
}

/// Mixture of 1-D Gaussians: the marginal of a concept along one axis.
struct AxisMixture {
    parts: Vec<(f64, Normal)>,
}

impl AxisMixture {
    fn new(world: &ConceptWorld, pos: ConceptId, axis: usize) -> Result<Self> {
        let parts = world
            .concept(pos)?
            .components
            .iter()
            .map(|c| {
                let sd = c.covariance[(axis, axis)].sqrt();
                Normal::new(c.mean[axis], sd)
                    .map(|n| (c.weight, n))
                    .map_err(|e| Error::Invariant(format!("axis marginal: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { parts })
    }

    fn cdf(&self, x: f64) -> f64 {
        self.parts.iter().map(|(w, n)| w * n.cdf(x)).sum()
    }

    /// Antiderivative of the CDF: `(x - m) F(x) + sd^2 f(x)` per component.
    fn cdf_integral(&self, x: f64) -> f64 {
        self.parts
            .iter()
            .map(|(w, n)| w * ((x - n.mean().unwrap()) * n.cdf(x) + n.variance().unwrap() * n.pdf(x)))
            .sum()
    }

    fn support(&self) -> (f64, f64) {
        self.parts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (_, n)| {
            let (m, sd) = (n.mean().unwrap(), n.std_dev().unwrap());
            (lo.min(m - 12.0 * sd), hi.max(m + 12.0 * sd))
        })
    }

    /// `integral |level - F(x)| dx` over `[a, b]`, split where `F` crosses `level`.
    fn abs_gap(&self, level: f64, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let piece = |a: f64, b: f64| (level * (b - a) - (self.cdf_integral(b) - self.cdf_integral(a))).abs();
        let (fa, fb) = (self.cdf(a) - level, self.cdf(b) - level);
        if fa >= 0.0 || fb <= 0.0 {
            return piece(a, b);
        }
        let (mut lo, mut hi) = (a, b);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < level {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        piece(a, lo) + piece(lo, b)
    }
}

/// Wasserstein-1 distance between 1-D samples and the target concept.
pub fn wasserstein1(samples: &[f64], world: &ConceptWorld, pos: ConceptId) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("metrics need at least one sample".into()));
    }
    let target = AxisMixture::new(world, pos, 0)?;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let (lo, hi) = target.support();
    let lo = lo.min(xs[0]);
    let hi = hi.max(xs[xs.len() - 1]);
    let mut total = target.abs_gap(0.0, lo, xs[0]);
    for (i, pair) in xs.windows(2).enumerate() {
        total += target.abs_gap((i + 1) as f64 / n, pair[0], pair[1]);
    }
    total += target.abs_gap(1.0, xs[xs.len() - 1], hi);
    Ok(total)
}

/// Kolmogorov-Smirnov statistic of 1-D samples against one axis of the target.
pub fn ks_statistic(samples: &[f64], world: &ConceptWorld, pos: ConceptId, axis: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Parameter("metrics need at least one sample".into()));
    }
    let target = AxisMixture::new(world, pos, axis)?;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    Ok(xs.iter().enumerate().fold(0.0, |worst: f64, (i, x)| {
        let f = target.cdf(*x);
        worst.max(((i + 1) as f64 / n - f).abs()).max((f - i as f64 / n).abs())
    }))
}

/// Wasserstein-1 in one dimension; the largest per-axis KS statistic otherwise.
pub fn distance_to_target(samples: &[Vec<f64>], world: &ConceptWorld, pos: ConceptId) -> Result<f64> {
    nonempty(samples)?;
    let d = world.dimension();
    if let Some(bad) = samples.iter().find(|z| z.len() != d) {
        return Err(Error::Shape { expected: d, got: bad.len() });
    }
    if d == 1 {
        let xs: Vec<f64> = samples.iter().map(|z| z[0]).collect();
        return wasserstein1(&xs, world, pos);
    }
    (0..d).try_fold(0.0, |worst: f64, axis| {
        let xs: Vec<f64> = samples.iter().map(|z| z[axis]).collect();
        Ok(worst.max(ks_statistic(&xs, world, pos, axis)?))
    })
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are excluded before calling.
pub fn sign_test_p(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 || wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, n).map(|b| b.sf(wins - 1)).unwrap_or(1.0)
}

/// Short human-readable label of a configuration.
pub fn config_label(config: &GuidanceConfig) -> String {
    let mut label = format!("{} s={}", config.strategy, config.s);
    if let Some(s_n) = config.s_n {
        label.push_str(&format!(" sn={s_n}"));
    }
    if config.strategy == Strategy::Answer {
        label.push_str(&format!(" K={}", config.k));
    }
    label
}

/// The `n` consecutive seeds starting at `first`.
pub fn seed_range(first: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| first.wrapping_add(i)).collect()
}

/// Final samples and call totals of one configuration over many seeds.
#[derive(Debug, Clone)]
pub struct SeedRuns {
    pub seeds: Vec<u64>,
    pub samples: Vec<Vec<f64>>,
    pub denoiser_calls: u64,
    pub wall_time: f64,
}

/// Runs `config` once per seed, overriding its seed field.
pub fn run_seeds(engine: &Engine<'_>, config: &GuidanceConfig, pos: ConceptId, seeds: &[u64]) -> Result<SeedRuns> {
    config.validate()?;
    let start = Instant::now();
    let runs = seeds
        .par_iter()
        .map(|&seed| {
            let config = GuidanceConfig { seed, ..config.clone() };
            engine.run(pos, &config).map(|trace| (trace.final_sample, trace.total_denoiser_calls))
        })
        .collect::<Result<Vec<_>>>()?;
    let wall_time = start.elapsed().as_secs_f64();
    let denoiser_calls = runs.iter().map(|(_, c)| c).sum();
    Ok(SeedRuns {
        seeds: seeds.to_vec(),
        samples: runs.into_iter().map(|(z, _)| z).collect(),
        denoiser_calls,
        wall_time,
    })
}

/// Paired-seed comparison of several configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seeds: Vec<u64>,
    pub reports: Vec<MetricsReport>,
    /// `posteriors[i][j]`: positive posterior of config `i` at seed `j`.
    pub posteriors: Vec<Vec<f64>>,
    /// `win_rates[i][j]`: share of seeds where `i` beats `j`, ties split.
    pub win_rates: Vec<Vec<f64>>,
    /// `p_values[i][j]`: one-sided sign-test p-value for "`i` beats `j`".
    pub p_values: Vec<Vec<f64>>,
}

/// Wins, losses and ties of `a` against `b`, seed by seed.
pub fn paired_outcomes(a: &[f64], b: &[f64]) -> (u64, u64, u64) {
    a.iter().zip(b).fold((0, 0, 0), |(w, l, t), (x, y)| {
        if x > y {
            (w + 1, l, t)
        } else if x < y {
            (w, l + 1, t)
        } else {
            (w, l, t + 1)
        }
    })
}

/// Runs every config on the same `n_seeds` seeds, starting at the first
/// config's seed, and judges each pair by exact positive posterior.
pub fn compare_strategies(
    engine: &Engine<'_>,
    configs: &[GuidanceConfig],
    pos: ConceptId,
    n_seeds: usize,
) -> Result<Comparison> {
    let first = configs.first().ok_or_else(|| Error::Parameter("nothing to compare".into()))?;
    if n_seeds == 0 {
        return Err(Error::Parameter("n_seeds must be positive".into()));
    }
    if let Some(odd) = configs.iter().find(|c| c.sampler != first.sampler) {
        return Err(Error::Parameter(format!(
            "all compared configs must share one sampler; found {:?} and {:?}",
            first.sampler, odd.sampler
        )));
    }
    let seeds = seed_range(first.seed, n_seeds);
    let (world, sched) = (engine.world(), engine.schedule());
    let mut reports = Vec::with_capacity(configs.len());
    let mut posteriors = Vec::with_capacity(configs.len());
    for config in configs {
        let runs = run_seeds(engine, config, pos, &seeds)?;
        let mut report =
            MetricsReport::from_samples(config_label(config), &runs.samples, world, sched, pos, runs.denoiser_calls)?;
        report.wall_time = runs.wall_time;
        reports.push(report);
        posteriors.push(positive_posteriors(&runs.samples, world, sched, pos)?);
    }
    let n = n_seeds as f64;
    let m = configs.len();
    let mut win_rates = vec![vec![0.5; m]; m];
    let mut p_values = vec![vec![1.0; m]; m];
    for i in 0..m {
        for j in 0..m {
            let (w, l, t) = paired_outcomes(&posteriors[i], &posteriors[j]);
            win_rates[i][j] = (w as f64 + 0.5 * t as f64) / n;
            p_values[i][j] = sign_test_p(w, l);
        }
    }
    Ok(Comparison { seeds, reports, posteriors, win_rates, p_values })
}

/// One row of a K sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub report: MetricsReport,
    /// Denoiser calls per chain predicted by the closed form.
    pub closed_form_calls: u64,
}

/// Runs the adaptive sampler at each budget in `k_values` on shared seeds.
pub fn sweep_k(
    engine: &Engine<'_>,
    base: &GuidanceConfig,
    pos: ConceptId,
    k_values: &[usize],
    n_seeds: usize,
) -> Result<Vec<SweepRow>> {
    if k_values.is_empty() {
        return Err(Error::Parameter("k_values must not be empty".into()));
    }
    if n_seeds == 0 {
        return Err(Error::Parameter("n_seeds must be positive".into()));
    }
    let seeds = seed_range(base.seed, n_seeds);
    let total = engine.total_steps();
    k_values
        .iter()
        .map(|&k| {
            let config = GuidanceConfig { strategy: Strategy::Answer, k, ..base.clone() };
            let runs = run_seeds(engine, &config, pos, &seeds)?;
            let mut report = MetricsReport::from_samples(
                config_label(&config),
                &runs.samples,
                engine.world(),
                engine.schedule(),
                pos,
                runs.denoiser_calls,
            )?;
            report.wall_time = runs.wall_time;
            Ok(SweepRow { k, report, closed_form_calls: crate::chains::closed_form_calls(&config, total) })
        })
        .collect()
}

/// Quantized negative labels of full DNS chains started along CFG chains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTable {
    pub t_grid: Vec<usize>,
    pub seeds: Vec<u64>,
    /// `labels[i][j]`: label at seed `i`, grid step `j`.
    pub labels: Vec<Vec<ConceptId>>,
    /// Share of seeds whose label changes somewhere along the grid.
    pub non_constant_fraction: f64,
}

/// For each seed, records a CFG chain and runs a full negative chain from
/// `z_t` at every `t` in `t_grid`, labelling its output.
pub fn negative_drift_experiment(
    engine: &Engine<'_>,
    config: &GuidanceConfig,
    pos: ConceptId,
    t_grid: &[usize],
    n_seeds: usize,
) -> Result<DriftTable> {
    let total = engine.total_steps();
    if t_grid.is_empty() {
        return Err(Error::Parameter("t_grid must not be empty".into()));
    }
    if let Some(&t) = t_grid.iter().find(|&&t| t == 0 || t > total) {
        return Err(Error::Index { t, max: total });
    }
    if n_seeds == 0 {
        return Err(Error::Parameter("n_seeds must be positive".into()));
    }
    let seeds = seed_range(config.seed, n_seeds);
    let labels = seeds
        .par_iter()
        .map(|&seed| {
            let config = GuidanceConfig { seed, ..config.clone() };
            let trace = engine.run_cfg(pos, &config, &mut chain_rng(seed))?;
            t_grid
                .iter()
                .map(|&t| engine.dns_label(pos, &config, &trace.records[total - t].z_before, t))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let changing = labels.iter().filter(|row| row.iter().any(|l| *l != row[0])).count();
    Ok(DriftTable {
        t_grid: t_grid.to_vec(),
        seeds,
        non_constant_fraction: changing as f64 / n_seeds as f64,
        labels,
    })
}
