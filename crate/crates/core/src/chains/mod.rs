//! Guided reverse chains: CFG, negative prompting, diffusion-negative
//! sampling and the three strategies built on it (DNP, CNP and the adaptive
//! in-chain variant), with exact accounting of denoiser calls.
//!
//! Inner diffusion-negative excursions always step with deterministic DDIM
//! and never touch the outer random stream, so a chain that takes no
//! excursion is bitwise identical to the CFG chain of the same seed.

mod sampler;
mod trace;

pub use sampler::{ddim_step, ddpm_step, predict_clean};
pub use trace::{format_f64, write_json_line, ChainTrace, StepRecord};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{CountingDenoiser, Denoiser};
use crate::error::{Error, Result};
use crate::guidance::{
    cfg_combine, dns_combine, normalize_noise, np_combine, schedule_k_with_offset, GuidanceConfig, SamplerKind,
    Strategy,
};
use crate::schedule::VarianceSchedule;
use crate::world::{Condition, ConceptId, ConceptWorld};

pub type ChainRng = ChaCha8Rng;

/// Chains longer than this make CNP's quadratic cost noticeable.
pub const CNP_WARN_STEPS: usize = 100;

pub fn chain_rng(seed: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Maps a finished sample to a concept label.
pub trait Quantizer: Sync {
    fn quantize(&self, z: &[f64]) -> Result<ConceptId>;
}

impl Quantizer for ConceptWorld {
    fn quantize(&self, z: &[f64]) -> Result<ConceptId> {
        self.quantize_to_concept(z)
    }
}

/// Warning text for configurations whose cost grows quadratically.
pub fn cost_warning(strategy: Strategy, total_steps: usize) -> Option<String> {
    (strategy == Strategy::Cnp && total_steps > CNP_WARN_STEPS).then(|| {
        format!(
            "CNP runs a full negative chain at every step: T = {total_steps} costs {} denoiser calls per sample (O(T^2))",
            total_steps * total_steps + 3 * total_steps
        )
    })
}

/// DNS budget actually spent at step `t`: the scheduler value, zero outside
/// the window, and never more steps than remain.
pub fn effective_k(config: &GuidanceConfig, t: usize, total: usize) -> usize {
    if (t as f64) <= total as f64 * config.window_fraction {
        return 0;
    }
    schedule_k_with_offset(config.k, t, total, config.schedule_offset).min(t)
}

/// Denoiser calls per chain predicted from the strategy's closed form.
pub fn closed_form_calls(config: &GuidanceConfig, total: usize) -> u64 {
    let t = total as u64;
    match config.strategy {
        Strategy::Cfg | Strategy::Np | Strategy::Dns => 2 * t,
        Strategy::Dnp => 4 * t,
        Strategy::Cnp => t * t + 3 * t,
        Strategy::Answer => 2 * t + 2 * (1..=total).map(|s| effective_k(config, s, total) as u64).sum::<u64>(),
    }
}

/// Result of a diffusion-negative excursion.
#[derive(Debug, Clone, PartialEq)]
pub struct DnsOutcome {
    pub latent: Vec<f64>,
    /// Combined noise of the last inner step.
    pub last_noise: Vec<f64>,
    pub denoiser_calls: u64,
}

type Counter<'a> = CountingDenoiser<'a, dyn Denoiser + 'a>;

/// Runs guided chains of one denoiser over one world and schedule.
#[derive(Clone, Copy)]
pub struct Engine<'a> {
    denoiser: &'a dyn Denoiser,
    quantizer: &'a dyn Quantizer,
    world: &'a ConceptWorld,
    sched: &'a VarianceSchedule,
}

impl<'a> Engine<'a> {
    pub fn new(denoiser: &'a dyn Denoiser, world: &'a ConceptWorld, sched: &'a VarianceSchedule) -> Result<Self> {
        if denoiser.dimension() != world.dimension() {
            return Err(Error::Shape { expected: world.dimension(), got: denoiser.dimension() });
        }
        Ok(Self { denoiser, quantizer: world, world, sched })
    }

    /// Replaces the Bayes quantizer used by DNP and CNP.
    pub fn with_quantizer(mut self, quantizer: &'a dyn Quantizer) -> Self {
        self.quantizer = quantizer;
        self
    }

    pub fn world(&self) -> &'a ConceptWorld {
        self.world
    }

    pub fn schedule(&self) -> &'a VarianceSchedule {
        self.sched
    }

    pub fn total_steps(&self) -> usize {
        self.sched.total_steps()
    }

    /// Draws `z_T ~ N(0, I)`.
    pub fn initial_latent<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.world.dimension()).map(|_| rng.sample(StandardNormal)).collect()
    }

    /// Seeds a fresh stream from `config.seed` and runs the configured strategy.
    pub fn run(&self, cond: ConceptId, config: &GuidanceConfig) -> Result<ChainTrace> {
        let mut rng = chain_rng(config.seed);
        match config.strategy {
            Strategy::Cfg => self.run_cfg(cond, config, &mut rng),
            Strategy::Np => {
                let name = config.negative.as_deref().ok_or_else(|| {
                    Error::Parameter("negative prompting needs a `negative` concept".into())
                })?;
                let negative = Condition::Concept(self.world.concept_id(name)?);
                self.run_np(cond, negative, config, &mut rng)
            }
            Strategy::Dns => self.run_dns_chain(cond, config, &mut rng),
            Strategy::Dnp => self.run_dnp(cond, config, &mut rng),
            Strategy::Cnp => self.run_cnp(cond, config, &mut rng),
            Strategy::Answer => self.run_answer(cond, config, &mut rng),
        }
    }

    fn counter(&self) -> Counter<'a> {
        CountingDenoiser::new(self.denoiser)
    }

    fn prepare(&self, cond: ConceptId, config: &GuidanceConfig) -> Result<()> {
        config.validate()?;
        self.world.concept(cond)?;
        Ok(())
    }

    fn advance<R: Rng + ?Sized>(
        &self,
        sampler: SamplerKind,
        z: &[f64],
        t: usize,
        eps: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        match sampler {
            SamplerKind::Ddpm => ddpm_step(z, t, eps, self.sched, rng),
            SamplerKind::Ddim => ddim_step(z, t, eps, self.sched),
        }
    }

    fn finish(
        &self,
        config: &GuidanceConfig,
        cond: ConceptId,
        records: Vec<StepRecord>,
        z: Vec<f64>,
        counter: &Counter<'_>,
    ) -> ChainTrace {
        ChainTrace {
            config: config.clone(),
            condition: cond,
            records,
            final_sample: z,
            total_denoiser_calls: counter.calls(),
        }
    }

    /// Chain driven by the unconditional prediction alone.
    pub fn run_unconditional<R: Rng + ?Sized>(&self, config: &GuidanceConfig, rng: &mut R) -> Result<Vec<f64>> {
        let counter = self.counter();
        let mut z = self.initial_latent(rng);
        for t in (1..=self.total_steps()).rev() {
            let eps = counter.predict(&z, t, Condition::Null)?;
            z = self.advance(config.sampler, &z, t, &eps, rng)?;
        }
        Ok(z)
    }

    /// Classifier-free guidance from a fresh `z_T`.
    pub fn run_cfg<R: Rng + ?Sized>(&self, cond: ConceptId, config: &GuidanceConfig, rng: &mut R) -> Result<ChainTrace> {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let z = self.initial_latent(rng);
        let (records, z) = self.cfg_loop(&counter, cond, config, z, rng)?;
        Ok(self.finish(config, cond, records, z, &counter))
    }

    fn cfg_loop<R: Rng + ?Sized>(
        &self,
        counter: &Counter<'_>,
        cond: ConceptId,
        config: &GuidanceConfig,
        mut z: Vec<f64>,
        rng: &mut R,
    ) -> Result<(Vec<StepRecord>, Vec<f64>)> {
        let mut records = Vec::with_capacity(self.total_steps());
        for t in (1..=self.total_steps()).rev() {
            let eps_cond = counter.predict(&z, t, Condition::Concept(cond))?;
            let eps_uncond = counter.predict(&z, t, Condition::Null)?;
            let eps = cfg_combine(&eps_uncond, &eps_cond, config.s)?;
            let next = self.advance(config.sampler, &z, t, &eps, rng)?;
            records.push(StepRecord {
                t,
                z_before: std::mem::replace(&mut z, next.clone()),
                z_after: next,
                eps_cond,
                eps_uncond: Some(eps_uncond),
                eps_neg: None,
                eps_combined: eps,
                k_t: 0,
                negative_concept: None,
                denoiser_calls_so_far: counter.calls(),
            });
        }
        Ok((records, z))
    }

    /// Negative prompting with a fixed negative condition.
    pub fn run_np<R: Rng + ?Sized>(
        &self,
        cond: ConceptId,
        negative: Condition,
        config: &GuidanceConfig,
        rng: &mut R,
    ) -> Result<ChainTrace> {
        self.prepare(cond, config)?;
        self.world.check_condition(negative)?;
        let counter = self.counter();
        let z = self.initial_latent(rng);
        let (records, z) = self.np_loop(&counter, cond, negative, config, z, rng)?;
        Ok(self.finish(config, cond, records, z, &counter))
    }

    fn np_loop<R: Rng + ?Sized>(
        &self,
        counter: &Counter<'_>,
        cond: ConceptId,
        negative: Condition,
        config: &GuidanceConfig,
        mut z: Vec<f64>,
        rng: &mut R,
    ) -> Result<(Vec<StepRecord>, Vec<f64>)> {
        let label = match negative {
            Condition::Concept(id) => Some(id),
            Condition::Null => None,
        };
        let mut records = Vec::with_capacity(self.total_steps());
        for t in (1..=self.total_steps()).rev() {
            let eps_cond = counter.predict(&z, t, Condition::Concept(cond))?;
            let eps_neg = counter.predict(&z, t, negative)?;
            let eps = np_combine(&eps_neg, &eps_cond, config.s)?;
            let next = self.advance(config.sampler, &z, t, &eps, rng)?;
            records.push(StepRecord {
                t,
                z_before: std::mem::replace(&mut z, next.clone()),
                z_after: next,
                eps_cond,
                eps_uncond: None,
                eps_neg: Some(eps_neg),
                eps_combined: eps,
                k_t: 0,
                negative_concept: label,
                denoiser_calls_so_far: counter.calls(),
            });
        }
        Ok((records, z))
    }

    /// Runs `k` diffusion-negative steps from `(z_init, t_init)` with DDIM.
    pub fn run_dns(
        &self,
        cond: ConceptId,
        config: &GuidanceConfig,
        z_init: &[f64],
        t_init: usize,
        k: usize,
    ) -> Result<DnsOutcome> {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let (latent, last_noise) = self.dns_loop(&counter, cond, config.negative_scale(), z_init, t_init, k, None)?;
        Ok(DnsOutcome { latent, last_noise, denoiser_calls: counter.calls() })
    }

    #[allow(clippy::too_many_arguments)]
    fn dns_loop(
        &self,
        counter: &Counter<'_>,
        cond: ConceptId,
        s_n: f64,
        z_init: &[f64],
        t_init: usize,
        k: usize,
        mut records: Option<&mut Vec<StepRecord>>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        self.sched.check_step(t_init)?;
        if k == 0 || k > t_init {
            return Err(Error::Parameter(format!("negative excursion needs 0 < k <= {t_init}, got k = {k}")));
        }
        let mut z = z_init.to_vec();
        let mut last = Vec::new();
        for t in (t_init + 1 - k..=t_init).rev() {
            let eps_cond = counter.predict(&z, t, Condition::Concept(cond))?;
            let eps_uncond = counter.predict(&z, t, Condition::Null)?;
            let eps = dns_combine(&eps_cond, &eps_uncond, s_n)?;
            let next = ddim_step(&z, t, &eps, self.sched)?;
            if let Some(records) = records.as_deref_mut() {
                records.push(StepRecord {
                    t,
                    z_before: z.clone(),
                    z_after: next.clone(),
                    eps_cond,
                    eps_uncond: Some(eps_uncond),
                    eps_neg: None,
                    eps_combined: eps.clone(),
                    k_t: 0,
                    negative_concept: None,
                    denoiser_calls_so_far: counter.calls(),
                });
            }
            z = next;
            last = eps;
        }
        Ok((z, last))
    }

    /// A complete diffusion-negative chain from a fresh `z_T`, recorded.
    pub fn run_dns_chain<R: Rng + ?Sized>(
        &self,
        cond: ConceptId,
        config: &GuidanceConfig,
        rng: &mut R,
    ) -> Result<ChainTrace> {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let z = self.initial_latent(rng);
        let total = self.total_steps();
        let mut records = Vec::with_capacity(total);
        let (z, _) = self.dns_loop(&counter, cond, config.negative_scale(), &z, total, total, Some(&mut records))?;
        Ok(self.finish(config, cond, records, z, &counter))
    }

    /// Negative label of a full negative chain started at `(z, t)`.
    fn negative_label(&self, counter: &Counter<'_>, cond: ConceptId, s_n: f64, z: &[f64], t: usize) -> Result<ConceptId> {
        let (negative, _) = self.dns_loop(counter, cond, s_n, z, t, t, None)?;
        self.quantizer.quantize(&negative)
    }

    /// Labels the negative image of a full DNS chain started at `(z, t)`.
    pub fn dns_label(&self, cond: ConceptId, config: &GuidanceConfig, z: &[f64], t: usize) -> Result<ConceptId> {
        self.prepare(cond, config)?;
        self.negative_label(&self.counter(), cond, config.negative_scale(), z, t)
    }

    /// One negative chain from `z_T`, labelled once, then negative prompting
    /// with that label from the same `z_T`.
    pub fn run_dnp<R: Rng + ?Sized>(&self, cond: ConceptId, config: &GuidanceConfig, rng: &mut R) -> Result<ChainTrace> {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let z = self.initial_latent(rng);
        let label = self.negative_label(&counter, cond, config.negative_scale(), &z, self.total_steps())?;
        let (records, z) = self.np_loop(&counter, cond, Condition::Concept(label), config, z, rng)?;
        Ok(self.finish(config, cond, records, z, &counter))
    }

    /// Negative prompting with a fresh label from a full negative chain at
    /// every step.
    pub fn run_cnp<R: Rng + ?Sized>(&self, cond: ConceptId, config: &GuidanceConfig, rng: &mut R) -> Result<ChainTrace> {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let s_n = config.negative_scale();
        let mut z = self.initial_latent(rng);
        let mut records = Vec::with_capacity(self.total_steps());
        for t in (1..=self.total_steps()).rev() {
            let label = self.negative_label(&counter, cond, s_n, &z, t)?;
            let eps_cond = counter.predict(&z, t, Condition::Concept(cond))?;
            let eps_neg = counter.predict(&z, t, Condition::Concept(label))?;
            let eps = np_combine(&eps_neg, &eps_cond, config.s)?;
            let next = self.advance(config.sampler, &z, t, &eps, rng)?;
            records.push(StepRecord {
                t,
                z_before: std::mem::replace(&mut z, next.clone()),
                z_after: next,
                eps_cond,
                eps_uncond: None,
                eps_neg: Some(eps_neg),
                eps_combined: eps,
                k_t: 0,
                negative_concept: Some(label),
                denoiser_calls_so_far: counter.calls(),
            });
        }
        Ok(self.finish(config, cond, records, z, &counter))
    }

    /// The adaptive sampler with the scheduled DNS budget.
    pub fn run_answer<R: Rng + ?Sized>(
        &self,
        cond: ConceptId,
        config: &GuidanceConfig,
        rng: &mut R,
    ) -> Result<ChainTrace> {
        let total = self.total_steps();
        self.run_answer_with(cond, config, rng, |t| {
            schedule_k_with_offset(config.k, t, total, config.schedule_offset)
        })
    }

    /// The adaptive sampler with an arbitrary per-step DNS budget.
    ///
    /// The window rule still applies, and a budget larger than `t` is
    /// clamped to `t`.
    pub fn run_answer_with<R, F>(
        &self,
        cond: ConceptId,
        config: &GuidanceConfig,
        rng: &mut R,
        budget: F,
    ) -> Result<ChainTrace>
    where
        R: Rng + ?Sized,
        F: Fn(usize) -> usize,
    {
        self.prepare(cond, config)?;
        let counter = self.counter();
        let total = self.total_steps();
        let s_n = config.negative_scale();
        let mut z = self.initial_latent(rng);
        let mut records = Vec::with_capacity(total);
        for t in (1..=total).rev() {
            let eps_cond = counter.predict(&z, t, Condition::Concept(cond))?;
            let eps_uncond = counter.predict(&z, t, Condition::Null)?;
            let in_window = (t as f64) > total as f64 * config.window_fraction;
            let k_t = if in_window { budget(t).min(t) } else { 0 };
            let (eps, eps_neg) = if k_t > 0 {
                let (_, inner) = self.dns_loop(&counter, cond, s_n, &z, t, k_t, None)?;
                let neg = if config.normalize { normalize_noise(&inner, &eps_uncond, t)? } else { inner };
                (np_combine(&neg, &eps_cond, config.s)?, Some(neg))
            } else {
                (cfg_combine(&eps_uncond, &eps_cond, config.s)?, None)
            };
            let next = self.advance(config.sampler, &z, t, &eps, rng)?;
            records.push(StepRecord {
                t,
                z_before: std::mem::replace(&mut z, next.clone()),
                z_after: next,
                eps_cond,
                eps_uncond: Some(eps_uncond),
                eps_neg,
                eps_combined: eps,
                k_t,
                negative_concept: None,
                denoiser_calls_so_far: counter.calls(),
            });
        }
        Ok(self.finish(config, cond, records, z, &counter))
    }
}
