//! Noise-combination algebra for guided sampling.
//!
//! Every combinator has the form `anchor + scale * (target - anchor)` and is
//! therefore exactly affine in its two noise arguments.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Offset constant of the DNS-budget scheduler.
pub const DEFAULT_SCHEDULE_OFFSET: f64 = 20.0;
/// Smallest standard deviation [`normalize_noise`] accepts.
pub const MIN_NOISE_STD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Strategy {
    Cfg,
    Np,
    Dns,
    Dnp,
    Cnp,
    Answer,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [Self::Cfg, Self::Np, Self::Dns, Self::Dnp, Self::Cnp, Self::Answer];

    pub fn label(self) -> &'static str {
        match self {
            Self::Cfg => "CFG",
            Self::Np => "NP",
            Self::Dns => "DNS",
            Self::Dnp => "DNP",
            Self::Cnp => "CNP",
            Self::Answer => "ANSWER",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Parameter(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Self::Ddpm),
            "ddim" => Ok(Self::Ddim),
            other => Err(Error::Parameter(format!("unknown sampler `{other}`"))),
        }
    }
}

/// Strategy selector and guidance hyperparameters for one chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceConfig {
    pub strategy: Strategy,
    /// Positive guidance scale.
    pub s: f64,
    /// Negative guidance scale; `None` means "same as `s`".
    #[serde(default)]
    pub s_n: Option<f64>,
    /// DNS budget of the adaptive sampler.
    #[serde(default)]
    pub k: usize,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default = "default_window")]
    pub window_fraction: f64,
    #[serde(default = "default_sampler")]
    pub sampler: SamplerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_offset")]
    pub schedule_offset: f64,
    /// Fixed negative concept for the plain negative-prompting strategy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative: Option<String>,
}

fn default_true() -> bool {
    true
}
fn default_window() -> f64 {
    0.5
}
fn default_sampler() -> SamplerKind {
    SamplerKind::Ddim
}
fn default_offset() -> f64 {
    DEFAULT_SCHEDULE_OFFSET
}

impl GuidanceConfig {
    pub fn new(strategy: Strategy, s: f64) -> Self {
        Self {
            strategy,
            s,
            s_n: None,
            k: 0,
            normalize: true,
            window_fraction: default_window(),
            sampler: default_sampler(),
            seed: 0,
            schedule_offset: DEFAULT_SCHEDULE_OFFSET,
            negative: None,
        }
    }

    pub fn with_k(mut self, k: usize) -> Self {
        self.k = k;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_sampler(mut self, sampler: SamplerKind) -> Self {
        self.sampler = sampler;
        self
    }

    pub fn with_normalize(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn with_negative_scale(mut self, s_n: f64) -> Self {
        self.s_n = Some(s_n);
        self
    }

    pub fn with_window(mut self, fraction: f64) -> Self {
        self.window_fraction = fraction;
        self
    }

    pub fn negative_scale(&self) -> f64 {
        self.s_n.unwrap_or(self.s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s >= 0.0) {
            return Err(Error::Parameter(format!("guidance scale must be finite and >= 0, got {}", self.s)));
        }
        let s_n = self.negative_scale();
        if !(s_n.is_finite() && s_n >= 0.0) {
            return Err(Error::Parameter(format!("negative scale must be finite and >= 0, got {s_n}")));
        }
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(Error::Parameter(format!("window fraction must lie in (0, 1], got {}", self.window_fraction)));
        }
        if !(self.schedule_offset.is_finite() && self.schedule_offset > 0.0) {
            return Err(Error::Parameter(format!("schedule offset must be positive, got {}", self.schedule_offset)));
        }
        Ok(())
    }
}

fn lerp(anchor: &[f64], target: &[f64], scale: f64) -> Result<Vec<f64>> {
    check_dims(anchor.len(), target.len())?;
    // a + (b - a) does not round back to b
    if scale == 1.0 {
        return Ok(target.to_vec());
    }
    Ok(anchor.iter().zip(target).map(|(a, b)| a + scale * (b - a)).collect())
}

/// Classifier-free guidance: `eps_uncond + s * (eps_cond - eps_uncond)`.
pub fn cfg_combine(eps_uncond: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    lerp(eps_uncond, eps_cond, s)
}

/// Negative prompting: `eps_neg + s * (eps_cond - eps_neg)`.
pub fn np_combine(eps_neg: &[f64], eps_cond: &[f64], s: f64) -> Result<Vec<f64>> {
    lerp(eps_neg, eps_cond, s)
}

/// Diffusion-negative step: `eps_cond + s_n * (eps_uncond - eps_cond)`.
///
/// With `s_n = 1 + s` this is `eps_uncond + s * (eps_uncond - eps_cond)`.
pub fn dns_combine(eps_cond: &[f64], eps_uncond: &[f64], s_n: f64) -> Result<Vec<f64>> {
    lerp(eps_cond, eps_uncond, s_n)
}

/// Unrounded DNS budget at step `t`; zero on the second half of the chain.
pub fn schedule_k_raw(k: usize, t: usize, total: usize, offset: f64) -> f64 {
    let lead = 2.0 * t as f64 - total as f64;
    if lead <= 0.0 {
        return 0.0;
    }
    let t_total = total as f64;
    k as f64 * (lead / (lead + offset)) * ((t_total + offset) / t_total)
}

/// DNS budget at step `t`, rounded half-up and clamped at zero.
pub fn schedule_k(k: usize, t: usize, total: usize) -> usize {
    schedule_k_with_offset(k, t, total, DEFAULT_SCHEDULE_OFFSET)
}

pub fn schedule_k_with_offset(k: usize, t: usize, total: usize, offset: f64) -> usize {
    let raw = schedule_k_raw(k, t, total, offset);
    (raw + 0.5).floor().max(0.0) as usize
}

/// Population mean and standard deviation over all coordinates.
pub fn noise_stats(eps: &[f64]) -> (f64, f64) {
    let n = eps.len() as f64;
    let mean = eps.iter().sum::<f64>() / n;
    let var = eps.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Rescales `eps` to the scalar mean and standard deviation of `reference`.
///
/// `t` only labels the error raised for a collapsed input.
pub fn normalize_noise(eps: &[f64], reference: &[f64], t: usize) -> Result<Vec<f64>> {
    check_dims(reference.len(), eps.len())?;
    let (mean, std) = noise_stats(eps);
    if std.is_nan() || std <= MIN_NOISE_STD {
        return Err(Error::DegenerateNoise { t, std });
    }
    let (ref_mean, ref_std) = noise_stats(reference);
    Ok(eps.iter().map(|e| (e - mean) / std * ref_std + ref_mean).collect())
}
