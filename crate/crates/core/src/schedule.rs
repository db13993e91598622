//! Variance schedules and the closed-form forward diffusion map.
//!
//! Step indices are 1-based: `beta(t)` and `alpha_bar(t)` are defined for
//! `1 <= t <= T`, and `alpha_bar(0) == 1` so the clean distribution is a
//! regular member of the family.

use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Largest per-step beta the cosine schedule is allowed to produce.
pub const COSINE_MAX_BETA: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(Self::Linear),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Parameter(format!("unknown schedule kind `{other}`"))),
        }
    }
}

/// Per-step noise levels and their cumulative products.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl VarianceSchedule {
    /// Builds a schedule of `total_steps` steps.
    ///
    /// `Linear` spaces beta evenly from `beta_min` to `beta_max`. `Cosine`
    /// derives beta from a squared-cosine cumulative curve; the bounds are
    /// validated but do not shape it.
    pub fn new(kind: ScheduleKind, total_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Parameter(format!(
                "beta bounds must satisfy 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})"
            )));
        }
        let betas = match kind {
            ScheduleKind::Linear => linear_betas(total_steps, beta_min, beta_max),
            ScheduleKind::Cosine => cosine_betas(total_steps),
        };
        Self::from_betas(betas)
    }

    /// Builds a schedule from explicit betas, each in (0, 1).
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Parameter("schedule needs at least one step".into()));
        }
        if let Some((i, b)) = betas.iter().enumerate().find(|(_, b)| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Parameter(format!("beta_{} = {b} is outside (0, 1)", i + 1)));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    pub fn total_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        Ok(self.betas[t - 1])
    }

    /// Cumulative product up to step `t`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match t {
            0 => Ok(1.0),
            _ => {
                self.check_step(t)?;
                Ok(self.alpha_bars[t - 1])
            }
        }
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if (1..=self.total_steps()).contains(&t) {
            Ok(())
        } else {
            Err(Error::Index { t, max: self.total_steps() })
        }
    }

    /// `sqrt(alpha_bar_t) * z + sqrt(1 - alpha_bar_t) * eps`.
    pub fn forward_diffuse(&self, z: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
        check_dims(z.len(), eps.len())?;
        self.check_step(t)?;
        let ab = self.alpha_bars[t - 1];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(z.iter().zip(eps).map(|(z, e)| a * z + b * e).collect())
    }
}

fn linear_betas(steps: usize, lo: f64, hi: f64) -> Vec<f64> {
    if steps == 1 {
        return vec![lo];
    }
    let span = (steps - 1) as f64;
    (0..steps).map(|i| lo + (hi - lo) * i as f64 / span).collect()
}

fn cosine_betas(steps: usize) -> Vec<f64> {
    let curve = |t: usize| {
        let x = (t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET);
        (x * std::f64::consts::FRAC_PI_2).cos().powi(2)
    };
    (1..=steps)
        .map(|t| (1.0 - curve(t) / curve(t - 1)).min(COSINE_MAX_BETA))
        .collect()
}
