//! Single reverse-process steps.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dims, Result};
use crate::schedule::VarianceSchedule;

/// Ancestral step with variance `beta_t`; no noise is added at `t = 1`.
pub fn ddpm_step<R: Rng + ?Sized>(
    z: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &VarianceSchedule,
    rng: &mut R,
) -> Result<Vec<f64>> {
    check_dims(z.len(), eps_hat.len())?;
    let beta = sched.beta(t)?;
    let ab = sched.alpha_bar(t)?;
    let inv_alpha = 1.0 / (1.0 - beta).sqrt();
    let eps_coef = beta / (1.0 - ab).sqrt();
    let mut out: Vec<f64> = z.iter().zip(eps_hat).map(|(z, e)| inv_alpha * (z - eps_coef * e)).collect();
    if t > 1 {
        let sigma = beta.sqrt();
        for v in &mut out {
            let xi: f64 = rng.sample(StandardNormal);
            *v += sigma * xi;
        }
    }
    Ok(out)
}

/// Clean-sample estimate `(z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
pub fn predict_clean(z: &[f64], t: usize, eps_hat: &[f64], sched: &VarianceSchedule) -> Result<Vec<f64>> {
    check_dims(z.len(), eps_hat.len())?;
    let ab = sched.alpha_bar(t)?;
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z.iter().zip(eps_hat).map(|(z, e)| (z - b * e) / a).collect())
}

/// Deterministic step; at `t = 1` it returns the clean-sample estimate.
pub fn ddim_step(z: &[f64], t: usize, eps_hat: &[f64], sched: &VarianceSchedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    let clean = predict_clean(z, t, eps_hat, sched)?;
    if t == 1 {
        return Ok(clean);
    }
    let prev = sched.alpha_bar(t - 1)?;
    let (a, b) = (prev.sqrt(), (1.0 - prev).sqrt());
    Ok(clean.iter().zip(eps_hat).map(|(x, e)| a * x + b * e).collect())
}
