//! The noise-prediction contract and its exact implementation.

use std::cell::Cell;

use crate::error::{check_dims, Result};
use crate::schedule::VarianceSchedule;
use crate::world::{Condition, ConceptWorld, DiffusedWorld};

/// Predicts the noise present in a latent at step `t` under condition `c`.
///
/// Implementations must be deterministic and return a vector of the input's
/// dimension.
pub trait Denoiser: Sync {
    fn dimension(&self) -> usize;

    fn predict_noise(&self, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn dimension(&self) -> usize {
        (**self).dimension()
    }

    fn predict_noise(&self, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        (**self).predict_noise(z, t, c)
    }
}

/// Exact denoiser: the closed-form mixture score rescaled to noise units.
///
/// Diffused covariances are factored once per step at construction.
#[derive(Debug, Clone)]
pub struct AnalyticDenoiser {
    world: ConceptWorld,
    noise_scales: Vec<f64>,
    layers: Vec<DiffusedWorld>,
}

impl AnalyticDenoiser {
    pub fn new(world: &ConceptWorld, sched: &VarianceSchedule) -> Result<Self> {
        let mut layers = Vec::with_capacity(sched.total_steps());
        let mut noise_scales = Vec::with_capacity(sched.total_steps());
        for &ab in sched.alpha_bars() {
            layers.push(world.diffused(ab)?);
            noise_scales.push((1.0 - ab).sqrt());
        }
        Ok(Self { world: world.clone(), noise_scales, layers })
    }

    pub fn world(&self) -> &ConceptWorld {
        &self.world
    }

    pub fn total_steps(&self) -> usize {
        self.layers.len()
    }
}

impl Denoiser for AnalyticDenoiser {
    fn dimension(&self) -> usize {
        self.world.dimension()
    }

    fn predict_noise(&self, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        if t == 0 || t > self.layers.len() {
            return Err(crate::Error::Index { t, max: self.layers.len() });
        }
        self.world.check_condition(c)?;
        self.layers[t - 1].epsilon(z, c, self.noise_scales[t - 1])
    }
}

/// Wraps a denoiser and counts every prediction it serves.
pub struct CountingDenoiser<'a, D: ?Sized> {
    inner: &'a D,
    calls: Cell<u64>,
}

impl<'a, D: Denoiser + ?Sized> CountingDenoiser<'a, D> {
    pub fn new(inner: &'a D) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> u64 {
        self.calls.get()
    }

    pub fn dimension(&self) -> usize {
        self.inner.dimension()
    }

    pub fn predict(&self, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        self.calls.set(self.calls.get() + 1);
        let out = self.inner.predict_noise(z, t, c)?;
        check_dims(z.len(), out.len())?;
        Ok(out)
    }
}
