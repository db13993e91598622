//! Concept worlds: a discrete vocabulary of Gaussian-mixture concepts whose
//! diffused densities, scores and posteriors are available in closed form.
//!
//! A component `N(mu, Sigma)` diffused to step `t` is
//! `N(sqrt(ab) mu, ab Sigma + (1 - ab) I)` with `ab = alpha_bar(t)`. The
//! null condition mixes every concept weighted by its prior.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};
use crate::schedule::VarianceSchedule;

const SUM_TOLERANCE: f64 = 1e-12;
const LN_2PI: f64 = 1.8378770664093453;

/// Index of a concept inside its world.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConceptId(pub usize);

/// What a denoiser is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Condition {
    Null,
    Concept(ConceptId),
}

#[derive(Debug, Clone)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl Component {
    pub fn isotropic(weight: f64, mean: Vec<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self { weight, mean, covariance: DMatrix::from_diagonal_element(d, d, variance) }
    }

    pub fn diagonal(weight: f64, mean: Vec<f64>, variances: &[f64]) -> Self {
        let covariance = DMatrix::from_diagonal(&DVector::from_column_slice(variances));
        Self { weight, mean, covariance }
    }

    pub fn full(weight: f64, mean: Vec<f64>, covariance: DMatrix<f64>) -> Self {
        Self { weight, mean, covariance }
    }

    fn is_diagonal(&self) -> bool {
        let c = &self.covariance;
        (0..c.nrows()).all(|i| (0..c.ncols()).all(|j| i == j || c[(i, j)] == 0.0))
    }
}

#[derive(Debug, Clone)]
pub struct Concept {
    pub id: String,
    pub prior: f64,
    pub components: Vec<Component>,
}

impl Concept {
    pub fn new(id: impl Into<String>, prior: f64, components: Vec<Component>) -> Self {
        Self { id: id.into(), prior, components }
    }
}

/// A validated vocabulary of Gaussian-mixture concepts in `R^d`.
#[derive(Debug, Clone)]
pub struct ConceptWorld {
    dimension: usize,
    concepts: Vec<Concept>,
}

impl ConceptWorld {
    pub fn new(dimension: usize, concepts: Vec<Concept>) -> Result<Self> {
        let world = Self { dimension, concepts };
        world.validate()?;
        Ok(world)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: WorldDoc = serde_json::from_str(text)
            .map_err(|e| Error::World { path: "$".into(), message: e.to_string() })?;
        doc.into_world()
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::World {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&WorldDoc::from_world(self)).expect("world document serializes")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concept(&self, id: ConceptId) -> Result<&Concept> {
        self.concepts
            .get(id.0)
            .ok_or_else(|| Error::UnknownConcept(format!("#{}", id.0)))
    }

    pub fn concept_id(&self, name: &str) -> Result<ConceptId> {
        self.concepts
            .iter()
            .position(|c| c.id == name)
            .map(ConceptId)
            .ok_or_else(|| Error::UnknownConcept(name.to_string()))
    }

    pub fn concept_name(&self, id: ConceptId) -> &str {
        &self.concepts[id.0].id
    }

    pub fn check_condition(&self, c: Condition) -> Result<()> {
        match c {
            Condition::Null => Ok(()),
            Condition::Concept(id) => self.concept(id).map(|_| ()),
        }
    }

    fn validate(&self) -> Result<()> {
        let err = |path: String, message: String| Err(Error::World { path, message });
        if self.dimension == 0 {
            return err("dimension".into(), "must be a positive integer".into());
        }
        if self.concepts.is_empty() {
            return err("concepts".into(), "at least one concept is required".into());
        }
        let mut prior_sum = 0.0;
        for (i, concept) in self.concepts.iter().enumerate() {
            let path = format!("concepts[{i}]");
            if self.concepts[..i].iter().any(|c| c.id == concept.id) {
                return err(format!("{path}.id"), format!("duplicate concept id `{}`", concept.id));
            }
            if !(concept.prior > 0.0 && concept.prior.is_finite()) {
                return err(format!("{path}.prior"), format!("must be positive, got {}", concept.prior));
            }
            prior_sum += concept.prior;
            if concept.components.is_empty() {
                return err(format!("{path}.components"), "at least one component is required".into());
            }
            let mut weight_sum = 0.0;
            for (j, comp) in concept.components.iter().enumerate() {
                let path = format!("{path}.components[{j}]");
                if !(comp.weight > 0.0 && comp.weight.is_finite()) {
                    return err(format!("{path}.weight"), format!("must be positive, got {}", comp.weight));
                }
                weight_sum += comp.weight;
                if comp.mean.len() != self.dimension {
                    return err(
                        format!("{path}.mean"),
                        format!("expected {} entries, got {}", self.dimension, comp.mean.len()),
                    );
                }
                if comp.mean.iter().any(|m| !m.is_finite()) {
                    return err(format!("{path}.mean"), "entries must be finite".into());
                }
                let c = &comp.covariance;
                if c.nrows() != self.dimension || c.ncols() != self.dimension {
                    return err(
                        format!("{path}.cov"),
                        format!("expected {0}x{0}, got {1}x{2}", self.dimension, c.nrows(), c.ncols()),
                    );
                }
                let asym = (c - c.transpose()).abs().max();
                if asym.is_nan() || asym > 1e-12 * c.abs().max().max(1.0) {
                    return err(format!("{path}.cov"), "matrix is not symmetric".into());
                }
                if c.clone().cholesky().is_none() {
                    return err(format!("{path}.cov"), "matrix is not positive definite".into());
                }
            }
            if (weight_sum - 1.0).abs() > SUM_TOLERANCE {
                return err(format!("{path}.components"), format!("weights sum to {weight_sum}, not 1"));
            }
        }
        if (prior_sum - 1.0).abs() > SUM_TOLERANCE {
            return err("concepts".into(), format!("priors sum to {prior_sum}, not 1"));
        }
        Ok(())
    }

    /// The world's densities after diffusing to cumulative level `alpha_bar`.
    pub fn diffused(&self, alpha_bar: f64) -> Result<DiffusedWorld> {
        let scale = alpha_bar.sqrt();
        let identity = DMatrix::<f64>::identity(self.dimension, self.dimension);
        let mut concepts = Vec::with_capacity(self.concepts.len());
        for concept in &self.concepts {
            let mut comps = Vec::with_capacity(concept.components.len());
            for comp in &concept.components {
                let cov = &comp.covariance * alpha_bar + &identity * (1.0 - alpha_bar);
                let chol = cov.cholesky().ok_or_else(|| {
                    Error::Invariant(format!("diffused covariance of `{}` lost definiteness", concept.id))
                })?;
                let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
                comps.push(DiffusedComponent {
                    log_weight: comp.weight.ln(),
                    mean: DVector::from_iterator(self.dimension, comp.mean.iter().map(|m| scale * m)),
                    precision: chol.inverse(),
                    log_norm: -0.5 * (self.dimension as f64 * LN_2PI + log_det),
                });
            }
            concepts.push(DiffusedConcept { log_prior: concept.prior.ln(), components: comps });
        }
        Ok(DiffusedWorld { dimension: self.dimension, concepts })
    }

    fn diffused_at(&self, sched: &VarianceSchedule, t: usize) -> Result<DiffusedWorld> {
        self.diffused(sched.alpha_bar(t)?)
    }

    /// `log p(z_t | c)` at step `t`; `t = 0` is the clean distribution.
    pub fn marginal_log_density(&self, sched: &VarianceSchedule, z: &[f64], t: usize, c: Condition) -> Result<f64> {
        self.check_condition(c)?;
        self.diffused_at(sched, t)?.log_density(z, c)
    }

    /// Exact noise prediction `-sqrt(1 - ab_t) * grad log p(z_t | c)`.
    pub fn analytic_epsilon(&self, sched: &VarianceSchedule, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        sched.check_step(t)?;
        self.check_condition(c)?;
        let ab = sched.alpha_bar(t)?;
        self.diffused(ab)?.epsilon(z, c, (1.0 - ab).sqrt())
    }

    /// `p(c | z_t)` for every concept, in vocabulary order.
    pub fn concept_posterior(&self, sched: &VarianceSchedule, z: &[f64], t: usize) -> Result<Vec<f64>> {
        Ok(self.diffused_at(sched, t)?.log_posteriors(z)?.into_iter().map(f64::exp).collect())
    }

    /// Bayes-optimal label of a finished sample; ties go to the lowest index.
    pub fn quantize_to_concept(&self, z: &[f64]) -> Result<ConceptId> {
        self.diffused(1.0)?.quantize(z)
    }
}

#[derive(Debug, Clone)]
struct DiffusedComponent {
    log_weight: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    log_norm: f64,
}

impl DiffusedComponent {
    fn log_pdf(&self, z: &DVector<f64>) -> f64 {
        let diff = z - &self.mean;
        self.log_norm - 0.5 * diff.dot(&(&self.precision * &diff))
    }

    /// Log density and its gradient `-P (z - m)`.
    fn log_pdf_grad(&self, z: &DVector<f64>) -> (f64, DVector<f64>) {
        let diff = z - &self.mean;
        let pd = &self.precision * &diff;
        (self.log_norm - 0.5 * diff.dot(&pd), -pd)
    }
}

#[derive(Debug, Clone)]
struct DiffusedConcept {
    log_prior: f64,
    components: Vec<DiffusedComponent>,
}

/// A concept world frozen at one noise level.
#[derive(Debug, Clone)]
pub struct DiffusedWorld {
    dimension: usize,
    concepts: Vec<DiffusedConcept>,
}

impl DiffusedWorld {
    fn vector(&self, z: &[f64]) -> Result<DVector<f64>> {
        check_dims(self.dimension, z.len())?;
        Ok(DVector::from_column_slice(z))
    }

    /// Mixture members selected by `c`, with their total log weights.
    fn members(&self, c: Condition) -> Vec<(f64, &DiffusedComponent)> {
        match c {
            Condition::Null => self
                .concepts
                .iter()
                .flat_map(|k| k.components.iter().map(move |m| (k.log_prior + m.log_weight, m)))
                .collect(),
            Condition::Concept(id) => {
                self.concepts[id.0].components.iter().map(|m| (m.log_weight, m)).collect()
            }
        }
    }

    pub fn concept_log_likelihoods(&self, z: &[f64]) -> Result<Vec<f64>> {
        let z = self.vector(z)?;
        Ok(self
            .concepts
            .iter()
            .map(|k| log_sum_exp(k.components.iter().map(|m| m.log_weight + m.log_pdf(&z))))
            .collect())
    }

    pub fn log_density(&self, z: &[f64], c: Condition) -> Result<f64> {
        let z = self.vector(z)?;
        Ok(log_sum_exp(self.members(c).into_iter().map(|(lw, m)| lw + m.log_pdf(&z))))
    }

    /// Gradient of `log p(z | c)`: responsibility-weighted component scores.
    pub fn score(&self, z: &[f64], c: Condition) -> Result<Vec<f64>> {
        let z = self.vector(z)?;
        let parts: Vec<(f64, DVector<f64>)> = self
            .members(c)
            .into_iter()
            .map(|(lw, m)| {
                let (lp, g) = m.log_pdf_grad(&z);
                (lw + lp, g)
            })
            .collect();
        let total = log_sum_exp(parts.iter().map(|(l, _)| *l));
        let mut grad = DVector::zeros(self.dimension);
        for (l, g) in &parts {
            grad.axpy((l - total).exp(), g, 1.0);
        }
        Ok(grad.iter().copied().collect())
    }

    pub fn epsilon(&self, z: &[f64], c: Condition, noise_scale: f64) -> Result<Vec<f64>> {
        Ok(self.score(z, c)?.into_iter().map(|g| -noise_scale * g).collect())
    }

    pub fn log_posteriors(&self, z: &[f64]) -> Result<Vec<f64>> {
        let joint: Vec<f64> = self
            .concept_log_likelihoods(z)?
            .into_iter()
            .zip(&self.concepts)
            .map(|(ll, k)| ll + k.log_prior)
            .collect();
        let total = log_sum_exp(joint.iter().copied());
        Ok(joint.into_iter().map(|j| j - total).collect())
    }

    pub fn quantize(&self, z: &[f64]) -> Result<ConceptId> {
        let post = self.log_posteriors(z)?;
        let mut best = 0;
        for (i, p) in post.iter().enumerate().skip(1) {
            if *p > post[best] {
                best = i;
            }
        }
        Ok(ConceptId(best))
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64>) -> f64 {
    let values: Vec<f64> = values.collect();
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorldDoc {
    dimension: usize,
    concepts: Vec<ConceptDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConceptDoc {
    id: String,
    prior: f64,
    components: Vec<ComponentDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentDoc {
    weight: f64,
    mean: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov_diag: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cov: Option<Vec<Vec<f64>>>,
}

impl WorldDoc {
    fn into_world(self) -> Result<ConceptWorld> {
        let d = self.dimension;
        let mut concepts = Vec::with_capacity(self.concepts.len());
        for (i, c) in self.concepts.into_iter().enumerate() {
            let mut comps = Vec::with_capacity(c.components.len());
            for (j, m) in c.components.into_iter().enumerate() {
                let path = format!("concepts[{i}].components[{j}]");
                let fail = |field: &str, message: String| Error::World { path: format!("{path}.{field}"), message };
                let covariance = match (m.cov_diag, m.cov) {
                    (Some(diag), None) => {
                        if diag.len() != d {
                            return Err(fail("cov_diag", format!("expected {d} entries, got {}", diag.len())));
                        }
                        if let Some(v) = diag.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
                            return Err(fail("cov_diag", format!("variances must be positive, got {v}")));
                        }
                        DMatrix::from_diagonal(&DVector::from_vec(diag))
                    }
                    (None, Some(rows)) => {
                        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                            return Err(fail("cov", format!("expected a {d}x{d} matrix")));
                        }
                        DMatrix::from_fn(d, d, |r, k| rows[r][k])
                    }
                    (Some(_), Some(_)) => {
                        return Err(Error::World { path, message: "give either `cov_diag` or `cov`, not both".into() })
                    }
                    (None, None) => {
                        return Err(Error::World { path, message: "missing `cov_diag` or `cov`".into() })
                    }
                };
                comps.push(Component { weight: m.weight, mean: m.mean, covariance });
            }
            concepts.push(Concept { id: c.id, prior: c.prior, components: comps });
        }
        ConceptWorld::new(d, concepts)
    }

    fn from_world(world: &ConceptWorld) -> Self {
        let concepts = world
            .concepts
            .iter()
            .map(|c| ConceptDoc {
                id: c.id.clone(),
                prior: c.prior,
                components: c
                    .components
                    .iter()
                    .map(|m| {
                        let cov = &m.covariance;
                        let (cov_diag, cov) = if m.is_diagonal() {
                            (Some(cov.diagonal().iter().copied().collect()), None)
                        } else {
                            let rows = cov.row_iter().map(|r| r.iter().copied().collect()).collect();
                            (None, Some(rows))
                        };
                        ComponentDoc { weight: m.weight, mean: m.mean.clone(), cov_diag, cov }
                    })
                    .collect(),
            })
            .collect();
        Self { dimension: world.dimension, concepts }
    }
}
