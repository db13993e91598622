//! A small fully connected noise predictor trained with the denoising
//! objective `E || eps - eps_theta(z_t; t, c) ||^2`.
//!
//! Input is the latent, sinusoidal features of `t / T`, and a learned
//! embedding of the condition (one row per concept plus one for the null
//! condition). Hidden layers share one activation; the output layer is
//! linear.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{check_dims, Error, Result};
use crate::schedule::VarianceSchedule;
use crate::world::{Condition, ConceptWorld};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => x.tanh(),
            Self::Silu => x / (1.0 + (-x).exp()),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Self::Tanh => 1.0 - pre.tanh().powi(2),
            Self::Silu => {
                let sig = 1.0 / (1.0 + (-pre).exp());
                sig * (1.0 + pre * (1.0 - sig))
            }
        }
    }
}

/// Architecture and optimisation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Number of sin/cos frequency pairs encoding the step.
    pub time_frequencies: usize,
    pub activation: Activation,
    pub learning_rate: f64,
    /// The rate decays linearly to `learning_rate * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 4,
            time_frequencies: 4,
            activation: Activation::Silu,
            learning_rate: 2e-3,
            final_lr_fraction: 0.05,
            iterations: 4000,
            batch_size: 128,
            cond_dropout: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.hidden.contains(&0) {
            return bad("hidden layer widths must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return bad(format!("final learning-rate fraction must lie in [0, 1], got {}", self.final_lr_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!("condition dropout must lie in [0, 1], got {}", self.cond_dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// Row-major `outputs x inputs`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn new<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let scale = (1.0 / inputs as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("finite scale");
        Self {
            inputs,
            outputs,
            weights: (0..inputs * outputs).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Trainable noise predictor implementing [`Denoiser`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainableDenoiser {
    dimension: usize,
    concepts: usize,
    total_steps: usize,
    config: TrainConfig,
    /// `(concepts + 1) x embed_dim`, last row is the null condition.
    embeddings: Vec<f64>,
    layers: Vec<Dense>,
}

/// Activations kept for the backward pass.
struct Tape {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl TrainableDenoiser {
    pub fn new(dimension: usize, concepts: usize, total_steps: usize, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if dimension == 0 || total_steps == 0 {
            return Err(Error::Parameter("dimension and step count must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![dimension + 2 * config.time_frequencies + config.embed_dim];
        widths.extend(&config.hidden);
        widths.push(dimension);
        let layers = widths.windows(2).map(|w| Dense::new(w[0], w[1], &mut rng)).collect();
        let embeddings = (0..(concepts + 1) * config.embed_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Ok(Self { dimension, concepts, total_steps, config, embeddings, layers })
    }

    /// A model sized for `world` and `sched`.
    pub fn for_world(world: &ConceptWorld, sched: &VarianceSchedule, config: TrainConfig, seed: u64) -> Result<Self> {
        Self::new(world.dimension(), world.len(), sched.total_steps(), config, seed)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Number of concepts the condition embedding was sized for.
    pub fn concepts(&self) -> usize {
        self.concepts
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn parameter_count(&self) -> usize {
        self.embeddings.len() + self.layers.iter().map(Dense::len).sum::<usize>()
    }

    fn parameters(&self) -> Vec<f64> {
        let mut out = self.embeddings.clone();
        for l in &self.layers {
            out.extend(&l.weights);
            out.extend(&l.bias);
        }
        out
    }

    fn set_parameters(&mut self, flat: &[f64]) {
        let (emb, mut rest) = flat.split_at(self.embeddings.len());
        self.embeddings.copy_from_slice(emb);
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.weights.len());
            let (b, r) = r.split_at(l.bias.len());
            l.weights.copy_from_slice(w);
            l.bias.copy_from_slice(b);
            rest = r;
        }
    }

    fn condition_row(&self, c: Condition) -> Result<usize> {
        match c {
            Condition::Null => Ok(self.concepts),
            Condition::Concept(id) if id.0 < self.concepts => Ok(id.0),
            Condition::Concept(id) => Err(Error::UnknownConcept(format!("#{}", id.0))),
        }
    }

    fn features(&self, z: &[f64], t: usize, row: usize) -> Vec<f64> {
        let phase = t as f64 / self.total_steps as f64;
        let mut x = z.to_vec();
        for i in 0..self.config.time_frequencies {
            let w = std::f64::consts::PI * (1 << i) as f64 * phase;
            x.push(w.sin());
            x.push(w.cos());
        }
        let e = self.config.embed_dim;
        x.extend_from_slice(&self.embeddings[row * e..(row + 1) * e]);
        x
    }

    fn forward(&self, x: Vec<f64>) -> Tape {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            let a = layer.forward(&h);
            inputs.push(h);
            h = if i == last { a.clone() } else { a.iter().map(|v| self.config.activation.apply(*v)).collect() };
            pre.push(a);
        }
        Tape { inputs, pre, output: h }
    }

    /// Accumulates parameter gradients of `sum (out - target)^2 * weight`.
    fn backward(&self, tape: &Tape, row: usize, target: &[f64], weight: f64, grad: &mut [f64]) {
        let emb_len = self.embeddings.len();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut at = emb_len;
        for l in &self.layers {
            offsets.push(at);
            at += l.len();
        }
        let mut delta: Vec<f64> = tape.output.iter().zip(target).map(|(o, y)| 2.0 * weight * (o - y)).collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if i + 1 != self.layers.len() {
                for (d, p) in delta.iter_mut().zip(&tape.pre[i]) {
                    *d *= self.config.activation.derivative(*p);
                }
            }
            let input = &tape.inputs[i];
            let base = offsets[i];
            for (o, d) in delta.iter().enumerate() {
                let row_grad = &mut grad[base + o * layer.inputs..base + (o + 1) * layer.inputs];
                for (g, v) in row_grad.iter_mut().zip(input) {
                    *g += d * v;
                }
                grad[base + layer.weights.len() + o] += d;
            }
            let mut back = vec![0.0; layer.inputs];
            for (o, d) in delta.iter().enumerate() {
                for (b, w) in back.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *b += w * d;
                }
            }
            delta = back;
        }
        let e = self.config.embed_dim;
        let start = self.dimension + 2 * self.config.time_frequencies;
        for j in 0..e {
            grad[row * e + j] += delta[start + j];
        }
    }

    /// Loss and gradient of one batch; exposed for gradient checking.
    pub fn batch_loss_and_grad(&self, batch: &[TrainingExample]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.parameter_count()];
        let weight = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for ex in batch {
            let row = self.condition_row(ex.condition).expect("example condition in range");
            let tape = self.forward(self.features(&ex.latent, ex.t, row));
            loss += weight * tape.output.iter().zip(&ex.noise).map(|(o, y)| (o - y).powi(2)).sum::<f64>();
            self.backward(&tape, row, &ex.noise, weight, &mut grad);
        }
        (loss, grad)
    }

    pub fn batch_loss(&self, batch: &[TrainingExample]) -> f64 {
        self.batch_loss_and_grad(batch).0
    }

    /// Flat parameter vector, in the order used by [`Self::batch_loss_and_grad`].
    pub fn flat_parameters(&self) -> Vec<f64> {
        self.parameters()
    }

    pub fn with_flat_parameters(&self, flat: &[f64]) -> Self {
        let mut out = self.clone();
        out.set_parameters(flat);
        out
    }
}

impl Denoiser for TrainableDenoiser {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn predict_noise(&self, z: &[f64], t: usize, c: Condition) -> Result<Vec<f64>> {
        check_dims(self.dimension, z.len())?;
        if t == 0 || t > self.total_steps {
            return Err(Error::Index { t, max: self.total_steps });
        }
        let row = self.condition_row(c)?;
        Ok(self.forward(self.features(z, t, row)).output)
    }
}

/// One `(z_t, t, c, eps)` regression example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub latent: Vec<f64>,
    pub t: usize,
    pub condition: Condition,
    pub noise: Vec<f64>,
}

/// Draws training examples: a concept by prior, a clean sample from it, a
/// uniform step and standard-normal noise; the condition is dropped to null
/// with the configured probability.
pub struct ExampleSampler<'a> {
    world: &'a ConceptWorld,
    sched: &'a VarianceSchedule,
    factors: Vec<Vec<DMatrix<f64>>>,
    dropout: f64,
}

impl<'a> ExampleSampler<'a> {
    pub fn new(world: &'a ConceptWorld, sched: &'a VarianceSchedule, dropout: f64) -> Result<Self> {
        let factors = world
            .concepts()
            .iter()
            .map(|c| {
                c.components
                    .iter()
                    .map(|m| {
                        m.covariance
                            .clone()
                            .cholesky()
                            .map(|ch| ch.unpack())
                            .ok_or_else(|| Error::Invariant(format!("covariance of `{}` is not PD", c.id)))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { world, sched, factors, dropout })
    }

    fn pick(weights: impl Iterator<Item = f64>, u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in weights.enumerate() {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> TrainingExample {
        let d = self.world.dimension();
        let ci = Self::pick(self.world.concepts().iter().map(|c| c.prior), rng.random());
        let concept = &self.world.concepts()[ci];
        let mi = Self::pick(concept.components.iter().map(|m| m.weight), rng.random());
        let comp = &concept.components[mi];
        let n: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let l = &self.factors[ci][mi];
        let clean: Vec<f64> = (0..d)
            .map(|r| comp.mean[r] + (0..=r).map(|k| l[(r, k)] * n[k]).sum::<f64>())
            .collect();
        let t = rng.random_range(1..=self.sched.total_steps());
        let noise: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let latent = self.sched.forward_diffuse(&clean, t, &noise).expect("dimensions agree");
        let condition = if rng.random::<f64>() < self.dropout {
            Condition::Null
        } else {
            Condition::Concept(crate::world::ConceptId(ci))
        };
        TrainingExample { latent, t, condition, noise }
    }
}

/// Loss history of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub losses: Vec<f64>,
}

impl TrainingReport {
    fn window_mean(&self, from: usize, to: usize) -> f64 {
        let w = &self.losses[from..to];
        w.iter().sum::<f64>() / w.len() as f64
    }

    /// Mean loss over the first tenth of iterations.
    pub fn initial_loss(&self) -> Option<f64> {
        let n = self.losses.len();
        (n > 0).then(|| self.window_mean(0, (n / 10).max(1)))
    }

    /// Mean loss over the final tenth of iterations.
    pub fn final_loss(&self) -> Option<f64> {
        let n = self.losses.len();
        (n > 0).then(|| self.window_mean(n - (n / 10).max(1), n))
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Minimises the denoising loss with Adam-scaled stochastic gradients.
pub fn train_denoiser(
    mut model: TrainableDenoiser,
    world: &ConceptWorld,
    sched: &VarianceSchedule,
    seed: u64,
) -> Result<(TrainableDenoiser, TrainingReport)> {
    if world.is_empty() {
        return Err(Error::Parameter("training needs at least one concept".into()));
    }
    check_dims(model.dimension, world.dimension())?;
    if model.concepts != world.len() || model.total_steps != sched.total_steps() {
        return Err(Error::Parameter("model was built for a different world or schedule".into()));
    }
    let config = model.config.clone();
    config.validate()?;
    let sampler = ExampleSampler::new(world, sched, config.cond_dropout)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.parameters();
    let mut m = vec![0.0; params.len()];
    let mut v = vec![0.0; params.len()];
    let mut losses = Vec::with_capacity(config.iterations);
    for iteration in 0..config.iterations {
        let batch: Vec<TrainingExample> = (0..config.batch_size).map(|_| sampler.draw(&mut rng)).collect();
        let (loss, grad) = model.batch_loss_and_grad(&batch);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { iteration, loss });
        }
        losses.push(loss);
        let step = (iteration + 1) as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(step);
        let c2 = 1.0 - ADAM_BETA2.powi(step);
        let progress = iteration as f64 / config.iterations as f64;
        let lr = config.learning_rate * (1.0 - (1.0 - config.final_lr_fraction) * progress);
        for i in 0..params.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
            params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
        model.set_parameters(&params);
    }
    Ok((model, TrainingReport { losses }))
}
