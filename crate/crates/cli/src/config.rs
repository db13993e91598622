//! Experiment configuration: one JSON document, overridden field by field by
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use negdiff_core::{
    ConceptId, ConceptWorld, GuidanceConfig, SamplerKind, ScheduleKind, Strategy, TrainConfig, VarianceSchedule,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { kind: ScheduleKind::Cosine, steps: 40, beta_min: 1e-4, beta_max: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> CliResult<VarianceSchedule> {
        VarianceSchedule::new(self.kind, self.steps, self.beta_min, self.beta_max)
            .map_err(|e| CliError::Config(format!("schedule: {e}")))
    }
}

fn default_guidance() -> GuidanceConfig {
    GuidanceConfig::new(Strategy::Cfg, 2.0).with_k(5)
}

fn default_n_seeds() -> usize {
    100
}

fn default_k_values() -> Vec<usize> {
    vec![0, 1, 2, 5, 10]
}

/// Everything one invocation needs. Paths in a config file are relative to
/// that file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub world: Option<PathBuf>,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_guidance")]
    pub guidance: GuidanceConfig,
    /// Positive concept name; the first concept when absent.
    #[serde(default)]
    pub positive: Option<String>,
    /// Configurations for `compare`; CFG, ANSWER and DNP derived from
    /// `guidance` when empty.
    #[serde(default)]
    pub strategies: Vec<GuidanceConfig>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default = "default_k_values")]
    pub k_values: Vec<usize>,
    /// Steps for `hypothesis`; `{T, 3T/4, T/2 + 1}` when empty.
    #[serde(default)]
    pub t_grid: Vec<usize>,
    /// Worker threads; 0 picks one per core.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
    /// Trained model file used instead of the exact denoiser.
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub train: TrainConfig,
    /// Also write full per-step traces from `sample`.
    #[serde(default)]
    pub traces: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// Flag values; each one present replaces the matching config field.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub world: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub strategy: Option<Strategy>,
    pub s: Option<f64>,
    pub s_n: Option<f64>,
    pub k: Option<usize>,
    pub steps: Option<usize>,
    pub sampler: Option<SamplerKind>,
    pub no_normalize: bool,
    pub window: Option<f64>,
    pub n_seeds: Option<usize>,
    pub model: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
                *p = base.join(&*p);
            }
        };
        rebase(&mut config.world);
        rebase(&mut config.out);
        rebase(&mut config.model);
        Ok(config)
    }

    /// Applies flag values. Guidance flags reach `guidance` and every entry
    /// of `strategies`; `--strategy` only the former.
    pub fn apply(&mut self, o: &Overrides) {
        if o.world.is_some() {
            self.world.clone_from(&o.world);
        }
        if o.out.is_some() {
            self.out.clone_from(&o.out);
        }
        if o.model.is_some() {
            self.model.clone_from(&o.model);
        }
        if let Some(w) = o.workers {
            self.workers = w;
        }
        if let Some(n) = o.n_seeds {
            self.n_seeds = n;
        }
        if let Some(t) = o.steps {
            self.schedule.steps = t;
        }
        if let Some(strategy) = o.strategy {
            self.guidance.strategy = strategy;
        }
        for g in std::iter::once(&mut self.guidance).chain(self.strategies.iter_mut()) {
            if let Some(seed) = o.seed {
                g.seed = seed;
            }
            if let Some(s) = o.s {
                g.s = s;
            }
            if o.s_n.is_some() {
                g.s_n = o.s_n;
            }
            if let Some(k) = o.k {
                g.k = k;
            }
            if let Some(sampler) = o.sampler {
                g.sampler = sampler;
            }
            if o.no_normalize {
                g.normalize = false;
            }
            if let Some(w) = o.window {
                g.window_fraction = w;
            }
        }
    }

    /// The configs compared by `compare`.
    pub fn comparison_configs(&self) -> Vec<GuidanceConfig> {
        if !self.strategies.is_empty() {
            return self.strategies.clone();
        }
        [Strategy::Cfg, Strategy::Answer, Strategy::Dnp]
            .into_iter()
            .map(|strategy| GuidanceConfig { strategy, ..self.guidance.clone() })
            .collect()
    }

    pub fn drift_grid(&self) -> Vec<usize> {
        if !self.t_grid.is_empty() {
            return self.t_grid.clone();
        }
        let t = self.schedule.steps;
        vec![t, 3 * t / 4, t / 2 + 1]
    }
}

/// A config with its world loaded and its hash computed.
pub struct Resolved {
    pub config: ExperimentConfig,
    pub world: ConceptWorld,
    pub sched: VarianceSchedule,
    pub positive: ConceptId,
    pub out: PathBuf,
    /// Hex SHA-256 of the result-relevant config and the world and model files.
    pub hash: String,
    pub model_text: Option<String>,
}

impl Resolved {
    pub fn new(config: ExperimentConfig) -> CliResult<Self> {
        let world_path = config
            .world
            .clone()
            .ok_or_else(|| CliError::Config("`world` is required (config field or --world)".into()))?;
        let world_text = fs::read_to_string(&world_path).map_err(|e| CliError::io(&world_path, e))?;
        let world = ConceptWorld::from_json_str(&world_text)
            .map_err(|e| CliError::Config(format!("world {}: {e}", world_path.display())))?;
        let sched = config.schedule.build()?;
        let positive = match &config.positive {
            Some(name) => world
                .concept_id(name)
                .map_err(|_| CliError::Config(format!("positive: no concept named `{name}`")))?,
            None => ConceptId(0),
        };
        if config.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be positive".into()));
        }
        for (i, g) in std::iter::once(&config.guidance).chain(&config.strategies).enumerate() {
            let field = if i == 0 { "guidance".to_string() } else { format!("strategies[{}]", i - 1) };
            g.validate().map_err(|e| CliError::Config(format!("{field}: {e}")))?;
            if let Some(name) = &g.negative {
                world.concept_id(name).map_err(|_| CliError::Config(format!("{field}.negative: no concept `{name}`")))?;
            }
        }
        let model_text = match &config.model {
            Some(path) => Some(fs::read_to_string(path).map_err(|e| CliError::io(path, e))?),
            None => None,
        };
        let hash = config_hash(&config, &world_text, model_text.as_deref());
        let out = config.out.clone().unwrap_or_else(|| PathBuf::from("out"));
        Ok(Self { config, world, sched, positive, out, hash, model_text })
    }
}

/// Hash of everything that can change results. Output location, worker
/// count and file paths are left out; file contents are hashed instead.
pub fn config_hash(config: &ExperimentConfig, world_text: &str, model_text: Option<&str>) -> String {
    let mut relevant = config.clone();
    relevant.world = None;
    relevant.out = None;
    relevant.model = None;
    relevant.workers = 0;
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(&relevant).expect("config serializes"));
    hasher.update(b"\0");
    hasher.update(world_text.as_bytes());
    if let Some(model) = model_text {
        hasher.update(b"\0");
        hasher.update(model.as_bytes());
    }
    hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
