//! Run configuration, read from a TOML file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use varkernel::tasks::{ClusterTaskSpec, SineTaskSpec, DEFAULT_QUERIES_PER_CLASS};
use varkernel::{EvalMode, InferenceMode, PriorAggregation, Seeds, TaskGenerator, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub task: TaskConfig,
    pub train: TrainSection,
    pub seeds: Seeds,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub logging: LoggingSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TaskConfig {
    Sine {
        shots: usize,
        #[serde(default = "default_queries")]
        queries: usize,
        #[serde(default = "default_amplitude")]
        amplitude: [f64; 2],
        #[serde(default = "default_phase")]
        phase: [f64; 2],
        #[serde(default = "default_input_range")]
        input_range: [f64; 2],
        #[serde(default)]
        noise: f64,
    },
    Cluster {
        ways: usize,
        shots: usize,
        #[serde(default = "default_queries")]
        queries_per_class: usize,
        #[serde(default = "default_cluster_dim")]
        input_dim: usize,
        #[serde(default = "default_center_scale")]
        center_scale: f64,
        #[serde(default = "default_spread")]
        spread: f64,
    },
}

fn default_queries() -> usize {
    DEFAULT_QUERIES_PER_CLASS
}
fn default_amplitude() -> [f64; 2] {
    SineTaskSpec::default().amplitude
}
fn default_phase() -> [f64; 2] {
    SineTaskSpec::default().phase
}
fn default_input_range() -> [f64; 2] {
    SineTaskSpec::default().input_range
}
fn default_cluster_dim() -> usize {
    ClusterTaskSpec::default().input_dim
}
fn default_center_scale() -> f64 {
    ClusterTaskSpec::default().center_scale
}
fn default_spread() -> f64 {
    ClusterTaskSpec::default().spread
}

impl TaskConfig {
    pub fn generator(&self) -> TaskGenerator {
        match *self {
            TaskConfig::Sine {
                shots,
                queries,
                amplitude,
                phase,
                input_range,
                noise,
            } => TaskGenerator::Sine {
                spec: SineTaskSpec {
                    amplitude,
                    phase,
                    input_range,
                    noise,
                },
                shots,
                queries,
            },
            TaskConfig::Cluster {
                ways,
                shots,
                queries_per_class,
                input_dim,
                center_scale,
                spread,
            } => TaskGenerator::Cluster {
                spec: ClusterTaskSpec {
                    input_dim,
                    center_scale,
                    spread,
                    ways,
                    shots,
                },
                queries_per_class,
            },
        }
    }
}

/// The `[train]` table. Only `iterations` is required.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub iterations: usize,
    #[serde(default = "d::lr")]
    pub lr: f64,
    #[serde(default = "d::episodes")]
    pub episodes_per_iteration: usize,
    #[serde(default = "d::bases")]
    pub bases: usize,
    #[serde(default = "d::lambda")]
    pub lambda: f64,
    #[serde(default = "d::beta")]
    pub beta: f64,
    #[serde(default = "d::sigma_y")]
    pub sigma_y: f64,
    #[serde(default)]
    pub prior_aggregation: PriorAggregation,
    #[serde(default = "d::mode")]
    pub mode: InferenceMode,
    #[serde(default = "d::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "d::hidden")]
    pub hidden: usize,
    #[serde(default = "d::inference_layers")]
    pub inference_layers: usize,
    #[serde(default = "d::prior_layers")]
    pub prior_layers: usize,
}

mod d {
    use super::*;

    fn base() -> TrainConfig {
        TrainConfig::default()
    }
    pub fn lr() -> f64 {
        base().lr
    }
    pub fn episodes() -> usize {
        base().episodes_per_iteration
    }
    pub fn bases() -> usize {
        base().bases
    }
    pub fn lambda() -> f64 {
        base().lambda
    }
    pub fn beta() -> f64 {
        base().beta
    }
    pub fn sigma_y() -> f64 {
        base().sigma_y
    }
    pub fn mode() -> InferenceMode {
        base().mode
    }
    pub fn feature_dim() -> usize {
        base().feature_dim
    }
    pub fn hidden() -> usize {
        base().hidden
    }
    pub fn inference_layers() -> usize {
        base().inference_layers
    }
    pub fn prior_layers() -> usize {
        base().prior_layers
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Held-out tasks for the final evaluation and the `eval` command.
    #[serde(default = "default_eval_episodes")]
    pub episodes: usize,
    /// Tasks scored at every log row for the `eval_metric` column.
    #[serde(default = "default_monitor_episodes")]
    pub monitor_episodes: usize,
    #[serde(default = "default_eval_mode")]
    pub mode: EvalMode,
}

fn default_eval_episodes() -> usize {
    200
}
fn default_monitor_episodes() -> usize {
    20
}
fn default_eval_mode() -> EvalMode {
    EvalMode::Sampled
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            episodes: default_eval_episodes(),
            monitor_episodes: default_monitor_episodes(),
            mode: default_eval_mode(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoggingSection {
    /// Write a metrics row every `log_every` iterations (and after the last).
    #[serde(default = "default_log_every")]
    pub log_every: usize,
    /// Save a checkpoint every `checkpoint_every` iterations; 0 saves only at the end.
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_log_every() -> usize {
    100
}

impl Default for LoggingSection {
    fn default() -> Self {
        Self {
            log_every: default_log_every(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.generator().validate()?;
        self.train_config().validate()?;
        if self.logging.log_every == 0 {
            bail!("logging.log_every must be at least 1");
        }
        if self.eval.episodes == 0 {
            bail!("eval.episodes must be at least 1");
        }
        Ok(())
    }

    pub fn generator(&self) -> TaskGenerator {
        self.task.generator()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr: t.lr,
            iterations: t.iterations,
            episodes_per_iteration: t.episodes_per_iteration,
            bases: t.bases,
            lambda: t.lambda,
            beta: t.beta,
            sigma_y: t.sigma_y,
            prior_aggregation: t.prior_aggregation,
            mode: t.mode,
            feature_dim: t.feature_dim,
            hidden: t.hidden,
            inference_layers: t.inference_layers,
            prior_layers: t.prior_layers,
            seeds: self.seeds,
        }
    }

    /// Applies `name=value` seed overrides (`tasks`, `init`, `sampling`).
    pub fn apply_seed_overrides(&mut self, overrides: &[String]) -> anyhow::Result<()> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .with_context(|| format!("seed override {o:?} is not of the form NAME=VALUE"))?;
            let value: u64 = value
                .trim()
                .parse()
                .with_context(|| format!("seed override {o:?}: value is not an unsigned integer"))?;
            match key.trim() {
                "tasks" => self.seeds.tasks = value,
                "init" => self.seeds.init = value,
                "sampling" => self.seeds.sampling = value,
                other => bail!("unknown seed {other:?} (expected tasks, init or sampling)"),
            }
        }
        Ok(())
    }

    /// Fingerprint of everything that shapes the training trajectory: task
    /// family, hyperparameters and seeds. The iteration budget only decides
    /// where a run stops, so it is left out and runs can be extended.
    pub fn hash(&self) -> String {
        let mut train = serde_json::to_value(self.train).expect("train section serializes");
        train["iterations"] = serde_json::Value::Null;
        let identity = serde_json::json!({
            "task": self.task,
            "train": train,
            "seeds": self.seeds,
        });
        hex::encode(Sha256::digest(identity.to_string().as_bytes()))
    }
}
