//! Episodic meta-training and evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore};
use crate::elbo::{ObjectiveConfig, PriorAggregation, DEFAULT_BETA, DEFAULT_SIGMA_Y};
use crate::error::{Error, Result};
use crate::model::{
    MetaKernelModel, ModelConfig, DEFAULT_FEATURE_DIM, DEFAULT_HIDDEN, DEFAULT_INFERENCE_LAYERS, DEFAULT_PRIOR_LAYERS,
};
use crate::nn::InferenceMode;
use crate::optim::{AdamConfig, AdamState, DEFAULT_LEARNING_RATE};
use crate::rff::{BasisNoise, FixedPriorRff, DEFAULT_BASES, DEFAULT_RIDGE};
use crate::rng::{rng_for, stream};
use crate::tasks::{episode_stream, EpisodeStream, Task, TaskGenerator, DEFAULT_EPISODES_PER_ITERATION};
use crate::tensor::Tensor;

/// The three roots every random draw of a run descends from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct Seeds {
    pub tasks: u64,
    pub init: u64,
    pub sampling: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub iterations: usize,
    pub episodes_per_iteration: usize,
    pub bases: usize,
    pub lambda: f64,
    pub beta: f64,
    pub sigma_y: f64,
    pub prior_aggregation: PriorAggregation,
    pub mode: InferenceMode,
    pub feature_dim: usize,
    pub hidden: usize,
    pub inference_layers: usize,
    pub prior_layers: usize,
    pub seeds: Seeds,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LEARNING_RATE,
            iterations: crate::tasks::DEFAULT_REGRESSION_ITERATIONS,
            episodes_per_iteration: DEFAULT_EPISODES_PER_ITERATION,
            bases: DEFAULT_BASES,
            lambda: DEFAULT_RIDGE,
            beta: DEFAULT_BETA,
            sigma_y: DEFAULT_SIGMA_Y,
            prior_aggregation: PriorAggregation::MeanParams,
            mode: InferenceMode::VanillaLstm,
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: DEFAULT_HIDDEN,
            inference_layers: DEFAULT_INFERENCE_LAYERS,
            prior_layers: DEFAULT_PRIOR_LAYERS,
            seeds: Seeds::default(),
        }
    }
}

impl TrainConfig {
    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            bases: self.bases,
            lambda: self.lambda,
            beta: self.beta,
            sigma_y: self.sigma_y,
            prior_aggregation: self.prior_aggregation,
        }
    }

    pub fn model_config(&self, input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            feature_dim: self.feature_dim,
            hidden: self.hidden,
            inference_layers: self.inference_layers,
            prior_layers: self.prior_layers,
            mode: self.mode,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("lr must be non-negative, got {}", self.lr)));
        }
        if self.iterations == 0 || self.episodes_per_iteration == 0 {
            return Err(Error::InvalidArgument(
                "iterations and episodes_per_iteration must be at least 1".into(),
            ));
        }
        self.objective().validate()
    }
}

/// Meta-batch averages for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub elbo: f64,
    pub log_lik: f64,
    pub kl: f64,
}

/// Everything needed to continue a run: networks, optimizer moments and the
/// index of the next iteration. Task and noise draws are addressed by
/// iteration, so no generator state needs carrying.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: TaskGenerator,
    pub model: MetaKernelModel,
    pub params: ParamStore,
    pub adam: AdamState,
    pub iteration: usize,
    stream: EpisodeStream,
}

fn build_model(config: &TrainConfig, generator: &TaskGenerator) -> Result<(MetaKernelModel, ParamStore)> {
    let mut params = ParamStore::new();
    let mut rng = rng_for(config.seeds.init, &[stream::INIT]);
    let model = MetaKernelModel::new(config.model_config(generator.input_dim()), &mut params, &mut rng)?;
    Ok((model, params))
}

impl Trainer {
    /// Fresh networks initialized from `seeds.init`.
    pub fn new(config: TrainConfig, generator: TaskGenerator) -> Result<Self> {
        config.validate()?;
        let stream = episode_stream(generator, config.episodes_per_iteration, config.iterations, config.seeds.tasks)?;
        let (model, params) = build_model(&config, &generator)?;
        let adam = AdamState::new(config.adam(), &params);
        Ok(Self {
            config,
            generator,
            model,
            params,
            adam,
            iteration: 0,
            stream,
        })
    }

    /// Rebuilds a trainer from saved state. Parameter names and shapes must
    /// match what `config` would create.
    pub fn resume(
        config: TrainConfig,
        generator: TaskGenerator,
        params: ParamStore,
        adam: AdamState,
        iteration: usize,
    ) -> Result<Self> {
        let mut trainer = Self::new(config, generator)?;
        trainer.params.assign_from(&params)?;
        if adam.first_moments.len() != params.len() || adam.second_moments.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer state has {} moment slots for {} parameters",
                adam.first_moments.len(),
                params.len()
            )));
        }
        for (i, t) in trainer.params.tensors().iter().enumerate() {
            if adam.first_moments[i].shape() != t.shape() || adam.second_moments[i].shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "resume",
                    left: t.shape().to_vec(),
                    right: adam.first_moments[i].shape().to_vec(),
                });
            }
        }
        trainer.adam = adam;
        trainer.iteration = iteration;
        Ok(trainer)
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    /// The episodes and frequency noise of meta-batch `iteration`.
    pub fn batch(&self, iteration: usize) -> (Vec<Task>, Vec<BasisNoise>) {
        let tasks = self.stream.batch(iteration);
        let noises = (0..tasks.len())
            .map(|e| {
                let mut rng = rng_for(
                    self.config.seeds.sampling,
                    &[stream::TRAIN_NOISE, iteration as u64, e as u64],
                );
                BasisNoise::draw(self.config.bases, self.config.feature_dim, &mut rng)
            })
            .collect();
        (tasks, noises)
    }

    /// Runs one meta-batch and applies one Adam step on `−Σ ELBO`.
    pub fn step(&mut self) -> Result<IterationRecord> {
        let iteration = self.iteration;
        let at = |e: Error| Error::AtIteration {
            iteration,
            source: Box::new(e),
        };
        let (tasks, noises) = self.batch(iteration);
        let objective = self.config.objective();
        let mut g = Graph::new();
        let (loss, episodes) = self
            .model
            .negative_elbo(&mut g, &self.params, &tasks, &noises, &objective)
            .map_err(at)?;
        if !g.value(loss).item().is_finite() {
            return Err(at(Error::NonFinite("loss".into())));
        }
        let grads = g.backward(loss).map_err(at)?.for_params(&self.params);
        self.adam.step(&mut self.params, &grads).map_err(at)?;

        let n = episodes.len() as f64;
        let mean = |f: &dyn Fn(&crate::model::EpisodeNodes) -> f64| episodes.iter().map(f).sum::<f64>() / n;
        let record = IterationRecord {
            iteration,
            elbo: mean(&|e| g.value(e.elbo).item()),
            log_lik: mean(&|e| g.value(e.log_lik).item()),
            kl: mean(&|e| g.value(e.kl).item()),
        };
        self.iteration += 1;
        Ok(record)
    }
}

/// Trains for `config.iterations` meta-batches, calling `on_iteration` after
/// every step. Returns the trainer and the full per-iteration history.
pub fn meta_train<F>(config: TrainConfig, generator: TaskGenerator, mut on_iteration: F) -> Result<(Trainer, Vec<IterationRecord>)>
where
    F: FnMut(&Trainer, &IterationRecord) -> Result<()>,
{
    let mut trainer = Trainer::new(config, generator)?;
    let mut history = Vec::with_capacity(config.iterations);
    while !trainer.is_finished() {
        let record = trainer.step()?;
        on_iteration(&trainer, &record)?;
        history.push(record);
    }
    Ok((trainer, history))
}

/// How predictions are formed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// One reparameterized draw from the posterior per task.
    Sampled,
    /// `ω = μ` (zero noise).
    Mean,
    /// Untrained fixed-prior random features on raw inputs.
    Baseline,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Sampled => "sampled",
            EvalMode::Mean => "mean",
            EvalMode::Baseline => "baseline",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sampled" => Ok(EvalMode::Sampled),
            "mean" => Ok(EvalMode::Mean),
            "baseline" => Ok(EvalMode::Baseline),
            other => Err(Error::InvalidArgument(format!(
                "unknown eval mode {other:?} (expected sampled, mean or baseline)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub bases: usize,
    pub lambda: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub metric_mean: f64,
    pub metric_std: f64,
    pub episodes: usize,
    pub mode: EvalMode,
    pub per_task: Vec<f64>,
}

/// Query MSE for regression, accuracy for classification.
pub fn task_metric(task: &Task, predictions: &Tensor) -> Result<f64> {
    if predictions.shape() != task.query_y.shape() {
        return Err(Error::ShapeMismatch {
            op: "task_metric",
            left: predictions.shape().to_vec(),
            right: task.query_y.shape().to_vec(),
        });
    }
    if task.is_classification() {
        let correct = task
            .query_labels
            .iter()
            .enumerate()
            .filter(|&(r, &label)| {
                let row = predictions.row_slice(r);
                let best = (0..row.len())
                    .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                    .expect("at least one class");
                best == label
            })
            .count();
        Ok(correct as f64 / task.query_len() as f64)
    } else {
        let sse: f64 = predictions
            .data()
            .iter()
            .zip(task.query_y.data())
            .map(|(p, y)| (p - y) * (p - y))
            .sum();
        Ok(sse / predictions.numel() as f64)
    }
}

/// Predictions at `points` for eval task number `index`. The noise draw
/// depends only on `(settings.seed, index)`.
pub fn predict_at(
    model: &MetaKernelModel,
    params: &ParamStore,
    task: &Task,
    index: usize,
    points: &Tensor,
    settings: &EvalSettings,
) -> Result<Tensor> {
    let mut rng = rng_for(settings.seed, &[stream::EVAL_NOISE, index as u64]);
    match settings.mode {
        EvalMode::Baseline => {
            let noise = BasisNoise::draw(settings.bases, task.input_dim(), &mut rng);
            let baseline = FixedPriorRff {
                bases: settings.bases,
                lambda: settings.lambda,
            };
            baseline.predict(&task.support_x, &task.support_y, points, &noise)
        }
        EvalMode::Sampled | EvalMode::Mean => {
            let mut noise = BasisNoise::draw(settings.bases, model.config.feature_dim, &mut rng);
            if settings.mode == EvalMode::Mean {
                noise = noise.without_eps();
            }
            model.predict(params, task, points, &noise, settings.lambda)
        }
    }
}

/// Mean and sample standard deviation of the per-task metric.
pub fn evaluate(model: &MetaKernelModel, params: &ParamStore, tasks: &[Task], settings: &EvalSettings) -> Result<EvalMetrics> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let per_task: Vec<f64> = tasks
        .iter()
        .enumerate()
        .map(|(i, t)| task_metric(t, &predict_at(model, params, t, i, &t.query_x, settings)?))
        .collect::<Result<_>>()?;
    let (mean, std) = mean_std(&per_task);
    Ok(EvalMetrics {
        metric_mean: mean,
        metric_std: std,
        episodes: tasks.len(),
        mode: settings.mode,
        per_task,
    })
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{eval_tasks, ClusterTaskSpec, SineTaskSpec};

    fn tiny() -> TrainConfig {
        TrainConfig {
            iterations: 3,
            episodes_per_iteration: 2,
            bases: 8,
            feature_dim: 6,
            hidden: 5,
            seeds: Seeds {
                tasks: 1,
                init: 2,
                sampling: 3,
            },
            ..Default::default()
        }
    }

    fn sine() -> TaskGenerator {
        TaskGenerator::Sine {
            spec: SineTaskSpec::default(),
            shots: 5,
            queries: 10,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let config = TrainConfig { lr: 0.0, ..tiny() };
        let start = Trainer::new(config, sine()).unwrap().params;
        let (trainer, history) = meta_train(config, sine(), |_, _| Ok(())).unwrap();
        assert_eq!(history.len(), 3);
        assert_eq!(trainer.params.tensors(), start.tensors());
    }

    #[test]
    fn one_iteration_is_one_adam_step() {
        let config = TrainConfig {
            iterations: 1,
            episodes_per_iteration: 1,
            ..tiny()
        };
        let (trainer, history) = meta_train(config, sine(), |_, _| Ok(())).unwrap();
        assert_eq!(trainer.adam.step, 1);
        assert_eq!(history[0].iteration, 0);
        assert!(trainer.is_finished());
    }

    #[test]
    fn runs_are_reproducible() {
        let a = meta_train(tiny(), sine(), |_, _| Ok(())).unwrap();
        let b = meta_train(tiny(), sine(), |_, _| Ok(())).unwrap();
        assert_eq!(a.1, b.1);
        assert_eq!(a.0.params.tensors(), b.0.params.tensors());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let mut straight = Trainer::new(tiny(), sine()).unwrap();
        straight.step().unwrap();
        let snapshot = (straight.params.clone(), straight.adam.clone(), straight.iteration);
        let expected = straight.step().unwrap();
        let mut resumed = Trainer::resume(tiny(), sine(), snapshot.0, snapshot.1, snapshot.2).unwrap();
        assert_eq!(resumed.step().unwrap(), expected);
        assert_eq!(resumed.params.tensors(), straight.params.tensors());
    }

    #[test]
    fn non_finite_reports_iteration() {
        let mut trainer = Trainer::new(tiny(), sine()).unwrap();
        trainer.step().unwrap();
        for t in trainer.params.tensors_mut() {
            *t = t.map(|_| f64::NAN);
        }
        match trainer.step() {
            Err(Error::AtIteration { iteration, .. }) => assert_eq!(iteration, 1),
            other => panic!("expected failure at iteration 1, got {other:?}"),
        }
    }

    #[test]
    fn metric_of_exact_predictions() {
        let tasks = eval_tasks(&sine(), 4, 9).unwrap();
        for t in &tasks {
            assert_eq!(task_metric(t, &t.query_y).unwrap(), 0.0);
        }
        let cluster = TaskGenerator::Cluster {
            spec: ClusterTaskSpec::default(),
            queries_per_class: 5,
        };
        for t in eval_tasks(&cluster, 3, 2).unwrap() {
            assert_eq!(task_metric(&t, &t.query_y).unwrap(), 1.0);
        }
    }

    #[test]
    fn zero_amplitude_tasks_zero_predictor() {
        let spec = SineTaskSpec::default();
        let flat = crate::tasks::SineFunction {
            amplitude: 0.0,
            phase: 1.0,
        };
        for seed in 0..3 {
            let t = spec.task_for(flat, 3, 4, &mut rng_for(seed, &[]));
            assert_eq!(task_metric(&t, &Tensor::zeros_like(&t.query_y)).unwrap(), 0.0);
        }
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_empty() {
        let trainer = Trainer::new(tiny(), sine()).unwrap();
        let tasks = eval_tasks(&sine(), 5, 4).unwrap();
        for mode in [EvalMode::Sampled, EvalMode::Mean, EvalMode::Baseline] {
            let settings = EvalSettings {
                mode,
                bases: 16,
                lambda: 1e-3,
                seed: 7,
            };
            let a = evaluate(&trainer.model, &trainer.params, &tasks, &settings).unwrap();
            let b = evaluate(&trainer.model, &trainer.params, &tasks, &settings).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.episodes, 5);
            assert!(evaluate(&trainer.model, &trainer.params, &[], &settings).is_err());
        }
    }

    #[test]
    fn eval_mode_round_trips_through_strings() {
        for mode in [EvalMode::Sampled, EvalMode::Mean, EvalMode::Baseline] {
            assert_eq!(mode.to_string().parse::<EvalMode>().unwrap(), mode);
        }
        assert!("posterior".parse::<EvalMode>().is_err());
    }
}
