use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, ensure, Context};
use serde::{Deserialize, Serialize};
use varkernel::rng::{derive_seed, stream};
use varkernel::tasks::{eval_tasks, Task, TaskGenerator, TaskSource};
use varkernel::train::{predict_at, EvalMetrics};
use varkernel::{evaluate, EvalMode, EvalSettings, IterationRecord, Tensor, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub elbo: f64,
    pub log_lik: f64,
    pub kl: f64,
    pub eval_metric: Option<f64>,
}

/// Appends rows to `metrics.csv`, flushing after each one.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
}

impl MetricsWriter {
    /// `append = false` truncates and writes the header; `append = true`
    /// continues an existing file (writing the header only if it is empty).
    pub fn open(path: &Path, append: bool) -> anyhow::Result<Self> {
        let file = if append {
            OpenOptions::new().create(true).append(true).open(path)
        } else {
            File::create(path)
        }
        .with_context(|| format!("opening {}", path.display()))?;
        let empty = file.metadata()?.len() == 0;
        let inner = csv::WriterBuilder::new().has_headers(empty).from_writer(file);
        Ok(Self { inner })
    }

    pub fn write(&mut self, row: &MetricsRow) -> anyhow::Result<()> {
        self.inner.serialize(row)?;
        self.inner.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(reader.deserialize().collect::<Result<_, _>>()?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric_mean: f64,
    pub metric_std: f64,
    pub episodes: usize,
    pub mode: EvalMode,
    /// `mse` or `accuracy`.
    pub metric: String,
}

impl EvalReport {
    fn new(metrics: &EvalMetrics, generator: &TaskGenerator) -> Self {
        Self {
            metric_mean: metrics.metric_mean,
            metric_std: metrics.metric_std,
            episodes: metrics.episodes,
            mode: metrics.mode,
            metric: metric_name(generator).into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub final_eval: EvalReport,
    pub iterations_completed: usize,
    pub wall_time_secs: f64,
    pub config_hash: String,
    pub config: RunConfig,
}

fn metric_name(generator: &TaskGenerator) -> &'static str {
    if generator.is_classification() {
        "accuracy"
    } else {
        "mse"
    }
}

fn settings(config: &RunConfig, mode: EvalMode) -> EvalSettings {
    EvalSettings {
        mode,
        bases: config.train.bases,
        lambda: config.train.lambda,
        seed: config.seeds.sampling,
    }
}

/// Tasks scored for the `eval_metric` column; disjoint from the final eval set.
pub fn monitor_tasks(config: &RunConfig) -> anyhow::Result<Vec<Task>> {
    let seed = derive_seed(config.seeds.tasks, &[stream::MONITOR_TASKS]);
    Ok(eval_tasks(&config.generator(), config.eval.monitor_episodes, seed)?)
}

pub fn final_eval_tasks(config: &RunConfig, generator: &TaskGenerator, episodes: usize) -> anyhow::Result<Vec<Task>> {
    Ok(eval_tasks(generator, episodes, config.seeds.tasks)?)
}

/// Runs (or resumes) training and writes metrics, checkpoints and the summary
/// into `config.output_dir`.
pub fn train(config: &RunConfig, resume: Option<&Path>) -> anyhow::Result<Summary> {
    let started = Instant::now();
    let (mut trainer, append) = match resume {
        Some(path) => {
            let mut ckpt = Checkpoint::load(path)?;
            ckpt.check_config(config)?;
            ckpt.config.train.iterations = config.train.iterations;
            (ckpt.restore()?, true)
        }
        None => (Trainer::new(config.train_config(), config.generator())?, false),
    };
    let out = &config.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut metrics = MetricsWriter::open(&out.join(METRICS_FILE), append)?;
    let monitor = monitor_tasks(config)?;
    let monitor_settings = settings(config, config.eval.mode);
    let ckpt_path = out.join(CHECKPOINT_FILE);

    while !trainer.is_finished() {
        let IterationRecord {
            iteration,
            elbo,
            log_lik,
            kl,
        } = trainer.step()?;
        let done = iteration + 1;
        if done % config.logging.log_every == 0 || trainer.is_finished() {
            let eval_metric = if monitor.is_empty() {
                None
            } else {
                Some(evaluate(&trainer.model, &trainer.params, &monitor, &monitor_settings)?.metric_mean)
            };
            metrics.write(&MetricsRow {
                iteration: done,
                elbo,
                log_lik,
                kl,
                eval_metric,
            })?;
            eprintln!(
                "iter {done:>6}  elbo {elbo:>12.4}  log_lik {log_lik:>12.4}  kl {kl:>9.4}  eval {}",
                eval_metric.map_or("-".to_string(), |m| format!("{m:.5}"))
            );
        }
        let every = config.logging.checkpoint_every;
        if every > 0 && done % every == 0 && !trainer.is_finished() {
            Checkpoint::capture(config, &trainer).save(&ckpt_path)?;
        }
    }
    Checkpoint::capture(config, &trainer).save(&ckpt_path)?;

    let generator = config.generator();
    let tasks = final_eval_tasks(config, &generator, config.eval.episodes)?;
    let final_eval = EvalReport::new(
        &evaluate(&trainer.model, &trainer.params, &tasks, &settings(config, config.eval.mode))?,
        &generator,
    );
    let summary = Summary {
        final_eval,
        iterations_completed: trainer.iteration,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config_hash: config.hash(),
        config: config.clone(),
    };
    fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Options shared by `eval` and `export-curves`.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub checkpoint: Option<PathBuf>,
    pub config: Option<RunConfig>,
    pub episodes: Option<usize>,
    pub mode: Option<EvalMode>,
    pub shots: Option<usize>,
    pub seed_overrides: Vec<String>,
}

struct Loaded {
    config: RunConfig,
    generator: TaskGenerator,
    trainer: Trainer,
}

fn load_for_eval(opts: &EvalOptions, mode: EvalMode) -> anyhow::Result<Loaded> {
    let (mut config, trainer) = match (&opts.checkpoint, &opts.config) {
        (Some(path), given) => {
            let ckpt = Checkpoint::load(path)?;
            if let Some(given) = given {
                ckpt.check_config(given)?;
            }
            (ckpt.config.clone(), ckpt.restore()?)
        }
        (None, Some(config)) if mode == EvalMode::Baseline => {
            (config.clone(), Trainer::new(config.train_config(), config.generator())?)
        }
        (None, _) => bail!("a checkpoint is required (only baseline mode runs from a config alone)"),
    };
    config.apply_seed_overrides(&opts.seed_overrides)?;
    let mut generator = config.generator();
    if let Some(k) = opts.shots {
        match &mut generator {
            TaskGenerator::Sine { shots, .. } => *shots = k,
            TaskGenerator::Cluster { spec, .. } => spec.shots = k,
        }
        generator.validate()?;
    }
    Ok(Loaded {
        config,
        generator,
        trainer,
    })
}

pub fn eval(opts: &EvalOptions) -> anyhow::Result<EvalReport> {
    let mode = opts.mode.unwrap_or(EvalMode::Sampled);
    let loaded = load_for_eval(opts, mode)?;
    let episodes = opts.episodes.unwrap_or(loaded.config.eval.episodes);
    ensure!(episodes > 0, "episodes must be at least 1");
    let tasks = final_eval_tasks(&loaded.config, &loaded.generator, episodes)?;
    let metrics = evaluate(
        &loaded.trainer.model,
        &loaded.trainer.params,
        &tasks,
        &settings(&loaded.config, mode),
    )?;
    Ok(EvalReport::new(&metrics, &loaded.generator))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub x: f64,
    pub y_true: f64,
    pub y_pred: f64,
    pub is_support: u8,
}

/// Evenly spaced points over `[lo, hi]`; a single point sits at the midpoint.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        n => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Dense-grid predictions for eval task `task_id` followed by the support
/// points, using the same noise draw `eval` uses for that task.
pub fn export_curves(opts: &EvalOptions, task_id: usize, grid_points: usize) -> anyhow::Result<Vec<CurveRow>> {
    ensure!(grid_points > 0, "grid must have at least one point");
    let mode = opts.mode.unwrap_or(EvalMode::Sampled);
    let loaded = load_for_eval(opts, mode)?;
    let available = opts.episodes.unwrap_or(loaded.config.eval.episodes);
    ensure!(
        task_id < available,
        "unknown task id {task_id}: the eval set has {available} tasks (0..{available})"
    );
    let TaskGenerator::Sine { spec, .. } = loaded.generator else {
        bail!("curves can only be exported for 1-D regression tasks");
    };
    let task = final_eval_tasks(&loaded.config, &loaded.generator, task_id + 1)?.swap_remove(task_id);
    let TaskSource::Sine(function) = task.source else {
        unreachable!("sine generator yields sine tasks");
    };
    let s = settings(&loaded.config, mode);
    let xs = grid(spec.input_range[0], spec.input_range[1], grid_points);
    let points = Tensor::column(&xs);
    let model = &loaded.trainer.model;
    let params = &loaded.trainer.params;
    let on_grid = predict_at(model, params, &task, task_id, &points, &s)?;
    let on_support = predict_at(model, params, &task, task_id, &task.support_x, &s)?;

    let mut rows: Vec<CurveRow> = xs
        .iter()
        .zip(on_grid.data())
        .map(|(&x, &y_pred)| CurveRow {
            x,
            y_true: function.value(x),
            y_pred,
            is_support: 0,
        })
        .collect();
    for i in 0..task.support_len() {
        rows.push(CurveRow {
            x: task.support_x.get(i, 0),
            y_true: task.support_y.get(i, 0),
            y_pred: on_support.get(i, 0),
            is_support: 1,
        });
    }
    Ok(rows)
}

pub fn write_curves<W: Write>(rows: &[CurveRow], out: W) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
