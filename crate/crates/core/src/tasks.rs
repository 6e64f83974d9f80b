//! Deterministic few-shot episode generators.
//!
//! Regression episodes are sinusoids `y = A·sin(x + p)`; classification
//! episodes are Gaussian clusters with one-hot targets. Both are pure
//! functions of their spec and a seed.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Episodes per optimizer step for regression meta-training.
pub const DEFAULT_EPISODES_PER_ITERATION: usize = 6;
/// Optimizer steps for a full regression meta-training run.
pub const DEFAULT_REGRESSION_ITERATIONS: usize = 20_000;
/// Query examples drawn per class.
pub const DEFAULT_QUERIES_PER_CLASS: usize = 15;

/// Where a task came from; kept so plots can show the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskSource {
    Sine(SineFunction),
    Cluster { centers: Tensor },
}

/// One episode: a labelled support set and a query set from the same task.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub support_x: Tensor,
    pub support_y: Tensor,
    pub query_x: Tensor,
    pub query_y: Tensor,
    /// Number of classes `C`; 1 for regression.
    pub ways: usize,
    /// Examples per class in the support set `k`.
    pub shots: usize,
    /// Class index of each support row (all zero for regression).
    pub support_labels: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub source: TaskSource,
}

impl Task {
    pub fn is_classification(&self) -> bool {
        matches!(self.source, TaskSource::Cluster { .. })
    }

    pub fn support_len(&self) -> usize {
        self.support_x.rows()
    }

    pub fn query_len(&self) -> usize {
        self.query_x.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.support_x.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.support_y.cols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SineFunction {
    pub amplitude: f64,
    pub phase: f64,
}

impl SineFunction {
    pub fn value(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineTaskSpec {
    pub amplitude: [f64; 2],
    pub phase: [f64; 2],
    pub input_range: [f64; 2],
    /// Standard deviation of additive observation noise.
    pub noise: f64,
}

impl Default for SineTaskSpec {
    fn default() -> Self {
        Self {
            amplitude: [0.1, 5.0],
            phase: [0.0, PI],
            input_range: [-5.0, 5.0],
            noise: 0.0,
        }
    }
}

impl SineTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = |name: &str, r: [f64; 2]| {
            if r.iter().all(|v| v.is_finite()) && r[0] < r[1] {
                Ok(())
            } else {
                Err(Error::InvalidSpec(format!("{name} range {r:?} is degenerate")))
            }
        };
        ordered("amplitude", self.amplitude)?;
        ordered("phase", self.phase)?;
        ordered("input", self.input_range)?;
        if self.amplitude[0] <= 0.0 {
            return Err(Error::InvalidSpec("amplitude lower bound must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::InvalidSpec("noise must be non-negative".into()));
        }
        Ok(())
    }

    /// Builds a task for a fixed function, drawing inputs and noise from `rng`.
    pub fn task_for(&self, function: SineFunction, shots: usize, queries: usize, rng: &mut Rng) -> Task {
        let [lo, hi] = self.input_range;
        let mut draw = |n: usize| {
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            let ys: Vec<f64> = xs
                .iter()
                .map(|&x| {
                    let eps: f64 = StandardNormal.sample(rng);
                    function.value(x) + self.noise * eps
                })
                .collect();
            (Tensor::column(&xs), Tensor::column(&ys))
        };
        let (support_x, support_y) = draw(shots);
        let (query_x, query_y) = draw(queries);
        Task {
            support_x,
            support_y,
            query_x,
            query_y,
            ways: 1,
            shots,
            support_labels: vec![0; shots],
            query_labels: vec![0; queries],
            source: TaskSource::Sine(function),
        }
    }
}

/// Draws amplitude and phase uniformly, then `shots` support and `queries`
/// query points uniformly over the input range.
pub fn sample_sine_task(spec: &SineTaskSpec, shots: usize, queries: usize, seed: u64) -> Result<Task> {
    spec.validate()?;
    if shots == 0 || queries == 0 {
        return Err(Error::InvalidSpec("shots and queries must be positive".into()));
    }
    let mut rng = rng::rng_for(seed, &[]);
    let function = SineFunction {
        amplitude: rng.random_range(spec.amplitude[0]..spec.amplitude[1]),
        phase: rng.random_range(spec.phase[0]..spec.phase[1]),
    };
    Ok(spec.task_for(function, shots, queries, &mut rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterTaskSpec {
    pub input_dim: usize,
    /// Standard deviation of the class centers around the origin.
    pub center_scale: f64,
    /// Standard deviation of samples around their class center.
    pub spread: f64,
    pub ways: usize,
    pub shots: usize,
}

impl Default for ClusterTaskSpec {
    fn default() -> Self {
        Self {
            input_dim: 2,
            center_scale: 3.0,
            spread: 0.5,
            ways: 2,
            shots: 1,
        }
    }
}

impl ClusterTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.shots == 0 {
            return Err(Error::InvalidSpec("input_dim and shots must be positive".into()));
        }
        if self.ways < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 ways, got {}", self.ways)));
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return Err(Error::InvalidSpec("spread must be positive".into()));
        }
        if !(self.center_scale > 0.0) || !self.center_scale.is_finite() {
            return Err(Error::InvalidSpec("center_scale must be positive".into()));
        }
        Ok(())
    }
}

/// `C` Gaussian class centers with `k` support and `queries_per_class` query
/// draws each. Rows are grouped by class, classes in index order.
pub fn sample_cluster_task(spec: &ClusterTaskSpec, queries_per_class: usize, seed: u64) -> Result<Task> {
    spec.validate()?;
    if queries_per_class == 0 {
        return Err(Error::InvalidSpec("queries_per_class must be positive".into()));
    }
    let mut rng = rng::rng_for(seed, &[]);
    let (c, d) = (spec.ways, spec.input_dim);
    let centers = Tensor::from_fn(c, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        spec.center_scale * z
    });
    let mut draw = |per_class: usize| {
        let mut xs = Vec::with_capacity(c * per_class * d);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for _ in 0..per_class {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    xs.push(centers.get(class, j) + spec.spread * z);
                }
                labels.push(class);
            }
        }
        let ys = one_hot(&labels, c);
        (Tensor::matrix(c * per_class, d, xs), ys, labels)
    };
    let (support_x, support_y, support_labels) = draw(spec.shots);
    let (query_x, query_y, query_labels) = draw(queries_per_class);
    Ok(Task {
        support_x,
        support_y,
        query_x,
        query_y,
        ways: c,
        shots: spec.shots,
        support_labels,
        query_labels,
        source: TaskSource::Cluster { centers },
    })
}

pub fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    Tensor::from_fn(labels.len(), classes, |i, j| if labels[i] == j { 1.0 } else { 0.0 })
}

/// A task family together with its episode sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskGenerator {
    Sine {
        spec: SineTaskSpec,
        shots: usize,
        queries: usize,
    },
    Cluster {
        spec: ClusterTaskSpec,
        queries_per_class: usize,
    },
}

impl TaskGenerator {
    pub fn sample(&self, seed: u64) -> Result<Task> {
        match self {
            TaskGenerator::Sine { spec, shots, queries } => sample_sine_task(spec, *shots, *queries, seed),
            TaskGenerator::Cluster {
                spec,
                queries_per_class,
            } => sample_cluster_task(spec, *queries_per_class, seed),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskGenerator::Sine { spec, shots, queries } => {
                spec.validate()?;
                if *shots == 0 || *queries == 0 {
                    return Err(Error::InvalidSpec("shots and queries must be positive".into()));
                }
                Ok(())
            }
            TaskGenerator::Cluster {
                spec,
                queries_per_class,
            } => {
                spec.validate()?;
                if *queries_per_class == 0 {
                    return Err(Error::InvalidSpec("queries_per_class must be positive".into()));
                }
                Ok(())
            }
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            TaskGenerator::Sine { .. } => 1,
            TaskGenerator::Cluster { spec, .. } => spec.input_dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            TaskGenerator::Sine { .. } => 1,
            TaskGenerator::Cluster { spec, .. } => spec.ways,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, TaskGenerator::Cluster { .. })
    }
}

/// Reproducible sequence of `iterations × episodes_per_iteration` tasks.
///
/// Each task is seeded from `(seed, iteration, episode)`, so any meta-batch
/// can be regenerated directly with [`EpisodeStream::batch`].
#[derive(Debug, Clone)]
pub struct EpisodeStream {
    generator: TaskGenerator,
    episodes_per_iteration: usize,
    iterations: usize,
    seed: u64,
    cursor: usize,
}

pub fn episode_stream(
    generator: TaskGenerator,
    episodes_per_iteration: usize,
    iterations: usize,
    seed: u64,
) -> Result<EpisodeStream> {
    if episodes_per_iteration == 0 || iterations == 0 {
        return Err(Error::InvalidArgument(
            "episodes_per_iteration and iterations must be at least 1".into(),
        ));
    }
    generator.validate()?;
    Ok(EpisodeStream {
        generator,
        episodes_per_iteration,
        iterations,
        seed,
        cursor: 0,
    })
}

impl EpisodeStream {
    pub fn total(&self) -> usize {
        self.iterations * self.episodes_per_iteration
    }

    pub fn episodes_per_iteration(&self) -> usize {
        self.episodes_per_iteration
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn task(&self, iteration: usize, episode: usize) -> Task {
        let seed = rng::derive_seed(
            self.seed,
            &[rng::stream::TRAIN_TASKS, iteration as u64, episode as u64],
        );
        self.generator
            .sample(seed)
            .expect("generator validated at construction")
    }

    /// All episodes of one meta-batch, in order.
    pub fn batch(&self, iteration: usize) -> Vec<Task> {
        (0..self.episodes_per_iteration)
            .map(|e| self.task(iteration, e))
            .collect()
    }
}

impl Iterator for EpisodeStream {
    type Item = Task;

    fn next(&mut self) -> Option<Task> {
        if self.cursor >= self.total() {
            return None;
        }
        let (it, ep) = (
            self.cursor / self.episodes_per_iteration,
            self.cursor % self.episodes_per_iteration,
        );
        self.cursor += 1;
        Some(self.task(it, ep))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total() - self.cursor;
        (left, Some(left))
    }
}

impl ExactSizeIterator for EpisodeStream {}

/// Held-out evaluation tasks, drawn from a stream disjoint from training.
pub fn eval_tasks(generator: &TaskGenerator, count: usize, seed: u64) -> Result<Vec<Task>> {
    (0..count)
        .map(|i| generator.sample(rng::derive_seed(seed, &[rng::stream::EVAL_TASKS, i as u64])))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine_gen(shots: usize) -> TaskGenerator {
        TaskGenerator::Sine {
            spec: SineTaskSpec::default(),
            shots,
            queries: DEFAULT_QUERIES_PER_CLASS,
        }
    }

    #[test]
    fn sine_identity_point() {
        let f = SineFunction {
            amplitude: 1.0,
            phase: 0.0,
        };
        assert_eq!(f.value(PI / 2.0), 1.0);
        let spec = SineTaskSpec::default();
        let mut rng = rng::rng_for(0, &[]);
        let task = spec.task_for(f, 5, 5, &mut rng);
        for i in 0..5 {
            assert_eq!(task.support_y.get(i, 0), task.support_x.get(i, 0).sin());
        }
    }

    #[test]
    fn same_seed_same_task() {
        let spec = SineTaskSpec::default();
        let a = sample_sine_task(&spec, 5, 10, 42).unwrap();
        let b = sample_sine_task(&spec, 5, 10, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_sine_task(&spec, 5, 10, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sine_values_stay_in_range() {
        let spec = SineTaskSpec::default();
        for seed in 0..50 {
            let t = sample_sine_task(&spec, 10, 15, seed).unwrap();
            let TaskSource::Sine(f) = t.source else { panic!() };
            assert!((0.1..5.0).contains(&f.amplitude));
            assert!((0.0..PI).contains(&f.phase));
            for &x in t.support_x.data().iter().chain(t.query_x.data()) {
                assert!((-5.0..5.0).contains(&x));
            }
            assert_eq!(t.support_len(), 10);
            assert_eq!(t.query_len(), 15);
        }
    }

    #[test]
    fn degenerate_sine_specs_rejected() {
        let mut spec = SineTaskSpec::default();
        spec.amplitude = [1.0, 1.0];
        assert!(sample_sine_task(&spec, 5, 5, 0).is_err());
        let mut spec = SineTaskSpec::default();
        spec.amplitude = [0.0, 1.0];
        assert!(spec.validate().is_err());
        let mut spec = SineTaskSpec::default();
        spec.noise = -0.1;
        assert!(spec.validate().is_err());
        let mut spec = SineTaskSpec::default();
        spec.input_range = [2.0, -2.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cluster_limit_spread_collapses_to_centers() {
        let spec = ClusterTaskSpec {
            input_dim: 3,
            center_scale: 2.0,
            spread: 1e-14,
            ways: 4,
            shots: 2,
        };
        let t = sample_cluster_task(&spec, 3, 9).unwrap();
        let TaskSource::Cluster { centers } = &t.source else { panic!() };
        for (i, &label) in t.support_labels.iter().enumerate() {
            for j in 0..3 {
                assert!((t.support_x.get(i, j) - centers.get(label, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cluster_one_hot_and_balanced() {
        let spec = ClusterTaskSpec {
            ways: 5,
            shots: 3,
            ..Default::default()
        };
        for seed in 0..20 {
            let t = sample_cluster_task(&spec, 4, seed).unwrap();
            assert_eq!(t.support_len(), spec.ways * spec.shots);
            for r in 0..t.support_len() {
                assert_eq!(t.support_y.row_slice(r).iter().sum::<f64>(), 1.0);
            }
            for class in 0..spec.ways {
                let count = (0..t.support_len())
                    .filter(|&r| t.support_y.get(r, class) == 1.0)
                    .count();
                assert_eq!(count, spec.shots);
            }
            assert_eq!(t.query_len(), 5 * 4);
        }
    }

    #[test]
    fn cluster_degenerate_rejected() {
        let bad = [
            ClusterTaskSpec { ways: 1, ..Default::default() },
            ClusterTaskSpec { spread: 0.0, ..Default::default() },
            ClusterTaskSpec { input_dim: 0, ..Default::default() },
        ];
        for spec in bad {
            assert!(sample_cluster_task(&spec, 3, 0).is_err());
        }
    }

    #[test]
    fn stream_sizes() {
        let s = episode_stream(sine_gen(5), DEFAULT_EPISODES_PER_ITERATION, DEFAULT_REGRESSION_ITERATIONS, 1).unwrap();
        assert_eq!(s.len(), 120_000);
        let one: Vec<Task> = episode_stream(sine_gen(5), 1, 1, 1).unwrap().collect();
        assert_eq!(one.len(), 1);
        assert!(episode_stream(sine_gen(5), 0, 1, 1).is_err());
    }

    #[test]
    fn streams_reproduce_and_match_batches() {
        let a: Vec<Task> = episode_stream(sine_gen(3), 3, 4, 77).unwrap().collect();
        let b: Vec<Task> = episode_stream(sine_gen(3), 3, 4, 77).unwrap().collect();
        assert_eq!(a, b);
        let s = episode_stream(sine_gen(3), 3, 4, 77).unwrap();
        assert_eq!(s.batch(2), a[6..9].to_vec());
        let c: Vec<Task> = episode_stream(sine_gen(3), 3, 4, 78).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn eval_tasks_differ_from_training() {
        let g = sine_gen(5);
        let eval = eval_tasks(&g, 4, 11).unwrap();
        let train: Vec<Task> = episode_stream(g, 4, 1, 11).unwrap().collect();
        assert!(eval.iter().all(|e| !train.contains(e)));
    }
}
