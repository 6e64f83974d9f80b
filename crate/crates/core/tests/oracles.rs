//! Independent numeric oracles: dense linear algebra, closed-form kernels and
//! Monte Carlo estimates.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use varkernel::autodiff::Graph;
use varkernel::nn::{attention_weights, cross_attention};
use varkernel::rff::{kernel_matrix, reparameterize_sample, rff_feature_map, solve_krr, KernelRidgeSolution};
use varkernel::rng::rng_for;
use varkernel::tasks::{sample_cluster_task, sample_sine_task, ClusterTaskSpec, SineTaskSpec, TaskSource};
use varkernel::{gaussian_kl, BasisNoise, FrequencyPosterior, Tensor};

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn random(rows: usize, cols: usize, rng: &mut varkernel::rng::Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn krr_matches_dense_inverse() {
    let mut rng = rng_for(101, &[]);
    for _ in 0..50 {
        let ns = rng.random_range(1..=20);
        let nq = rng.random_range(1..=10);
        let bases = rng.random_range(4..=40);
        let m = rng.random_range(1..=3);
        let lambda = 10f64.powf(rng.random_range(-3.0..0.0));
        let zs = random(ns, bases, &mut rng);
        let zq = random(nq, bases, &mut rng);
        let y = random(ns, m, &mut rng);

        let sol = KernelRidgeSolution::fit(&zs, &y, lambda).unwrap();
        let pred = sol.predict(&zq).unwrap();

        let (zs_m, zq_m, y_m) = (to_dmatrix(&zs), to_dmatrix(&zq), to_dmatrix(&y));
        let a = &zs_m * zs_m.transpose() + DMatrix::identity(ns, ns) * lambda;
        let alpha = a.try_inverse().unwrap() * &y_m;
        let expected = &zq_m * zs_m.transpose() * &alpha;

        let alpha_err = (to_dmatrix(&sol.alpha) - &alpha).abs().max();
        let pred_err = (to_dmatrix(&pred) - expected).abs().max();
        assert!(alpha_err < 1e-8 && pred_err < 1e-8, "alpha {alpha_err:e} pred {pred_err:e}");
    }
}

#[test]
fn kernel_matrix_is_psd() {
    let mut rng = rng_for(7, &[]);
    for _ in 0..20 {
        let n = rng.random_range(1..=15);
        let z = random(n, rng.random_range(1..=30), &mut rng);
        let k = to_dmatrix(&kernel_matrix(&z));
        assert!((&k - k.transpose()).abs().max() < 1e-12);
        let min = SymmetricEigen::new(k).eigenvalues.min();
        assert!(min > -1e-10, "min eigenvalue {min}");
    }
}

#[test]
fn ridge_solve_rejects_bad_input() {
    let k = Tensor::eye(3);
    let y = Tensor::zeros(3, 1);
    assert!(solve_krr(&k, &y, 0.0).is_err());
    assert!(solve_krr(&k, &Tensor::zeros(2, 1), 1e-3).is_err());
    let indefinite = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, -5.0]]).unwrap();
    assert!(solve_krr(&indefinite, &Tensor::zeros(2, 1), 1e-3).is_err());
}

fn rbf_error(bases: usize, seed: u64, pairs: usize, sigma: f64) -> (f64, f64) {
    let d = 5;
    let mut rng = rng_for(seed, &[]);
    let posterior = FrequencyPosterior::new(Tensor::zeros(1, d), Tensor::full(1, d, -2.0 * sigma.ln())).unwrap();
    let bases = reparameterize_sample(&posterior, &BasisNoise::draw(bases, d, &mut rng)).unwrap();
    let (mut worst, mut total) = (0.0f64, 0.0);
    for _ in 0..pairs {
        let x = random(1, d, &mut rng);
        let y = random(1, d, &mut rng);
        let zx = rff_feature_map(&x, &bases).unwrap();
        let zy = rff_feature_map(&y, &bases).unwrap();
        let approx = zx.matmul_nt(&zy).unwrap().item();
        let sq: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum();
        let exact = (-sq / (2.0 * sigma * sigma)).exp();
        worst = worst.max((approx - exact).abs());
        total += (approx - exact).abs();
    }
    (worst, total / pairs as f64)
}

#[test]
fn rff_approximates_rbf_kernel() {
    let (worst, _) = rbf_error(10_000, 5, 100, 1.3);
    assert!(worst < 0.05, "max error {worst}");
}

#[test]
fn rff_error_shrinks_with_more_bases() {
    let mean = |bases| (0..10).map(|s| rbf_error(bases, 200 + s, 20, 1.0).1).sum::<f64>() / 10.0;
    let (small, large) = (mean(100), mean(6400));
    assert!(large < small, "{large} vs {small}");
}

#[test]
fn reparameterized_draws_have_posterior_moments() {
    let mu = Tensor::row(&[0.5, -1.0, 2.0]);
    let log_var = Tensor::row(&[0.0, -1.2, 0.8]);
    let posterior = FrequencyPosterior::new(mu.clone(), log_var.clone()).unwrap();
    let n = 40_000;
    let sample = reparameterize_sample(&posterior, &BasisNoise::draw(n, 3, &mut rng_for(9, &[]))).unwrap();
    for j in 0..3 {
        let col: Vec<f64> = (0..n).map(|i| sample.omega.get(i, j)).collect();
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let true_var = log_var.data()[j].exp();
        let se_mean = (true_var / n as f64).sqrt();
        // Var of the sample variance of a Gaussian is 2σ⁴/(n−1).
        let se_var = true_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - mu.data()[j]).abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - true_var).abs() < 4.0 * se_var, "var {var}");
    }
    assert!(sample.phase.data().iter().all(|&b| (0.0..2.0 * PI).contains(&b)));
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = rng_for(31, &[]);
    let n = 100_000;
    for _ in 0..20 {
        let width = rng.random_range(1..=4);
        let draw = |rng: &mut varkernel::rng::Rng| {
            FrequencyPosterior::new(
                Tensor::from_fn(1, width, |_, _| rng.random_range(-1.0..1.0)),
                Tensor::from_fn(1, width, |_, _| rng.random_range(-1.0..1.0)),
            )
            .unwrap()
        };
        let (q, p) = (draw(&mut rng), draw(&mut rng));
        let analytic = gaussian_kl(&q, &p).unwrap();
        let log_density = |w: &[f64], g: &FrequencyPosterior| -> f64 {
            w.iter()
                .enumerate()
                .map(|(j, &x)| {
                    let lv = g.log_var.data()[j];
                    -0.5 * ((2.0 * PI).ln() + lv + (x - g.mu.data()[j]).powi(2) / lv.exp())
                })
                .sum()
        };
        let mut samples = Vec::with_capacity(n);
        let mut w = vec![0.0; width];
        for _ in 0..n {
            for (j, wj) in w.iter_mut().enumerate() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *wj = q.mu.data()[j] + (0.5 * q.log_var.data()[j]).exp() * e;
            }
            samples.push(log_density(&w, &q) - log_density(&w, &p));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let sd = (samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
        let se = sd / (n as f64).sqrt();
        assert!((mean - analytic).abs() < 3.0 * se.max(1e-12), "MC {mean} ± {se} vs {analytic}");
        assert!(analytic >= 0.0);
    }
}

#[test]
fn attention_matches_brute_force() {
    let mut rng = rng_for(55, &[]);
    for _ in 0..100 {
        let (n, c, d) = (rng.random_range(1..=5), rng.random_range(1..=6), rng.random_range(1..=8));
        let q = random(n, d, &mut rng);
        let k = random(c, d, &mut rng);
        let v = random(c, d, &mut rng);
        let mut g = Graph::new();
        let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let out = cross_attention(&mut g, qn, kn, vn).unwrap();
        let w = attention_weights(&mut g, qn, kn).unwrap();
        for i in 0..n {
            let scores: Vec<f64> = (0..c)
                .map(|j| -(0..d).map(|t| (q.get(i, t) - k.get(j, t)).abs()).sum::<f64>())
                .collect();
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let weights: Vec<f64> = scores.iter().map(|s| (s - top).exp() / z).collect();
            assert!((g.value(w).row_slice(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for t in 0..d {
                let expected: f64 = (0..c).map(|j| weights[j] * v.get(j, t)).sum();
                assert!((g.value(out).get(i, t) - expected).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn attention_ignores_key_value_order() {
    let mut rng = rng_for(56, &[]);
    for _ in 0..20 {
        let (n, c, d) = (3, rng.random_range(2..=6), 4);
        let q = random(n, d, &mut rng);
        let k = random(c, d, &mut rng);
        let v = random(c, d, &mut rng);
        let perm: Vec<usize> = (0..c).rev().collect();
        let pk = Tensor::from_fn(c, d, |i, j| k.get(perm[i], j));
        let pv = Tensor::from_fn(c, d, |i, j| v.get(perm[i], j));
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (qn, kn, vn) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = cross_attention(&mut g, qn, kn, vn).unwrap();
            g.value(o).clone()
        };
        assert!(run(&k, &v).max_abs_diff(&run(&pk, &pv)) < 1e-12);
    }
}

#[test]
fn sine_targets_average_to_zero_over_symmetric_phases() {
    // With phase uniform on [−π, π], E[A sin(x + p)] = 0 at every x.
    let spec = SineTaskSpec {
        phase: [-PI, PI],
        ..Default::default()
    };
    let n = 4000;
    let xs = [-4.0, -1.0, 0.5, 3.0];
    let mut sums = [0.0; 4];
    let mut sq = [0.0; 4];
    for seed in 0..n {
        let task = sample_sine_task(&spec, 1, 1, seed).unwrap();
        let TaskSource::Sine(f) = task.source else { unreachable!() };
        for (i, &x) in xs.iter().enumerate() {
            let y = f.value(x);
            sums[i] += y;
            sq[i] += y * y;
        }
    }
    for i in 0..xs.len() {
        let mean = sums[i] / n as f64;
        let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "x = {}: mean {mean} se {se}", xs[i]);
    }
}

#[test]
fn sine_task_values_follow_function() {
    let task = sample_sine_task(&SineTaskSpec::default(), 10, 20, 3).unwrap();
    let TaskSource::Sine(f) = task.source else { unreachable!() };
    for (x, y) in task.query_x.data().iter().zip(task.query_y.data()) {
        assert_eq!(f.amplitude * (x + f.phase).sin(), *y);
        assert!((-5.0..=5.0).contains(x));
    }
}

#[test]
fn separated_clusters_are_nearest_centroid_separable() {
    let spec = ClusterTaskSpec {
        ways: 3,
        shots: 5,
        spread: 1e-3,
        center_scale: 3.0,
        input_dim: 2,
    };
    let mut min_separation = f64::INFINITY;
    for seed in 0..1000 {
        let task = sample_cluster_task(&spec, 5, seed).unwrap();
        let TaskSource::Cluster { centers } = &task.source else { unreachable!() };
        for a in 0..spec.ways {
            for b in 0..a {
                let dist: f64 = (0..2).map(|t| (centers.get(a, t) - centers.get(b, t)).powi(2)).sum::<f64>().sqrt();
                min_separation = min_separation.min(dist);
            }
        }
        let centroids = Tensor::from_fn(spec.ways, 2, |c, t| {
            let rows: Vec<usize> = (0..task.support_len()).filter(|&i| task.support_labels[i] == c).collect();
            rows.iter().map(|&i| task.support_x.get(i, t)).sum::<f64>() / rows.len() as f64
        });
        for (i, &label) in task.query_labels.iter().enumerate() {
            let nearest = (0..spec.ways)
                .min_by(|&a, &b| {
                    let da: f64 = (0..2).map(|t| (task.query_x.get(i, t) - centroids.get(a, t)).powi(2)).sum();
                    let db: f64 = (0..2).map(|t| (task.query_x.get(i, t) - centroids.get(b, t)).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(nearest, label, "task {seed} query {i}");
        }
    }
    assert!(min_separation > 0.0);
}
