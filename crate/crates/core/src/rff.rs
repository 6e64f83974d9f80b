//! Variational random Fourier features and the kernel ridge base learner.
//!
//! Frequencies are drawn by reparameterization, `ωⱼ = μ + σ ⊙ εⱼ`, and define
//! the feature map `z(x)ⱼ = √(2/D)·cos(ωⱼᵀx + bⱼ)`. The base learner solves
//! `(Z Zᵀ + λI) α = Y` on the support set and predicts `Z_q Z_sᵀ α`.
//!
//! Each operation has a graph form, used during training, and a value form
//! built on the same graph code for evaluation and tests.

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::PosteriorNodes;
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DEFAULT_BASES: usize = 256;
pub const DEFAULT_RIDGE: f64 = 1e-3;

/// Diagonal Gaussian over a frequency vector of width `d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyPosterior {
    /// `1 × d`
    pub mu: Tensor,
    /// `1 × d`
    pub log_var: Tensor,
}

impl FrequencyPosterior {
    pub fn new(mu: Tensor, log_var: Tensor) -> Result<Self> {
        let post = Self { mu, log_var };
        post.validate()?;
        Ok(post)
    }

    /// Standard normal in every coordinate.
    pub fn standard(width: usize) -> Self {
        Self {
            mu: Tensor::zeros(1, width),
            log_var: Tensor::zeros(1, width),
        }
    }

    pub fn width(&self) -> usize {
        self.mu.cols()
    }

    pub fn variance(&self) -> Tensor {
        self.log_var.map(f64::exp)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.rows() != 1 || self.mu.shape() != self.log_var.shape() {
            return Err(Error::ShapeMismatch {
                op: "frequency_posterior",
                left: self.mu.shape().to_vec(),
                right: self.log_var.shape().to_vec(),
            });
        }
        self.mu.check_finite("posterior mean")?;
        if self.log_var.data().iter().any(|v| {
            let var = v.exp();
            !(var.is_finite() && var > 0.0)
        }) {
            return Err(Error::NonFinite("posterior variance".into()));
        }
        Ok(())
    }
}

/// Standard-normal frequency noise `ε: D × d` and uniform phases `b: 1 × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisNoise {
    pub eps: Tensor,
    pub phase: Tensor,
}

impl BasisNoise {
    pub fn draw(bases: usize, width: usize, rng: &mut Rng) -> Self {
        let eps = Tensor::from_fn(bases, width, |_, _| StandardNormal.sample(rng));
        let phase = Tensor::from_fn(1, bases, |_, _| rng.random_range(0.0..2.0 * PI));
        Self { eps, phase }
    }

    /// Phases as drawn, frequency noise zeroed (every `ωⱼ = μ`).
    pub fn without_eps(mut self) -> Self {
        self.eps = Tensor::zeros_like(&self.eps);
        self
    }

    pub fn bases(&self) -> usize {
        self.eps.rows()
    }
}

/// A concrete draw of `D` frequency vectors with their phases.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledBases {
    /// `D × d`
    pub omega: Tensor,
    /// `1 × D`
    pub phase: Tensor,
}

impl SampledBases {
    pub fn bases(&self) -> usize {
        self.omega.rows()
    }
}

/// Graph form of the reparameterized draw; differentiable in `μ` and `log σ²`.
pub fn sample_frequencies(g: &mut Graph, posterior: PosteriorNodes, noise: &BasisNoise) -> Result<NodeId> {
    let (mu, lv) = (g.value(posterior.mu), g.value(posterior.log_var));
    if mu.rows() != 1 || mu.shape() != lv.shape() || mu.cols() != noise.eps.cols() {
        return Err(Error::ShapeMismatch {
            op: "sample_frequencies",
            left: mu.shape().to_vec(),
            right: noise.eps.shape().to_vec(),
        });
    }
    let d = noise.bases();
    let half = g.scale(posterior.log_var, 0.5)?;
    let sigma = g.exp(half)?;
    let mu_rows = g.broadcast_rows(posterior.mu, d)?;
    let sigma_rows = g.broadcast_rows(sigma, d)?;
    let eps = g.constant(noise.eps.clone());
    let spread = g.mul(sigma_rows, eps)?;
    g.add(mu_rows, spread)
}

/// `ωⱼ = μ + σ ⊙ εⱼ` row-wise; the phases are taken from `noise` unchanged.
pub fn reparameterize_sample(posterior: &FrequencyPosterior, noise: &BasisNoise) -> Result<SampledBases> {
    posterior.validate()?;
    let mut g = Graph::new();
    let nodes = PosteriorNodes {
        mu: g.constant(posterior.mu.clone()),
        log_var: g.constant(posterior.log_var.clone()),
    };
    let omega = sample_frequencies(&mut g, nodes, noise)?;
    Ok(SampledBases {
        omega: g.value(omega).clone(),
        phase: noise.phase.clone(),
    })
}

/// Graph form of the feature map: `features: n × d`, `omega: D × d` → `n × D`.
pub fn rff_features(g: &mut Graph, features: NodeId, omega: NodeId, phase: &Tensor) -> Result<NodeId> {
    let (x, w) = (g.value(features), g.value(omega));
    if x.cols() != w.cols() || phase.cols() != w.rows() || phase.rows() != 1 {
        return Err(Error::ShapeMismatch {
            op: "rff_feature_map",
            left: x.shape().to_vec(),
            right: w.shape().to_vec(),
        });
    }
    let n = x.rows();
    let bases = w.rows();
    let wt = g.transpose(omega)?;
    let proj = g.matmul(features, wt)?;
    let shift = g.constant(Tensor::matrix(n, bases, phase.data().repeat(n)));
    let arg = g.add(proj, shift)?;
    let c = g.cos(arg)?;
    g.scale(c, (2.0 / bases as f64).sqrt())
}

/// `z(x)ⱼ = √(2/D)·cos(ωⱼᵀx + bⱼ)` for every row of `features`.
pub fn rff_feature_map(features: &Tensor, bases: &SampledBases) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let w = g.constant(bases.omega.clone());
    let z = rff_features(&mut g, x, w, &bases.phase)?;
    Ok(g.value(z).clone())
}

/// `K = Z Zᵀ`.
pub fn kernel_matrix(z: &Tensor) -> Tensor {
    z.matmul_nt(z).expect("Z Zᵀ always conforms")
}

/// Graph form of fit-then-predict: `z_s: n_s × D`, `y_s: n_s × m`,
/// `z_q: n_q × D` → `n_q × m`.
pub fn krr_predict(g: &mut Graph, z_s: NodeId, y_s: NodeId, z_q: NodeId, lambda: f64) -> Result<NodeId> {
    check_ridge(lambda)?;
    let (zs, ys, zq) = (g.value(z_s), g.value(y_s), g.value(z_q));
    if zs.rows() != ys.rows() || zs.cols() != zq.cols() {
        return Err(Error::ShapeMismatch {
            op: "krr_predict",
            left: zs.shape().to_vec(),
            right: zq.shape().to_vec(),
        });
    }
    let n = zs.rows();
    let zt = g.transpose(z_s)?;
    let k = g.matmul(z_s, zt)?;
    let ridge = g.constant(Tensor::eye(n).map(|v| v * lambda));
    let a = g.add(k, ridge)?;
    let alpha = g.solve_spd(a, y_s)?;
    let w = g.matmul(zt, alpha)?;
    g.matmul(z_q, w)
}

fn check_ridge(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("ridge must be positive, got {lambda}")))
    }
}

/// `α = (K + λI)⁻¹ Y` via Cholesky. A factorization failure is returned as is.
pub fn solve_krr(k: &Tensor, targets: &Tensor, lambda: f64) -> Result<Tensor> {
    check_ridge(lambda)?;
    if k.rows() != k.cols() || targets.rows() != k.rows() {
        return Err(Error::ShapeMismatch {
            op: "solve_krr",
            left: k.shape().to_vec(),
            right: targets.shape().to_vec(),
        });
    }
    let mut g = Graph::new();
    let kn = g.constant(k.clone());
    let ridge = g.constant(Tensor::eye(k.rows()).map(|v| v * lambda));
    let a = g.add(kn, ridge)?;
    let y = g.constant(targets.clone());
    let alpha = g.solve_spd(a, y)?;
    Ok(g.value(alpha).clone())
}

/// Dual coefficients plus the support features they expand over.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRidgeSolution {
    /// `n_s × m`
    pub alpha: Tensor,
    pub lambda: f64,
    /// `n_s × D`
    pub support_features: Tensor,
}

impl KernelRidgeSolution {
    pub fn fit(support_features: &Tensor, targets: &Tensor, lambda: f64) -> Result<Self> {
        let alpha = solve_krr(&kernel_matrix(support_features), targets, lambda)?;
        Ok(Self {
            alpha,
            lambda,
            support_features: support_features.clone(),
        })
    }

    /// `ŷ = z_q · z_sᵀ · α`.
    pub fn predict(&self, query_features: &Tensor) -> Result<Tensor> {
        if query_features.cols() != self.support_features.cols() {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: query_features.shape().to_vec(),
                right: self.support_features.shape().to_vec(),
            });
        }
        let w = self.support_features.matmul_tn(&self.alpha)?;
        query_features.matmul(&w)
    }
}

pub fn predict(solution: &KernelRidgeSolution, query_features: &Tensor) -> Result<Tensor> {
    solution.predict(query_features)
}

/// Regular random Fourier features on raw inputs with a fixed `N(0, I)`
/// frequency prior and no learned components. Serves as the reference
/// learner for comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPriorRff {
    pub bases: usize,
    pub lambda: f64,
}

impl FixedPriorRff {
    pub fn predict(
        &self,
        support_x: &Tensor,
        support_y: &Tensor,
        points: &Tensor,
        noise: &BasisNoise,
    ) -> Result<Tensor> {
        let posterior = FrequencyPosterior::standard(support_x.cols());
        let bases = reparameterize_sample(&posterior, noise)?;
        let z_s = rff_feature_map(support_x, &bases)?;
        let z_q = rff_feature_map(points, &bases)?;
        KernelRidgeSolution::fit(&z_s, support_y, self.lambda)?.predict(&z_q)
    }
}
