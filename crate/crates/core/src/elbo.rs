//! The evidence lower bound for one episode:
//! `E_q[log p(y | x, S, ω)] − β·KL(q(ω | S) ‖ p(ω | x, S))`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::PosteriorNodes;
use crate::rff::{FrequencyPosterior, DEFAULT_BASES, DEFAULT_RIDGE};
use crate::tasks::Task;
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 1.0;
pub const DEFAULT_SIGMA_Y: f64 = 0.1;

/// How per-query priors collapse into the single prior an episode's one
/// frequency draw is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorAggregation {
    /// Average `μ` and `log σ²` over queries, then one KL.
    #[default]
    MeanParams,
    /// One KL per query prior, averaged.
    MeanKl,
}

/// Everything the objective needs besides the networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub bases: usize,
    pub lambda: f64,
    pub beta: f64,
    /// Fixed observation noise of the Gaussian likelihood (regression only).
    pub sigma_y: f64,
    pub prior_aggregation: PriorAggregation,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            bases: DEFAULT_BASES,
            lambda: DEFAULT_RIDGE,
            beta: DEFAULT_BETA,
            sigma_y: DEFAULT_SIGMA_Y,
            prior_aggregation: PriorAggregation::MeanParams,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bases == 0 {
            return Err(Error::InvalidArgument("bases must be at least 1".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be non-negative, got {}", self.beta)));
        }
        if !(self.sigma_y > 0.0 && self.sigma_y.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_y must be positive, got {}", self.sigma_y)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub expected_log_lik: f64,
    pub kl: f64,
    pub elbo: f64,
    pub beta: f64,
}

/// `Σ KL(N(μ_q, σ_q²) ‖ N(μ_p, σ_p²))` over every entry of two equally shaped
/// diagonal Gaussians.
pub fn diag_gaussian_kl(g: &mut Graph, q: PosteriorNodes, p: PosteriorNodes) -> Result<NodeId> {
    let shape = g.value(q.mu).shape().to_vec();
    for node in [q.log_var, p.mu, p.log_var] {
        if g.value(node).shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "gaussian_kl",
                left: shape,
                right: g.value(node).shape().to_vec(),
            });
        }
    }
    let numel: usize = shape.iter().product();
    // ½ Σ [log σ_p² − log σ_q² + (σ_q² + (μ_q − μ_p)²)/σ_p² − 1]
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let var_q = g.exp(q.log_var)?;
    let diff = g.sub(q.mu, p.mu)?;
    let diff_sq = g.square(diff)?;
    let num = g.add(var_q, diff_sq)?;
    let neg_lv_p = g.negate(p.log_var)?;
    let inv_var_p = g.exp(neg_lv_p)?;
    let ratio = g.mul(num, inv_var_p)?;
    let inner = g.add(log_ratio, ratio)?;
    let total = g.sum(inner)?;
    let offset = g.constant(Tensor::scalar(-(numel as f64)));
    let shifted = g.add(total, offset)?;
    g.scale(shifted, 0.5)
}

/// Analytic KL between two diagonal Gaussians of equal width.
pub fn gaussian_kl(q: &FrequencyPosterior, p: &FrequencyPosterior) -> Result<f64> {
    q.validate()?;
    p.validate()?;
    let mut g = Graph::new();
    let qn = PosteriorNodes {
        mu: g.constant(q.mu.clone()),
        log_var: g.constant(q.log_var.clone()),
    };
    let pn = PosteriorNodes {
        mu: g.constant(p.mu.clone()),
        log_var: g.constant(p.log_var.clone()),
    };
    let kl = diag_gaussian_kl(&mut g, qn, pn)?;
    Ok(g.value(kl).item())
}

/// Collapses `n × d` per-query priors against a `1 × d` posterior into one KL node.
pub fn aggregated_kl(
    g: &mut Graph,
    posterior: PosteriorNodes,
    per_query_prior: PosteriorNodes,
    aggregation: PriorAggregation,
) -> Result<(NodeId, PosteriorNodes)> {
    match aggregation {
        PriorAggregation::MeanParams => {
            let prior = PosteriorNodes {
                mu: g.mean_rows(per_query_prior.mu)?,
                log_var: g.mean_rows(per_query_prior.log_var)?,
            };
            Ok((diag_gaussian_kl(g, posterior, prior)?, prior))
        }
        PriorAggregation::MeanKl => {
            let n = g.value(per_query_prior.mu).rows();
            let q = PosteriorNodes {
                mu: g.broadcast_rows(posterior.mu, n)?,
                log_var: g.broadcast_rows(posterior.log_var, n)?,
            };
            let total = diag_gaussian_kl(g, q, per_query_prior)?;
            Ok((g.scale(total, 1.0 / n as f64)?, per_query_prior))
        }
    }
}

/// Single-sample log-likelihood of the query targets.
///
/// Regression: `Σ −½log(2πσ²) − (y − ŷ)²/(2σ²)`. Classification:
/// `Σ log softmax(ŷ)[true class]`.
pub fn log_likelihood(g: &mut Graph, task: &Task, predictions: NodeId, sigma_y: f64) -> Result<NodeId> {
    let pred = g.value(predictions);
    if pred.shape() != task.query_y.shape() {
        return Err(Error::ShapeMismatch {
            op: "log_likelihood",
            left: pred.shape().to_vec(),
            right: task.query_y.shape().to_vec(),
        });
    }
    let targets = g.constant(task.query_y.clone());
    if task.is_classification() {
        let logp = g.log_softmax_rows(predictions)?;
        let picked = g.mul(logp, targets)?;
        g.sum(picked)
    } else {
        if !(sigma_y > 0.0 && sigma_y.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma_y must be positive, got {sigma_y}")));
        }
        let n = task.query_y.numel() as f64;
        let var = sigma_y * sigma_y;
        let resid = g.sub(targets, predictions)?;
        let sq = g.square(resid)?;
        let sse = g.sum(sq)?;
        let scaled = g.scale(sse, -0.5 / var)?;
        let norm = g.constant(Tensor::scalar(-0.5 * n * (2.0 * PI * var).ln()));
        g.add(scaled, norm)
    }
}

/// Value form of [`log_likelihood`].
pub fn expected_log_likelihood(task: &Task, predictions: &Tensor, sigma_y: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(predictions.clone());
    let ll = log_likelihood(&mut g, task, p, sigma_y)?;
    Ok(g.value(ll).item())
}

/// `elbo = log_lik − β·kl`.
pub fn combine(g: &mut Graph, log_lik: NodeId, kl: NodeId, beta: f64) -> Result<NodeId> {
    let weighted = g.scale(kl, beta)?;
    g.sub(log_lik, weighted)
}
