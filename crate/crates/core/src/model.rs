//! The full meta-learner: embedding ψ, inference network φ, prior network, and
//! the kernel ridge base learner on sampled random Fourier features.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Axis, Graph, NodeId, ParamStore};
use crate::elbo::{aggregated_kl, combine, log_likelihood, ElboTerms, ObjectiveConfig};
use crate::error::{Error, Result};
use crate::nn::{embed, instance_pool, Activation, InferenceMode, InferenceNet, Mlp, PosteriorNodes, PriorNet};
use crate::rff::{krr_predict, rff_features, sample_frequencies, BasisNoise, FrequencyPosterior};
use crate::rng::Rng;
use crate::tasks::Task;
use crate::tensor::Tensor;

pub const DEFAULT_FEATURE_DIM: usize = 40;
pub const DEFAULT_HIDDEN: usize = 40;
pub const DEFAULT_INFERENCE_LAYERS: usize = 2;
pub const DEFAULT_PRIOR_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Width `d` of the embedding ψ(x) and of the frequencies ω.
    pub feature_dim: usize,
    /// LSTM / hidden layer width `H`.
    pub hidden: usize,
    pub inference_layers: usize,
    pub prior_layers: usize,
    pub mode: InferenceMode,
}

impl ModelConfig {
    pub fn new(input_dim: usize, mode: InferenceMode) -> Self {
        Self {
            input_dim,
            feature_dim: DEFAULT_FEATURE_DIM,
            hidden: DEFAULT_HIDDEN,
            inference_layers: DEFAULT_INFERENCE_LAYERS,
            prior_layers: DEFAULT_PRIOR_LAYERS,
            mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden == 0 {
            return Err(Error::InvalidArgument(format!(
                "model widths must be positive: input {}, feature {}, hidden {}",
                self.input_dim, self.feature_dim, self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaKernelModel {
    pub config: ModelConfig,
    pub embedding: Mlp,
    pub inference: InferenceNet,
    pub prior: PriorNet,
}

/// Graph nodes produced for one episode of a meta-batch.
#[derive(Debug, Clone, Copy)]
pub struct EpisodeNodes {
    pub log_lik: NodeId,
    pub kl: NodeId,
    pub elbo: NodeId,
    /// `n_q × m`
    pub predictions: NodeId,
    pub posterior: PosteriorNodes,
    /// The prior the KL was taken against (`1 × d` or per query, by aggregation).
    pub prior: PosteriorNodes,
}

impl EpisodeNodes {
    pub fn terms(&self, g: &Graph, beta: f64) -> ElboTerms {
        ElboTerms {
            expected_log_lik: g.value(self.log_lik).item(),
            kl: g.value(self.kl).item(),
            elbo: g.value(self.elbo).item(),
            beta,
        }
    }
}

struct Embedded {
    all: NodeId,
    support: NodeId,
    query: NodeId,
    pooled: NodeId,
    summary: NodeId,
}

impl MetaKernelModel {
    /// Registers every parameter in `store` under the `psi.`, `phi.` and
    /// `prior.` prefixes.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.feature_dim;
        let embedding = Mlp::new(
            store,
            "psi",
            &[config.input_dim, d, d],
            &[Activation::Relu, Activation::Relu],
            rng,
        )?;
        let inference = InferenceNet::new(
            store,
            "phi",
            d,
            config.hidden,
            d,
            config.inference_layers,
            config.mode,
            rng,
        )?;
        let prior = PriorNet::new(store, "prior", d, config.hidden, config.prior_layers, rng)?;
        Ok(Self {
            config,
            embedding,
            inference,
            prior,
        })
    }

    fn check_task(&self, task: &Task) -> Result<()> {
        if task.input_dim() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "episode",
                left: task.support_x.shape().to_vec(),
                right: vec![task.support_len(), self.config.input_dim],
            });
        }
        Ok(())
    }

    fn embed_task(&self, g: &mut Graph, store: &ParamStore, task: &Task, extra: Option<&Tensor>) -> Result<Embedded> {
        self.check_task(task)?;
        let ns = task.support_len();
        let mut blocks = vec![g.constant(task.support_x.clone())];
        let nq = match extra {
            Some(points) => {
                blocks.push(g.constant(points.clone()));
                points.rows()
            }
            None => {
                blocks.push(g.constant(task.query_x.clone()));
                task.query_len()
            }
        };
        let x = g.concat(&blocks, Axis::Rows)?;
        let all = embed(&self.embedding, g, store, x)?;
        let support = g.slice(all, Axis::Rows, 0, ns)?;
        let query = g.slice(all, Axis::Rows, ns, ns + nq)?;
        let pooled = instance_pool(g, support, &task.support_labels, task.ways)?;
        let summary = g.mean_rows(pooled)?;
        Ok(Embedded {
            all,
            support,
            query,
            pooled,
            summary,
        })
    }

    /// Builds the ELBO of every episode in a meta-batch. The inference LSTM
    /// starts from a zero state and runs over the episodes in order.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tasks: &[Task],
        noises: &[BasisNoise],
        objective: &ObjectiveConfig,
    ) -> Result<Vec<EpisodeNodes>> {
        if tasks.len() != noises.len() {
            return Err(Error::InvalidArgument(format!(
                "{} tasks but {} noise draws",
                tasks.len(),
                noises.len()
            )));
        }
        let embedded: Vec<Embedded> = tasks
            .iter()
            .map(|t| self.embed_task(g, store, t, None))
            .collect::<Result<_>>()?;
        let summaries: Vec<NodeId> = embedded.iter().map(|e| e.summary).collect();
        let posteriors = self.inference.infer_sequence(g, store, &summaries)?;

        let mut out = Vec::with_capacity(tasks.len());
        for ((task, noise), (emb, posterior)) in tasks.iter().zip(noises).zip(embedded.iter().zip(posteriors)) {
            let per_query = self.prior.prior_from_query(g, store, emb.query, emb.pooled)?;
            let (kl, prior) = aggregated_kl(g, posterior, per_query, objective.prior_aggregation)?;
            let omega = sample_frequencies(g, posterior, noise)?;
            let z = rff_features(g, emb.all, omega, &noise.phase)?;
            let ns = task.support_len();
            let z_s = g.slice(z, Axis::Rows, 0, ns)?;
            let z_q = g.slice(z, Axis::Rows, ns, ns + task.query_len())?;
            let y_s = g.constant(task.support_y.clone());
            let predictions = krr_predict(g, z_s, y_s, z_q, objective.lambda)?;
            let log_lik = log_likelihood(g, task, predictions, objective.sigma_y)?;
            let elbo = combine(g, log_lik, kl, objective.beta)?;
            out.push(EpisodeNodes {
                log_lik,
                kl,
                elbo,
                predictions,
                posterior,
                prior,
            });
        }
        Ok(out)
    }

    /// `−Σ ELBO` over a meta-batch as a graph node.
    pub fn negative_elbo(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tasks: &[Task],
        noises: &[BasisNoise],
        objective: &ObjectiveConfig,
    ) -> Result<(NodeId, Vec<EpisodeNodes>)> {
        let episodes = self.forward_batch(g, store, tasks, noises, objective)?;
        let elbos: Vec<NodeId> = episodes.iter().map(|e| e.elbo).collect();
        let stacked = g.concat(&elbos, Axis::Rows)?;
        let total = g.sum(stacked)?;
        Ok((g.negate(total)?, episodes))
    }

    /// `−Σ ELBO` and its gradient with respect to every parameter in `store`.
    pub fn loss_and_gradients(
        &self,
        store: &ParamStore,
        tasks: &[Task],
        noises: &[BasisNoise],
        objective: &ObjectiveConfig,
    ) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let (loss, _) = self.negative_elbo(&mut g, store, tasks, noises, objective)?;
        let grads = g.backward(loss)?.for_params(store);
        Ok((g.value(loss).item(), grads))
    }

    /// Value of `−Σ ELBO` only.
    pub fn loss(&self, store: &ParamStore, tasks: &[Task], noises: &[BasisNoise], objective: &ObjectiveConfig) -> Result<f64> {
        let mut g = Graph::new();
        let (loss, _) = self.negative_elbo(&mut g, store, tasks, noises, objective)?;
        Ok(g.value(loss).item())
    }

    /// ELBO terms of a single episode, evaluated as a sequence of length one.
    pub fn episode_elbo(
        &self,
        store: &ParamStore,
        task: &Task,
        noise: &BasisNoise,
        objective: &ObjectiveConfig,
    ) -> Result<ElboTerms> {
        let mut g = Graph::new();
        let nodes = self.forward_batch(&mut g, store, std::slice::from_ref(task), std::slice::from_ref(noise), objective)?;
        Ok(nodes[0].terms(&g, objective.beta))
    }

    /// `q(ω | S)` for one task on its own (fresh LSTM state).
    pub fn posterior(&self, store: &ParamStore, task: &Task) -> Result<FrequencyPosterior> {
        let mut g = Graph::new();
        let emb = self.embed_task(&mut g, store, task, None)?;
        let p = self.inference.infer_sequence(&mut g, store, &[emb.summary])?[0];
        FrequencyPosterior::new(g.value(p.mu).clone(), g.value(p.log_var).clone())
    }

    /// Predictions at arbitrary `points` from the task's support set under the
    /// frequency draw given by `noise` (zero `eps` gives the posterior mean).
    pub fn predict(
        &self,
        store: &ParamStore,
        task: &Task,
        points: &Tensor,
        noise: &BasisNoise,
        lambda: f64,
    ) -> Result<Tensor> {
        if points.cols() != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "predict",
                left: points.shape().to_vec(),
                right: vec![points.rows(), self.config.input_dim],
            });
        }
        let mut g = Graph::new();
        let emb = self.embed_task(&mut g, store, task, Some(points))?;
        let posterior = self.inference.infer_sequence(&mut g, store, &[emb.summary])?[0];
        let omega = sample_frequencies(&mut g, posterior, noise)?;
        let z_s = rff_features(&mut g, emb.support, omega, &noise.phase)?;
        let z_p = rff_features(&mut g, emb.query, omega, &noise.phase)?;
        let y_s = g.constant(task.support_y.clone());
        let pred = krr_predict(&mut g, z_s, y_s, z_p, lambda)?;
        Ok(g.value(pred).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elbo::PriorAggregation;
    use crate::rng::rng_for;
    use crate::tasks::{sample_cluster_task, sample_sine_task, ClusterTaskSpec, SineTaskSpec};

    fn small(mode: InferenceMode, input_dim: usize) -> (MetaKernelModel, ParamStore) {
        let mut store = ParamStore::new();
        let config = ModelConfig {
            feature_dim: 6,
            hidden: 5,
            ..ModelConfig::new(input_dim, mode)
        };
        let model = MetaKernelModel::new(config, &mut store, &mut rng_for(11, &[])).unwrap();
        (model, store)
    }

    fn objective(bases: usize) -> ObjectiveConfig {
        ObjectiveConfig {
            bases,
            ..Default::default()
        }
    }

    #[test]
    fn beta_zero_leaves_log_likelihood() {
        let (model, store) = small(InferenceMode::VanillaLstm, 1);
        let task = sample_sine_task(&SineTaskSpec::default(), 5, 8, 2).unwrap();
        let noise = BasisNoise::draw(12, 6, &mut rng_for(3, &[]));
        let obj = ObjectiveConfig {
            beta: 0.0,
            ..objective(12)
        };
        let t = model.episode_elbo(&store, &task, &noise, &obj).unwrap();
        assert_eq!(t.elbo, t.expected_log_lik);
        assert!(t.kl >= 0.0);
    }

    #[test]
    fn predictions_match_between_paths() {
        let (model, store) = small(InferenceMode::BiLstm, 1);
        let task = sample_sine_task(&SineTaskSpec::default(), 4, 6, 9).unwrap();
        let noise = BasisNoise::draw(10, 6, &mut rng_for(5, &[]));
        let obj = objective(10);
        let mut g = Graph::new();
        let nodes = model
            .forward_batch(&mut g, &store, std::slice::from_ref(&task), std::slice::from_ref(&noise), &obj)
            .unwrap();
        let direct = model.predict(&store, &task, &task.query_x, &noise, obj.lambda).unwrap();
        assert_eq!(g.value(nodes[0].predictions), &direct);
    }

    #[test]
    fn classification_episode_runs_both_aggregations() {
        let (model, store) = small(InferenceMode::NoLstm, 2);
        let task = sample_cluster_task(&ClusterTaskSpec::default(), 3, 4).unwrap();
        let noise = BasisNoise::draw(8, 6, &mut rng_for(6, &[]));
        for agg in [PriorAggregation::MeanParams, PriorAggregation::MeanKl] {
            let obj = ObjectiveConfig {
                prior_aggregation: agg,
                ..objective(8)
            };
            let t = model.episode_elbo(&store, &task, &noise, &obj).unwrap();
            assert!(t.elbo.is_finite() && t.kl >= 0.0);
        }
    }

    #[test]
    fn wrong_input_dim_rejected() {
        let (model, store) = small(InferenceMode::VanillaLstm, 2);
        let task = sample_sine_task(&SineTaskSpec::default(), 3, 3, 1).unwrap();
        let noise = BasisNoise::draw(4, 6, &mut rng_for(1, &[]));
        assert!(model.episode_elbo(&store, &task, &noise, &objective(4)).is_err());
    }

    #[test]
    fn posterior_unaffected_by_other_batches() {
        let (model, store) = small(InferenceMode::VanillaLstm, 1);
        let spec = SineTaskSpec::default();
        let task = sample_sine_task(&spec, 5, 5, 21).unwrap();
        let before = model.posterior(&store, &task).unwrap();
        let others: Vec<Task> = (0..3).map(|s| sample_sine_task(&spec, 5, 5, 100 + s).unwrap()).collect();
        let noises: Vec<BasisNoise> = (0..3).map(|s| BasisNoise::draw(4, 6, &mut rng_for(s, &[]))).collect();
        let mut g = Graph::new();
        model.forward_batch(&mut g, &store, &others, &noises, &objective(4)).unwrap();
        assert_eq!(model.posterior(&store, &task).unwrap(), before);
    }
}
