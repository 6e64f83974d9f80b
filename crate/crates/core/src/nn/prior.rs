use serde::{Deserialize, Serialize};

use super::{cross_attention, Activation, Dense, Mlp, PosteriorNodes};
use crate::autodiff::{Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Query-conditioned prior `p(ω | x, S)`: Laplace attention of the query
/// feature over pooled support features, an ELU body, and linear heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorNet {
    pub body: Mlp,
    pub mu_head: Dense,
    pub log_var_head: Dense,
}

impl PriorNet {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        feature_dim: usize,
        hidden: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![feature_dim];
        widths.extend(std::iter::repeat_n(hidden, layers.max(1)));
        let acts = vec![Activation::Elu; widths.len() - 1];
        let body = Mlp::new(store, &format!("{name}.body"), &widths, &acts, rng)?;
        let mu_head = Dense::new(store, &format!("{name}.mu"), hidden, feature_dim, Activation::None, rng);
        let log_var_head = Dense::new(store, &format!("{name}.log_var"), hidden, feature_dim, Activation::None, rng);
        Ok(Self {
            body,
            mu_head,
            log_var_head,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.body.input_width()
    }

    /// Per-query priors: `queries: n × d`, `pooled_support: C × d` → two `n × d` nodes.
    pub fn prior_from_query(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        pooled_support: NodeId,
    ) -> Result<PosteriorNodes> {
        let d = self.feature_dim();
        for node in [queries, pooled_support] {
            let v = g.value(node);
            if v.cols() != d {
                return Err(Error::ShapeMismatch {
                    op: "prior_from_query",
                    left: v.shape().to_vec(),
                    right: vec![v.rows(), d],
                });
            }
        }
        let attended = cross_attention(g, queries, pooled_support, pooled_support)?;
        let body = self.body.forward(g, store, attended)?;
        Ok(PosteriorNodes {
            mu: self.mu_head.forward(g, store, body)?,
            log_var: self.log_var_head.forward(g, store, body)?,
        })
    }
}
