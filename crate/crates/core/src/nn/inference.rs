use serde::{Deserialize, Serialize};

use super::{Activation, Dense, LstmCell, LstmState, Mlp};
use crate::autodiff::{Axis, Graph, NodeId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How the inference network turns a support summary into a posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// One LSTM cell whose state carries across the episodes of a meta-batch.
    VanillaLstm,
    /// Forward and backward LSTM cells over the meta-batch, states concatenated.
    BiLstm,
    /// A plain ELU layer of the same width in place of the LSTM.
    NoLstm,
}

impl std::fmt::Display for InferenceMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InferenceMode::VanillaLstm => "vanilla-lstm",
            InferenceMode::BiLstm => "bi-lstm",
            InferenceMode::NoLstm => "no-lstm",
        })
    }
}

/// Graph nodes for a diagonal Gaussian; `mu` and `log_var` share a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PosteriorNodes {
    pub mu: NodeId,
    pub log_var: NodeId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Recurrent {
    Lstm(LstmCell),
    Bidirectional { forward: LstmCell, backward: LstmCell },
    Dense(Dense),
}

/// Amortized posterior over frequencies: ELU pre-network, recurrent core,
/// `tanh`, then linear heads to `μ_w` and `log σ²_w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceNet {
    pub pre: Mlp,
    pub recurrent: Recurrent,
    pub mu_head: Dense,
    pub log_var_head: Dense,
    pub mode: InferenceMode,
}

impl InferenceNet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        hidden: usize,
        feature_dim: usize,
        pre_layers: usize,
        mode: InferenceMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![input_width];
        widths.extend(std::iter::repeat_n(hidden, pre_layers.max(1)));
        let acts = vec![Activation::Elu; widths.len() - 1];
        let pre = Mlp::new(store, &format!("{name}.pre"), &widths, &acts, rng)?;
        let (recurrent, head_in) = match mode {
            InferenceMode::VanillaLstm => (
                Recurrent::Lstm(LstmCell::new(store, &format!("{name}.lstm"), hidden, hidden, rng)),
                hidden,
            ),
            InferenceMode::BiLstm => (
                Recurrent::Bidirectional {
                    forward: LstmCell::new(store, &format!("{name}.lstm_fwd"), hidden, hidden, rng),
                    backward: LstmCell::new(store, &format!("{name}.lstm_bwd"), hidden, hidden, rng),
                },
                2 * hidden,
            ),
            InferenceMode::NoLstm => (
                Recurrent::Dense(Dense::new(
                    store,
                    &format!("{name}.core"),
                    hidden,
                    hidden,
                    Activation::Elu,
                    rng,
                )),
                hidden,
            ),
        };
        let mu_head = Dense::new(store, &format!("{name}.mu"), head_in, feature_dim, Activation::None, rng);
        let log_var_head = Dense::new(
            store,
            &format!("{name}.log_var"),
            head_in,
            feature_dim,
            Activation::None,
            rng,
        );
        Ok(Self {
            pre,
            recurrent,
            mu_head,
            log_var_head,
            mode,
        })
    }

    pub fn input_width(&self) -> usize {
        self.pre.input_width()
    }

    pub fn hidden(&self) -> usize {
        self.pre.output_width()
    }

    pub fn feature_dim(&self) -> usize {
        self.mu_head.output_width
    }

    fn heads(&self, g: &mut Graph, store: &ParamStore, rep: NodeId) -> Result<PosteriorNodes> {
        let t = g.tanh(rep)?;
        Ok(PosteriorNodes {
            mu: self.mu_head.forward(g, store, t)?,
            log_var: self.log_var_head.forward(g, store, t)?,
        })
    }

    fn check_summary(&self, g: &Graph, summary: NodeId) -> Result<()> {
        let v = g.value(summary);
        if v.rows() != 1 || v.cols() != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "infer_posterior",
                left: v.shape().to_vec(),
                right: vec![1, self.input_width()],
            });
        }
        Ok(())
    }

    /// One inference step on a `1 × input_width` support summary.
    ///
    /// `state` is the carried LSTM state (zeros when `None`). The returned state
    /// is `None` for the no-LSTM arm. In bidirectional mode a single step
    /// treats the episode as a sequence of length one for the backward cell.
    pub fn infer_posterior(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        summary: NodeId,
        state: Option<LstmState>,
    ) -> Result<(PosteriorNodes, Option<LstmState>)> {
        self.check_summary(g, summary)?;
        let x = self.pre.forward(g, store, summary)?;
        let h = self.hidden();
        match &self.recurrent {
            Recurrent::Lstm(cell) => {
                let s0 = match state {
                    Some(s) => s,
                    None => LstmState::zeros(g, h),
                };
                let s1 = cell.step(g, store, x, s0)?;
                Ok((self.heads(g, store, s1.h)?, Some(s1)))
            }
            Recurrent::Bidirectional { forward, backward } => {
                let s0 = match state {
                    Some(s) => s,
                    None => LstmState::zeros(g, h),
                };
                let f1 = forward.step(g, store, x, s0)?;
                let b0 = LstmState::zeros(g, h);
                let b1 = backward.step(g, store, x, b0)?;
                let rep = g.concat(&[f1.h, b1.h], Axis::Cols)?;
                Ok((self.heads(g, store, rep)?, Some(f1)))
            }
            Recurrent::Dense(layer) => {
                let z = layer.forward(g, store, x)?;
                Ok((self.heads(g, store, z)?, None))
            }
        }
    }

    /// Posteriors for every episode of a meta-batch, starting from a zero state.
    pub fn infer_sequence(&self, g: &mut Graph, store: &ParamStore, summaries: &[NodeId]) -> Result<Vec<PosteriorNodes>> {
        let reps = self.sequence_representations(g, store, summaries)?;
        reps.into_iter().map(|r| self.heads(g, store, r)).collect()
    }

    /// The pre-`tanh` representation for each episode: LSTM hidden state, the
    /// `[forward | backward]` concatenation, or the ELU core output.
    pub fn sequence_representations(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        summaries: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if summaries.is_empty() {
            return Err(Error::InvalidArgument("empty episode sequence".into()));
        }
        for &s in summaries {
            self.check_summary(g, s)?;
        }
        let h = self.hidden();
        let stacked = g.concat(summaries, Axis::Rows)?;
        let pre = self.pre.forward(g, store, stacked)?;
        let steps: Vec<NodeId> = (0..summaries.len())
            .map(|t| g.slice(pre, Axis::Rows, t, t + 1))
            .collect::<Result<_>>()?;

        let run = |g: &mut Graph, cell: &LstmCell, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, NodeId)>> {
            let mut state = LstmState::zeros(g, h);
            let mut out = Vec::with_capacity(steps.len());
            for t in order {
                state = cell.step(g, store, steps[t], state)?;
                out.push((t, state.h));
            }
            Ok(out)
        };

        match &self.recurrent {
            Recurrent::Lstm(cell) => Ok(run(g, cell, &mut (0..steps.len()))?
                .into_iter()
                .map(|(_, hn)| hn)
                .collect()),
            Recurrent::Bidirectional { forward, backward } => {
                let fwd = run(g, forward, &mut (0..steps.len()))?;
                let mut bwd = run(g, backward, &mut (0..steps.len()).rev())?;
                bwd.reverse();
                fwd.into_iter()
                    .zip(bwd)
                    .map(|((tf, hf), (tb, hb))| {
                        debug_assert_eq!(tf, tb);
                        g.concat(&[hf, hb], Axis::Cols)
                    })
                    .collect()
            }
            Recurrent::Dense(layer) => steps.iter().map(|&x| layer.forward(g, store, x)).collect(),
        }
    }
}
