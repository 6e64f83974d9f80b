use serde::{Deserialize, Serialize};

use super::uniform_init;
use crate::autodiff::{Axis, Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// LSTM cell with the four gates packed column-wise as `[i | f | o | g]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmCell {
    /// `input × 4H`
    pub input_weight: ParamId,
    /// `H × 4H`
    pub hidden_weight: ParamId,
    /// `1 × 4H`
    pub bias: ParamId,
    pub input_width: usize,
    pub hidden: usize,
}

/// Hidden and cell state, each `1 × H`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(1, hidden)),
            c: g.constant(Tensor::zeros(1, hidden)),
        }
    }
}

impl LstmCell {
    /// Forget-gate bias starts at 1; everything else uniform in `±1/√fan_in`.
    pub fn new(store: &mut ParamStore, name: &str, input_width: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = input_width + hidden;
        let input_weight = store.add(
            format!("{name}.input_weight"),
            uniform_init(input_width, 4 * hidden, fan_in, rng),
        );
        let hidden_weight = store.add(
            format!("{name}.hidden_weight"),
            uniform_init(hidden, 4 * hidden, fan_in, rng),
        );
        let mut b = uniform_init(1, 4 * hidden, fan_in, rng);
        for j in hidden..2 * hidden {
            b.data_mut()[j] = 1.0;
        }
        let bias = store.add(format!("{name}.bias"), b);
        Self {
            input_weight,
            hidden_weight,
            bias,
            input_width,
            hidden,
        }
    }

    /// One step: `c' = f⊙c + i⊙g`, `h' = o⊙tanh(c')`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, input: NodeId, state: LstmState) -> Result<LstmState> {
        let x = g.value(input);
        if x.cols() != self.input_width || x.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                left: x.shape().to_vec(),
                right: vec![1, self.input_width],
            });
        }
        let hs = g.value(state.h).shape().to_vec();
        if hs != [1, self.hidden] || g.value(state.c).shape() != [1, self.hidden] {
            return Err(Error::ShapeMismatch {
                op: "lstm_step",
                left: hs,
                right: vec![1, self.hidden],
            });
        }
        let h = self.hidden;
        let wx = g.param(store, self.input_weight);
        let wh = g.param(store, self.hidden_weight);
        let b = g.param(store, self.bias);
        let a = g.matmul(input, wx)?;
        let r = g.matmul(state.h, wh)?;
        let pre = g.add(a, r)?;
        let pre = g.add(pre, b)?;

        let gate = |g: &mut Graph, k: usize| g.slice(pre, Axis::Cols, k * h, (k + 1) * h);
        let i_pre = gate(g, 0)?;
        let f_pre = gate(g, 1)?;
        let o_pre = gate(g, 2)?;
        let g_pre = gate(g, 3)?;
        let i = g.sigmoid(i_pre)?;
        let f = g.sigmoid(f_pre)?;
        let o = g.sigmoid(o_pre)?;
        let cand = g.tanh(g_pre)?;

        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let tc = g.tanh(c)?;
        let h_new = g.mul(o, tc)?;
        Ok(LstmState { h: h_new, c })
    }
}
