//! Embedding, inference and prior networks.
//!
//! Networks only hold [`ParamId`]s; the tensors themselves live in a
//! [`ParamStore`] and are pulled onto a [`Graph`] when a forward pass runs.

mod attention;
mod inference;
mod lstm;
mod prior;

pub use attention::{attention_weights, cross_attention, instance_pool};
pub use inference::{InferenceMode, InferenceNet, PosteriorNodes};
pub use lstm::{LstmCell, LstmState};
pub use prior::PriorNet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    None,
}

/// Uniform in `±1/√fan_in`.
pub(crate) fn uniform_init(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Fully connected layer `y = act(x W + b)` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
    pub input_width: usize,
    pub output_width: usize,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_width: usize,
        output_width: usize,
        activation: Activation,
        rng: &mut Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            uniform_init(input_width, output_width, input_width, rng),
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform_init(1, output_width, input_width, rng),
        );
        Self {
            weight,
            bias,
            activation,
            input_width,
            output_width,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let rows = g.value(x).rows();
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let xw = g.matmul(x, w)?;
        let bb = g.broadcast_rows(b, rows)?;
        let pre = g.add(xw, bb)?;
        match self.activation {
            Activation::Relu => g.relu(pre),
            Activation::Elu => g.elu(pre),
            Activation::None => Ok(pre),
        }
    }
}

/// A chain of dense layers applied row-wise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `widths` lists the input width followed by each layer's output width.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activations: &[Activation],
        rng: &mut Rng,
    ) -> Result<Self> {
        if widths.len() < 2 || activations.len() != widths.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "mlp {name}: {} widths need {} activations, got {}",
                widths.len(),
                widths.len().saturating_sub(1),
                activations.len()
            )));
        }
        let layers = widths
            .windows(2)
            .zip(activations)
            .enumerate()
            .map(|(i, (w, &act))| Dense::new(store, &format!("{name}.{i}"), w[0], w[1], act, rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("non-empty mlp").output_width
    }

    /// Row-wise application to an `n × input_width` node.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let v = g.value(x);
        if v.cols() != self.input_width() {
            return Err(Error::ShapeMismatch {
                op: "mlp",
                left: v.shape().to_vec(),
                right: vec![self.input_width(), self.output_width()],
            });
        }
        self.layers
            .iter()
            .try_fold(x, |h, layer| layer.forward(g, store, h))
    }
}

/// Embeds an `n × d_in` input into `n × d` features.
pub fn embed(psi: &Mlp, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
    psi.forward(g, store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, &[]);
        let mlp = Mlp::new(&mut store, "psi", &[1, 40, 40], &[Activation::Relu; 2], &mut rng).unwrap();
        for t in store.tensors_mut() {
            *t = Tensor::zeros_like(t);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::column(&[0.3, -2.0, 4.0]));
        let y = embed(&mlp, &mut g, &store, x).unwrap();
        assert_eq!(g.value(y), &Tensor::zeros(3, 40));
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, &[]);
        let mlp = Mlp::new(&mut store, "id", &[4, 4], &[Activation::None], &mut rng).unwrap();
        *store.get_mut(mlp.layers[0].weight) = Tensor::eye(4);
        *store.get_mut(mlp.layers[0].bias) = Tensor::zeros(1, 4);
        let x = Tensor::from_fn(3, 4, |i, j| (i as f64) - 0.5 * j as f64);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let y = mlp.forward(&mut g, &store, xn).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn scalar_reevaluation_matches() {
        // Independent loop-based evaluation of the same 1→40→40 ReLU net.
        let mut store = ParamStore::new();
        let mut rng = rng_for(9, &[]);
        let mlp = Mlp::new(&mut store, "psi", &[1, 40, 40], &[Activation::Relu; 2], &mut rng).unwrap();
        let x = 0.7;
        let mut h = vec![x];
        for layer in &mlp.layers {
            let w = store.get(layer.weight);
            let b = store.get(layer.bias);
            let mut out = vec![0.0; layer.output_width];
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = b.data()[j];
                for (i, hv) in h.iter().enumerate() {
                    s += hv * w.get(i, j);
                }
                *o = if s > 0.0 { s } else { 0.0 };
            }
            h = out;
        }
        let mut g = Graph::new();
        let xn = g.constant(Tensor::scalar(x));
        let y = embed(&mlp, &mut g, &store, xn).unwrap();
        for (a, b) in g.value(y).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut store = ParamStore::new();
        let mut rng = rng_for(1, &[]);
        let mlp = Mlp::new(&mut store, "m", &[3, 5], &[Activation::Elu], &mut rng).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(2, 4));
        assert!(matches!(
            mlp.forward(&mut g, &store, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
