use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Laplace cross attention. Each query row is compared to every key row by L1
/// distance; the weights are `softmax(−‖q − kⱼ‖₁)` over keys and the output is
/// the weighted sum of value rows.
///
/// `queries: n × d`, `keys, values: C × d` → `n × d`.
pub fn cross_attention(g: &mut Graph, queries: NodeId, keys: NodeId, values: NodeId) -> Result<NodeId> {
    let weights = attention_weights(g, queries, keys)?;
    let (k, v) = (g.value(keys), g.value(values));
    if k.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            op: "cross_attention",
            left: k.shape().to_vec(),
            right: v.shape().to_vec(),
        });
    }
    g.matmul(weights, values)
}

/// The `n × C` attention weights used by [`cross_attention`].
pub fn attention_weights(g: &mut Graph, queries: NodeId, keys: NodeId) -> Result<NodeId> {
    // C = 0 is unrepresentable: tensors always have at least one row.
    let dist = g.l1_distances(queries, keys)?;
    let neg = g.negate(dist)?;
    g.softmax_rows(neg)
}

/// Averages the `k` feature rows of each class, giving one row per class in
/// class-index order. Every class must contribute the same number of rows.
pub fn instance_pool(g: &mut Graph, features: NodeId, labels: &[usize], classes: usize) -> Result<NodeId> {
    let n = g.value(features).rows();
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "instance_pool: {} labels for {n} feature rows",
            labels.len()
        )));
    }
    if classes == 0 {
        return Err(Error::InvalidArgument("instance_pool: no classes".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {classes} classes")));
        }
        counts[l] += 1;
    }
    let k = counts[0];
    if k == 0 || counts.iter().any(|&c| c != k) {
        return Err(Error::InvalidArgument(format!(
            "instance_pool: unbalanced classes {counts:?}"
        )));
    }
    let pool = Tensor::from_fn(classes, n, |c, i| if labels[i] == c { 1.0 / k as f64 } else { 0.0 });
    let pool = g.constant(pool);
    g.matmul(pool, features)
}
