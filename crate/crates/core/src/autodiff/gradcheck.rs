use super::ParamStore;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference estimate of `∇f(x)`, one coordinate at a time:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff = a.zip_map(b, |x, y| x - y).norm();
    let scale = a.norm().max(b.norm());
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

/// Relative error between analytic and finite-difference gradients for one
/// named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub name: String,
    pub relative_error: f64,
}

/// Compares `analytic` (one gradient per parameter, in store order) against
/// central differences of `loss`, perturbing every scalar of every parameter.
pub fn check_parameter_gradients<F>(store: &ParamStore, analytic: &[Tensor], h: f64, mut loss: F) -> Result<Vec<GroupError>>
where
    F: FnMut(&ParamStore) -> Result<f64>,
{
    if analytic.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "{} gradients for {} parameters",
            analytic.len(),
            store.len()
        )));
    }
    let mut probe = store.clone();
    let mut out = Vec::with_capacity(store.len());
    for (i, grad) in analytic.iter().enumerate() {
        let original = store.tensors()[i].clone();
        let numeric = finite_difference_gradient(
            |t| {
                probe.tensors_mut()[i] = t.clone();
                loss(&probe)
            },
            &original,
            h,
        )?;
        probe.tensors_mut()[i] = original;
        out.push(GroupError {
            name: store.names()[i].clone(),
            relative_error: relative_error(grad, &numeric),
        });
    }
    Ok(out)
}
