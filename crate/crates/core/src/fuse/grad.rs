//! Finite-difference verification of the analytic gradients.

use super::{FusionInput, FusionParams};
use crate::error::Result;

/// Relative error `‖a − n‖ / max(‖a‖ + ‖n‖, floor)` per tensor, where the
/// floor is a small fraction of the whole-model gradient norm. Tensors with a
/// structurally zero gradient (key biases: softmax is shift invariant) would
/// otherwise report pure rounding noise as 100% error.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub per_tensor: Vec<(String, f64)>,
    pub max_relative_error: f64,
}

impl GradReport {
    pub fn worst(&self) -> Option<&(String, f64)> {
        self.per_tensor.iter().max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

const RELATIVE_FLOOR: f64 = 1e-3;
const ABSOLUTE_FLOOR: f64 = 1e-12;

fn norm(data: &[f64]) -> f64 {
    data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `Σ F_elem²` with step `h`.
pub fn numeric_gradient(params: &FusionParams<f64>, input: &FusionInput<f64>, h: f64) -> Result<FusionParams<f64>> {
    let mut probe = params.clone();
    let mut grad = params.zeros_like();
    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
    for (k, len) in sizes.into_iter().enumerate() {
        for i in 0..len {
            let original = probe.tensors()[k].data[i];
            probe.tensors_mut()[k].data[i] = original + h;
            let plus = probe.loss(input)?;
            probe.tensors_mut()[k].data[i] = original - h;
            let minus = probe.loss(input)?;
            probe.tensors_mut()[k].data[i] = original;
            grad.tensors_mut()[k].data[i] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grad)
}

pub fn compare_gradients(analytic: &FusionParams<f64>, numeric: &FusionParams<f64>) -> GradReport {
    let total = analytic.tensors().iter().map(|t| norm(t.data).powi(2)).sum::<f64>().sqrt();
    let floor = (RELATIVE_FLOOR * total).max(ABSOLUTE_FLOOR);
    let per_tensor: Vec<(String, f64)> = analytic
        .tensors()
        .iter()
        .zip(numeric.tensors())
        .map(|(a, n)| {
            let diff: Vec<f64> = a.data.iter().zip(n.data).map(|(x, y)| x - y).collect();
            (a.name.clone(), norm(&diff) / (norm(a.data) + norm(n.data)).max(floor))
        })
        .collect();
    let max_relative_error = per_tensor.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradReport {
        per_tensor,
        max_relative_error,
    }
}

/// Analytic vs. central-difference gradients (h = 1e-5) of `Σ F_elem²`.
pub fn grad_check(params: &FusionParams<f64>, input: &FusionInput<f64>) -> Result<GradReport> {
    let (_, analytic) = params.loss_and_grad(input)?;
    let numeric = numeric_gradient(params, input, 1e-5)?;
    Ok(compare_gradients(&analytic, &numeric))
}
