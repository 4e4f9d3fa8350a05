//! Dense `f64` tensors and reverse-mode differentiation.

mod graph;
pub mod ops;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}

/// Relative disagreement `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` between an analytic
/// and a numeric gradient of one parameter tensor. Two gradients that are
/// both below `floor` in norm count as agreeing.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale < floor {
        0.0
    } else {
        diff / scale
    }
}
