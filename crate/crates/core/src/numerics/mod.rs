//! Differentiable computation substrate: dense values, a reverse-mode tape,
//! recurrent cells, initializers and the Adam optimizer.

mod gru;
mod init;
mod optim;
mod params;
mod segments;
mod tape;
mod value;

pub use gru::{gru_cell, GruParams};
pub use init::Initializer;
pub use optim::{AdamConfig, OptimizerState};
pub use params::{GradBuf, ParamGrads, ParamId, ParamStore, Parameter};
pub use segments::Segments;
pub use tape::{time_phase, NodeGrads, Tape, Var};
pub use value::Value;

use crate::error::{DsppError, Result};

/// `ln(1 + e^x)`, overflow-safe and strictly positive for finite `x`.
///
/// Results that would underflow are clamped to the smallest positive normal.
pub fn softplus(x: f64) -> f64 {
    let y = x.max(0.0) + (-x.abs()).exp().ln_1p();
    y.max(f64::MIN_POSITIVE)
}

/// `ln(softplus(x))` without the underflow of the two-step form.
pub fn log_softplus(x: f64) -> f64 {
    if x < -30.0 {
        // softplus(x) = e^x (1 - e^x / 2 + ...) here
        x + (-0.5 * x.exp()).ln_1p()
    } else {
        softplus(x).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax. An empty input has no attention set to normalize.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(DsppError::DegenerateAttention);
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}
