//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Leaves are registered with
//! [`Graph::param`] (trainable) or [`Graph::constant`]; primitives append
//! nodes and [`Graph::backward`] sweeps them in reverse.

mod adam;
mod graph;
mod kernels;
mod tensor;

use rand::Rng;
use thiserror::Error;

pub use adam::{AdamConfig, AdamState};
pub use graph::{log_sum_exp, sigmoid, softplus, Gradients, Graph, Var, Vjp};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: non-finite output (numeric overflow)")]
    NonFinite { op: &'static str },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
}

/// Channel-wise dropout: every `(sample, channel)` map is zeroed with
/// probability `rate`, survivors are scaled by `1 / (1 - rate)`. Identity
/// when inactive or `rate == 0`.
pub fn spatial_dropout<R: Rng + ?Sized>(
    g: &Graph,
    x: Var,
    rate: f64,
    rng: &mut R,
    active: bool,
) -> Result<Var, EngineError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(EngineError::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !active || rate == 0.0 {
        return Ok(x);
    }
    let shape = g.shape(x);
    if shape.len() < 3 {
        return Err(EngineError::Shape {
            op: "spatial_dropout",
            detail: format!("expected [N, C, S...], got {shape:?}"),
        });
    }
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..shape[0] * shape[1])
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mut mshape = vec![1; shape.len()];
    mshape[0] = shape[0];
    mshape[1] = shape[1];
    let m = g.constant(Tensor::new(mshape, mask)?);
    let m = g.broadcast(m, &shape)?;
    g.mul(x, m)
}

/// Largest relative deviation between the analytic gradient of `f` at `x`
/// and central differences with step `h`, over the entries in `indices`
/// (all entries when `None`). Relative error is
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check_entries<F>(f: F, x: &Tensor, h: f64, indices: Option<&[usize]>) -> Result<f64, EngineError>
where
    F: Fn(&Graph, Var) -> Result<Var, EngineError>,
{
    if h <= 0.0 {
        return Err(EngineError::InvalidArgument(format!("step must be positive, got {h}")));
    }
    let analytic = {
        let g = Graph::new();
        let v = g.param(x.clone());
        let loss = f(&g, v)?;
        g.backward(loss)?.get(v)
    };
    let eval = |t: Tensor| -> Result<f64, EngineError> {
        let g = Graph::new();
        let v = g.constant(t);
        let y = f(&g, v)?;
        let val = g.item(y);
        if !val.is_finite() {
            return Err(EngineError::NonFinite { op: "grad_check" });
        }
        Ok(val)
    };
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..x.numel()).collect();
            &all
        }
    };
    let mut worst: f64 = 0.0;
    for &i in idx {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// [`grad_check_entries`] over every entry of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64, EngineError>
where
    F: Fn(&Graph, Var) -> Result<Var, EngineError>,
{
    grad_check_entries(f, x, h, None)
}
