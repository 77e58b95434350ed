//! Minimal differentiable numeric core.
//!
//! [`Tensor`] is a plain dense value. Differentiable computations are
//! recorded on a [`Graph`] tape; parameters live in a [`ParamStore`] and are
//! loaded onto each tape by id. The free functions here are the eager,
//! non-recording forms of the same operations.

pub mod graph;
pub mod kernels;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, Var};
pub use layers::{AttentionTrace, LayerNorm, Linear, Mlp, MultiHeadAttention, LN_EPS};
pub use optim::{lr_schedule, scaled_drop_epochs, AdamW};
pub use params::{Grads, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = g.matmul(va, vb)?;
    Ok(g.value(out).clone())
}

/// Stabilized softmax along any axis of an N-D tensor.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    if axis >= x.shape.len() {
        return Err(Error::Dimension(format!(
            "softmax axis {axis} out of range for shape {:?}",
            x.shape
        )));
    }
    let len = x.shape[axis];
    let inner: usize = x.shape[axis + 1..].iter().product();
    let outer: usize = x.shape[..axis].iter().product();
    let mut out = x.clone();
    out.grad = None;
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out.data[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out.data[idx(k)] /= sum;
            }
        }
    }
    Ok(out)
}

/// Layer normalization over the last axis of a 2-D tensor.
pub fn layernorm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (g.constant(x.clone()), g.constant(gamma.clone()), g.constant(beta.clone()));
    let out = g.layernorm(vx, vg, vb, eps)?;
    Ok(g.value(out).clone())
}
