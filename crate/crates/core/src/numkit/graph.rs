//! Dynamic tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse insertion order and accumulates gradients into
//! each node's `grad` buffer, so a value used twice receives the sum of both
//! contributions.

use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SumRows(Var),
    SumCols(Var),
    MaxCols {
        x: Var,
        argmax: Vec<usize>,
    },
    RepeatRows(Var),
    Reshape(Var),
    Pick {
        x: Var,
        index: usize,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AdaptivePool {
        x: Var,
        src: [usize; 3],
        dst: [usize; 3],
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    inference: bool,
}

fn bcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, _) => Some(y),
        (_, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a broadcast gradient of shape `out` down to `target`.
fn reduce_to(grad: &[f64], out: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if out == target {
        return grad.to_vec();
    }
    let mut red = vec![0.0; target.0 * target.1];
    for i in 0..out.0 {
        let ti = if target.0 == 1 { 0 } else { i };
        for j in 0..out.1 {
            let tj = if target.1 == 1 { 0 } else { j };
            red[ti * target.1 + tj] += grad[i * out.1 + j];
        }
    }
    red
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters load as constants, for forward-only use.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let mut value = value;
        value.requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        value.grad = None;
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut tensor = tensor;
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    /// Loads a parameter; repeated loads of the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.get(id).clone();
        let v = if self.inference { self.constant(t) } else { self.leaf(t.with_grad()) };
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
            )));
        }
        let data = kernels::matmul(&self.value(a).data, &self.value(b).data, m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_nt inner dimensions differ: {m}x{k} by ({n}x{k2})ᵀ"
            )));
        }
        let mut data = vec![0.0; m * n];
        kernels::mm_nt_acc(&self.value(a).data, &self.value(b).data, &mut data, m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = &self.value(x).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, Op::Transpose(x), &[x]))
    }

    // ---- elementwise with 2-D broadcasting -------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let da = self.dims(a)?;
        let db = self.dims(b)?;
        let out = bcast_dims(da, db).ok_or_else(|| {
            Error::Dimension(format!("{name}: cannot broadcast {da:?} with {db:?}"))
        })?;
        let (xa, xb) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(out.0 * out.1);
        for i in 0..out.0 {
            let ia = if da.0 == 1 { 0 } else { i } * da.1;
            let ib = if db.0 == 1 { 0 } else { i } * db.1;
            for j in 0..out.1 {
                let va = xa[ia + if da.1 == 1 { 0 } else { j }];
                let vb = xb[ib + if db.1 == 1 { 0 } else { j }];
                data.push(f(va, vb));
            }
        }
        Tensor::new(vec![out.0, out.1], data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    // ---- unary ------------------------------------------------------------

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = self.value(x);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, op, &[x])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.unary(x, Op::Scale(x, factor), |v| v * factor)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    /// `1/x` expressed through division so it shares the broadcast path.
    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let one = self.constant(Tensor::scalar(1.0));
        self.div(one, x)
    }

    // ---- normalization ----------------------------------------------------

    /// Stabilized softmax over the last axis of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = kernels::softmax_rows(&self.value(x).data, c);
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::SoftmaxRows(x), &[x]))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => self.softmax_rows(x),
            0 => {
                let t = self.transpose(x)?;
                let s = self.softmax_rows(t)?;
                self.transpose(s)
            }
            _ => Err(Error::Dimension(format!("softmax axis {axis} invalid for 2-D"))),
        }
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` (`1×C`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        for p in [gamma, beta] {
            if self.value(p).numel() != c {
                return Err(Error::Dimension(format!(
                    "layernorm affine has {} entries for width {c}",
                    self.value(p).numel()
                )));
            }
        }
        let src = &self.value(x).data;
        let (g, b) = (&self.value(gamma).data, &self.value(beta).data);
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[i * c + j] = xh;
                out[i * c + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- shape manipulation -------------------------------------------------

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "column slice {start}..{} out of {c}",
                start + len
            )));
        }
        let src = &self.value(x).data;
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let r = dims.first().map(|d| d.0).ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        if dims.iter().any(|d| d.0 != r) {
            return Err(Error::Dimension(format!("concat_cols row counts differ: {dims:?}")));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, d) in parts.iter().zip(&dims) {
                data.extend_from_slice(&self.value(p).data[i * d.1..(i + 1) * d.1]);
            }
        }
        let t = Tensor::new(vec![r, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let dims: Vec<_> = parts.iter().map(|&p| self.dims(p)).collect::<Result<_>>()?;
        let c = dims.first().map(|d| d.1).ok_or_else(|| Error::Dimension("concat of nothing".into()))?;
        if dims.iter().any(|d| d.1 != c) {
            return Err(Error::Dimension(format!("concat_rows column counts differ: {dims:?}")));
        }
        let rows: usize = dims.iter().map(|d| d.0).sum();
        let mut data = Vec::with_capacity(rows * c);
        for &p in parts {
            data.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Sum over axis 0: `r×c → 1×c`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = &self.value(x).data;
        let mut data = vec![0.0; c];
        for i in 0..r {
            add_into(&mut data, &src[i * c..(i + 1) * c]);
        }
        let t = Tensor::new(vec![1, c], data)?;
        Ok(self.push(t, Op::SumRows(x), &[x]))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let r = self.dims(x)?.0;
        let s = self.sum_rows(x)?;
        Ok(self.scale(s, 1.0 / r as f64))
    }

    /// Sum over axis 1: `r×c → r×1`.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let data = self.value(x).data.chunks_exact(c).map(|row| row.iter().sum()).collect();
        let t = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(t, Op::SumCols(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let rows = self.sum_rows(x)?;
        self.sum_cols(rows)
    }

    /// Row maxima `r×c → r×1`; the gradient flows to the first maximal entry.
    pub fn max_cols(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        let src = &self.value(x).data;
        let mut argmax = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r);
        for row in src.chunks_exact(c) {
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            data.push(row[best]);
        }
        let t = Tensor::new(vec![r, 1], data)?;
        Ok(self.push(t, Op::MaxCols { x, argmax }, &[x]))
    }

    /// Tiles a `1×c` row `times` times.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let (r, c) = self.dims(x)?;
        if r != 1 {
            return Err(Error::Dimension(format!("repeat_rows expects 1 row, got {r}")));
        }
        let src = self.value(x).data.clone();
        let data = src.iter().copied().cycle().take(times * c).collect();
        let t = Tensor::new(vec![times, c], data)?;
        Ok(self.push(t, Op::RepeatRows(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Selects one element by flat index as a `1×1` tensor.
    pub fn pick(&mut self, x: Var, index: usize) -> Result<Var> {
        let v = *self
            .value(x)
            .data
            .get(index)
            .ok_or_else(|| Error::Dimension(format!("pick index {index} out of range")))?;
        Ok(self.push(Tensor::scalar(v), Op::Pick { x, index }, &[x]))
    }

    // ---- volumes -------------------------------------------------------------

    /// 3×3×3 convolution, padding 1, over a channel-last `[t,h,w,cin]` volume.
    /// `w` is `(27·cin)×cout` in tap-major order, `b` is `1×cout`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: [usize; 3]) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        let [t, h, wd, cin] = shape[..] else {
            return Err(Error::Dimension(format!("conv3d expects [t,h,w,c], got {shape:?}")));
        };
        let geom = ConvGeom {
            t,
            h,
            w: wd,
            cin,
            stride,
        };
        let (patch, cout) = self.dims(w)?;
        if patch != geom.patch() || self.value(b).numel() != cout {
            return Err(Error::Dimension(format!(
                "conv3d weight {patch}x{cout} does not fit {cin} input channels"
            )));
        }
        let cols = geom.im2col(&self.value(x).data);
        let [ot, oh, ow] = geom.out_dims();
        let pos = ot * oh * ow;
        let mut out = vec![0.0; pos * cout];
        let bias = &self.value(b).data;
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(bias);
        }
        kernels::mm_nn_acc(&cols, &self.value(w).data, &mut out, pos, patch, cout);
        let value = Tensor::new(vec![ot, oh, ow, cout], out)?;
        Ok(self.push(value, Op::Conv3d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Adaptive average pooling of a `[t',h',w',c]` volume to `[t,h,w,c]`.
    pub fn adaptive_avg_pool(&mut self, x: Var, target: [usize; 3]) -> Result<Var> {
        let shape = self.value(x).shape.clone();
        let [st, sh, sw, c] = shape[..] else {
            return Err(Error::Dimension(format!("pool expects [t,h,w,c], got {shape:?}")));
        };
        if target.contains(&0) || st == 0 || sh == 0 || sw == 0 {
            return Err(Error::Dimension("pool dimensions must be positive".into()));
        }
        let src = [st, sh, sw];
        let data = pool_forward(&self.value(x).data, src, target, c);
        let value = Tensor::new(vec![target[0], target[1], target[2], c], data)?;
        Ok(self.push(value, Op::AdaptivePool { x, src, dst: target }, &[x]))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        for n in &mut self.nodes {
            n.value.grad = None;
        }
        self.nodes[loss.0].value.grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.value.requires_grad {
                continue;
            }
            let Some(g) = node.value.grad.as_deref() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient at node {i}")));
            }
            backprop(before, &node.op, &node.value, g);
        }
        Ok(())
    }

    /// Adds the gradients of every parameter node into `grads`.
    pub fn accumulate_param_grads(&self, grads: &mut Grads) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.grad(v) {
                add_into(&mut grads.values[id.0], g);
            }
        }
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }
}

fn pool_forward(x: &[f64], src: [usize; 3], dst: [usize; 3], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; dst[0] * dst[1] * dst[2] * c];
    for_each_pool_cell(src, dst, |cell, inputs, count| {
        let o = &mut out[cell * c..(cell + 1) * c];
        for idx in inputs {
            add_into(o, &x[idx * c..(idx + 1) * c]);
        }
        let inv = 1.0 / count as f64;
        for v in o.iter_mut() {
            *v *= inv;
        }
    });
    out
}

fn for_each_pool_cell(src: [usize; 3], dst: [usize; 3], mut f: impl FnMut(usize, &mut dyn Iterator<Item = usize>, usize)) {
    let mut cell = 0;
    for a in 0..dst[0] {
        let (t0, t1) = kernels::adaptive_bin(a, src[0], dst[0]);
        for b in 0..dst[1] {
            let (h0, h1) = kernels::adaptive_bin(b, src[1], dst[1]);
            for d in 0..dst[2] {
                let (w0, w1) = kernels::adaptive_bin(d, src[2], dst[2]);
                let count = (t1 - t0) * (h1 - h0) * (w1 - w0);
                let mut it = (t0..t1).flat_map(move |t| {
                    (h0..h1).flat_map(move |h| (w0..w1).map(move |w| (t * src[1] + h) * src[2] + w))
                });
                f(cell, &mut it, count);
                cell += 1;
            }
        }
    }
}

/// Adds `contrib` into the gradient of `v` if that node tracks gradients.
fn acc(nodes: &mut [Node], v: Var, contrib: impl FnOnce(&mut [f64])) {
    let node = &mut nodes[v.0];
    if !node.value.requires_grad {
        return;
    }
    let n = node.value.numel();
    let g = node.value.grad.get_or_insert_with(|| vec![0.0; n]);
    contrib(g);
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].value.requires_grad
}

fn backprop(nodes: &mut [Node], op: &Op, out: &Tensor, g: &[f64]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let n = nodes[b.0].value.shape[1];
            if needs(nodes, *a) {
                let mut ga = vec![0.0; m * k];
                kernels::mm_nt_acc(g, &nodes[b.0].value.data, &mut ga, m, n, k);
                acc(nodes, *a, |d| add_into(d, &ga));
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; k * n];
                kernels::mm_tn_acc(&nodes[a.0].value.data, g, &mut gb, m, k, n);
                acc(nodes, *b, |d| add_into(d, &gb));
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let n = nodes[b.0].value.shape[0];
            if needs(nodes, *a) {
                let mut ga = vec![0.0; m * k];
                kernels::mm_nn_acc(g, &nodes[b.0].value.data, &mut ga, m, n, k);
                acc(nodes, *a, |d| add_into(d, &ga));
            }
            if needs(nodes, *b) {
                let mut gb = vec![0.0; n * k];
                kernels::mm_tn_acc(g, &nodes[a.0].value.data, &mut gb, m, n, k);
                acc(nodes, *b, |d| add_into(d, &gb));
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let od = (out.shape[0], out.shape[1]);
            let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let da = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let db = (nodes[b.0].value.shape[0], nodes[b.0].value.shape[1]);
            if needs(nodes, *a) {
                let r = reduce_to(g, od, da);
                acc(nodes, *a, |d| add_into(d, &r));
            }
            if needs(nodes, *b) {
                let mut r = reduce_to(g, od, db);
                r.iter_mut().for_each(|v| *v *= sign);
                acc(nodes, *b, |d| add_into(d, &r));
            }
        }
        Op::Mul(a, b) | Op::Div(a, b) => {
            let od = (out.shape[0], out.shape[1]);
            let da = (nodes[a.0].value.shape[0], nodes[a.0].value.shape[1]);
            let db = (nodes[b.0].value.shape[0], nodes[b.0].value.shape[1]);
            let is_div = matches!(op, Op::Div(..));
            let (xa, xb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
            let mut ga_full = vec![0.0; g.len()];
            let mut gb_full = vec![0.0; g.len()];
            for i in 0..od.0 {
                let ia = if da.0 == 1 { 0 } else { i } * da.1;
                let ib = if db.0 == 1 { 0 } else { i } * db.1;
                for j in 0..od.1 {
                    let va = xa[ia + if da.1 == 1 { 0 } else { j }];
                    let vb = xb[ib + if db.1 == 1 { 0 } else { j }];
                    let k = i * od.1 + j;
                    if is_div {
                        ga_full[k] = g[k] / vb;
                        gb_full[k] = -g[k] * va / (vb * vb);
                    } else {
                        ga_full[k] = g[k] * vb;
                        gb_full[k] = g[k] * va;
                    }
                }
            }
            let ra = reduce_to(&ga_full, od, da);
            let rb = reduce_to(&gb_full, od, db);
            acc(nodes, *a, |d| add_into(d, &ra));
            acc(nodes, *b, |d| add_into(d, &rb));
        }
        Op::Scale(x, f) => acc(nodes, *x, |d| {
            for (di, gi) in d.iter_mut().zip(g) {
                *di += f * gi;
            }
        }),
        Op::AddScalar(x) | Op::Reshape(x) => acc(nodes, *x, |d| add_into(d, g)),
        Op::Exp(x) => acc(nodes, *x, |d| {
            for ((di, gi), yi) in d.iter_mut().zip(g).zip(&out.data) {
                *di += gi * yi;
            }
        }),
        Op::Log(x) => {
            let src = nodes[x.0].value.data.clone();
            acc(nodes, *x, |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(&src) {
                    *di += gi / xi;
                }
            })
        }
        Op::Sigmoid(x) => acc(nodes, *x, |d| {
            for ((di, gi), yi) in d.iter_mut().zip(g).zip(&out.data) {
                *di += gi * yi * (1.0 - yi);
            }
        }),
        Op::Gelu(x) => {
            let src = nodes[x.0].value.data.clone();
            acc(nodes, *x, |d| {
                for ((di, gi), xi) in d.iter_mut().zip(g).zip(&src) {
                    *di += gi * kernels::gelu_grad(*xi);
                }
            })
        }
        Op::SoftmaxRows(x) => {
            let c = out.shape[1];
            acc(nodes, *x, |d| {
                for ((drow, grow), yrow) in d
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(out.data.chunks_exact(c))
                {
                    let dotp: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        drow[j] += yrow[j] * (grow[j] - dotp);
                    }
                }
            })
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let c = out.shape[1];
            let r = out.shape[0];
            if needs(nodes, *x) {
                let gm = nodes[gamma.0].value.data.clone();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..c {
                        let dxh = grow[j] * gm[j];
                        mean_d += dxh;
                        mean_dx += dxh * xh[j];
                    }
                    mean_d /= c as f64;
                    mean_dx /= c as f64;
                    for j in 0..c {
                        let dxh = grow[j] * gm[j];
                        dx[i * c + j] = rstd[i] * (dxh - mean_d - xh[j] * mean_dx);
                    }
                }
                acc(nodes, *x, |d| add_into(d, &dx));
            }
            acc(nodes, *gamma, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[j] += g[i * c + j] * xhat[i * c + j];
                    }
                }
            });
            acc(nodes, *beta, |d| {
                for i in 0..r {
                    add_into(d, &g[i * c..(i + 1) * c]);
                }
            });
        }
        Op::Transpose(x) => {
            let (r, c) = (out.shape[0], out.shape[1]);
            acc(nodes, *x, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] += g[i * c + j];
                    }
                }
            })
        }
        Op::SliceCols { x, start } => {
            let (r, len) = (out.shape[0], out.shape[1]);
            let c = nodes[x.0].value.shape[1];
            acc(nodes, *x, |d| {
                for i in 0..r {
                    add_into(&mut d[i * c + start..i * c + start + len], &g[i * len..(i + 1) * len]);
                }
            })
        }
        Op::ConcatCols(parts) => {
            let (r, total) = (out.shape[0], out.shape[1]);
            let mut offset = 0;
            for &p in parts {
                let w = nodes[p.0].value.shape[1];
                acc(nodes, p, |d| {
                    for i in 0..r {
                        add_into(&mut d[i * w..(i + 1) * w], &g[i * total + offset..i * total + offset + w]);
                    }
                });
                offset += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = nodes[p.0].value.numel();
                acc(nodes, p, |d| add_into(d, &g[offset..offset + n]));
                offset += n;
            }
        }
        Op::SumRows(x) => {
            let c = out.shape[1];
            acc(nodes, *x, |d| {
                for row in d.chunks_exact_mut(c) {
                    add_into(row, g);
                }
            })
        }
        Op::SumCols(x) => {
            let c = nodes[x.0].value.shape[1];
            acc(nodes, *x, |d| {
                for (row, gi) in d.chunks_exact_mut(c).zip(g) {
                    row.iter_mut().for_each(|v| *v += gi);
                }
            })
        }
        Op::MaxCols { x, argmax } => {
            let c = nodes[x.0].value.shape[1];
            acc(nodes, *x, |d| {
                for (i, (&j, gi)) in argmax.iter().zip(g).enumerate() {
                    d[i * c + j] += gi;
                }
            })
        }
        Op::RepeatRows(x) => {
            let c = out.shape[1];
            acc(nodes, *x, |d| {
                for grow in g.chunks_exact(c) {
                    add_into(d, grow);
                }
            })
        }
        Op::Pick { x, index } => acc(nodes, *x, |d| d[*index] += g[0]),
        Op::Conv3d { x, w, b, geom, cols } => {
            let patch = geom.patch();
            let cout = out.shape[3];
            let pos = cols.len() / patch;
            if needs(nodes, *w) {
                let mut gw = vec![0.0; patch * cout];
                kernels::mm_tn_acc(cols, g, &mut gw, pos, patch, cout);
                acc(nodes, *w, |d| add_into(d, &gw));
            }
            acc(nodes, *b, |d| {
                for grow in g.chunks_exact(cout) {
                    add_into(d, grow);
                }
            });
            if needs(nodes, *x) {
                let mut gcols = vec![0.0; pos * patch];
                kernels::mm_nt_acc(g, &nodes[w.0].value.data, &mut gcols, pos, cout, patch);
                acc(nodes, *x, |d| geom.col2im_acc(&gcols, d));
            }
        }
        Op::AdaptivePool { x, src, dst } => {
            let c = out.shape[3];
            acc(nodes, *x, |d| {
                for_each_pool_cell(*src, *dst, |cell, inputs, count| {
                    let inv = 1.0 / count as f64;
                    let gcell = &g[cell * c..(cell + 1) * c];
                    for idx in inputs {
                        for k in 0..c {
                            d[idx * c + k] += gcell[k] * inv;
                        }
                    }
                });
            })
        }
    }
}
