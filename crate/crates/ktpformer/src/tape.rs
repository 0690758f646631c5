//! Wengert-tape reverse-mode autodiff over [`Tensor`] values.
//!
//! Ops are recorded eagerly: each call evaluates forward immediately and
//! appends one node, so node index order is a topological order of the
//! graph. `backward` walks the tape once in reverse, accumulating into
//! per-node gradient buffers with `+=`; a value consumed by several ops
//! therefore receives the sum of its downstream contributions.
//!
//! Gradient buffers live separately from values: `reset_grads` clears them
//! and a second `backward` on the same tape reproduces the first result
//! bit for bit. A tape is confined to one logical forward/backward pass;
//! build a fresh tape per training step.

use crate::error::{KtpError, Result};
use crate::tensor::{matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, Tensor};

/// Handle to a tape node. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_CUBIC: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    Matmul(VarId, VarId),
    Bmm(VarId, VarId),
    Permute {
        x: VarId,
        perm: Vec<usize>,
    },
    Reshape(VarId),
    BroadcastTo {
        x: VarId,
        /// Output-rank strides into the input; 0 on broadcast axes.
        in_strides: Vec<usize>,
    },
    ConcatLast {
        inputs: Vec<VarId>,
        widths: Vec<usize>,
    },
    Narrow {
        x: VarId,
        axis: usize,
        start: usize,
    },
    SoftmaxLast(VarId),
    LayerNorm {
        x: VarId,
        gain: VarId,
        bias: VarId,
        /// Normalized pre-affine values, same shape as x.
        xhat: Vec<f64>,
        /// One reciprocal standard deviation per normalized slice.
        inv_std: Vec<f64>,
    },
    Gelu(VarId),
    NormLast(VarId),
    SumAll(VarId),
    MeanAll(VarId),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        VarId(self.nodes.len() - 1)
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, false)
    }

    /// Differentiable leaf; `grad` after `backward` holds dloss/dleaf.
    pub fn param(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, value, true)
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// dloss/dnode after `backward`. Nodes the loss never reached hold zeros.
    pub fn grad(&self, id: VarId) -> Tensor {
        let node = &self.nodes[id.0];
        match &self.grads[id.0] {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone())
                .expect("grad buffer matches value shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn reset_grads(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    // ---- elementwise ----

    fn binary_same_shape(&mut self, op_name: &'static str, a: VarId, b: VarId) -> Result<()> {
        if self.nodes[a.0].value.shape() != self.nodes[b.0].value.shape() {
            return Err(KtpError::ShapeMismatch {
                op: op_name,
                left: self.nodes[a.0].value.shape().to_vec(),
                right: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add(a, b), value, rg))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x - y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Sub(a, b), value, rg))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul(a, b), value, rg))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> Result<VarId> {
        if !c.is_finite() {
            return Err(KtpError::Numerical(format!(
                "scale factor must be finite, got {c}"
            )));
        }
        let data = self.nodes[a.0].value.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(self.nodes[a.0].value.shape().to_vec(), data)?;
        let rg = self.requires(a);
        Ok(self.push(Op::Scale(a, c), value, rg))
    }

    // ---- contractions ----

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(KtpError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(
            self.nodes[a.0].value.data(),
            self.nodes[b.0].value.data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Matmul(a, b), value, rg))
    }

    /// Batched matmul: `[B,m,k] · [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (sa, sb) = (
            self.nodes[a.0].value.shape().to_vec(),
            self.nodes[b.0].value.shape().to_vec(),
        );
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(KtpError::ShapeMismatch {
                op: "bmm",
                left: sa,
                right: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            matmul_acc(
                &self.nodes[a.0].value.data()[i * m * k..(i + 1) * m * k],
                &self.nodes[b.0].value.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(vec![bsz, m, n], out)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Bmm(a, b), value, rg))
    }

    // ---- shape movement ----

    pub fn permute(&mut self, x: VarId, perm: &[usize]) -> Result<VarId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if !is_permutation(perm, shape.len()) {
            return Err(KtpError::Validation(format!(
                "permute axes {:?} are not a permutation of 0..{}",
                perm,
                shape.len()
            )));
        }
        let (out_data, out_shape) = permute_data(self.nodes[x.0].value.data(), &shape, perm);
        let value = Tensor::new(out_shape, out_data)?;
        let rg = self.requires(x);
        Ok(self.push(
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            value,
            rg,
        ))
    }

    pub fn reshape(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[x.0].value.numel() {
            return Err(KtpError::ShapeMismatch {
                op: "reshape",
                left: self.nodes[x.0].value.shape().to_vec(),
                right: shape,
            });
        }
        let value = Tensor::new(shape, self.nodes[x.0].value.data().to_vec())?;
        let rg = self.requires(x);
        Ok(self.push(Op::Reshape(x), value, rg))
    }

    /// Numpy-style broadcast: the input shape is right-aligned against the
    /// target; missing leading axes and axes of extent 1 are expanded.
    pub fn broadcast_to(&mut self, x: VarId, shape: Vec<usize>) -> Result<VarId> {
        let in_shape = self.nodes[x.0].value.shape().to_vec();
        if in_shape.len() > shape.len() {
            return Err(KtpError::ShapeMismatch {
                op: "broadcast_to",
                left: in_shape,
                right: shape,
            });
        }
        let offset = shape.len() - in_shape.len();
        let in_strides_native = Tensor::strides_of(&in_shape);
        let mut in_strides = vec![0usize; shape.len()];
        for (i, &dim) in shape.iter().enumerate() {
            if i < offset {
                continue; // new leading axis, stride 0
            }
            let in_dim = in_shape[i - offset];
            if in_dim == dim {
                in_strides[i] = in_strides_native[i - offset];
            } else if in_dim == 1 {
                in_strides[i] = 0;
            } else {
                return Err(KtpError::ShapeMismatch {
                    op: "broadcast_to",
                    left: in_shape,
                    right: shape,
                });
            }
        }
        let out_strides = Tensor::strides_of(&shape);
        let numel: usize = shape.iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; numel];
        for (flat, o) in out.iter_mut().enumerate() {
            *o = src[map_index(flat, &out_strides, &shape, &in_strides)];
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::BroadcastTo { x, in_strides }, value, rg))
    }

    pub fn concat_lastaxis(&mut self, inputs: &[VarId]) -> Result<VarId> {
        if inputs.is_empty() {
            return Err(KtpError::Validation(
                "concat_lastaxis needs at least one input".into(),
            ));
        }
        let first = self.nodes[inputs[0].0].value.shape().to_vec();
        if first.is_empty() {
            return Err(KtpError::Validation(
                "concat_lastaxis needs rank >= 1 inputs".into(),
            ));
        }
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &id in inputs {
            let s = self.nodes[id.0].value.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(KtpError::ShapeMismatch {
                    op: "concat_lastaxis",
                    left: first,
                    right: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        for r in 0..rows {
            let mut col = 0;
            for (&id, &w) in inputs.iter().zip(&widths) {
                let src = self.nodes[id.0].value.data();
                out[r * total + col..r * total + col + w].copy_from_slice(&src[r * w..(r + 1) * w]);
                col += w;
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        let rg = inputs.iter().any(|&i| self.requires(i));
        Ok(self.push(
            Op::ConcatLast {
                inputs: inputs.to_vec(),
                widths,
            },
            value,
            rg,
        ))
    }

    /// Contiguous window `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: VarId, axis: usize, start: usize, len: usize) -> Result<VarId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(KtpError::Validation(format!(
                "narrow window axis={axis} start={start} len={len} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for i in 0..len {
                let s = (o * mid + start + i) * inner;
                let d = (o * len + i) * inner;
                out[d..d + inner].copy_from_slice(&src[s..s + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Narrow { x, axis, start }, value, rg))
    }

    // ---- nonlinear ----

    /// Row-stabilized softmax over the last axis. Finite input is required;
    /// a NaN anywhere is reported as a numerical error rather than being
    /// silently propagated through exp.
    pub fn softmax_lastaxis(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.is_empty() {
            return Err(KtpError::Validation(
                "softmax_lastaxis needs rank >= 1".into(),
            ));
        }
        let d = shape[shape.len() - 1];
        if d == 0 {
            return Err(KtpError::Validation("softmax_lastaxis over empty axis".into()));
        }
        let src = self.nodes[x.0].value.data();
        if !src.iter().all(|v| v.is_finite()) {
            return Err(KtpError::Numerical(
                "softmax_lastaxis input contains a non-finite value".into(),
            ));
        }
        let mut out = vec![0.0; src.len()];
        for (row_in, row_out) in src.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let max = row_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (o, &v) in row_out.iter_mut().zip(row_in) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::SoftmaxLast(x), value, rg))
    }

    /// Normalization over the last axis with learnable gain and bias, both
    /// shaped `[d]`. Variance is the biased (divide by d) estimate.
    /// `eps >= 0`; eps = 0 is permitted for non-constant slices.
    pub fn layer_norm(&mut self, x: VarId, gain: VarId, bias: VarId, eps: f64) -> Result<VarId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.is_empty() {
            return Err(KtpError::Validation("layer_norm needs rank >= 1".into()));
        }
        let d = shape[shape.len() - 1];
        if d == 0 {
            return Err(KtpError::Validation("layer_norm over empty axis".into()));
        }
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(KtpError::Validation(format!(
                "layer_norm eps must be finite and >= 0, got {eps}"
            )));
        }
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let s = self.nodes[id.0].value.shape();
            if s != [d] {
                return Err(KtpError::ShapeMismatch {
                    op: if name == "gain" {
                        "layer_norm gain"
                    } else {
                        "layer_norm bias"
                    },
                    left: shape,
                    right: s.to_vec(),
                });
            }
        }
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data().to_vec();
        let b = self.nodes[bias.0].value.data().to_vec();
        let slices = src.len() / d;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; slices];
        for s in 0..slices {
            let row = &src[s * d..(s + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[s] = istd;
            for i in 0..d {
                let xh = (row[i] - mean) * istd;
                xhat[s * d + i] = xh;
                out[s * d + i] = xh * g[i] + b[i];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            value,
            rg,
        ))
    }

    /// Smooth Gaussian-error-style nonlinearity (tanh form); its exact
    /// derivative is used in backward.
    pub fn gelu(&mut self, x: VarId) -> Result<VarId> {
        let data = self.nodes[x.0]
            .value
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_CUBIC * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let rg = self.requires(x);
        Ok(self.push(Op::Gelu(x), value, rg))
    }

    /// Euclidean norm over the last axis: `[.., d] -> [..]`.
    pub fn norm_lastaxis(&mut self, x: VarId) -> Result<VarId> {
        let shape = self.nodes[x.0].value.shape().to_vec();
        if shape.is_empty() {
            return Err(KtpError::Validation("norm_lastaxis needs rank >= 1".into()));
        }
        let d = shape[shape.len() - 1];
        if d == 0 {
            return Err(KtpError::Validation("norm_lastaxis over empty axis".into()));
        }
        let src = self.nodes[x.0].value.data();
        let out: Vec<f64> = src
            .chunks_exact(d)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let value = Tensor::new(shape[..shape.len() - 1].to_vec(), out)?;
        let rg = self.requires(x);
        Ok(self.push(Op::NormLast(x), value, rg))
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: VarId) -> Result<VarId> {
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.requires(x);
        Ok(self.push(Op::SumAll(x), Tensor::scalar(s), rg))
    }

    pub fn mean_all(&mut self, x: VarId) -> Result<VarId> {
        let n = self.nodes[x.0].value.numel();
        if n == 0 {
            return Err(KtpError::Validation("mean_all over empty tensor".into()));
        }
        let s: f64 = self.nodes[x.0].value.data().iter().sum();
        let rg = self.requires(x);
        Ok(self.push(Op::MeanAll(x), Tensor::scalar(s / n as f64), rg))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients accumulate; leaves the
    /// loss never reached keep zero (reported as zeros by `grad`).
    pub fn backward(&mut self, loss: VarId) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(KtpError::Validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        ensure_grad(&self.nodes, &mut self.grads, loss.0)[0] += 1.0;
        for idx in (0..=loss.0).rev() {
            if self.grads[idx].is_none() || !self.nodes[idx].requires_grad {
                continue;
            }
            backprop_node(&self.nodes, &mut self.grads, idx);
        }
        Ok(())
    }
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Decompose `flat` against `shape`/`strides` and re-dot with `target_strides`.
fn map_index(flat: usize, strides: &[usize], shape: &[usize], target_strides: &[usize]) -> usize {
    let mut rem = flat;
    let mut out = 0;
    for i in 0..shape.len() {
        let idx = rem / strides[i];
        rem %= strides[i];
        out += idx * target_strides[i];
    }
    out
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = Tensor::strides_of(shape);
    let out_strides = Tensor::strides_of(&out_shape);
    // For input axis a at output position i (perm[i] == a), an input step
    // along a moves the output by out_strides[i].
    let mut contrib = vec![0usize; shape.len()];
    for (i, &a) in perm.iter().enumerate() {
        contrib[a] = out_strides[i];
    }
    let mut out = vec![0.0; data.len()];
    for (flat, &v) in data.iter().enumerate() {
        out[map_index(flat, &in_strides, shape, &contrib)] = v;
    }
    (out, out_shape)
}

fn ensure_grad<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: usize,
) -> &'a mut Vec<f64> {
    if grads[id].is_none() {
        grads[id] = Some(vec![0.0; nodes[id].value.numel()]);
    }
    grads[id].as_mut().unwrap()
}

/// Apply one node's vector-Jacobian product. Inputs always precede the node
/// on the tape, so `split_at_mut(idx)` separates the node's own gradient
/// from every input buffer it feeds.
fn backprop_node(nodes: &[Node], grads: &mut [Option<Vec<f64>>], idx: usize) {
    let (lo, hi) = grads.split_at_mut(idx);
    let g: &[f64] = hi[0].as_ref().expect("checked before dispatch");
    let rg = |id: VarId| nodes[id.0].requires_grad;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if rg(*a) {
                let buf = ensure_grad(nodes, lo, a.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if rg(*b) {
                let buf = ensure_grad(nodes, lo, b.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::Sub(a, b) => {
            if rg(*a) {
                let buf = ensure_grad(nodes, lo, a.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
            if rg(*b) {
                let buf = ensure_grad(nodes, lo, b.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d -= gv;
                }
            }
        }
        Op::Mul(a, b) => {
            if rg(*a) {
                let bv = nodes[b.0].value.data();
                let buf = ensure_grad(nodes, lo, a.0);
                for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(bv) {
                    *d += gv * v;
                }
            }
            if rg(*b) {
                let av = nodes[a.0].value.data();
                let buf = ensure_grad(nodes, lo, b.0);
                for ((d, &gv), &v) in buf.iter_mut().zip(g).zip(av) {
                    *d += gv * v;
                }
            }
        }
        Op::Scale(a, c) => {
            if rg(*a) {
                let buf = ensure_grad(nodes, lo, a.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv * c;
                }
            }
        }
        Op::Matmul(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if rg(*a) {
                let bv = nodes[b.0].value.data();
                let buf = ensure_grad(nodes, lo, a.0);
                // dA += g · Bᵀ
                matmul_a_bt_acc(g, bv, buf, m, n, k);
            }
            if rg(*b) {
                let av = nodes[a.0].value.data();
                let buf = ensure_grad(nodes, lo, b.0);
                // dB += Aᵀ · g
                matmul_at_b_acc(av, g, buf, k, m, n);
            }
        }
        Op::Bmm(a, b) => {
            let sa = nodes[a.0].value.shape();
            let sb = nodes[b.0].value.shape();
            let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if rg(*a) {
                let bv = nodes[b.0].value.data();
                let buf = ensure_grad(nodes, lo, a.0);
                for i in 0..bsz {
                    matmul_a_bt_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bv[i * k * n..(i + 1) * k * n],
                        &mut buf[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if rg(*b) {
                let av = nodes[a.0].value.data();
                let buf = ensure_grad(nodes, lo, b.0);
                for i in 0..bsz {
                    matmul_at_b_acc(
                        &av[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        &mut buf[i * k * n..(i + 1) * k * n],
                        k,
                        m,
                        n,
                    );
                }
            }
        }
        Op::Permute { x, perm } => {
            if rg(*x) {
                let out_shape: Vec<usize> = perm.iter().map(|&p| nodes[x.0].value.shape()[p]).collect();
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (gback, _) = permute_data(g, &out_shape, &inverse);
                let buf = ensure_grad(nodes, lo, x.0);
                for (d, gv) in buf.iter_mut().zip(gback) {
                    *d += gv;
                }
            }
        }
        Op::Reshape(x) => {
            if rg(*x) {
                let buf = ensure_grad(nodes, lo, x.0);
                for (d, &gv) in buf.iter_mut().zip(g) {
                    *d += gv;
                }
            }
        }
        Op::BroadcastTo { x, in_strides } => {
            if rg(*x) {
                let out_shape = nodes[idx].value.shape().to_vec();
                let out_strides = Tensor::strides_of(&out_shape);
                let buf = ensure_grad(nodes, lo, x.0);
                for (flat, &gv) in g.iter().enumerate() {
                    buf[map_index(flat, &out_strides, &out_shape, in_strides)] += gv;
                }
            }
        }
        Op::ConcatLast { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut col = 0;
            for (&id, &w) in inputs.iter().zip(widths) {
                if rg(id) {
                    let buf = ensure_grad(nodes, lo, id.0);
                    for r in 0..rows {
                        let src = &g[r * total + col..r * total + col + w];
                        for (d, &gv) in buf[r * w..(r + 1) * w].iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
                col += w;
            }
        }
        Op::Narrow { x, axis, start } => {
            if rg(*x) {
                let shape = nodes[x.0].value.shape().to_vec();
                let out_len = nodes[idx].value.shape()[*axis];
                let outer: usize = shape[..*axis].iter().product();
                let mid = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let buf = ensure_grad(nodes, lo, x.0);
                for o in 0..outer {
                    for i in 0..out_len {
                        let s = (o * out_len + i) * inner;
                        let d = (o * mid + start + i) * inner;
                        for (dv, &gv) in buf[d..d + inner].iter_mut().zip(&g[s..s + inner]) {
                            *dv += gv;
                        }
                    }
                }
            }
        }
        Op::SoftmaxLast(x) => {
            if rg(*x) {
                let y = nodes[idx].value.data();
                let d = *nodes[idx].value.shape().last().unwrap();
                let buf = ensure_grad(nodes, lo, x.0);
                for ((y_row, g_row), d_row) in y
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(buf.chunks_exact_mut(d))
                {
                    let dot: f64 = y_row.iter().zip(g_row).map(|(a, b)| a * b).sum();
                    for ((dv, &yv), &gv) in d_row.iter_mut().zip(y_row).zip(g_row) {
                        *dv += yv * (gv - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = *nodes[x.0].value.shape().last().unwrap();
            let gv = nodes[gain.0].value.data().to_vec();
            if rg(*gain) {
                let buf = ensure_grad(nodes, lo, gain.0);
                for (xh_row, g_row) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                    for i in 0..d {
                        buf[i] += g_row[i] * xh_row[i];
                    }
                }
            }
            if rg(*bias) {
                let buf = ensure_grad(nodes, lo, bias.0);
                for g_row in g.chunks_exact(d) {
                    for i in 0..d {
                        buf[i] += g_row[i];
                    }
                }
            }
            if rg(*x) {
                let buf = ensure_grad(nodes, lo, x.0);
                for (s, ((xh_row, g_row), d_row)) in xhat
                    .chunks_exact(d)
                    .zip(g.chunks_exact(d))
                    .zip(buf.chunks_exact_mut(d))
                    .enumerate()
                {
                    // h = gain ⊙ g; dx = inv_std (h − mean(h) − x̂ mean(h ⊙ x̂))
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for i in 0..d {
                        let h = g_row[i] * gv[i];
                        mean_h += h;
                        mean_hx += h * xh_row[i];
                    }
                    mean_h /= d as f64;
                    mean_hx /= d as f64;
                    let istd = inv_std[s];
                    for i in 0..d {
                        let h = g_row[i] * gv[i];
                        d_row[i] += istd * (h - mean_h - xh_row[i] * mean_hx);
                    }
                }
            }
        }
        Op::Gelu(x) => {
            if rg(*x) {
                let xv = nodes[x.0].value.data();
                let buf = ensure_grad(nodes, lo, x.0);
                for ((d, &gvv), &v) in buf.iter_mut().zip(g).zip(xv) {
                    let u = GELU_C * (v + GELU_CUBIC * v * v * v);
                    let t = u.tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_CUBIC * v * v);
                    let deriv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                    *d += gvv * deriv;
                }
            }
        }
        Op::NormLast(x) => {
            if rg(*x) {
                let xv = nodes[x.0].value.data();
                let y = nodes[idx].value.data();
                let d = *nodes[x.0].value.shape().last().unwrap();
                let buf = ensure_grad(nodes, lo, x.0);
                for (row, (&yv, &gvv)) in y.iter().zip(g).enumerate() {
                    if yv == 0.0 {
                        continue; // subgradient 0 at the kink
                    }
                    let scale = gvv / yv;
                    for i in 0..d {
                        buf[row * d + i] += scale * xv[row * d + i];
                    }
                }
            }
        }
        Op::SumAll(x) => {
            if rg(*x) {
                let gv = g[0];
                let buf = ensure_grad(nodes, lo, x.0);
                for d in buf.iter_mut() {
                    *d += gv;
                }
            }
        }
        Op::MeanAll(x) => {
            if rg(*x) {
                let gv = g[0] / nodes[x.0].value.numel() as f64;
                let buf = ensure_grad(nodes, lo, x.0);
                for d in buf.iter_mut() {
                    *d += gv;
                }
            }
        }
    }
}
