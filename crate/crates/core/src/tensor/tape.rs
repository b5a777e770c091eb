//! Computation tape: forward operations recorded in execution order,
//! replayed in reverse to populate gradients.

use super::kernels::{self, ConvDims};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::par;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub batch: usize,
    pub ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// A recorded operation, with whatever forward state its VJP needs.
enum Op<T> {
    Conv2d { x: NodeId, w: NodeId, b: Option<NodeId>, dims: ConvDims },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId>, batch: usize, in_dim: usize, out_dim: usize },
    Relu { x: NodeId },
    MaxPool2d { x: NodeId, argmax: Vec<usize> },
    GlobalAvgPool { x: NodeId, plane: usize },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Affine { x: NodeId, scale: T },
    MaskedBlend { a: NodeId, b: NodeId, mask: NodeId, per_sample: bool },
    SoftmaxCrossEntropy { logits: NodeId, probs: Vec<T>, targets: Vec<usize>, classes: usize },
    L2Normalize { x: NodeId, rows: usize, cols: usize, norms: Vec<T> },
    Matmul { a: NodeId, b: NodeId, transpose_b: bool, m: usize, k: usize, n: usize },
    Mean { x: NodeId },
    VariancePerDim { x: NodeId, rows: usize, cols: usize },
    CovarianceMatrix { x: NodeId, rows: usize, cols: usize },
    SqrtShift { x: NodeId },
    GroupNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        batch: usize,
        channels: usize,
        plane: usize,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    needs_grad: bool,
}

/// Ordered record of executed operations. Every operation appears after
/// the producers of its inputs by construction, so replaying the step list
/// in reverse visits consumers before producers.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    steps: Vec<(Op<T>, NodeId)>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), steps: Vec::new(), grads: Vec::new() }
    }

    /// Register an input tensor. `needs_grad` marks it as a differentiation
    /// target; gradients flow only into nodes that request them.
    pub fn input(&mut self, t: &Tensor<T>, needs_grad: bool) -> NodeId {
        self.push_node(t.data().to_vec(), t.shape().to_vec(), needs_grad)
    }

    pub fn input_from(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push_node(data, shape, needs_grad)
    }

    fn push_node(&mut self, data: Vec<T>, shape: Vec<usize>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { data, shape, needs_grad });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn value(&self, id: NodeId) -> &[T] {
        &self.nodes[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.nodes[id].data.len()
    }

    /// Gradient of a node after [`Tape::backward`]; `None` if no gradient
    /// flowed to it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id].as_deref()
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id].data[0]
    }

    fn record(&mut self, op: Op<T>, data: Vec<T>, shape: Vec<usize>, name: &'static str) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs = self.op_inputs_need_grad(&op);
        let out = self.push_node(data, shape, needs);
        self.steps.push((op, out));
        Ok(out)
    }

    fn op_inputs_need_grad(&self, op: &Op<T>) -> bool {
        let ng = |id: &NodeId| self.nodes[*id].needs_grad;
        match op {
            Op::Conv2d { x, w, b, .. } => ng(x) || ng(w) || b.as_ref().is_some_and(ng),
            Op::Linear { x, w, b, .. } => ng(x) || ng(w) || b.as_ref().is_some_and(ng),
            Op::Relu { x }
            | Op::GlobalAvgPool { x, .. }
            | Op::Affine { x, .. }
            | Op::Mean { x }
            | Op::VariancePerDim { x, .. }
            | Op::CovarianceMatrix { x, .. }
            | Op::SqrtShift { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::L2Normalize { x, .. }
            | Op::SoftmaxCrossEntropy { logits: x, .. } => ng(x),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => ng(a) || ng(b),
            Op::MaskedBlend { a, b, .. } => ng(a) || ng(b),
            Op::Matmul { a, b, .. } => ng(a) || ng(b),
            Op::GroupNorm { x, gamma, beta, .. } => ng(x) || ng(gamma) || ng(beta),
        }
    }

    fn dims4(&self, id: NodeId, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.nodes[id].shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            ref s => Err(Error::shape(op, format!("expected 4-d tensor, got {:?}", s))),
        }
    }

    fn dims2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, format!("expected 2-d tensor, got {:?}", s))),
        }
    }

    // ── Forward operations ───────────────────────────────────────────

    /// 2-d convolution, NCHW input, `[out, in, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (batch, in_ch, in_h, in_w) = self.dims4(x, "conv2d")?;
        let (out_ch, w_in, k_h, k_w) = self.dims4(w, "conv2d")?;
        if w_in != in_ch {
            return Err(Error::shape(
                "conv2d",
                format!("input has {} channels, kernel expects {}", in_ch, w_in),
            ));
        }
        if let Some(b) = b {
            if self.nodes[b].shape[..] != [out_ch] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?} vs {} output channels", self.nodes[b].shape, out_ch),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::arg("conv2d: stride must be >= 1"));
        }
        let out_h = ConvDims::out_spatial(in_h, k_h, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {}x{} larger than padded input {}x{}", k_h, k_w, in_h + 2 * pad, in_w + 2 * pad)))?;
        let out_w = ConvDims::out_spatial(in_w, k_w, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {}x{} larger than padded input {}x{}", k_h, k_w, in_h + 2 * pad, in_w + 2 * pad)))?;
        let dims = ConvDims { batch, in_ch, in_h, in_w, out_ch, k_h, k_w, stride, pad, out_h, out_w };
        let mut out = vec![T::zero(); batch * out_ch * out_h * out_w];
        kernels::conv2d_forward(
            &self.nodes[x].data,
            &self.nodes[w].data,
            b.map(|b| self.nodes[b].data.as_slice()),
            dims,
            &mut out,
        );
        self.record(Op::Conv2d { x, w, b, dims }, out, vec![batch, out_ch, out_h, out_w], "conv2d")
    }

    /// Fully connected layer: `x [batch, in] @ w [out, in]^T + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (batch, in_dim) = self.dims2(x, "linear")?;
        let (out_dim, w_in) = self.dims2(w, "linear")?;
        if w_in != in_dim {
            return Err(Error::shape(
                "linear",
                format!("input dim {} vs weight dim {}", in_dim, w_in),
            ));
        }
        if let Some(b) = b {
            if self.nodes[b].shape[..] != [out_dim] {
                return Err(Error::shape(
                    "linear",
                    format!("bias shape {:?} vs {} outputs", self.nodes[b].shape, out_dim),
                ));
            }
        }
        let mut out = vec![T::zero(); batch * out_dim];
        kernels::linear_forward(
            &self.nodes[x].data,
            &self.nodes[w].data,
            b.map(|b| self.nodes[b].data.as_slice()),
            batch,
            in_dim,
            out_dim,
            &mut out,
        );
        self.record(Op::Linear { x, w, b, batch, in_dim, out_dim }, out, vec![batch, out_dim], "linear")
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let out: Vec<T> =
            self.nodes[x].data.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.nodes[x].shape.clone();
        self.record(Op::Relu { x }, out, shape, "relu")
    }

    pub fn max_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let (batch, ch, in_h, in_w) = self.dims4(x, "max_pool2d")?;
        if k == 0 || stride == 0 || in_h < k || in_w < k {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {} stride {} on {}x{} input", k, stride, in_h, in_w),
            ));
        }
        let out_h = (in_h - k) / stride + 1;
        let out_w = (in_w - k) / stride + 1;
        let dims = PoolDims { batch, ch, in_h, in_w, k, stride, out_h, out_w };
        let data = &self.nodes[x].data;
        let mut out = vec![T::zero(); batch * ch * out_h * out_w];
        let mut argmax = vec![0usize; out.len()];
        for bc in 0..batch * ch {
            let base = bc * in_h * in_w;
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0;
                    for kh in 0..k {
                        for kw in 0..k {
                            let idx = base + (oh * stride + kh) * in_w + ow * stride + kw;
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = bc * out_h * out_w + oh * out_w + ow;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let _ = dims;
        self.record(Op::MaxPool2d { x, argmax }, out, vec![batch, ch, out_h, out_w], "max_pool2d")
    }

    /// Mean over the spatial plane: `[b, c, h, w] -> [b, c]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (batch, ch, h, w) = self.dims4(x, "global_avg_pool")?;
        let plane = h * w;
        let data = &self.nodes[x].data;
        let inv = T::from_f64(1.0 / plane as f64);
        let out: Vec<T> = (0..batch * ch)
            .map(|bc| {
                let mut acc = T::zero();
                for p in 0..plane {
                    acc = acc + data[bc * plane + p];
                }
                acc * inv
            })
            .collect();
        self.record(Op::GlobalAvgPool { x, plane }, out, vec![batch, ch], "global_avg_pool")
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Vec<T>, Vec<usize>)> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let out = self.nodes[a]
            .data
            .iter()
            .zip(self.nodes[b].data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((out, self.nodes[a].shape.clone()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, shape) = self.elementwise(a, b, "add", |x, y| x + y)?;
        self.record(Op::Add { a, b }, out, shape, "add")
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, shape) = self.elementwise(a, b, "sub", |x, y| x - y)?;
        self.record(Op::Sub { a, b }, out, shape, "sub")
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, shape) = self.elementwise(a, b, "mul", |x, y| x * y)?;
        self.record(Op::Mul { a, b }, out, shape, "mul")
    }

    /// `scale * x + shift`, elementwise with scalar attributes.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = T::from_f64(scale);
        let c = T::from_f64(shift);
        let out: Vec<T> = self.nodes[x].data.iter().map(|&v| s * v + c).collect();
        let shape = self.nodes[x].shape.clone();
        self.record(Op::Affine { x, scale: s }, out, shape, "affine")
    }

    pub fn scale(&mut self, x: NodeId, scale: f64) -> Result<NodeId> {
        self.affine(x, scale, 0.0)
    }

    /// Feature mixing: `2 * (mask ⊙ a + (1 − mask) ⊙ b)`.
    ///
    /// `a`, `b` are `[batch, ch, h, w]`; `mask` is `[h, w]` shared across the
    /// batch or `[batch, h, w]` per sample, broadcast over channels. The mask
    /// is a constant: gradients flow through `a` and `b` only.
    pub fn masked_blend(&mut self, a: NodeId, b: NodeId, mask: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(
                "masked_blend",
                format!("{:?} vs {:?}", self.nodes[a].shape, self.nodes[b].shape),
            ));
        }
        let (batch, ch, h, w) = self.dims4(a, "masked_blend")?;
        let per_sample = match self.nodes[mask].shape[..] {
            [mh, mw] if mh == h && mw == w => false,
            [mb, mh, mw] if mb == batch && mh == h && mw == w => true,
            ref s => {
                return Err(Error::shape(
                    "masked_blend",
                    format!("mask shape {:?} vs feature map {}x{} (batch {})", s, h, w, batch),
                ))
            }
        };
        let plane = h * w;
        let two = T::from_f64(2.0);
        let av = &self.nodes[a].data;
        let bv = &self.nodes[b].data;
        let mv = &self.nodes[mask].data;
        let mut out = vec![T::zero(); av.len()];
        par::for_each_chunk(&mut out, plane, |idx, o| {
            let sample = idx / ch;
            let m_base = if per_sample { sample * plane } else { 0 };
            let base = idx * plane;
            for p in 0..plane {
                let m = mv[m_base + p];
                o[p] = two * (m * av[base + p] + (T::one() - m) * bv[base + p]);
            }
        });
        self.record(
            Op::MaskedBlend { a, b, mask, per_sample },
            out,
            self.nodes[a].shape.clone(),
            "masked_blend",
        )
    }

    /// Mean over the batch of per-sample softmax cross-entropy.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (batch, classes) = self.dims2(logits, "softmax_cross_entropy")?;
        if targets.len() != batch {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} targets for batch {}", targets.len(), batch),
            ));
        }
        for &t in targets {
            if t >= classes {
                return Err(Error::InvalidLabel { label: t, classes });
            }
        }
        let data = &self.nodes[logits].data;
        let mut probs = vec![T::zero(); batch * classes];
        let mut loss = T::zero();
        for b in 0..batch {
            let row = &data[b * classes..(b + 1) * classes];
            let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[b * classes + j] = e;
                denom = denom + e;
            }
            for j in 0..classes {
                probs[b * classes + j] = probs[b * classes + j] / denom;
            }
            let p = probs[b * classes + targets[b]];
            loss = loss - p.ln();
        }
        loss = loss / T::from_f64(batch as f64);
        self.record(
            Op::SoftmaxCrossEntropy { logits, probs, targets: targets.to_vec(), classes },
            vec![loss],
            vec![],
            "softmax_cross_entropy",
        )
    }

    /// Normalise each row of a `[rows, cols]` tensor to unit L2 norm.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "l2_normalize")?;
        let data = &self.nodes[x].data;
        let mut norms = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            let sq: T = row.iter().map(|&v| v * v).sum();
            if sq == T::zero() {
                return Err(Error::arg(format!("l2_normalize: row {} has zero norm", r)));
            }
            let norm = sq.sqrt();
            norms[r] = norm;
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        self.record(Op::L2Normalize { x, rows, cols, norms }, out, vec![rows, cols], "l2_normalize")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId, transpose_b: bool) -> Result<NodeId> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (b0, b1) = self.dims2(b, "matmul")?;
        let (kb, n) = if transpose_b { (b1, b0) } else { (b0, b1) };
        if kb != k {
            return Err(Error::shape(
                "matmul",
                format!("inner dims {} vs {} (transpose_b={})", k, kb, transpose_b),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(&self.nodes[a].data, &self.nodes[b].data, m, k, n, transpose_b, &mut out);
        self.record(Op::Matmul { a, b, transpose_b, m, k, n }, out, vec![m, n], "matmul")
    }

    /// Mean over all elements, producing a scalar.
    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].data.len();
        if n == 0 {
            return Err(Error::arg("mean: empty tensor"));
        }
        let sum: T = self.nodes[x].data.iter().cloned().sum();
        let out = sum / T::from_f64(n as f64);
        self.record(Op::Mean { x }, vec![out], vec![], "mean")
    }

    /// Sum over all elements (mean composed with a scale).
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x].data.len() as f64;
        let m = self.mean(x)?;
        self.affine(m, n, 0.0)
    }

    /// Per-dimension population variance of a `[batch, dim]` tensor.
    pub fn variance_per_dim(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "variance_per_dim")?;
        if rows < 2 {
            return Err(Error::arg(format!("variance_per_dim: batch {} < 2", rows)));
        }
        let data = &self.nodes[x].data;
        let inv_n = T::from_f64(1.0 / rows as f64);
        let mut out = vec![T::zero(); cols];
        for d in 0..cols {
            let mut mean = T::zero();
            for r in 0..rows {
                mean = mean + data[r * cols + d];
            }
            mean = mean * inv_n;
            let mut var = T::zero();
            for r in 0..rows {
                let diff = data[r * cols + d] - mean;
                var = var + diff * diff;
            }
            out[d] = var * inv_n;
        }
        self.record(Op::VariancePerDim { x, rows, cols }, out, vec![cols], "variance_per_dim")
    }

    /// Sample covariance matrix (1/(batch−1) normalisation) of `[batch, dim]`.
    pub fn covariance_matrix(&mut self, x: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.dims2(x, "covariance_matrix")?;
        if rows < 2 {
            return Err(Error::arg(format!("covariance_matrix: batch {} < 2", rows)));
        }
        let data = &self.nodes[x].data;
        let inv_n = T::from_f64(1.0 / rows as f64);
        let inv_nm1 = T::from_f64(1.0 / (rows as f64 - 1.0));
        let mut means = vec![T::zero(); cols];
        for d in 0..cols {
            for r in 0..rows {
                means[d] = means[d] + data[r * cols + d];
            }
            means[d] = means[d] * inv_n;
        }
        let mut out = vec![T::zero(); cols * cols];
        par::for_each_chunk(&mut out, cols, |i, row| {
            for (j, o) in row.iter_mut().enumerate() {
                let mut acc = T::zero();
                for r in 0..rows {
                    acc = acc + (data[r * cols + i] - means[i]) * (data[r * cols + j] - means[j]);
                }
                *o = acc * inv_nm1;
            }
        });
        self.record(Op::CovarianceMatrix { x, rows, cols }, out, vec![cols, cols], "covariance_matrix")
    }

    /// Elementwise `sqrt(x + shift)`; `shift` must keep the radicand positive.
    pub fn sqrt_shift(&mut self, x: NodeId, shift: f64) -> Result<NodeId> {
        let s = T::from_f64(shift);
        let out: Vec<T> = self.nodes[x].data.iter().map(|&v| (v + s).sqrt()).collect();
        let shape = self.nodes[x].shape.clone();
        self.record(Op::SqrtShift { x }, out, shape, "sqrt_shift")
    }

    /// Group normalisation over `[batch, ch, h, w]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        let (batch, channels, h, w) = self.dims4(x, "group_norm")?;
        if groups == 0 || channels % groups != 0 {
            return Err(Error::shape(
                "group_norm",
                format!("{} channels not divisible into {} groups", channels, groups),
            ));
        }
        for (id, name) in [(gamma, "gamma"), (beta, "beta")] {
            if self.nodes[id].shape[..] != [channels] {
                return Err(Error::shape(
                    "group_norm",
                    format!("{} shape {:?} vs {} channels", name, self.nodes[id].shape, channels),
                ));
            }
        }
        let plane = h * w;
        let mut out = vec![T::zero(); self.nodes[x].data.len()];
        let mut mean = vec![T::zero(); batch * groups];
        let mut inv_std = vec![T::zero(); batch * groups];
        kernels::group_norm_forward(
            &self.nodes[x].data,
            &self.nodes[gamma].data,
            &self.nodes[beta].data,
            batch,
            channels,
            plane,
            groups,
            eps,
            &mut out,
            &mut mean,
            &mut inv_std,
        );
        self.record(
            Op::GroupNorm { x, gamma, beta, groups, batch, channels, plane, mean, inv_std },
            out,
            vec![batch, channels, h, w],
            "group_norm",
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// across every use of a node.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss].shape),
            ));
        }
        self.grads[loss] = Some(vec![T::one()]);
        for si in (0..self.steps.len()).rev() {
            let out = self.steps[si].1;
            if self.grads[out].is_none() || !self.nodes[out].needs_grad {
                continue;
            }
            self.backward_step(si);
        }
        Ok(())
    }

    fn take_or_zeros(&mut self, id: NodeId) -> Vec<T> {
        match self.grads[id].take() {
            Some(g) => g,
            None => vec![T::zero(); self.nodes[id].data.len()],
        }
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        let slot = self.grads[id].get_or_insert_with(|| vec![T::zero(); delta.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s = *s + *d;
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn backward_step(&mut self, si: usize) {
        // Steps are dispatched with the output gradient cloned out first;
        // each arm accumulates into the inputs that request gradients.
        let out = self.steps[si].1;
        let gout = self.grads[out].clone().expect("checked by caller");
        match &self.steps[si].0 {
            &Op::Conv2d { x, w, b, dims } => {
                if self.needs(x) {
                    let mut gx = self.take_or_zeros(x);
                    kernels::conv2d_backward_input(&gout, &self.nodes[w].data, dims, &mut gx);
                    self.grads[x] = Some(gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_or_zeros(w);
                    kernels::conv2d_backward_weight(&gout, &self.nodes[x].data, dims, &mut gw);
                    self.grads[w] = Some(gw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let mut gb = self.take_or_zeros(b);
                        kernels::conv2d_backward_bias(&gout, dims, &mut gb);
                        self.grads[b] = Some(gb);
                    }
                }
            }
            &Op::Linear { x, w, b, batch, in_dim, out_dim } => {
                if self.needs(x) {
                    let mut gx = self.take_or_zeros(x);
                    let w_data = &self.nodes[w].data;
                    par::for_each_chunk(&mut gx, in_dim, |r, g| {
                        for (i, slot) in g.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for o in 0..out_dim {
                                acc = acc + gout[r * out_dim + o] * w_data[o * in_dim + i];
                            }
                            *slot = *slot + acc;
                        }
                    });
                    self.grads[x] = Some(gx);
                }
                if self.needs(w) {
                    let mut gw = self.take_or_zeros(w);
                    let x_data = &self.nodes[x].data;
                    par::for_each_chunk(&mut gw, in_dim, |o, g| {
                        for (i, slot) in g.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for r in 0..batch {
                                acc = acc + gout[r * out_dim + o] * x_data[r * in_dim + i];
                            }
                            *slot = *slot + acc;
                        }
                    });
                    self.grads[w] = Some(gw);
                }
                if let Some(b) = b {
                    if self.needs(b) {
                        let mut gb = self.take_or_zeros(b);
                        for (o, slot) in gb.iter_mut().enumerate() {
                            for r in 0..batch {
                                *slot = *slot + gout[r * out_dim + o];
                            }
                        }
                        self.grads[b] = Some(gb);
                    }
                }
            }
            &Op::Relu { x } => {
                if self.needs(x) {
                    let out_data = &self.nodes[out].data;
                    let delta: Vec<T> = gout
                        .iter()
                        .zip(out_data.iter())
                        .map(|(&g, &o)| if o > T::zero() { g } else { T::zero() })
                        .collect();
                    self.accumulate(x, &delta);
                }
            }
            Op::MaxPool2d { x, argmax, .. } => {
                let (x, argmax) = (*x, argmax.clone());
                if self.needs(x) {
                    let mut gx = self.take_or_zeros(x);
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] = gx[src] + gout[o];
                    }
                    self.grads[x] = Some(gx);
                }
            }
            &Op::GlobalAvgPool { x, plane } => {
                if self.needs(x) {
                    let inv = T::from_f64(1.0 / plane as f64);
                    let mut gx = self.take_or_zeros(x);
                    for (bc, &g) in gout.iter().enumerate() {
                        let base = bc * plane;
                        for p in 0..plane {
                            gx[base + p] = gx[base + p] + g * inv;
                        }
                    }
                    self.grads[x] = Some(gx);
                }
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, &gout);
                }
                if self.needs(b) {
                    self.accumulate(b, &gout);
                }
            }
            &Op::Sub { a, b } => {
                if self.needs(a) {
                    self.accumulate(a, &gout);
                }
                if self.needs(b) {
                    let neg: Vec<T> = gout.iter().map(|&g| -g).collect();
                    self.accumulate(b, &neg);
                }
            }
            &Op::Mul { a, b } => {
                if self.needs(a) {
                    let delta: Vec<T> =
                        gout.iter().zip(self.nodes[b].data.iter()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(a, &delta);
                }
                if self.needs(b) {
                    let delta: Vec<T> =
                        gout.iter().zip(self.nodes[a].data.iter()).map(|(&g, &v)| g * v).collect();
                    self.accumulate(b, &delta);
                }
            }
            &Op::Affine { x, scale } => {
                if self.needs(x) {
                    let delta: Vec<T> = gout.iter().map(|&g| g * scale).collect();
                    self.accumulate(x, &delta);
                }
            }
            &Op::MaskedBlend { a, b, mask, per_sample } => {
                let shape = &self.nodes[a].shape;
                let (batch, ch, h, w) = (shape[0], shape[1], shape[2], shape[3]);
                let _ = batch;
                let plane = h * w;
                let two = T::from_f64(2.0);
                let mv = self.nodes[mask].data.clone();
                let mask_at = |idx: usize, p: usize| {
                    if per_sample {
                        mv[(idx / ch) * plane + p]
                    } else {
                        mv[p]
                    }
                };
                if self.needs(a) {
                    let mut delta = vec![T::zero(); gout.len()];
                    for (idx, chunk) in delta.chunks_mut(plane).enumerate() {
                        for (p, d) in chunk.iter_mut().enumerate() {
                            *d = two * mask_at(idx, p) * gout[idx * plane + p];
                        }
                    }
                    self.accumulate(a, &delta);
                }
                if self.needs(b) {
                    let mut delta = vec![T::zero(); gout.len()];
                    for (idx, chunk) in delta.chunks_mut(plane).enumerate() {
                        for (p, d) in chunk.iter_mut().enumerate() {
                            *d = two * (T::one() - mask_at(idx, p)) * gout[idx * plane + p];
                        }
                    }
                    self.accumulate(b, &delta);
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, targets, classes } => {
                let (logits, classes) = (*logits, *classes);
                if self.needs(logits) {
                    let batch = targets.len();
                    let scale = gout[0] / T::from_f64(batch as f64);
                    let mut delta = probs.clone();
                    for (b, &t) in targets.iter().enumerate() {
                        delta[b * classes + t] = delta[b * classes + t] - T::one();
                    }
                    for d in delta.iter_mut() {
                        *d = *d * scale;
                    }
                    self.accumulate(logits, &delta);
                }
            }
            Op::L2Normalize { x, rows, cols, norms } => {
                let (x, rows, cols) = (*x, *rows, *cols);
                if self.needs(x) {
                    let y = &self.nodes[out].data;
                    let mut delta = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        let mut dot = T::zero();
                        for c in 0..cols {
                            dot = dot + y[r * cols + c] * gout[r * cols + c];
                        }
                        let inv = T::one() / norms[r];
                        for c in 0..cols {
                            delta[r * cols + c] =
                                (gout[r * cols + c] - y[r * cols + c] * dot) * inv;
                        }
                    }
                    self.accumulate(x, &delta);
                }
            }
            &Op::Matmul { a, b, transpose_b, m, k, n } => {
                if self.needs(a) {
                    let bv = &self.nodes[b].data;
                    let mut delta = vec![T::zero(); m * k];
                    par::for_each_chunk(&mut delta, k, |r, row| {
                        for (i, slot) in row.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for j in 0..n {
                                let bij = if transpose_b { bv[j * k + i] } else { bv[i * n + j] };
                                acc = acc + gout[r * n + j] * bij;
                            }
                            *slot = acc;
                        }
                    });
                    self.accumulate(a, &delta);
                }
                if self.needs(b) {
                    let av = &self.nodes[a].data;
                    if transpose_b {
                        // b: [n, k]; gb[j, i] = sum_r gout[r, j] a[r, i]
                        let mut delta = vec![T::zero(); n * k];
                        par::for_each_chunk(&mut delta, k, |j, row| {
                            for (i, slot) in row.iter_mut().enumerate() {
                                let mut acc = T::zero();
                                for r in 0..m {
                                    acc = acc + gout[r * n + j] * av[r * k + i];
                                }
                                *slot = acc;
                            }
                        });
                        self.accumulate(b, &delta);
                    } else {
                        // b: [k, n]; gb[i, j] = sum_r a[r, i] gout[r, j]
                        let mut delta = vec![T::zero(); k * n];
                        par::for_each_chunk(&mut delta, n, |i, row| {
                            for (j, slot) in row.iter_mut().enumerate() {
                                let mut acc = T::zero();
                                for r in 0..m {
                                    acc = acc + av[r * k + i] * gout[r * n + j];
                                }
                                *slot = acc;
                            }
                        });
                        self.accumulate(b, &delta);
                    }
                }
            }
            &Op::Mean { x } => {
                if self.needs(x) {
                    let n = self.nodes[x].data.len();
                    let g = gout[0] / T::from_f64(n as f64);
                    let delta = vec![g; n];
                    self.accumulate(x, &delta);
                }
            }
            &Op::VariancePerDim { x, rows, cols } => {
                if self.needs(x) {
                    let data = &self.nodes[x].data;
                    let inv_n = T::from_f64(1.0 / rows as f64);
                    let two = T::from_f64(2.0);
                    let mut means = vec![T::zero(); cols];
                    for d in 0..cols {
                        for r in 0..rows {
                            means[d] = means[d] + data[r * cols + d];
                        }
                        means[d] = means[d] * inv_n;
                    }
                    let mut delta = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for d in 0..cols {
                            delta[r * cols + d] =
                                gout[d] * two * (data[r * cols + d] - means[d]) * inv_n;
                        }
                    }
                    self.accumulate(x, &delta);
                }
            }
            &Op::CovarianceMatrix { x, rows, cols } => {
                if self.needs(x) {
                    let data = &self.nodes[x].data;
                    let inv_n = T::from_f64(1.0 / rows as f64);
                    let inv_nm1 = T::from_f64(1.0 / (rows as f64 - 1.0));
                    let mut means = vec![T::zero(); cols];
                    for d in 0..cols {
                        for r in 0..rows {
                            means[d] = means[d] + data[r * cols + d];
                        }
                        means[d] = means[d] * inv_n;
                    }
                    // d_centered = centered @ (G + G^T) / (rows - 1)
                    let mut d_centered = vec![T::zero(); rows * cols];
                    par::for_each_chunk(&mut d_centered, cols, |r, row| {
                        for (j, slot) in row.iter_mut().enumerate() {
                            let mut acc = T::zero();
                            for i in 0..cols {
                                let g_sym = gout[i * cols + j] + gout[j * cols + i];
                                acc = acc + (data[r * cols + i] - means[i]) * g_sym;
                            }
                            *slot = acc * inv_nm1;
                        }
                    });
                    // Centering projection: subtract per-column means.
                    let mut col_mean = vec![T::zero(); cols];
                    for r in 0..rows {
                        for d in 0..cols {
                            col_mean[d] = col_mean[d] + d_centered[r * cols + d];
                        }
                    }
                    for m in col_mean.iter_mut() {
                        *m = *m * inv_n;
                    }
                    for r in 0..rows {
                        for d in 0..cols {
                            d_centered[r * cols + d] = d_centered[r * cols + d] - col_mean[d];
                        }
                    }
                    self.accumulate(x, &d_centered);
                }
            }
            &Op::SqrtShift { x } => {
                if self.needs(x) {
                    let y = &self.nodes[out].data;
                    let half = T::from_f64(0.5);
                    let delta: Vec<T> =
                        gout.iter().zip(y.iter()).map(|(&g, &s)| g * half / s).collect();
                    self.accumulate(x, &delta);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, batch, channels, plane, mean, inv_std } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (groups, batch, channels, plane) = (*groups, *batch, *channels, *plane);
                let (mean, inv_std) = (mean.clone(), inv_std.clone());
                let needs_x = self.needs(x);
                let needs_g = self.needs(gamma);
                let needs_b = self.needs(beta);
                let mut gx = vec![T::zero(); self.nodes[x].data.len()];
                let mut gg = vec![T::zero(); channels];
                let mut gb = vec![T::zero(); channels];
                kernels::group_norm_backward(
                    &gout,
                    &self.nodes[x].data,
                    &self.nodes[gamma].data,
                    &mean,
                    &inv_std,
                    batch,
                    channels,
                    plane,
                    groups,
                    &mut gx,
                    &mut gg,
                    &mut gb,
                );
                if needs_x {
                    self.accumulate(x, &gx);
                }
                if needs_g {
                    self.accumulate(gamma, &gg);
                }
                if needs_b {
                    self.accumulate(beta, &gb);
                }
            }
        }
    }
}
