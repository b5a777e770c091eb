//! Multi-input multi-output ensemble network: two unshared input
//! convolutions, a shared residual trunk, CutMix-style feature mixing and
//! two cosine-classifier heads. A single-branch variant (one input conv,
//! one head, no mixing) backs the ablation baseline.

pub mod checkpoint;
pub mod loss;
pub mod mask;

pub use loss::{cosine_logits, ensemble_loss, weight_fn};
pub use mask::{make_cutmix_mask, MixMask, MixParams};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{NodeId, ParamRef, ParamSet, Scalar, Tape, Tensor};

const GN_EPS: f64 = 1e-5;

/// Backbone and head geometry. `stages` lists the output channels of each
/// stride-2 residual stage; the last entry is the pooled feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub in_channels: usize,
    pub branch_channels: usize,
    pub stages: Vec<usize>,
    pub group_size: usize,
    pub cosine_scale: f64,
    pub ensemble: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            in_channels: 3,
            branch_channels: 16,
            stages: vec![32, 64],
            group_size: 8,
            cosine_scale: 16.0,
            ensemble: true,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.branch_channels == 0 {
            return Err(Error::arg("net: channel counts must be positive"));
        }
        if self.stages.is_empty() {
            return Err(Error::arg("net: at least one residual stage required"));
        }
        if self.group_size == 0 {
            return Err(Error::arg("net: group_size must be >= 1"));
        }
        for &ch in &self.stages {
            if ch == 0 || ch % self.group_size != 0 {
                return Err(Error::arg(format!(
                    "net: stage width {} not divisible by group_size {}",
                    ch, self.group_size
                )));
            }
        }
        if self.cosine_scale <= 0.0 {
            return Err(Error::arg("net: cosine_scale must be positive"));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.stages.last().expect("validated")
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    w: ParamRef,
    b: Option<ParamRef>,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormSpec {
    gamma: ParamRef,
    beta: ParamRef,
    groups: usize,
}

#[derive(Debug, Clone, Copy)]
struct BlockSpec {
    conv1: ConvSpec,
    gn1: NormSpec,
    conv2: ConvSpec,
    gn2: NormSpec,
    skip_conv: ConvSpec,
    skip_gn: NormSpec,
}

/// Node ids of the registered parameters for one tape, aligned with the
/// net's parameter order.
pub struct TapedParams {
    ids: Vec<NodeId>,
    trainable: Vec<bool>,
}

impl TapedParams {
    fn id(&self, r: ParamRef) -> NodeId {
        self.ids[r.0]
    }
}

pub struct EnsembleNet<T> {
    cfg: NetConfig,
    params: ParamSet<T>,
    branch1: ConvSpec,
    branch2: Option<ConvSpec>,
    blocks: Vec<BlockSpec>,
    head1: ParamRef,
    head2: Option<ParamRef>,
    /// Class registry: head row index -> class id.
    classes: Vec<usize>,
}

impl<T: Scalar> EnsembleNet<T> {
    /// Build a fresh net with fan-in-scaled uniform init drawn from `rng`
    /// and one head row per entry of `initial_classes`.
    pub fn new(cfg: NetConfig, initial_classes: &[usize], rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();

        let conv_init = |params: &mut ParamSet<T>,
                         rng: &mut dyn rand::RngCore,
                         name: &str,
                         out_ch: usize,
                         in_ch: usize,
                         k: usize,
                         bias: bool,
                         stride: usize,
                         pad: usize| {
            let fan_in = (in_ch * k * k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let w = Tensor::from_fn(vec![out_ch, in_ch, k, k], |_| {
                T::from_f64(rng.random_range(-bound..bound))
            });
            let w = params.push(format!("{name}.w"), w);
            let b = bias.then(|| {
                params.push(
                    format!("{name}.b"),
                    Tensor::from_fn(vec![out_ch], |_| T::from_f64(rng.random_range(-bound..bound))),
                )
            });
            ConvSpec { w, b, stride, pad }
        };
        let norm_init = |params: &mut ParamSet<T>, name: &str, ch: usize, groups: usize| NormSpec {
            gamma: params.push(format!("{name}.gamma"), Tensor::from_fn(vec![ch], |_| T::one())),
            beta: params.push(format!("{name}.beta"), Tensor::zeros(vec![ch])),
            groups,
        };

        let branch1 = conv_init(
            &mut params, rng, "branch1", cfg.branch_channels, cfg.in_channels, 3, true, 1, 1,
        );
        let branch2 = cfg.ensemble.then(|| {
            conv_init(&mut params, rng, "branch2", cfg.branch_channels, cfg.in_channels, 3, true, 1, 1)
        });

        let mut blocks = Vec::new();
        let mut in_ch = cfg.branch_channels;
        for (i, &out_ch) in cfg.stages.iter().enumerate() {
            let groups = out_ch / cfg.group_size;
            let name = format!("trunk.{i}");
            let conv1 = conv_init(&mut params, rng, &format!("{name}.conv1"), out_ch, in_ch, 3, false, 2, 1);
            let gn1 = norm_init(&mut params, &format!("{name}.gn1"), out_ch, groups);
            let conv2 = conv_init(&mut params, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, false, 1, 1);
            let gn2 = norm_init(&mut params, &format!("{name}.gn2"), out_ch, groups);
            let skip_conv = conv_init(&mut params, rng, &format!("{name}.skip"), out_ch, in_ch, 1, false, 2, 0);
            let skip_gn = norm_init(&mut params, &format!("{name}.skip_gn"), out_ch, groups);
            blocks.push(BlockSpec { conv1, gn1, conv2, gn2, skip_conv, skip_gn });
            in_ch = out_ch;
        }

        let feat = cfg.feature_dim();
        let head_init = |params: &mut ParamSet<T>, rng: &mut dyn rand::RngCore, name: &str| {
            let bound = 1.0 / (feat as f64).sqrt();
            let mut w = Tensor::from_fn(vec![initial_classes.len(), feat], |_| {
                T::from_f64(rng.random_range(-bound..bound))
            });
            normalize_rows(&mut w);
            params.push(name, w)
        };
        let head1 = head_init(&mut params, rng, "head1.w");
        let head2 = cfg.ensemble.then(|| head_init(&mut params, rng, "head2.w"));

        Ok(EnsembleNet {
            cfg,
            params,
            branch1,
            branch2,
            blocks,
            head1,
            head2,
            classes: initial_classes.to_vec(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn is_ensemble(&self) -> bool {
        self.cfg.ensemble
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.feature_dim()
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Register every parameter on a tape. `trainable` decides (by name)
    /// which ones are differentiation targets.
    pub fn register(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> TapedParams {
        let mut ids = Vec::with_capacity(self.params.len());
        let mut mask = Vec::with_capacity(self.params.len());
        for (_, name, p) in self.params.iter() {
            let t = trainable(name);
            ids.push(tape.input(&p.value, t));
            mask.push(t);
        }
        TapedParams { ids, trainable: mask }
    }

    /// Accumulate tape gradients back into the parameter set. Every
    /// trainable parameter must have received a gradient.
    pub fn apply_grads(&mut self, tape: &Tape<T>, taped: &TapedParams) -> Result<()> {
        for (i, (_, name, p)) in self.params.iter_mut().enumerate() {
            if !taped.trainable[i] {
                continue;
            }
            let g = tape.grad(taped.ids[i]).ok_or_else(|| {
                Error::arg(format!("missing gradient for trainable parameter {name}"))
            })?;
            for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                *dst = *dst + *src;
            }
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, taped: &TapedParams, spec: ConvSpec, x: NodeId) -> Result<NodeId> {
        tape.conv2d(x, taped.id(spec.w), spec.b.map(|b| taped.id(b)), spec.stride, spec.pad)
    }

    fn norm(&self, tape: &mut Tape<T>, taped: &TapedParams, spec: NormSpec, x: NodeId) -> Result<NodeId> {
        tape.group_norm(x, taped.id(spec.gamma), taped.id(spec.beta), spec.groups, GN_EPS)
    }

    fn trunk(&self, tape: &mut Tape<T>, taped: &TapedParams, mut x: NodeId) -> Result<NodeId> {
        for block in &self.blocks {
            let c1 = self.conv(tape, taped, block.conv1, x)?;
            let n1 = self.norm(tape, taped, block.gn1, c1)?;
            let a1 = tape.relu(n1)?;
            let c2 = self.conv(tape, taped, block.conv2, a1)?;
            let n2 = self.norm(tape, taped, block.gn2, c2)?;
            let sc = self.conv(tape, taped, block.skip_conv, x)?;
            let sn = self.norm(tape, taped, block.skip_gn, sc)?;
            let sum = tape.add(n2, sn)?;
            x = tape.relu(sum)?;
        }
        Ok(x)
    }

    fn logits(&self, tape: &mut Tape<T>, taped: &TapedParams, pooled: NodeId, head: ParamRef) -> Result<NodeId> {
        cosine_logits(tape, pooled, taped.id(head), self.cfg.cosine_scale)
    }

    /// Training forward for the two-branch net: branch features mixed under
    /// `mask`, shared trunk, both heads. Returns `(logits1, logits2, pooled)`
    /// where `pooled` is the global-average-pooled trunk feature used for
    /// self-supervision and exemplar selection.
    pub fn forward_train(
        &self,
        tape: &mut Tape<T>,
        taped: &TapedParams,
        x1: NodeId,
        x2: NodeId,
        mask: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let branch2 = self.branch2.ok_or_else(|| Error::arg("forward_train requires an ensemble net"))?;
        let head2 = self.head2.expect("ensemble net has two heads");
        let l1 = self.conv(tape, taped, self.branch1, x1)?;
        let l2 = self.conv(tape, taped, branch2, x2)?;
        let mixed = tape.masked_blend(l1, l2, mask)?;
        let feat = self.trunk(tape, taped, mixed)?;
        let pooled = tape.global_avg_pool(feat)?;
        let logits1 = self.logits(tape, taped, pooled, self.head1)?;
        let logits2 = self.logits(tape, taped, pooled, head2)?;
        Ok((logits1, logits2, pooled))
    }

    /// Training forward for the single-branch baseline. Returns
    /// `(logits, pooled)`.
    pub fn forward_single_train(
        &self,
        tape: &mut Tape<T>,
        taped: &TapedParams,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let l = self.conv(tape, taped, self.branch1, x)?;
        let feat = self.trunk(tape, taped, l)?;
        let pooled = tape.global_avg_pool(feat)?;
        let logits = self.logits(tape, taped, pooled, self.head1)?;
        Ok((logits, pooled))
    }

    /// Inference trunk input: both branches fed the same image and summed
    /// (the uniform-blend reading of the mixing block), or the lone branch
    /// for single-branch nets.
    fn infer_pooled(&self, tape: &mut Tape<T>, taped: &TapedParams, x: NodeId) -> Result<NodeId> {
        let l1 = self.conv(tape, taped, self.branch1, x)?;
        let trunk_in = match self.branch2 {
            Some(b2) => {
                let l2 = self.conv(tape, taped, b2, x)?;
                tape.add(l1, l2)?
            }
            None => l1,
        };
        let feat = self.trunk(tape, taped, trunk_in)?;
        tape.global_avg_pool(feat)
    }

    /// Class probabilities for a batch: elementwise mean of the two heads'
    /// softmax outputs (or the single head's softmax). Rows follow the class
    /// registry order.
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.classes.is_empty() {
            return Err(Error::arg("predict: net has no classes"));
        }
        let mut tape = Tape::new();
        let taped = self.register(&mut tape, |_| false);
        let xn = tape.input(x, false);
        let pooled = self.infer_pooled(&mut tape, &taped, xn)?;
        let logits1 = self.logits(&mut tape, &taped, pooled, self.head1)?;
        let batch = x.shape()[0];
        let classes = self.classes.len();
        let mut probs = softmax_rows(tape.value(logits1), batch, classes);
        if let Some(head2) = self.head2 {
            let logits2 = self.logits(&mut tape, &taped, pooled, head2)?;
            let p2 = softmax_rows(tape.value(logits2), batch, classes);
            let half = T::from_f64(0.5);
            for (a, b) in probs.iter_mut().zip(p2) {
                *a = (*a + b) * half;
            }
        }
        Tensor::new(vec![batch, classes], probs)
    }

    /// Single-branch slice of an ensemble net (first conv and first head
    /// only), used for the inference-cost comparison. The branch feature is
    /// doubled to match the all-ones-mask statistics seen in training.
    pub fn predict_single_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.classes.is_empty() {
            return Err(Error::arg("predict: net has no classes"));
        }
        let mut tape = Tape::new();
        let taped = self.register(&mut tape, |_| false);
        let xn = tape.input(x, false);
        let l1 = self.conv(&mut tape, &taped, self.branch1, xn)?;
        let trunk_in = if self.cfg.ensemble { tape.scale(l1, 2.0)? } else { l1 };
        let feat = self.trunk(&mut tape, &taped, trunk_in)?;
        let pooled = tape.global_avg_pool(feat)?;
        let logits = self.logits(&mut tape, &taped, pooled, self.head1)?;
        let batch = x.shape()[0];
        let classes = self.classes.len();
        Tensor::new(vec![batch, classes], softmax_rows(tape.value(logits), batch, classes))
    }

    /// Predicted class ids for a batch; exact probability ties break toward
    /// the lowest class id.
    pub fn predict_labels(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        let probs = self.predict_probs(x)?;
        let classes = self.classes.len();
        Ok((0..x.shape()[0])
            .map(|b| argmax_class(&probs.data()[b * classes..(b + 1) * classes], &self.classes))
            .collect())
    }

    /// Pooled trunk features along the inference path, one row per image.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let taped = self.register(&mut tape, |_| false);
        let xn = tape.input(x, false);
        let pooled = self.infer_pooled(&mut tape, &taped, xn)?;
        let batch = x.shape()[0];
        Tensor::new(vec![batch, self.feature_dim()], tape.value(pooled).to_vec())
    }

    /// Append a class to the registry with the given head row (set in both
    /// heads). Errors if the class is already present.
    pub fn add_class_row(&mut self, class_id: usize, row: &[T]) -> Result<()> {
        if self.classes.contains(&class_id) {
            return Err(Error::arg(format!("class {class_id} already present in classifier")));
        }
        if row.len() != self.feature_dim() {
            return Err(Error::shape(
                "add_class_row",
                format!("row has {} entries, feature dim is {}", row.len(), self.feature_dim()),
            ));
        }
        let heads: Vec<ParamRef> = [Some(self.head1), self.head2].into_iter().flatten().collect();
        for head in heads {
            let p = self.params.get_mut(head);
            let feat = row.len();
            let rows = p.value.shape()[0];
            let mut data = p.value.data().to_vec();
            data.extend_from_slice(row);
            p.value = Tensor::new(vec![rows + 1, feat], data)?;
            p.grad = Tensor::zeros(vec![rows + 1, feat]);
        }
        self.classes.push(class_id);
        Ok(())
    }

    /// Rescale every head row to unit L2 norm (maintained after each
    /// optimizer step).
    pub fn renormalize_heads(&mut self) {
        let heads: Vec<ParamRef> = [Some(self.head1), self.head2].into_iter().flatten().collect();
        for head in heads {
            normalize_rows(&mut self.params.get_mut(head).value);
        }
    }

    /// Total trainable scalar count.
    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    /// Parameters the two-branch design adds over a single-branch net of
    /// the same trunk: the second input conv and the second head.
    pub fn branch_specific_param_count(&self) -> usize {
        let mut extra = 0;
        if let Some(b2) = self.branch2 {
            extra += self.params.get(b2.w).value.numel();
            if let Some(b) = b2.b {
                extra += self.params.get(b).value.numel();
            }
        }
        if let Some(h2) = self.head2 {
            extra += self.params.get(h2).value.numel();
        }
        extra
    }

    /// Little-endian byte image of every non-head parameter, used to verify
    /// that frozen-backbone sessions leave the backbone untouched.
    pub fn backbone_fingerprint(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for (_, name, p) in self.params.iter() {
            if name.starts_with("head") {
                continue;
            }
            for v in p.value.data() {
                bytes.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        bytes
    }

    /// Name-based trainability predicate for head-only fine-tuning.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("head")
    }
}

/// Row index of the highest probability; exact ties go to the lowest
/// class id.
pub fn argmax_class<T: Scalar>(row: &[T], classes: &[usize]) -> usize {
    let mut best = 0usize;
    for i in 1..row.len() {
        let better =
            row[i] > row[best] || (row[i] == row[best] && classes[i] < classes[best]);
        if better {
            best = i;
        }
    }
    classes[best]
}

fn normalize_rows<T: Scalar>(w: &mut Tensor<T>) {
    let cols = *w.shape().last().expect("head is 2-d");
    let rows = w.numel() / cols.max(1);
    let data = w.data_mut();
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if norm > T::zero() {
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
    }
}

fn softmax_rows<T: Scalar>(logits: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[r * cols + j] = e;
            denom = denom + e;
        }
        for j in 0..cols {
            out[r * cols + j] = out[r * cols + j] / denom;
        }
    }
    out
}
