//! Mix-feature-compatible self-supervision: paired views built by applying
//! the same spatial transformation to both branch inputs *and* the mixing
//! mask, scored with a variance/invariance/covariance loss on the pooled
//! trunk features.

use rand::Rng;

use crate::ensemble::{EnsembleNet, MixMask, TapedParams};
use crate::error::{Error, Result};
use crate::tensor::{NodeId, Scalar, Tape, Tensor};

/// Exact spatial bijections on square grids; applying a kind and then its
/// inverse is the identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewTransform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    HFlip,
    VFlip,
}

impl ViewTransform {
    pub const ALL: [ViewTransform; 6] = [
        ViewTransform::Identity,
        ViewTransform::Rot90,
        ViewTransform::Rot180,
        ViewTransform::Rot270,
        ViewTransform::HFlip,
        ViewTransform::VFlip,
    ];

    pub fn inverse(self) -> ViewTransform {
        match self {
            ViewTransform::Rot90 => ViewTransform::Rot270,
            ViewTransform::Rot270 => ViewTransform::Rot90,
            other => other,
        }
    }

    /// Output spatial dims (rotations swap axes; we only rotate squares, so
    /// this matters for validation alone).
    pub fn out_dims(self, h: usize, w: usize) -> (usize, usize) {
        match self {
            ViewTransform::Rot90 | ViewTransform::Rot270 => (w, h),
            _ => (h, w),
        }
    }

    /// Uniform draw over the transform set.
    pub fn sample(rng: &mut impl Rng) -> ViewTransform {
        Self::ALL[rng.random_range(0..Self::ALL.len())]
    }
}

/// Whether one transform pair is drawn per batch or one per image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViewScope {
    Batch,
    Image,
}

/// Term weights and stabilisers of the self-supervised loss, plus the
/// overall weight `gamma` it enters the training objective with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SslParams {
    pub lambda_w: f64,
    pub mu_w: f64,
    pub nu_w: f64,
    pub gamma: f64,
    pub eps: f64,
    pub std_target: f64,
}

impl Default for SslParams {
    fn default() -> Self {
        SslParams { lambda_w: 25.0, mu_w: 25.0, nu_w: 1.0, gamma: 0.2, eps: 1e-4, std_target: 1.0 }
    }
}

impl SslParams {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.lambda_w, "lambda"),
            (self.mu_w, "mu"),
            (self.nu_w, "nu"),
            (self.gamma, "gamma"),
            (self.std_target, "std_target"),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::arg(format!("ssl: {name} {v} must be nonnegative")));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::arg(format!("ssl: eps {} must be positive", self.eps)));
        }
        Ok(())
    }
}

/// Permute one `h x w` plane by a spatial transform. Rotations require a
/// square plane.
pub fn permute_plane<V: Copy>(data: &[V], h: usize, w: usize, t: ViewTransform) -> Result<Vec<V>> {
    debug_assert_eq!(data.len(), h * w);
    match t {
        ViewTransform::Rot90 | ViewTransform::Rot180 | ViewTransform::Rot270 if h != w => {
            return Err(Error::shape(
                "apply_transform",
                format!("rotation requires a square plane, got {h}x{w}"),
            ))
        }
        _ => {}
    }
    let mut out = Vec::with_capacity(data.len());
    let n = h; // square for rotations
    for r in 0..h {
        for c in 0..w {
            let src = match t {
                ViewTransform::Identity => (r, c),
                ViewTransform::HFlip => (r, w - 1 - c),
                ViewTransform::VFlip => (h - 1 - r, c),
                ViewTransform::Rot90 => (c, n - 1 - r),
                ViewTransform::Rot180 => (h - 1 - r, w - 1 - c),
                ViewTransform::Rot270 => (n - 1 - c, r),
            };
            out.push(data[src.0 * w + src.1]);
        }
    }
    Ok(out)
}

/// Apply a transform to the trailing two (spatial) axes of a tensor,
/// leaving values untouched.
pub fn apply_transform<T: Scalar>(x: &Tensor<T>, t: ViewTransform) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(Error::shape("apply_transform", format!("need spatial axes, got {:?}", shape)));
    }
    let w = shape[shape.len() - 1];
    let h = shape[shape.len() - 2];
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(x.numel());
    for p in 0..planes {
        out.extend(permute_plane(&x.data()[p * h * w..(p + 1) * h * w], h, w, t)?);
    }
    Tensor::new(shape.to_vec(), out)
}

/// Mean squared distance between paired embeddings, per element:
/// `mean((Z - Z')^2)` over the `batch x dim` block.
pub fn invariance_term<T: Scalar>(tape: &mut Tape<T>, z: NodeId, zp: NodeId) -> Result<NodeId> {
    if tape.shape(z) != tape.shape(zp) {
        return Err(Error::shape(
            "invariance_term",
            format!("{:?} vs {:?}", tape.shape(z), tape.shape(zp)),
        ));
    }
    let d = tape.sub(z, zp)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Hinge pushing each dimension's batch standard deviation above
/// `std_target`: `mean_d max(0, std_target - sqrt(Var_d + eps))`.
pub fn variance_term<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    std_target: f64,
    eps: f64,
) -> Result<NodeId> {
    let v = tape.variance_per_dim(z)?;
    let s = tape.sqrt_shift(v, eps)?;
    let hinge_arg = tape.affine(s, -1.0, std_target)?;
    let h = tape.relu(hinge_arg)?;
    tape.mean(h)
}

/// Off-diagonal covariance penalty: `(1/dim) * sum_{i != j} Cov(Z)_{ij}^2`
/// with the 1/(batch-1) covariance normalisation.
pub fn covariance_term<T: Scalar>(tape: &mut Tape<T>, z: NodeId) -> Result<NodeId> {
    let dim = tape.shape(z)[1];
    let c = tape.covariance_matrix(z)?;
    let off_diag = Tensor::from_fn(vec![dim, dim], |i| {
        if i / dim == i % dim {
            T::zero()
        } else {
            T::one()
        }
    });
    let m = tape.input(&off_diag, false);
    let cm = tape.mul(c, m)?;
    let sq = tape.mul(cm, cm)?;
    let mean = tape.mean(sq)?; // (1/dim^2) * sum
    tape.scale(mean, dim as f64)
}

/// The three-term loss over a view pair:
/// `lambda*s(Z,Z') + mu*[v(Z)+v(Z')] + nu*[c(Z)+c(Z')]`.
pub fn ssl_loss<T: Scalar>(
    tape: &mut Tape<T>,
    z: NodeId,
    zp: NodeId,
    params: &SslParams,
) -> Result<NodeId> {
    let inv = invariance_term(tape, z, zp)?;
    let vz = variance_term(tape, z, params.std_target, params.eps)?;
    let vzp = variance_term(tape, zp, params.std_target, params.eps)?;
    let cz = covariance_term(tape, z)?;
    let czp = covariance_term(tape, zp)?;
    let t_inv = tape.scale(inv, params.lambda_w)?;
    let v_sum = tape.add(vz, vzp)?;
    let t_var = tape.scale(v_sum, params.mu_w)?;
    let c_sum = tape.add(cz, czp)?;
    let t_cov = tape.scale(c_sum, params.nu_w)?;
    let a = tape.add(t_inv, t_var)?;
    tape.add(a, t_cov)
}

/// Run one transformed view of a mixed pair through the net and return the
/// pooled trunk feature. The same transform is applied to both inputs and
/// to the mask, keeping the mixed views consistent.
fn forward_view<T: Scalar>(
    tape: &mut Tape<T>,
    net: &EnsembleNet<T>,
    taped: &TapedParams,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    mask: &MixMask,
    t: ViewTransform,
) -> Result<NodeId> {
    let x1t = apply_transform(x1, t)?;
    let x2t = apply_transform(x2, t)?;
    let mt = mask.transformed(t)?;
    let a = tape.input(&x1t, false);
    let b = tape.input(&x2t, false);
    let m = tape.input(&mt.to_tensor(), false);
    let (_, _, pooled) = net.forward_train(tape, taped, a, b, m)?;
    Ok(pooled)
}

/// Build the two views `(t(x1), t(x2), t(mask))` and `(t'(x1), t'(x2),
/// t'(mask))`, returning their pooled embeddings `(Z, Z')`.
#[allow(clippy::too_many_arguments)]
pub fn build_views<T: Scalar>(
    tape: &mut Tape<T>,
    net: &EnsembleNet<T>,
    taped: &TapedParams,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    mask: &MixMask,
    t: ViewTransform,
    t_prime: ViewTransform,
) -> Result<(NodeId, NodeId)> {
    let z = forward_view(tape, net, taped, x1, x2, mask, t)?;
    let zp = forward_view(tape, net, taped, x1, x2, mask, t_prime)?;
    Ok((z, zp))
}

/// Per-image variant: every sample gets its own transform pair, and the
/// shared mask becomes a per-sample mask stack.
#[allow(clippy::too_many_arguments)]
pub fn build_views_per_image<T: Scalar>(
    tape: &mut Tape<T>,
    net: &EnsembleNet<T>,
    taped: &TapedParams,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    mask: &MixMask,
    ts: &[ViewTransform],
    ts_prime: &[ViewTransform],
) -> Result<(NodeId, NodeId)> {
    let batch = x1.shape()[0];
    if ts.len() != batch || ts_prime.len() != batch {
        return Err(Error::shape(
            "build_views",
            format!("{} transforms for batch {}", ts.len(), batch),
        ));
    }
    let mut run = |ts: &[ViewTransform]| -> Result<NodeId> {
        let (h, w) = (mask.height(), mask.width());
        let mut x1t = Vec::with_capacity(x1.numel());
        let mut x2t = Vec::with_capacity(x2.numel());
        let mut masks = Vec::with_capacity(batch * h * w);
        let sample_len = x1.numel() / batch;
        for (b, &t) in ts.iter().enumerate() {
            let s1 = sample_view(x1, b, sample_len, t)?;
            let s2 = sample_view(x2, b, sample_len, t)?;
            x1t.extend(s1);
            x2t.extend(s2);
            let mt = mask.transformed(t)?;
            masks.extend(mt.to_tensor::<T>().into_data());
        }
        let a = tape.input_from(x1t, x1.shape().to_vec(), false);
        let bnode = tape.input_from(x2t, x2.shape().to_vec(), false);
        let m = tape.input_from(masks, vec![batch, h, w], false);
        let (_, _, pooled) = net.forward_train(tape, taped, a, bnode, m)?;
        Ok(pooled)
    };
    let z = run(ts)?;
    let zp = run(ts_prime)?;
    Ok((z, zp))
}

fn sample_view<T: Scalar>(
    x: &Tensor<T>,
    b: usize,
    sample_len: usize,
    t: ViewTransform,
) -> Result<Vec<T>> {
    let shape = x.shape();
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = sample_len / (h * w);
    let base = b * sample_len;
    let mut out = Vec::with_capacity(sample_len);
    for p in 0..planes {
        let s = base + p * h * w;
        out.extend(permute_plane(&x.data()[s..s + h * w], h, w, t)?);
    }
    Ok(out)
}

/// Single-branch view pair for the no-ensemble configuration: plain
/// transformed passes of one image batch.
pub fn build_views_single<T: Scalar>(
    tape: &mut Tape<T>,
    net: &EnsembleNet<T>,
    taped: &TapedParams,
    x: &Tensor<T>,
    t: ViewTransform,
    t_prime: ViewTransform,
) -> Result<(NodeId, NodeId)> {
    let mut run = |t: ViewTransform| -> Result<NodeId> {
        let xt = apply_transform(x, t)?;
        let xn = tape.input(&xt, false);
        let (_, pooled) = net.forward_single_train(tape, taped, xn)?;
        Ok(pooled)
    };
    let z = run(t)?;
    let zp = run(t_prime)?;
    Ok((z, zp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transforms_are_exact_bijections() {
        let x = Tensor::new(vec![2, 2], vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        // hflip of [[a,b],[c,d]] is [[b,a],[d,c]]
        let f = apply_transform(&x, ViewTransform::HFlip).unwrap();
        assert_eq!(f.data(), &[2.0, 1.0, 4.0, 3.0]);
        // rot180 twice is the identity
        let r = apply_transform(&x, ViewTransform::Rot180).unwrap();
        let rr = apply_transform(&r, ViewTransform::Rot180).unwrap();
        assert_eq!(rr.data(), x.data());
        // identity leaves everything in place
        let i = apply_transform(&x, ViewTransform::Identity).unwrap();
        assert_eq!(i.data(), x.data());
    }

    #[test]
    fn every_transform_inverts() {
        let mut rng = crate::rng::stream(3, "ssl-test", 0);
        let x = Tensor::from_fn(vec![1, 2, 5, 5], |_| rand::Rng::random_range(&mut rng, -1.0..1.0f64));
        for t in ViewTransform::ALL {
            let y = apply_transform(&x, t).unwrap();
            let back = apply_transform(&y, t.inverse()).unwrap();
            assert_eq!(back.data(), x.data(), "{t:?}");
        }
    }

    #[test]
    fn rotation_rejects_non_square() {
        let x = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(apply_transform(&x, ViewTransform::Rot90).is_err());
        assert!(apply_transform(&x, ViewTransform::HFlip).is_ok());
    }

    #[test]
    fn invariance_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap(), false);
        let zp = tape.input(&Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap(), false);
        let inv = invariance_term(&mut tape, z, zp).unwrap();
        assert!((tape.scalar_value(inv) - 5.0).abs() < 1e-12);
        let zero = invariance_term(&mut tape, z, z).unwrap();
        assert_eq!(tape.scalar_value(zero), 0.0);
    }

    #[test]
    fn invariance_of_constant_offset() {
        // Z' = Z + c -> |c|^2 / dim
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::new(vec![2, 2], vec![0.5, -1.0, 2.0, 0.0]).unwrap(), false);
        let zp = tape.input(&Tensor::new(vec![2, 2], vec![1.5, 1.0, 3.0, 2.0]).unwrap(), false);
        let inv = invariance_term(&mut tape, z, zp).unwrap();
        // c = (1, 2), |c|^2 = 5, dim = 2
        assert!((tape.scalar_value(inv) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn variance_hinge_cases() {
        let mut tape = Tape::<f64>::new();
        // batch {0, 2} in one dim: population std = 1 = target -> 0 (eps = 0 limit)
        let z = tape.input(&Tensor::new(vec![2, 1], vec![0.0, 2.0]).unwrap(), false);
        let v = variance_term(&mut tape, z, 1.0, 1e-12).unwrap();
        assert!(tape.scalar_value(v).abs() < 1e-6);
        // identical rows -> full hinge at std_target
        let z2 = tape.input(&Tensor::new(vec![2, 1], vec![0.7, 0.7]).unwrap(), false);
        let v2 = variance_term(&mut tape, z2, 1.0, 1e-12).unwrap();
        assert!((tape.scalar_value(v2) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn covariance_duplicated_dim_squares_variance() {
        // Second dim copies the first with sample variance v -> term v^2.
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::new(vec![2, 2], vec![0.0, 0.0, 2.0, 2.0]).unwrap(), false);
        let c = covariance_term(&mut tape, z).unwrap();
        // column = [0, 2]: sample variance 2, so expect 4.
        assert!((tape.scalar_value(c) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn covariance_single_dim_is_zero() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::new(vec![3, 1], vec![1.0, 2.0, 4.0]).unwrap(), false);
        let c = covariance_term(&mut tape, z).unwrap();
        assert_eq!(tape.scalar_value(c), 0.0);
    }

    #[test]
    fn ssl_loss_zero_on_ideal_views() {
        // Hadamard-style columns: population std 1 per dim, exactly
        // uncorrelated, identical views.
        let z_data = vec![1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0, -1.0];
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&Tensor::new(vec![4, 2], z_data.clone()).unwrap(), false);
        let zp = tape.input(&Tensor::new(vec![4, 2], z_data).unwrap(), false);
        let loss = ssl_loss(&mut tape, z, zp, &SslParams::default()).unwrap();
        assert!(tape.scalar_value(loss).abs() < 1e-3);
    }

    #[test]
    fn ssl_loss_zero_weights() {
        let mut rng = crate::rng::stream(4, "ssl-test", 1);
        let z1 = Tensor::from_fn(vec![3, 4], |_| rand::Rng::random_range(&mut rng, -1.0..1.0f64));
        let z2 = Tensor::from_fn(vec![3, 4], |_| rand::Rng::random_range(&mut rng, -1.0..1.0f64));
        let mut tape = Tape::<f64>::new();
        let z = tape.input(&z1, false);
        let zp = tape.input(&z2, false);
        let params = SslParams { lambda_w: 0.0, mu_w: 0.0, nu_w: 0.0, ..Default::default() };
        let loss = ssl_loss(&mut tape, z, zp, &params).unwrap();
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn pooling_commutes_with_transforms() {
        let mut rng = crate::rng::stream(5, "ssl-test", 2);
        // Dyadic values keep the reordered sums exact.
        let x = Tensor::from_fn(vec![2, 3, 4, 4], |_| {
            rand::Rng::random_range(&mut rng, 0..64) as f64 / 64.0
        });
        let pool = |x: &Tensor<f64>| -> Vec<f64> {
            let mut tape = Tape::<f64>::new();
            let id = tape.input(x, false);
            let p = tape.global_avg_pool(id).unwrap();
            tape.value(p).to_vec()
        };
        let base = pool(&x);
        for t in ViewTransform::ALL {
            let xt = apply_transform(&x, t).unwrap();
            assert_eq!(pool(&xt), base, "{t:?}");
        }
    }
}
