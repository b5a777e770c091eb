//! CutMix-style binary mixing masks at feature-map resolution.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Parameters of the mixing machinery: `alpha` for the Beta distribution
/// the area ratio is drawn from, `r` for the loss reweighting exponent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixParams {
    pub alpha: f64,
    pub r: f64,
}

impl Default for MixParams {
    fn default() -> Self {
        MixParams { alpha: 1.0, r: 3.0 }
    }
}

impl MixParams {
    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || !self.alpha.is_finite() {
            return Err(Error::arg(format!("mix: alpha {} must be positive", self.alpha)));
        }
        if self.r <= 0.0 || !self.r.is_finite() {
            return Err(Error::arg(format!("mix: r {} must be positive", self.r)));
        }
        Ok(())
    }
}

/// Binary spatial mask with its effective area ratio. The ones always form
/// a single axis-aligned rectangle; `kappa_eff` is exactly the fraction of
/// ones on the map.
#[derive(Debug, Clone, PartialEq)]
pub struct MixMask {
    bits: Vec<u8>,
    h: usize,
    w: usize,
    kappa_eff: f64,
}

impl MixMask {
    fn from_rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> Self {
        let mut bits = vec![0u8; h * w];
        for r in r0..r1 {
            for c in c0..c1 {
                bits[r * w + c] = 1;
            }
        }
        let ones = (r1 - r0) * (c1 - c0);
        MixMask { bits, h, w, kappa_eff: ones as f64 / (h * w) as f64 }
    }

    pub fn ones(h: usize, w: usize) -> Self {
        MixMask::from_rect(h, w, 0, h, 0, w)
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        MixMask::from_rect(h, w, 0, 0, 0, 0)
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn kappa_eff(&self) -> f64 {
        self.kappa_eff
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.h, self.w],
            self.bits.iter().map(|&b| T::from_f64(b as f64)).collect(),
        )
        .expect("mask dims")
    }

    /// Spatially transform the mask with the same index permutation applied
    /// to image tensors (see [`crate::ssl::ViewTransform`]).
    pub fn transformed(&self, t: crate::ssl::ViewTransform) -> Result<MixMask> {
        let bits = crate::ssl::permute_plane(&self.bits, self.h, self.w, t)?;
        let (h, w) = t.out_dims(self.h, self.w);
        Ok(MixMask { bits, h, w, kappa_eff: self.kappa_eff })
    }

    /// True when the ones form a single axis-aligned rectangle and the
    /// stored ratio matches the popcount. Used by tests.
    pub fn is_valid_rectangle(&self) -> bool {
        let ones: usize = self.bits.iter().map(|&b| b as usize).sum();
        if (self.kappa_eff - ones as f64 / (self.h * self.w) as f64).abs() > 1e-15 {
            return false;
        }
        if self.bits.iter().any(|&b| b > 1) {
            return false;
        }
        if ones == 0 {
            return true;
        }
        let mut r0 = self.h;
        let mut r1 = 0;
        let mut c0 = self.w;
        let mut c1 = 0;
        for r in 0..self.h {
            for c in 0..self.w {
                if self.bits[r * self.w + c] == 1 {
                    r0 = r0.min(r);
                    r1 = r1.max(r + 1);
                    c0 = c0.min(c);
                    c1 = c1.max(c + 1);
                }
            }
        }
        if (r1 - r0) * (c1 - c0) != ones {
            return false;
        }
        (r0..r1).all(|r| (c0..c1).all(|c| self.bits[r * self.w + c] == 1))
    }
}

/// Sample a CutMix mask: area ratio `kappa ~ Beta(alpha, alpha)`, a
/// `round(w*sqrt(kappa)) x round(h*sqrt(kappa))` rectangle placed at a
/// uniformly drawn centre and shifted to stay on the map. `kappa_eff` is
/// recomputed from the realised rectangle.
pub fn make_cutmix_mask(h: usize, w: usize, params: &MixParams, rng: &mut impl Rng) -> Result<MixMask> {
    if h == 0 || w == 0 {
        return Err(Error::arg("make_cutmix_mask: empty mask dims"));
    }
    params.validate()?;
    let beta = Beta::new(params.alpha, params.alpha).expect("validated alpha");
    let kappa: f64 = beta.sample(rng);
    Ok(mask_for_kappa(h, w, kappa, rng))
}

/// Deterministic rectangle construction for a given `kappa`; exposed so
/// tests can pin the ratio while keeping the centre draw.
pub fn mask_for_kappa(h: usize, w: usize, kappa: f64, rng: &mut impl Rng) -> MixMask {
    let rh = (h as f64 * kappa.sqrt()).round() as usize;
    let rw = (w as f64 * kappa.sqrt()).round() as usize;
    let cy = rng.random_range(0..h);
    let cx = rng.random_range(0..w);
    if rh == 0 || rw == 0 {
        return MixMask::zeros(h, w);
    }
    let r0 = cy.saturating_sub(rh / 2).min(h - rh);
    let c0 = cx.saturating_sub(rw / 2).min(w - rw);
    MixMask::from_rect(h, w, r0, r0 + rh, c0, c0 + rw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kappa_one_fills_the_mask() {
        let mut rng = crate::rng::stream(1, "mask-test", 0);
        for _ in 0..20 {
            let m = mask_for_kappa(4, 4, 1.0, &mut rng);
            assert_eq!(m.kappa_eff(), 1.0);
            assert!(m.bits().iter().all(|&b| b == 1));
        }
    }

    #[test]
    fn kappa_zero_empties_the_mask() {
        let mut rng = crate::rng::stream(1, "mask-test", 1);
        let m = mask_for_kappa(4, 4, 0.0, &mut rng);
        assert_eq!(m.kappa_eff(), 0.0);
        assert!(m.bits().iter().all(|&b| b == 0));
    }

    #[test]
    fn quarter_mask_at_inner_centre() {
        // kappa 0.25 on a 4x4 map gives a 2x2 block; centre (1,1) puts it
        // at the top-left corner.
        // Placement arithmetic with a pinned centre of (1, 1).
        let (cy, cx, rh, rw) = (1usize, 1usize, 2usize, 2usize);
        let r0 = cy.saturating_sub(rh / 2).min(4 - rh);
        let c0 = cx.saturating_sub(rw / 2).min(4 - rw);
        assert_eq!((r0, c0), (0, 0));
        let m = MixMask::from_rect(4, 4, r0, r0 + rh, c0, c0 + rw);
        assert_eq!(m.kappa_eff(), 0.25);
        let expect = [1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(m.bits(), expect);
        assert!(m.is_valid_rectangle());
    }

    #[test]
    fn sampled_masks_are_rectangles() {
        let mut rng = crate::rng::stream(3, "mask-test", 2);
        let params = MixParams::default();
        for _ in 0..200 {
            let m = make_cutmix_mask(7, 5, &params, &mut rng).unwrap();
            assert!(m.is_valid_rectangle());
            assert!((0.0..=1.0).contains(&m.kappa_eff()));
        }
    }
}
