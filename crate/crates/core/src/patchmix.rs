//! Spatial-aware PatchMix: replace grid cells of a training image with the
//! matching cells of a stored base-session exemplar. Cells are drawn from a
//! bowl-shaped distribution (normalised negative log of a centre-peaked
//! Gaussian) so the object at the image centre survives augmentation.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Cell sampling strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    /// Bowl-shaped weights, zero at the exact centre for odd grids.
    Spatial,
    /// Uniform over all cells (ablation baseline).
    Uniform,
    /// Augmentation disabled.
    Off,
}

/// An `n x n` grid partition with per-cell sampling weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    n: usize,
    weights: Vec<f64>,
    sigma: f64,
}

impl PatchGrid {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    /// Uniform weights over every cell, centre included.
    pub fn uniform(n: usize) -> Result<PatchGrid> {
        if n < 2 {
            return Err(Error::arg(format!("patch grid side {n} must be >= 2")));
        }
        Ok(PatchGrid { n, weights: vec![1.0 / (n * n) as f64; n * n], sigma: 0.0 })
    }
}

/// Bowl weights: cell centres live on `[-1, 1]^2`; the unnormalised weight
/// of a cell at `(u, v)` is `(u^2 + v^2) / (2 sigma^2)` — the negative log
/// of a peak-normalised Gaussian — then the grid is normalised to sum 1.
/// The centre cell of an odd grid gets exactly zero.
pub fn bowl_weights(n: usize, sigma: f64) -> Result<PatchGrid> {
    if n < 2 {
        return Err(Error::arg(format!("bowl_weights: grid side {n} must be >= 2")));
    }
    if sigma <= 0.0 || !sigma.is_finite() {
        return Err(Error::arg(format!("bowl_weights: sigma {sigma} must be positive")));
    }
    // Cell centre (2i+1)/n - 1 gives u^2 + v^2 proportional to the integer
    // (2i+1-n)^2 + (2j+1-n)^2; computing from the integers keeps symmetric
    // cells bitwise equal.
    let mut weights = Vec::with_capacity(n * n);
    let offset = |i: usize| (2 * i as i64 + 1 - n as i64).pow(2) as f64;
    let denom = 2.0 * sigma * sigma * (n * n) as f64;
    for r in 0..n {
        for c in 0..n {
            weights.push((offset(r) + offset(c)) / denom);
        }
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(PatchGrid { n, weights, sigma })
}

/// Draw a patch count `k ~ U[k_min, k_max]`, then `k` distinct cells with
/// probability proportional to the remaining weights (sequential
/// renormalisation, no replacement).
pub fn sample_patches(
    grid: &PatchGrid,
    k_min: usize,
    k_max: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let positive = grid.weights.iter().filter(|&&w| w > 0.0).count();
    if k_min < 1 || k_min > k_max {
        return Err(Error::arg(format!("sample_patches: bad patch range [{k_min}, {k_max}]")));
    }
    if k_max > positive {
        return Err(Error::arg(format!(
            "sample_patches: k_max {k_max} exceeds the {positive} cells with positive weight"
        )));
    }
    let k = rng.random_range(k_min..=k_max);
    let mut remaining = grid.weights.clone();
    let mut picked = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        let mut u = rng.random_range(0.0..total);
        let mut chosen = None;
        for (i, &w) in remaining.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            if u < w {
                chosen = Some(i);
                break;
            }
            u -= w;
        }
        // Rounding in the cumulative walk can run past the end; take the
        // last positive cell in that case.
        let idx = chosen
            .or_else(|| remaining.iter().rposition(|&w| w > 0.0))
            .expect("k <= positive cells");
        picked.push(idx);
        remaining[idx] = 0.0;
    }
    Ok(picked)
}

/// Pixel rows covered by grid row `r` (the last row absorbs any remainder
/// when the side is not divisible by `n`).
fn cell_range(side: usize, n: usize, r: usize) -> std::ops::Range<usize> {
    let base = side / n;
    let start = r * base;
    let end = if r + 1 == n { side } else { (r + 1) * base };
    start..end
}

/// Copy the selected cells of `background` into `target`. Both images are
/// `[channels, side, side]`; every pixel outside the cells is untouched and
/// the caller keeps the target's label.
pub fn apply_patchmix<T: Scalar>(
    target: &Tensor<T>,
    background: &Tensor<T>,
    cells: &[usize],
    n: usize,
) -> Result<Tensor<T>> {
    if target.shape() != background.shape() {
        return Err(Error::shape(
            "apply_patchmix",
            format!("target {:?} vs background {:?}", target.shape(), background.shape()),
        ));
    }
    let [ch, h, w] = match target.shape() {
        [c, h, w] => [*c, *h, *w],
        s => return Err(Error::shape("apply_patchmix", format!("expected [c, h, w], got {s:?}"))),
    };
    if h < n || w < n {
        return Err(Error::shape(
            "apply_patchmix",
            format!("{h}x{w} image cannot host an {n}x{n} grid"),
        ));
    }
    let mut out = target.clone();
    for &cell in cells {
        if cell >= n * n {
            return Err(Error::arg(format!("apply_patchmix: cell {cell} outside {n}x{n} grid")));
        }
        let (cr, cc) = (cell / n, cell % n);
        for c in 0..ch {
            for y in cell_range(h, n, cr) {
                for x in cell_range(w, n, cc) {
                    let idx = (c * h + y) * w + x;
                    out.data_mut()[idx] = background.data()[idx];
                }
            }
        }
    }
    Ok(out)
}

/// Full augmentation configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchMixConfig {
    pub mode: SamplingMode,
    pub n: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub apply_prob: f64,
    pub sigma: f64,
}

impl Default for PatchMixConfig {
    fn default() -> Self {
        PatchMixConfig {
            mode: SamplingMode::Spatial,
            n: 4,
            k_min: 2,
            k_max: 4,
            apply_prob: 0.5,
            sigma: 0.5,
        }
    }
}

impl PatchMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == SamplingMode::Off {
            return Ok(());
        }
        if self.n < 2 {
            return Err(Error::arg(format!("patchmix: grid side {} must be >= 2", self.n)));
        }
        if self.k_min < 1 || self.k_min > self.k_max || self.k_max > self.n * self.n {
            return Err(Error::arg(format!(
                "patchmix: patch range [{}, {}] invalid for {} cells",
                self.k_min,
                self.k_max,
                self.n * self.n
            )));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::arg(format!(
                "patchmix: apply_prob {} must be in [0, 1]",
                self.apply_prob
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::arg(format!("patchmix: sigma {} must be positive", self.sigma)));
        }
        Ok(())
    }
}

/// Stateful augmenter: owns the grid and counts skipped applications so an
/// empty exemplar bank surfaces as a warning instead of silent behaviour.
pub struct Augmenter {
    cfg: PatchMixConfig,
    grid: Option<PatchGrid>,
    pub empty_bank_skips: usize,
}

impl Augmenter {
    pub fn new(cfg: PatchMixConfig) -> Result<Self> {
        cfg.validate()?;
        let grid = match cfg.mode {
            SamplingMode::Spatial => Some(bowl_weights(cfg.n, cfg.sigma)?),
            SamplingMode::Uniform => Some(PatchGrid::uniform(cfg.n)?),
            SamplingMode::Off => None,
        };
        Ok(Augmenter { cfg, grid, empty_bank_skips: 0 })
    }

    pub fn config(&self) -> &PatchMixConfig {
        &self.cfg
    }

    /// With probability `apply_prob`, paste sampled cells of a uniformly
    /// drawn bank image over `image`. The label is always preserved (the
    /// caller never hands labels in). Fires with an empty bank are counted
    /// and skipped.
    pub fn maybe_augment<T: Scalar>(
        &mut self,
        image: &Tensor<T>,
        bank: &[Tensor<T>],
        rng: &mut impl Rng,
    ) -> Result<Tensor<T>> {
        let Some(grid) = &self.grid else {
            return Ok(image.clone());
        };
        if rng.random_range(0.0..1.0) >= self.cfg.apply_prob {
            return Ok(image.clone());
        }
        if bank.is_empty() {
            self.empty_bank_skips += 1;
            return Ok(image.clone());
        }
        let background = &bank[rng.random_range(0..bank.len())];
        let cells = sample_patches(grid, self.cfg.k_min, self.cfg.k_max, rng)?;
        apply_patchmix(image, background, &cells, self.cfg.n)
    }
}
