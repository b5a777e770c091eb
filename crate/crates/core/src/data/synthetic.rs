//! Seeded synthetic image classes: each class is a fixed grating-plus-blob
//! template; samples add a small circular shift and uniform pixel noise.

use rand::Rng;

use super::LabeledImageSet;
use crate::error::Result;
use crate::rng::{self, purpose};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub side: usize,
    pub channels: usize,
    /// Uniform noise amplitude added per pixel.
    pub noise: f64,
    /// Maximum circular shift (pixels) in each axis.
    pub max_shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec { num_classes: 10, per_class: 40, side: 16, channels: 3, noise: 0.3, max_shift: 2 }
    }
}

/// Distinct integer frequency pairs; gratings with different pairs are
/// (near-)orthogonal over the image, which keeps classes separable. The
/// unordered magnitude pairs {|fx|, |fy|} are all distinct, so no class's
/// grating can be carried onto another's by any rotation or flip — the
/// label-preserving assumption behind the view transforms.
const FREQ_PAIRS: [(f64, f64); 16] = [
    (1.0, 0.0),
    (1.0, 1.0),
    (2.0, 0.0),
    (2.0, 1.0),
    (2.0, 2.0),
    (3.0, 0.0),
    (3.0, 1.0),
    (3.0, 2.0),
    (3.0, 3.0),
    (4.0, 0.0),
    (4.0, 1.0),
    (4.0, 2.0),
    (4.0, 3.0),
    (5.0, 1.0),
    (5.0, 2.0),
    (4.0, 4.0),
];

/// Class template: a frequency/phase grating plus a class-coloured centre
/// blob, deterministic in `(seed, class)`.
pub fn class_template<T: Scalar>(spec: &SyntheticSpec, class: usize, seed: u64) -> Tensor<T> {
    let mut rng = rng::stream(seed, purpose::DATA, class as u64);
    let (fx, fy) = FREQ_PAIRS[class % FREQ_PAIRS.len()];
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let color: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.2..1.0)).collect();
    let side = spec.side as f64;
    let blob_sigma = side / 6.0;
    let mid = (side - 1.0) / 2.0;
    Tensor::from_fn(vec![spec.channels, spec.side, spec.side], |i| {
        let c = i / (spec.side * spec.side);
        let rem = i % (spec.side * spec.side);
        let y = (rem / spec.side) as f64;
        let x = (rem % spec.side) as f64;
        let grating = 0.5 + 0.2 * (std::f64::consts::TAU * (fx * x + fy * y) / side + phase).sin();
        let d2 = (x - mid).powi(2) + (y - mid).powi(2);
        let blob = 0.5 * color[c] * (-d2 / (2.0 * blob_sigma * blob_sigma)).exp();
        T::from_f64((grating + blob).clamp(0.0, 1.0))
    })
}

fn shifted_template<T: Scalar>(t: &Tensor<T>, dy: i64, dx: i64) -> Tensor<T> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    Tensor::from_fn(s.to_vec(), |i| {
        let c = i / (h * w);
        let rem = i % (h * w);
        let y = (rem / w) as i64;
        let x = (rem % w) as i64;
        let sy = (y - dy).rem_euclid(h as i64) as usize;
        let sx = (x - dx).rem_euclid(w as i64) as usize;
        t.data()[(c * h + sy) * w + sx]
    })
}

/// Generate a class-balanced labelled set. `tag` separates the train and
/// test draws of one seed; identical arguments reproduce the set bitwise.
pub fn generate_synthetic<T: Scalar>(
    spec: &SyntheticSpec,
    seed: u64,
    tag: &str,
) -> Result<LabeledImageSet<T>> {
    let templates: Vec<Tensor<T>> =
        (0..spec.num_classes).map(|c| class_template(spec, c, seed)).collect();
    let img_len = spec.channels * spec.side * spec.side;
    let mut data = Vec::with_capacity(spec.num_classes * spec.per_class * img_len);
    let mut labels = Vec::with_capacity(spec.num_classes * spec.per_class);
    for (class, template) in templates.iter().enumerate() {
        let mut rng = rng::stream(seed, &format!("data-samples-{tag}"), class as u64);
        for _ in 0..spec.per_class {
            let shift = spec.max_shift as i64;
            let (dy, dx) = if shift > 0 {
                (rng.random_range(-shift..=shift), rng.random_range(-shift..=shift))
            } else {
                (0, 0)
            };
            let shifted = shifted_template(template, dy, dx);
            for &v in shifted.data() {
                let noisy = if spec.noise > 0.0 {
                    v.as_f64() + rng.random_range(-spec.noise..spec.noise)
                } else {
                    v.as_f64()
                };
                data.push(T::from_f64(noisy.clamp(0.0, 1.0)));
            }
            labels.push(class);
        }
    }
    let n = labels.len();
    LabeledImageSet::new(
        Tensor::new(vec![n, spec.channels, spec.side, spec.side], data)?,
        labels,
        spec.num_classes,
    )
}

/// Nearest-template classification accuracy: the independent oracle for
/// generator sanity (L2 distance to each class template).
pub fn nearest_template_accuracy<T: Scalar>(
    set: &LabeledImageSet<T>,
    spec: &SyntheticSpec,
    seed: u64,
) -> f64 {
    let templates: Vec<Tensor<T>> =
        (0..spec.num_classes).map(|c| class_template(spec, c, seed)).collect();
    let mut correct = 0usize;
    for i in 0..set.len() {
        let img = set.image(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (c, t) in templates.iter().enumerate() {
            let d: f64 = img
                .data()
                .iter()
                .zip(t.data())
                .map(|(&a, &b)| {
                    let d = a.as_f64() - b.as_f64();
                    d * d
                })
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        if best == set.label(i) {
            correct += 1;
        }
    }
    correct as f64 / set.len() as f64
}
