//! K-means exemplar selection and the per-class replay buffer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

const KMEANS_MAX_ITERS: usize = 50;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Pick `m` representative sample indices by K-means on the feature rows:
/// seeded k-means++ initialisation, capped Lloyd iterations, then the
/// sample nearest each centroid (duplicates fall through to the next
/// nearest). Fewer samples than `m` returns everything.
pub fn select_exemplars(features: &[Vec<f64>], m: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if m == 0 {
        return Err(Error::arg("select_exemplars: m must be >= 1"));
    }
    let n = features.len();
    if n <= m {
        return Ok((0..n).collect());
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("select_exemplars", "ragged feature rows"));
    }

    // k-means++ seeding.
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(m);
    centroids.push(features[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = features.iter().map(|f| sq_dist(f, &centroids[0])).collect();
    while centroids.len() < m {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // All remaining mass at distance zero; fall back to uniform.
            rng.random_range(0..n)
        } else {
            let mut u = rng.random_range(0.0..total);
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if u < d {
                    pick = i;
                    break;
                }
                u -= d;
            }
            pick
        };
        centroids.push(features[next].clone());
        for (i, f) in features.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(f, centroids.last().unwrap()));
        }
    }

    // Lloyd iterations with a fixed cap. The sentinel assignment forces at
    // least one centroid update.
    let mut assignment = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, f) in features.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, centroid) in centroids.iter().enumerate() {
                let d = sq_dist(f, centroid);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; m];
        let mut counts = vec![0usize; m];
        for (i, f) in features.iter().enumerate() {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(f) {
                *s += v;
            }
        }
        for c in 0..m {
            if counts[c] == 0 {
                continue; // empty cluster keeps its previous centroid
            }
            for s in sums[c].iter_mut() {
                *s /= counts[c] as f64;
            }
            centroids[c] = sums[c].clone();
        }
    }

    // Nearest sample per centroid, next-nearest on duplicates.
    let mut taken = vec![false; n];
    let mut picked = Vec::with_capacity(m);
    for centroid in &centroids {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            sq_dist(&features[a], centroid)
                .partial_cmp(&sq_dist(&features[b], centroid))
                .expect("finite distances")
                .then(a.cmp(&b))
        });
        let pick = order.into_iter().find(|&i| !taken[i]).expect("n > m");
        taken[pick] = true;
        picked.push(pick);
    }
    Ok(picked)
}

/// Per-class exemplar storage. Nominal capacity grows by `per_class` for
/// every registered class; occupancy can be lower when a few-shot class
/// had fewer than `per_class` samples available.
#[derive(Debug, Clone)]
pub struct ReplayBuffer<T> {
    per_class: usize,
    classes: Vec<usize>,
    images: Vec<Vec<Tensor<T>>>,
}

impl<T: Scalar> ReplayBuffer<T> {
    pub fn new(per_class: usize) -> Self {
        ReplayBuffer { per_class, classes: Vec::new(), images: Vec::new() }
    }

    pub fn per_class(&self) -> usize {
        self.per_class
    }

    pub fn add_class(&mut self, class_id: usize, exemplars: Vec<Tensor<T>>) -> Result<()> {
        if self.classes.contains(&class_id) {
            return Err(Error::arg(format!("replay buffer already holds class {class_id}")));
        }
        if exemplars.is_empty() {
            return Err(Error::arg(format!("replay buffer: no exemplars for class {class_id}")));
        }
        if exemplars.len() > self.per_class {
            return Err(Error::arg(format!(
                "replay buffer: {} exemplars exceed per-class budget {}",
                exemplars.len(),
                self.per_class
            )));
        }
        self.classes.push(class_id);
        self.images.push(exemplars);
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Stored image count.
    pub fn occupancy(&self) -> usize {
        self.images.iter().map(|v| v.len()).sum()
    }

    /// Nominal size `per_class * classes`, the linear growth budget.
    pub fn capacity(&self) -> usize {
        self.per_class * self.classes.len()
    }

    /// Every stored (class, image) pair in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.classes
            .iter()
            .zip(&self.images)
            .flat_map(|(&c, imgs)| imgs.iter().map(move |img| (c, img)))
    }

    /// Images of the classes accepted by `keep` (used for the base-exemplar
    /// augmentation bank).
    pub fn images_of(&self, keep: impl Fn(usize) -> bool) -> Vec<Tensor<T>> {
        self.classes
            .iter()
            .zip(&self.images)
            .filter(|(&c, _)| keep(c))
            .flat_map(|(_, imgs)| imgs.iter().cloned())
            .collect()
    }
}
