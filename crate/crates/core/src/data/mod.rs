//! Dataset ingestion, the synthetic desk-scale benchmark and FSCIL
//! session splitting.

pub mod cifar;
pub mod rawtensor;
pub mod split;
pub mod synthetic;

pub use split::{split_sessions, SessionSpec, SplitPlan};
pub use synthetic::generate_synthetic;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Immutable batch of images with labels. Images are `[count, channels,
/// side, side]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet<T> {
    images: Tensor<T>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl<T: Scalar> LabeledImageSet<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 {
            return Err(Error::shape(
                "labeled_set",
                format!("expected [n, c, h, w] images, got {:?}", shape),
            ));
        }
        if shape[0] != labels.len() {
            return Err(Error::shape(
                "labeled_set",
                format!("{} images vs {} labels", shape[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidLabel { label: bad, classes: num_classes });
        }
        Ok(LabeledImageSet { images, labels, num_classes })
    }

    pub fn empty(channels: usize, side: usize, num_classes: usize) -> Self {
        LabeledImageSet {
            images: Tensor::zeros(vec![0, channels, side, side]),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn images(&self) -> &Tensor<T> {
        &self.images
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    pub fn side(&self) -> usize {
        self.images.shape()[2]
    }

    fn image_len(&self) -> usize {
        let s = self.images.shape();
        s[1] * s[2] * s[3]
    }

    /// Copy of image `i` as a `[c, h, w]` tensor.
    pub fn image(&self, i: usize) -> Tensor<T> {
        let len = self.image_len();
        let s = self.images.shape();
        Tensor::new(
            vec![s[1], s[2], s[3]],
            self.images.data()[i * len..(i + 1) * len].to_vec(),
        )
        .expect("image dims")
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Batch tensor `[k, c, h, w]` gathering the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Tensor<T> {
        let len = self.image_len();
        let s = self.images.shape();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * len..(i + 1) * len]);
        }
        Tensor::new(vec![indices.len(), s[1], s[2], s[3]], data).expect("batch dims")
    }

    /// New set holding the given sample indices, in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet<T> {
        LabeledImageSet {
            images: self.batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of every sample with the given label, in dataset order.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Concatenate sets with identical image geometry.
    pub fn concat(sets: &[&LabeledImageSet<T>]) -> Result<LabeledImageSet<T>> {
        let first = sets.first().ok_or_else(|| Error::arg("concat: no sets"))?;
        let s = first.images.shape();
        let (c, h, w) = (s[1], s[2], s[3]);
        let num_classes = sets.iter().map(|s| s.num_classes).max().unwrap();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for set in sets {
            let ss = set.images.shape();
            if (ss[1], ss[2], ss[3]) != (c, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("mixed image geometry: {:?} vs {:?}", s, ss),
                ));
            }
            data.extend_from_slice(set.images.data());
            labels.extend_from_slice(&set.labels);
        }
        let n = labels.len();
        Ok(LabeledImageSet { images: Tensor::new(vec![n, c, h, w], data)?, labels, num_classes })
    }

    /// Per-image tensors, used to build augmentation banks.
    pub fn to_image_vec(&self) -> Vec<Tensor<T>> {
        (0..self.len()).map(|i| self.image(i)).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LabeledImageSet<U> {
        LabeledImageSet {
            images: self.images.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
        }
    }
}
