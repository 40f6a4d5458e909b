use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{sample_per_class, LabeledDataset};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learnable images with fixed labels, stored class-major: image `i` has label `i / ipc`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub images: Tensor,
    labels: Vec<usize>,
    pub num_classes: usize,
    pub ipc: usize,
}

impl SyntheticSet {
    pub fn new(images: Tensor, num_classes: usize, ipc: usize) -> Result<Self> {
        if images.shape().len() != 4 || images.rows() != num_classes * ipc {
            return Err(Error::dim(format!(
                "synthetic images {:?} do not hold {num_classes} classes x {ipc} images",
                images.shape()
            )));
        }
        if ipc == 0 {
            return Err(Error::input("ipc must be at least 1"));
        }
        let labels = (0..num_classes * ipc).map(|i| i / ipc).collect();
        Ok(SyntheticSet {
            images,
            labels,
            num_classes,
            ipc,
        })
    }

    /// Standard-normal pixels in normalized space.
    pub fn from_noise<R: Rng + ?Sized>(num_classes: usize, ipc: usize, shape: [usize; 3], rng: &mut R) -> Result<Self> {
        let [c, h, w] = shape;
        let n = num_classes * ipc * c * h * w;
        let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        Self::new(Tensor::from_vec(vec![num_classes * ipc, c, h, w], data)?, num_classes, ipc)
    }

    /// Copies `ipc` randomly chosen real images per class.
    pub fn from_real<R: Rng + ?Sized>(real: &LabeledDataset, ipc: usize, rng: &mut R) -> Result<Self> {
        real.require_per_class(ipc)?;
        let (rows, _) = sample_per_class(&real.class_indices(), ipc, rng);
        Self::new(real.images.gather_rows(&rows)?, real.num_classes, ipc)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Row indices of class `k`.
    pub fn class_rows(&self, k: usize) -> std::ops::Range<usize> {
        k * self.ipc..(k + 1) * self.ipc
    }

    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        (0..self.num_classes).map(|k| self.class_rows(k).collect()).collect()
    }

    pub fn to_dataset(&self) -> LabeledDataset {
        LabeledDataset {
            images: self.images.clone(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            norm_stats: None,
        }
    }

    pub fn checksum(&self) -> u64 {
        self.images.checksum()
    }
}
