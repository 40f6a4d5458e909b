use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to a channel's standard deviation before dividing by it.
pub const STD_EPS: f64 = 1e-8;

/// Per-channel statistics of the raw (unnormalized) training pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    /// Population mean and standard deviation per channel of a `[n,C,H,W]` tensor
    /// (single pass, Welford updates).
    pub fn compute(images: &Tensor) -> Result<Self> {
        let &[n, c, h, w] = images.shape() else {
            return Err(Error::dim(format!("expected [n,C,H,W] images, got {:?}", images.shape())));
        };
        if n == 0 {
            return Err(Error::input("cannot compute statistics of an empty dataset"));
        }
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut m2 = vec![0.0; c];
        let mut count = vec![0u64; c];
        for img in images.data().chunks(c * plane) {
            for ch in 0..c {
                for &x in &img[ch * plane..(ch + 1) * plane] {
                    count[ch] += 1;
                    let delta = x - mean[ch];
                    mean[ch] += delta / count[ch] as f64;
                    m2[ch] += delta * (x - mean[ch]);
                }
            }
        }
        let std = m2.iter().zip(&count).map(|(m, &k)| (m / k as f64).sqrt()).collect();
        Ok(NormStats { mean, std })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn divisor(&self, ch: usize) -> f64 {
        self.std[ch].max(STD_EPS)
    }
}

fn apply_per_channel(images: &Tensor, channels: usize, mut f: impl FnMut(usize, f64) -> f64) -> Result<Tensor> {
    let shape = images.shape();
    if shape.len() < 3 || shape[shape.len() - 3] != channels {
        return Err(Error::dim(format!(
            "images {shape:?} do not have {channels} channels in position -3"
        )));
    }
    let plane = shape[shape.len() - 2] * shape[shape.len() - 1];
    let mut out = images.clone();
    out.zero_grad();
    for img in out.data_mut().chunks_mut(channels * plane) {
        for (ch, px) in img.chunks_mut(plane).enumerate() {
            px.iter_mut().for_each(|v| *v = f(ch, *v));
        }
    }
    Ok(out)
}

/// `(x − mean) / std` per channel.
pub fn normalize_images(images: &Tensor, stats: &NormStats) -> Result<Tensor> {
    apply_per_channel(images, stats.channels(), |ch, v| (v - stats.mean[ch]) / stats.divisor(ch))
}

/// Inverse of [`normalize_images`].
pub fn denormalize(images: &Tensor, stats: &NormStats) -> Result<Tensor> {
    apply_per_channel(images, stats.channels(), |ch, v| v * stats.divisor(ch) + stats.mean[ch])
}

/// Images with class labels; `images` is `[n, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Statistics used to normalize `images`, if they have been normalized.
    pub norm_stats: Option<NormStats>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::dim(format!("expected [n,C,H,W] images, got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::input(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::input(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            norm_stats: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Dataset indices of each class, ascending.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes];
        for (i, &y) in self.labels.iter().enumerate() {
            out[y].push(i);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.class_indices().iter().map(Vec::len).collect()
    }

    /// Fails unless every class has at least `min` samples.
    pub fn require_per_class(&self, min: usize) -> Result<()> {
        for (k, n) in self.class_counts().into_iter().enumerate() {
            if n < min {
                return Err(Error::input(format!("class {k} has {n} samples, need at least {min}")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, rows: &[usize]) -> Result<LabeledDataset> {
        let images = self.images.gather_rows(rows)?;
        let labels = rows.iter().map(|&r| self.labels[r]).collect();
        Ok(LabeledDataset {
            images,
            labels,
            num_classes: self.num_classes,
            norm_stats: self.norm_stats.clone(),
        })
    }

    /// Zero-pads every image by `pad` pixels on each side (applied to raw pixels).
    pub fn pad_spatial(&self, pad: usize) -> Result<LabeledDataset> {
        if pad == 0 {
            return Ok(self.clone());
        }
        let [c, h, w] = self.image_shape();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut data = vec![0.0; self.len() * c * ph * pw];
        for (dst, src) in data.chunks_mut(c * ph * pw).zip(self.images.data().chunks(c * h * w)) {
            for ch in 0..c {
                for y in 0..h {
                    let s = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                    let o = (ch * ph + y + pad) * pw + pad;
                    dst[o..o + w].copy_from_slice(s);
                }
            }
        }
        let images = Tensor::from_vec(vec![self.len(), c, ph, pw], data)?;
        Ok(LabeledDataset {
            images,
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            norm_stats: self.norm_stats.clone(),
        })
    }
}

/// Computes per-channel statistics of `raw` and returns it normalized.
pub fn normalize(raw: &LabeledDataset) -> Result<LabeledDataset> {
    let stats = NormStats::compute(&raw.images)?;
    normalize_with(raw, &stats)
}

/// Normalizes with externally supplied statistics (e.g. a test split using train stats).
pub fn normalize_with(raw: &LabeledDataset, stats: &NormStats) -> Result<LabeledDataset> {
    Ok(LabeledDataset {
        images: normalize_images(&raw.images, stats)?,
        labels: raw.labels.clone(),
        num_classes: raw.num_classes,
        norm_stats: Some(stats.clone()),
    })
}

/// Draws `per_class` indices per class without replacement (all of a class
/// if it is smaller), class-major. Returns `(indices, labels)`.
pub fn sample_per_class<R: Rng + ?Sized>(
    class_indices: &[Vec<usize>],
    per_class: usize,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, members) in class_indices.iter().enumerate() {
        if per_class >= members.len() {
            rows.extend_from_slice(members);
            labels.extend(std::iter::repeat_n(k, members.len()));
        } else {
            for i in index::sample(rng, members.len(), per_class) {
                rows.push(members[i]);
                labels.push(k);
            }
        }
    }
    (rows, labels)
}
