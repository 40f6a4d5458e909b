//! Isotropic Gaussian class clusters shaped as images.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub image_shape: [usize; 3],
    /// Per-coordinate standard deviation around each class mean.
    pub spread: f64,
    /// Euclidean distance between every pair of class means.
    pub separation: f64,
    pub seed: u64,
}

impl BlobSpec {
    pub fn dims(&self) -> usize {
        self.image_shape.iter().product()
    }

    /// Class means: `separation/√2` times orthonormal directions, so every pair
    /// sits exactly `separation` apart.
    pub fn means(&self) -> Result<Vec<Vec<f64>>> {
        let d = self.dims();
        if self.num_classes < 2 {
            return Err(Error::input("blobs need at least two classes"));
        }
        if d < self.num_classes {
            return Err(Error::input(format!(
                "{} classes need at least as many dimensions, image has {d}",
                self.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
        while basis.len() < self.num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            // Gram-Schmidt twice for numerical orthogonality
            for _ in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
        let scale = self.separation / std::f64::consts::SQRT_2;
        Ok(basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * scale).collect())
            .collect())
    }

    /// Draws `n_per_class` samples per class with a sampling stream independent of the means.
    /// Labels are interleaved (`i % K`).
    pub fn sample(&self, n_per_class: usize, stream: u64) -> Result<LabeledDataset> {
        let means = self.means()?;
        let k = self.num_classes;
        let d = self.dims();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        let n = k * n_per_class;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % k;
            labels.push(y);
            for &m in &means[y] {
                let z: f64 = StandardNormal.sample(&mut rng);
                data.push(m + self.spread * z);
            }
        }
        let [c, h, w] = self.image_shape;
        LabeledDataset::new(Tensor::from_vec(vec![n, c, h, w], data)?, labels, k)
    }
}

/// Single-call form: `K` clusters of `n_per_class` images each, deterministic per seed.
pub fn make_blobs(
    num_classes: usize,
    n_per_class: usize,
    image_shape: [usize; 3],
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    BlobSpec {
        num_classes,
        image_shape,
        spread,
        separation,
        seed,
    }
    .sample(n_per_class, 0)
}

/// Train and test splits drawn from the same clusters.
pub fn make_blob_split(spec: &BlobSpec, train_per_class: usize, test_per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    Ok((spec.sample(train_per_class, 0)?, spec.sample(test_per_class, 1)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> BlobSpec {
        BlobSpec {
            num_classes: 3,
            image_shape: [1, 4, 4],
            spread: 0.1,
            separation: 5.0,
            seed: 9,
        }
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    #[test]
    fn means_are_equidistant() {
        let m = spec().means().unwrap();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!((dist(&m[i], &m[j]) - 5.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn nearest_mean_classifies_everything() {
        let s = spec();
        let means = s.means().unwrap();
        let ds = s.sample(334, 0).unwrap();
        assert!(ds.len() >= 1000);
        let correct = (0..ds.len())
            .filter(|&i| {
                let row = ds.images.row(i);
                let best = (0..3)
                    .min_by(|&a, &b| dist(row, &means[a]).total_cmp(&dist(row, &means[b])))
                    .unwrap();
                best == ds.labels[i]
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn seeded_and_split_streams_differ() {
        let a = make_blobs(3, 5, [1, 2, 2], 0.5, 3.0, 1).unwrap();
        let b = make_blobs(3, 5, [1, 2, 2], 0.5, 3.0, 1).unwrap();
        assert_eq!(a, b);
        let (train, test) = make_blob_split(&spec(), 5, 5).unwrap();
        assert_ne!(train.images, test.images);
    }

    #[test]
    fn class_means_within_three_sigma() {
        let s = BlobSpec { spread: 1.0, ..spec() };
        let means = s.means().unwrap();
        let n = 400;
        let ds = s.sample(n, 0).unwrap();
        let bound = 3.0 * s.spread / (n as f64).sqrt();
        let mut violations = 0;
        for k in 0..3 {
            let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == k).collect();
            for d in 0..16 {
                let m = rows.iter().map(|&r| ds.images.row(r)[d]).sum::<f64>() / rows.len() as f64;
                if (m - means[k][d]).abs() > bound {
                    violations += 1;
                }
            }
        }
        // 48 coordinates at 3σ: expect ~0.13 exceedances
        assert!(violations <= 2, "{violations} coordinates outside 3σ");
    }

    #[test]
    fn too_few_dims() {
        assert!(make_blobs(5, 1, [1, 2, 2], 0.1, 1.0, 0).is_err());
        assert!(make_blobs(1, 1, [1, 2, 2], 0.1, 1.0, 0).is_err());
    }
}
