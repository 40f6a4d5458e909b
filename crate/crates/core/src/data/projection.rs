//! Two-component PCA used to export a 2-D view of real and synthetic features.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SUBSPACE: usize = 8;
const MAX_ITERS: usize = 5000;

/// Cyclic Jacobi eigen-decomposition of a small symmetric matrix (row-major `n×n`).
/// Returns eigenvalues (descending) and matching eigenvectors as columns.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[r * n + col] = v[r * n + src];
        }
    }
    (vals, vecs)
}

fn orthonormalize(basis: &mut [Vec<f64>]) {
    for i in 0..basis.len() {
        for _ in 0..2 {
            for j in 0..i {
                let dot: f64 = basis[i].iter().zip(&basis[j]).map(|(a, b)| a * b).sum();
                let (head, tail) = basis.split_at_mut(i);
                tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = basis[i].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-300 {
            basis[i].iter_mut().for_each(|x| *x /= norm);
        } else {
            basis[i].iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Top-two principal axes of a `[n, D]` feature matrix.
#[derive(Debug, Clone)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    pub components: [Vec<f64>; 2],
    /// Variance captured along each component (population normalization).
    pub variances: [f64; 2],
}

impl Pca2 {
    pub fn fit(features: &Tensor) -> Result<Self> {
        let (n, d) = match features.shape() {
            &[n, d] => (n, d),
            s => return Err(Error::dim(format!("expected [n, D] features, got {s:?}"))),
        };
        if n < 2 {
            return Err(Error::input(format!("PCA needs at least 2 samples, got {n}")));
        }
        let mut mean = vec![0.0; d];
        for row in features.data().chunks(d) {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let centered: Vec<f64> = features
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
            .collect();

        // covariance-vector products without forming the D×D matrix
        let cov_mul = |v: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; d];
            for row in centered.chunks(d) {
                let s: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
                out.iter_mut().zip(row).for_each(|(o, r)| *o += s * r);
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
            out
        };

        let p = SUBSPACE.min(d).min(n);
        // deterministic start: varied but non-degenerate directions
        let mut basis: Vec<Vec<f64>> = (0..p)
            .map(|i| (0..d).map(|j| (((i + 1) * (j + 3)) as f64 * 0.618_033_988_75).sin() + if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        orthonormalize(&mut basis);

        let mut ritz_vals = vec![0.0; p];
        let mut ritz_vecs = basis.clone();
        for _ in 0..MAX_ITERS {
            let images: Vec<Vec<f64>> = basis.iter().map(|v| cov_mul(v)).collect();
            // Rayleigh-Ritz on the current subspace
            let mut h = vec![0.0; p * p];
            for i in 0..p {
                for j in 0..p {
                    h[i * p + j] = basis[i].iter().zip(&images[j]).map(|(a, b)| a * b).sum();
                }
            }
            for i in 0..p {
                for j in i + 1..p {
                    let s = 0.5 * (h[i * p + j] + h[j * p + i]);
                    h[i * p + j] = s;
                    h[j * p + i] = s;
                }
            }
            let (vals, vecs) = jacobi_eigen(h, p);
            ritz_vals = vals;
            ritz_vecs = (0..p)
                .map(|c| {
                    let mut v = vec![0.0; d];
                    for (r, b) in basis.iter().enumerate() {
                        let w = vecs[r * p + c];
                        v.iter_mut().zip(b).for_each(|(o, x)| *o += w * x);
                    }
                    v
                })
                .collect();
            let scale = ritz_vals[0].abs().max(1e-300);
            let converged = (0..p.min(2)).all(|i| {
                let cv = cov_mul(&ritz_vecs[i]);
                let res: f64 = cv
                    .iter()
                    .zip(&ritz_vecs[i])
                    .map(|(a, b)| (a - ritz_vals[i] * b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                res <= 1e-13 * scale
            });
            if converged {
                break;
            }
            basis = images;
            orthonormalize(&mut basis);
        }

        let mut comps = [vec![0.0; d], vec![0.0; d]];
        let mut variances = [0.0; 2];
        for i in 0..p.min(2) {
            let mut v = ritz_vecs[i].clone();
            // sign convention: largest-magnitude entry positive
            let (_, &pivot) = v
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
                .expect("d >= 1");
            if pivot < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            comps[i] = v;
            variances[i] = ritz_vals[i].max(0.0);
        }
        Ok(Pca2 {
            mean,
            components: comps,
            variances,
        })
    }

    pub fn project(&self, features: &Tensor) -> Result<Vec<[f64; 2]>> {
        let d = self.mean.len();
        if features.row_len() != d {
            return Err(Error::dim(format!("features have width {}, PCA was fit on {d}", features.row_len())));
        }
        Ok(features
            .data()
            .chunks(d)
            .map(|row| {
                let mut out = [0.0; 2];
                for (o, c) in out.iter_mut().zip(&self.components) {
                    *o = row.iter().zip(&self.mean).zip(c).map(|((x, m), w)| (x - m) * w).sum();
                }
                out
            })
            .collect())
    }

    /// Sum of squared residuals after reconstructing from the two components.
    pub fn reconstruction_error(&self, features: &Tensor) -> Result<f64> {
        let d = self.mean.len();
        let coords = self.project(features)?;
        Ok(features
            .data()
            .chunks(d)
            .zip(&coords)
            .map(|(row, pc)| {
                (0..d)
                    .map(|j| {
                        let rec = self.mean[j] + pc[0] * self.components[0][j] + pc[1] * self.components[1][j];
                        (row[j] - rec).powi(2)
                    })
                    .sum::<f64>()
            })
            .sum())
    }
}

/// One labelled group of feature rows for [`export_projection_csv`].
pub struct FeatureRows<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
}

/// Fits PCA on the real features, projects both sets, writes `set,class,pc1,pc2`.
/// Returns the number of data rows written.
pub fn export_projection_csv(real: FeatureRows, synth: FeatureRows, path: impl AsRef<Path>) -> Result<usize> {
    if real.features.row_len() != synth.features.row_len() {
        return Err(Error::dim(format!(
            "real features have width {}, synthetic {}",
            real.features.row_len(),
            synth.features.row_len()
        )));
    }
    let pca = Pca2::fit(real.features)?;
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "set,class,pc1,pc2")?;
    let mut rows = 0;
    for (name, group) in [("real", &real), ("synthetic", &synth)] {
        if group.labels.len() != group.features.rows() {
            return Err(Error::input(format!("{name}: {} labels for {} rows", group.labels.len(), group.features.rows())));
        }
        for (pc, &y) in pca.project(group.features)?.iter().zip(group.labels) {
            writeln!(out, "{name},{y},{},{}", pc[0], pc[1])?;
            rows += 1;
        }
    }
    out.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_two_d_recovers_axes() {
        // large spread on x, small on y
        let pts = [(-3.0, 0.0), (3.0, 0.0), (0.0, 0.5), (0.0, -0.5), (0.0, 0.0)];
        let data: Vec<f64> = pts.iter().flat_map(|&(x, y)| [x, y]).collect();
        let t = Tensor::from_vec(vec![5, 2], data).unwrap();
        let pca = Pca2::fit(&t).unwrap();
        let proj = pca.project(&t).unwrap();
        for (p, &(x, y)) in proj.iter().zip(&pts) {
            assert!((p[0].abs() - x.abs()).abs() < 1e-9);
            assert!((p[1].abs() - f64::abs(y)).abs() < 1e-9);
        }
        assert!(pca.reconstruction_error(&t).unwrap() < 1e-18);
    }

    #[test]
    fn too_few_samples() {
        let t = Tensor::zeros(vec![1, 3]);
        assert!(matches!(Pca2::fit(&t), Err(Error::Input(_))));
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = vec![4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = jacobi_eigen(a.clone(), 3);
        for c in 0..3 {
            for r in 0..3 {
                let av: f64 = (0..3).map(|k| a[r * 3 + k] * vecs[k * 3 + c]).sum();
                assert!((av - vals[c] * vecs[r * 3 + c]).abs() < 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }
}
