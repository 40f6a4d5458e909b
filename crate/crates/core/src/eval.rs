//! Train-on-synthetic, test-on-real evaluation.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coreset::CorrectnessTrace;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::models::{forward, init_params, predict, Architecture, ModelParams};
use crate::tensor::{Tape, Tensor};

/// How many networks to train and how.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalProtocol {
    pub experiments: usize,
    pub nets_per_experiment: usize,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
}

impl EvalProtocol {
    /// 3 experiments of 5 networks, 100 epochs.
    pub fn desk() -> Self {
        EvalProtocol {
            experiments: 3,
            nets_per_experiment: 5,
            epochs: 100,
            lr: 0.01,
            momentum: 0.0,
            batch_size: 256,
        }
    }

    /// 5 experiments of 20 networks, 300 epochs.
    pub fn paper() -> Self {
        EvalProtocol {
            experiments: 5,
            nets_per_experiment: 20,
            epochs: 300,
            ..Self::desk()
        }
    }

    pub fn named(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown protocol '{other}', expected desk or paper"))),
        }
    }

    pub fn runs(&self) -> usize {
        self.experiments * self.nets_per_experiment
    }

    fn validate(&self) -> Result<()> {
        if self.runs() == 0 {
            return Err(Error::config("protocol must train at least one network"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!("bad lr {} or momentum {}", self.lr, self.momentum)));
        }
        Ok(())
    }
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self::desk()
    }
}

/// SplitMix64 step: decorrelated per-run seeds from one base seed.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base.wrapping_add(stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch SGD (optionally with momentum) on cross-entropy from a fresh initialization.
/// `on_epoch` sees the parameters after every epoch.
pub fn train_network(
    train: &LabeledDataset,
    arch: &Architecture,
    protocol: &EvalProtocol,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &ModelParams) -> Result<()>,
) -> Result<ModelParams> {
    protocol.validate()?;
    if train.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut params = init_params(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let mut velocity: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let full_batch = train.len() <= protocol.batch_size;
    for epoch in 0..protocol.epochs {
        if !full_batch {
            order.shuffle(&mut rng);
        }
        for chunk in order.chunks(protocol.batch_size) {
            let (images, labels) = if full_batch {
                (train.images.clone(), train.labels.clone())
            } else {
                (train.images.gather_rows(chunk)?, chunk.iter().map(|&i| train.labels[i]).collect())
            };
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let batch = tape.constant(images);
            let pyr = forward(&mut tape, arch, &bound, batch)?;
            let loss = tape.softmax_cross_entropy_mean(pyr.logits, &labels)?;
            tape.backward(loss)?;
            if protocol.momentum == 0.0 {
                params.collect_grads(&tape, &bound)?;
                params.sgd_step(protocol.lr)?;
            } else {
                for ((t, v), &var) in params.tensors.iter_mut().zip(&mut velocity).zip(&bound) {
                    let zeros;
                    let g = match tape.grad(var) {
                        Some(g) => g,
                        None => {
                            zeros = vec![0.0; t.len()];
                            &zeros
                        }
                    };
                    for ((p, vi), gi) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                        *vi = protocol.momentum * *vi + gi;
                        *p -= protocol.lr * *vi;
                    }
                }
            }
        }
        on_epoch(epoch, &params)?;
    }
    Ok(params)
}

/// Fresh network trained on `synth` for `epochs` full passes at constant `lr`.
pub fn train_on_synthetic(
    synth: &LabeledDataset,
    arch: &Architecture,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ModelParams> {
    let protocol = EvalProtocol {
        epochs,
        lr,
        ..EvalProtocol::desk()
    };
    train_network(synth, arch, &protocol, seed, |_, _| Ok(()))
}

/// Share of `test` classified correctly (argmax, ties to the lowest class).
pub fn test_accuracy(params: &ModelParams, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::input("test set is empty"));
    }
    let preds = predict(params, &test.images)?;
    let correct = preds.iter().zip(&test.labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Trains on `train` while recording per-sample correctness after every epoch.
pub fn record_training_trace(
    train: &LabeledDataset,
    arch: &Architecture,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<(ModelParams, CorrectnessTrace)> {
    let mut epochs = Vec::with_capacity(protocol.epochs);
    let params = train_network(train, arch, protocol, seed, |_, p| {
        let preds = predict(p, &train.images)?;
        epochs.push(preds.iter().zip(&train.labels).map(|(p, y)| p == y).collect());
        Ok(())
    })?;
    Ok((params, CorrectnessTrace { epochs }))
}

/// Population mean and standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// What produced the training set (e.g. "condensed", "random").
    pub method: String,
    pub arch: String,
    pub ipc: usize,
    pub protocol: EvalProtocol,
    pub seed: u64,
    /// One accuracy per trained network, experiment-major.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub wall_clock_secs: f64,
}

impl EvalReport {
    pub fn from_runs(method: &str, arch: &Architecture, ipc: usize, protocol: &EvalProtocol, seed: u64, accuracies: Vec<f64>, secs: f64) -> Self {
        let (mean, std) = mean_std(&accuracies);
        EvalReport {
            method: method.to_string(),
            arch: arch.label(),
            ipc,
            protocol: protocol.clone(),
            seed,
            accuracies,
            mean,
            std,
            wall_clock_secs: secs,
        }
    }

    /// Per-experiment means, whose spread is what a table row reports.
    pub fn experiment_means(&self) -> Vec<f64> {
        self.accuracies
            .chunks(self.protocol.nets_per_experiment.max(1))
            .map(|c| mean_std(c).0)
            .collect()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "method,arch,ipc,experiment,net,seed,accuracy")?;
        let per = self.protocol.nets_per_experiment.max(1);
        for (i, acc) in self.accuracies.iter().enumerate() {
            writeln!(out, "{},{},{},{},{},{},{}", self.method, self.arch, self.ipc, i / per, i % per, self.seed, acc)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Text table with one row per report: method, IPC, architecture, mean ± std in percent.
pub fn summary_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<12} {:>4}  {:<16} {:>14}  {:>5}", "method", "IPC", "arch", "accuracy (%)", "nets");
    for r in reports {
        let cell = format!("{:.1}±{:.1}", 100.0 * r.mean, 100.0 * r.std);
        let _ = writeln!(s, "{:<12} {:>4}  {:<16} {:>14}  {:>5}", r.method, r.ipc, r.arch, cell, r.accuracies.len());
    }
    s
}

/// Trains `protocol.runs()` fresh networks on `synth` in parallel and tests each on `test`.
pub fn evaluate_protocol(
    method: &str,
    synth: &LabeledDataset,
    arch: &Architecture,
    protocol: &EvalProtocol,
    test: &LabeledDataset,
    seed: u64,
) -> Result<EvalReport> {
    protocol.validate()?;
    let start = Instant::now();
    let ipc = synth.class_counts().into_iter().max().unwrap_or(0);
    let accuracies = (0..protocol.runs())
        .into_par_iter()
        .map(|run| {
            let params = train_network(synth, arch, protocol, derive_seed(seed, run as u64), |_, _| Ok(()))?;
            test_accuracy(&params, test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_runs(method, arch, ipc, protocol, seed, accuracies, start.elapsed().as_secs_f64()))
}

/// The same protocol under each test architecture, in order.
pub fn cross_architecture_eval(
    method: &str,
    synth: &LabeledDataset,
    test_archs: &[Architecture],
    protocol: &EvalProtocol,
    test: &LabeledDataset,
    seed: u64,
) -> Result<Vec<EvalReport>> {
    test_archs
        .iter()
        .map(|arch| evaluate_protocol(method, synth, arch, protocol, test, seed))
        .collect()
}

/// Tensor of constant logits, handy for exercising the tie rule.
pub fn constant_logits(rows: usize, classes: usize, value: f64) -> Tensor {
    Tensor::full(vec![rows, classes], value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::models::{argmax_rows, LinearSpec, MlpSpec};

    fn linear() -> Architecture {
        Architecture::Linear(LinearSpec {
            input_shape: [1, 1, 2],
            num_classes: 2,
        })
    }

    fn two_points() -> LabeledDataset {
        LabeledDataset::new(Tensor::from_vec(vec![2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), vec![0, 1], 2).unwrap()
    }

    #[test]
    fn zero_epochs_is_init() {
        let p = train_on_synthetic(&two_points(), &linear(), 0, 0.01, 3).unwrap();
        assert_eq!(p, init_params(&linear(), 3).unwrap());
    }

    #[test]
    fn separable_pair_fits() {
        let ds = two_points();
        let p = train_on_synthetic(&ds, &linear(), 200, 0.5, 1).unwrap();
        assert_eq!(test_accuracy(&p, &ds).unwrap(), 1.0);
        assert_eq!(p, train_on_synthetic(&ds, &linear(), 200, 0.5, 1).unwrap());
    }

    #[test]
    fn stats_and_ties() {
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert_eq!(argmax_rows(&constant_logits(4, 3, 1.0)), vec![0; 4]);
    }

    #[test]
    fn protocol_runs_deterministic_and_counted() {
        let ds = make_blobs(2, 4, [1, 1, 2], 0.2, 3.0, 0).unwrap();
        let arch = Architecture::Mlp(MlpSpec::new([1, 1, 2], 2));
        let proto = EvalProtocol {
            experiments: 2,
            nets_per_experiment: 2,
            epochs: 5,
            ..EvalProtocol::desk()
        };
        let a = evaluate_protocol("x", &ds, &arch, &proto, &ds, 9).unwrap();
        let b = evaluate_protocol("x", &ds, &arch, &proto, &ds, 9).unwrap();
        assert_eq!(a.accuracies.len(), 4);
        assert_eq!(a.accuracies, b.accuracies);
        assert_eq!(a.experiment_means().len(), 2);
        assert_eq!(EvalProtocol::named("paper").unwrap().runs(), 100);
        assert_eq!(EvalProtocol::named("desk").unwrap().runs(), 15);
    }
}
