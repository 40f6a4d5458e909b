//! Real-subset baselines: random, herding, k-center and forgetting-based selection.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::bilevel::SyntheticSet;
use crate::data::{sample_per_class, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::{embed, ModelParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoresetMethod {
    Random,
    Herding,
    KCenter,
    Forgetting,
}

impl CoresetMethod {
    pub const ALL: [CoresetMethod; 4] = [Self::Random, Self::Herding, Self::KCenter, Self::Forgetting];

    pub fn name(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Herding => "herding",
            Self::KCenter => "kcenter",
            Self::Forgetting => "forgetting",
        }
    }
}

impl fmt::Display for CoresetMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CoresetMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "k-center" && *m == Self::KCenter))
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::config(format!("unknown coreset method '{s}', expected one of: {}", names.join(", ")))
            })
    }
}

/// Chosen dataset rows, class-major, `ipc` per class in selection order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectionResult {
    pub method: CoresetMethod,
    pub ipc: usize,
    pub indices: Vec<usize>,
}

impl SelectionResult {
    pub fn num_classes(&self) -> usize {
        self.indices.len() / self.ipc.max(1)
    }

    /// `(class, rank, dataset_index)` triples.
    pub fn rows(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &idx)| (i / self.ipc, i % self.ipc, idx))
    }

    /// Checks counts, uniqueness, range and class membership against `ds`.
    pub fn validate(&self, ds: &LabeledDataset) -> Result<()> {
        if self.indices.len() != self.ipc * ds.num_classes {
            return Err(Error::input(format!(
                "selection has {} indices, expected {}",
                self.indices.len(),
                self.ipc * ds.num_classes
            )));
        }
        let mut seen = vec![false; ds.len()];
        for (class, rank, idx) in self.rows() {
            if idx >= ds.len() {
                return Err(Error::input(format!("index {idx} out of range for {} samples", ds.len())));
            }
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::input(format!("index {idx} selected twice")));
            }
            if ds.labels[idx] != class {
                return Err(Error::input(format!(
                    "class {class} rank {rank} points at index {idx} of class {}",
                    ds.labels[idx]
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "class,rank,dataset_index")?;
        for (c, r, i) in self.rows() {
            writeln!(out, "{c},{r},{i}")?;
        }
        out.flush()?;
        Ok(())
    }

    /// The selected images as a synthetic set, ready for the same evaluation path.
    pub fn materialize(&self, ds: &LabeledDataset) -> Result<SyntheticSet> {
        self.validate(ds)?;
        SyntheticSet::new(ds.images.gather_rows(&self.indices)?, ds.num_classes, self.ipc)
    }
}

fn check_class_sizes(ds: &LabeledDataset, ipc: usize) -> Result<Vec<Vec<usize>>> {
    if ipc == 0 {
        return Err(Error::input("ipc must be at least 1"));
    }
    ds.require_per_class(ipc)?;
    Ok(ds.class_indices())
}

fn check_features(ds: &LabeledDataset, features: &Tensor) -> Result<()> {
    if features.shape().len() != 2 || features.rows() != ds.len() {
        return Err(Error::dim(format!(
            "features {:?} do not cover {} samples",
            features.shape(),
            ds.len()
        )));
    }
    Ok(())
}

/// Flattened pixels as `[n, C·H·W]` features.
pub fn pixel_features(ds: &LabeledDataset) -> Result<Tensor> {
    ds.images.clone().reshape(vec![ds.len(), ds.images.row_len()])
}

/// Last-tap features of a trained network.
pub fn tap_features(params: &ModelParams, ds: &LabeledDataset) -> Result<Tensor> {
    let mut pyr = embed(params, &ds.images)?;
    Ok(pyr.taps.pop().expect("at least one tap"))
}

pub fn select_random(ds: &LabeledDataset, ipc: usize, seed: u64) -> Result<SelectionResult> {
    let classes = check_class_sizes(ds, ipc)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (indices, _) = sample_per_class(&classes, ipc, &mut rng);
    Ok(SelectionResult {
        method: CoresetMethod::Random,
        ipc,
        indices,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn class_mean(features: &Tensor, members: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; features.row_len()];
    for &i in members {
        mean.iter_mut().zip(features.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= members.len() as f64);
    mean
}

/// Greedy herding within one class; returns positions into `members`.
pub fn herding_order(features: &Tensor, members: &[usize], count: usize) -> Vec<usize> {
    let d = features.row_len();
    let mu = class_mean(features, members);
    let mut sum = vec![0.0; d];
    let mut taken = vec![false; members.len()];
    let mut order = Vec::with_capacity(count);
    let mut cand = vec![0.0; d];
    for t in 0..count {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &i) in members.iter().enumerate() {
            if taken[pos] {
                continue;
            }
            for ((c, s), x) in cand.iter_mut().zip(&sum).zip(features.row(i)) {
                *c = (s + x) / (t + 1) as f64;
            }
            let gap = sq_dist(&mu, &cand);
            if best.is_none_or(|(_, g)| gap < g) {
                best = Some((pos, gap));
            }
        }
        let (pos, _) = best.expect("count <= members");
        taken[pos] = true;
        sum.iter_mut().zip(features.row(members[pos])).for_each(|(s, x)| *s += x);
        order.push(pos);
    }
    order
}

/// Farthest-point traversal within one class, seeded at the point nearest the class mean.
pub fn kcenter_order(features: &Tensor, members: &[usize], count: usize) -> Vec<usize> {
    let mu = class_mean(features, members);
    let first = (0..members.len())
        .min_by(|&a, &b| {
            sq_dist(features.row(members[a]), &mu)
                .total_cmp(&sq_dist(features.row(members[b]), &mu))
                .then(a.cmp(&b))
        })
        .expect("non-empty class");
    let mut order = vec![first];
    let mut nearest: Vec<f64> = members
        .iter()
        .map(|&i| sq_dist(features.row(i), features.row(members[first])))
        .collect();
    while order.len() < count {
        let mut best: Option<(usize, f64)> = None;
        for (pos, &d) in nearest.iter().enumerate() {
            if order.contains(&pos) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((pos, d));
            }
        }
        let (pick, _) = best.expect("count <= members");
        order.push(pick);
        let c = features.row(members[pick]);
        for (n, &i) in nearest.iter_mut().zip(members) {
            *n = n.min(sq_dist(features.row(i), c));
        }
    }
    order
}

fn per_class_select(
    ds: &LabeledDataset,
    ipc: usize,
    method: CoresetMethod,
    pick: impl Fn(&[usize]) -> Vec<usize> + Sync,
) -> Result<SelectionResult> {
    let classes = check_class_sizes(ds, ipc)?;
    let indices = classes
        .par_iter()
        .map(|members| pick(members).into_iter().map(|p| members[p]).collect::<Vec<_>>())
        .collect::<Vec<_>>()
        .concat();
    Ok(SelectionResult { method, ipc, indices })
}

pub fn select_herding(ds: &LabeledDataset, ipc: usize, features: &Tensor) -> Result<SelectionResult> {
    check_features(ds, features)?;
    per_class_select(ds, ipc, CoresetMethod::Herding, |m| herding_order(features, m, ipc))
}

pub fn select_kcenter(ds: &LabeledDataset, ipc: usize, features: &Tensor) -> Result<SelectionResult> {
    check_features(ds, features)?;
    per_class_select(ds, ipc, CoresetMethod::KCenter, |m| kcenter_order(features, m, ipc))
}

/// Per-epoch correctness of every training sample: `epochs[e][i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectnessTrace {
    pub epochs: Vec<Vec<bool>>,
}

impl CorrectnessTrace {
    pub fn num_samples(&self) -> usize {
        self.epochs.first().map_or(0, Vec::len)
    }
}

/// Correct-to-incorrect transitions between consecutive epochs, per sample.
pub fn forgetting_events(trace: &CorrectnessTrace) -> Result<Vec<usize>> {
    if trace.epochs.len() < 2 {
        return Err(Error::input(format!(
            "forgetting needs at least 2 epochs of trace, got {}",
            trace.epochs.len()
        )));
    }
    let n = trace.num_samples();
    if trace.epochs.iter().any(|e| e.len() != n) {
        return Err(Error::input("trace epochs cover different sample counts"));
    }
    let mut events = vec![0; n];
    for pair in trace.epochs.windows(2) {
        for (e, (&before, &after)) in events.iter_mut().zip(pair[0].iter().zip(&pair[1])) {
            if before && !after {
                *e += 1;
            }
        }
    }
    Ok(events)
}

/// The `ipc` most-forgotten samples per class; ties go to the lower index.
pub fn select_forgetting(ds: &LabeledDataset, ipc: usize, trace: &CorrectnessTrace) -> Result<SelectionResult> {
    let events = forgetting_events(trace)?;
    if events.len() != ds.len() {
        return Err(Error::input(format!("trace covers {} samples, dataset has {}", events.len(), ds.len())));
    }
    per_class_select(ds, ipc, CoresetMethod::Forgetting, |members| {
        let mut pos: Vec<usize> = (0..members.len()).collect();
        pos.sort_by(|&a, &b| events[members[b]].cmp(&events[members[a]]).then(members[a].cmp(&members[b])));
        pos.truncate(ipc);
        pos
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds_1d(values: &[f64], labels: &[usize], k: usize) -> LabeledDataset {
        LabeledDataset::new(Tensor::from_vec(vec![values.len(), 1, 1, 1], values.to_vec()).unwrap(), labels.to_vec(), k).unwrap()
    }

    #[test]
    fn herding_picks_nearer_to_mean() {
        let ds = ds_1d(&[0.0, 10.0, 1.0, 2.0], &[0, 0, 1, 1], 2);
        let f = pixel_features(&ds).unwrap();
        // class 0 mean 5 is equidistant: tie goes to index 0
        let sel = select_herding(&ds, 1, &f).unwrap();
        assert_eq!(sel.indices, vec![0, 2]);
        let ds = ds_1d(&[0.0, 10.0, 6.0, 1.0, 2.0], &[0, 0, 0, 1, 1], 2);
        let sel = select_herding(&ds, 1, &pixel_features(&ds).unwrap()).unwrap();
        assert_eq!(sel.indices[0], 2);
    }

    #[test]
    fn full_class_herding_reaches_mean() {
        let vals = [0.3, 1.7, -2.0, 5.5, 1.0, 2.0, 4.0, -1.0];
        let ds = ds_1d(&vals, &[0, 0, 0, 0, 1, 1, 1, 1], 2);
        let sel = select_herding(&ds, 4, &pixel_features(&ds).unwrap()).unwrap();
        sel.validate(&ds).unwrap();
        for k in 0..2 {
            let picked: f64 = sel.indices[k * 4..(k + 1) * 4].iter().map(|&i| vals[i]).sum::<f64>() / 4.0;
            let mean: f64 = vals[k * 4..(k + 1) * 4].iter().sum::<f64>() / 4.0;
            assert!((picked - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn kcenter_separated_clusters() {
        let ds = ds_1d(&[0.0, 0.1, 100.0, 100.1, 5.0, 6.0], &[0, 0, 0, 0, 1, 1], 2);
        let sel = select_kcenter(&ds, 2, &pixel_features(&ds).unwrap()).unwrap();
        let c0: Vec<f64> = sel.indices[..2].iter().map(|&i| ds.images.data()[i]).collect();
        assert!(c0.iter().any(|&v| v < 1.0) && c0.iter().any(|&v| v > 99.0));
        sel.validate(&ds).unwrap();
    }

    #[test]
    fn forgetting_counts() {
        let t = |rows: Vec<Vec<bool>>| CorrectnessTrace { epochs: rows };
        let e = forgetting_events(&t(vec![vec![true], vec![true], vec![true]])).unwrap();
        assert_eq!(e, vec![0]);
        let e = forgetting_events(&t(vec![vec![true], vec![false], vec![true], vec![false]])).unwrap();
        assert_eq!(e, vec![2]);
        assert!(forgetting_events(&t(vec![vec![true]])).is_err());
    }

    #[test]
    fn random_is_seeded_and_whole_class_at_capacity() {
        let ds = ds_1d(&[0., 1., 2., 3.], &[0, 1, 0, 1], 2);
        let a = select_random(&ds, 2, 4).unwrap();
        let mut c0 = a.indices[..2].to_vec();
        c0.sort();
        assert_eq!(c0, vec![0, 2]);
        assert_eq!(a, select_random(&ds, 2, 4).unwrap());
        assert!(matches!(select_random(&ds, 3, 0), Err(Error::Input(_))));
    }

    #[test]
    fn method_names() {
        assert_eq!("kcenter".parse::<CoresetMethod>().unwrap(), CoresetMethod::KCenter);
        let err = "greedy".parse::<CoresetMethod>().unwrap_err().to_string();
        assert!(err.contains("random, herding, kcenter, forgetting"));
    }
}
