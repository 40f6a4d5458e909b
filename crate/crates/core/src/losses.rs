//! The condensation objective: category-wise feature averaging, layer-wise
//! feature alignment, and the discrimination loss that classifies real
//! samples against synthetic class centers.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Per-layer class means; `layers[l]` is a `[K, C'_l]` node whose row `k` is the mean feature of class `k`.
#[derive(Debug, Clone)]
pub struct ClassMeans {
    pub layers: Vec<Var>,
    pub num_classes: usize,
}

impl ClassMeans {
    /// Class centers at the last tap.
    pub fn centers(&self) -> Var {
        *self.layers.last().expect("at least one layer")
    }
}

/// Row indices of each class, in batch order. Every class in `0..k` must occur.
pub fn class_groups(labels: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    let mut groups = vec![Vec::new(); k];
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::input(format!("label {y} out of range for {k} classes")));
        }
        groups[y].push(i);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::input(format!("class {empty} has no samples in the batch")));
    }
    Ok(groups)
}

/// Category-wise feature averaging over every tap.
pub fn cwfa(tape: &mut Tape, taps: &[Var], labels: &[usize], k: usize) -> Result<ClassMeans> {
    let groups = class_groups(labels, k)?;
    let layers = taps
        .iter()
        .map(|&tap| {
            let rows = tape.shape(tap)[0];
            if rows != labels.len() {
                return Err(Error::dim(format!("tap has {rows} rows for {} labels", labels.len())));
            }
            tape.group_mean(tap, groups.clone())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ClassMeans {
        layers,
        num_classes: k,
    })
}

/// Sum over classes and layers of the squared L2 distance between class means.
pub fn feature_alignment_loss(tape: &mut Tape, real: &ClassMeans, synth: &ClassMeans) -> Result<Var> {
    if real.layers.len() != synth.layers.len() || real.layers.is_empty() {
        return Err(Error::dim(format!(
            "pyramids have {} and {} layers",
            real.layers.len(),
            synth.layers.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (&r, &s) in real.layers.iter().zip(&synth.layers) {
        let diff = tape.sub(s, r)?;
        let sq = tape.sum_squares(diff);
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Inner products between each real feature row and each synthetic class center: `[N', K]`.
pub fn discrimination_logits(tape: &mut Tape, real_last: Var, synth_centers: Var) -> Result<Var> {
    tape.matmul_bt(real_last, synth_centers)
}

pub fn discrimination_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy_mean(logits, labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_f: f64,
    pub l_d: f64,
    pub total: f64,
    pub beta: f64,
}

/// `l_f + beta·l_d` on the tape; the breakdown's `total` is that node's value.
pub fn total_loss(tape: &mut Tape, l_f: Var, l_d: Var, beta: f64) -> Result<(Var, LossBreakdown)> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::config(format!("beta must be a positive finite weight, got {beta}")));
    }
    let total = tape.add_scaled(l_f, l_d, beta)?;
    let breakdown = LossBreakdown {
        l_f: tape.scalar(l_f)?,
        l_d: tape.scalar(l_d)?,
        total: tape.scalar(total)?,
        beta,
    };
    Ok((total, breakdown))
}
