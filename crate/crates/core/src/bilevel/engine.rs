use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{CondenseConfig, SyntheticInit};
use super::queue::{div, AccQueue};
use super::synthetic::SyntheticSet;
use crate::data::{sample_per_class, LabeledDataset};
use crate::error::{Error, Result};
use crate::losses::{class_groups, cwfa, discrimination_logits, discrimination_loss, feature_alignment_loss, total_loss, LossBreakdown};
use crate::models::{embed, forward, init_params, predict, Architecture, ModelParams};
use crate::tensor::Tape;

/// Everything the loop carries between steps.
#[derive(Debug, Clone)]
pub struct CondenseState {
    pub synthetic: SyntheticSet,
    pub theta: ModelParams,
    pub q_out: AccQueue,
    pub q_in: AccQueue,
    pub lc_out: usize,
    pub lc_in: usize,
    /// Global outer iteration, never reset.
    pub outer_iter: usize,
    pub rng: ChaCha8Rng,
}

/// Counters collected over one run.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct RunStats {
    pub outer_steps: usize,
    pub inner_steps: usize,
    pub outer_breaks: usize,
    pub inner_breaks: usize,
    /// Times θ was re-initialized (including the first).
    pub restarts: usize,
    pub max_q_out_len: usize,
    pub max_q_in_len: usize,
}

/// One row of the per-outer-iteration metrics stream.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub l_f: f64,
    pub l_d: f64,
    pub total: f64,
    pub query_acc: f64,
    pub lc_out: usize,
    /// Inner steps taken by the previous inner loop.
    pub lc_in: usize,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct CondenseOutcome {
    pub synthetic: SyntheticSet,
    pub stats: RunStats,
}

fn check_compatible(real: &LabeledDataset, arch: &Architecture) -> Result<()> {
    arch.validate()?;
    if real.image_shape() != arch.input_shape() || real.num_classes != arch.num_classes() {
        return Err(Error::dim(format!(
            "dataset has {} classes of {:?} images, {} expects {} classes of {:?}",
            real.num_classes,
            real.image_shape(),
            arch.label(),
            arch.num_classes(),
            arch.input_shape()
        )));
    }
    Ok(())
}

impl CondenseState {
    pub fn new(real: &LabeledDataset, arch: &Architecture, cfg: &CondenseConfig) -> Result<Self> {
        cfg.validate()?;
        check_compatible(real, arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let synthetic = match cfg.init {
            SyntheticInit::Noise => SyntheticSet::from_noise(real.num_classes, cfg.ipc, real.image_shape(), &mut rng)?,
            SyntheticInit::Real => SyntheticSet::from_real(real, cfg.ipc, &mut rng)?,
        };
        let theta = init_params(arch, rng.next_u64())?;
        Ok(CondenseState {
            synthetic,
            theta,
            q_out: AccQueue::new(cfg.gamma),
            q_in: AccQueue::new(cfg.gamma),
            lc_out: 0,
            lc_in: 0,
            outer_iter: 0,
            rng,
        })
    }

    /// Fresh θ from the state's generator.
    pub fn reinit_theta(&mut self) -> Result<()> {
        self.theta = init_params(&self.theta.arch, self.rng.next_u64())?;
        Ok(())
    }

    fn synth_batch_rows(&mut self, cfg: &CondenseConfig) -> (Vec<usize>, Vec<usize>) {
        let m = cfg.synth_batch();
        if m >= self.synthetic.ipc {
            return ((0..self.synthetic.len()).collect(), self.synthetic.labels().to_vec());
        }
        sample_per_class(&self.synthetic.class_indices(), m, &mut self.rng)
    }
}

/// One update of the synthetic pixels on `l_f + beta·l_d`.
pub fn outer_step(state: &mut CondenseState, real: &LabeledDataset, cfg: &CondenseConfig) -> Result<LossBreakdown> {
    let k = state.synthetic.num_classes;
    let class_idx = real.class_indices();
    if let Some(missing) = class_idx.iter().position(Vec::is_empty) {
        return Err(Error::input(format!("real dataset has no samples of class {missing}")));
    }
    let (real_rows, real_labels) = sample_per_class(&class_idx, cfg.real_per_class, &mut state.rng);
    let (synth_rows, synth_labels) = state.synth_batch_rows(cfg);

    // real side carries no gradient: evaluate it up front
    let real_pyr = embed(&state.theta, &real.images.gather_rows(&real_rows)?)?;

    let mut tape = Tape::new();
    let params = state.theta.bind(&mut tape, false);
    let images = tape.leaf(&state.synthetic.images, true);
    let batch = if synth_rows.len() == state.synthetic.len() {
        images
    } else {
        tape.gather_rows(images, &synth_rows)?
    };
    let synth_pyr = forward(&mut tape, &state.theta.arch, &params, batch)?;
    let synth_means = cwfa(&mut tape, &synth_pyr.taps, &synth_labels, k)?;

    let groups = class_groups(&real_labels, k)?;
    let mut real_layers = Vec::with_capacity(real_pyr.taps.len());
    let mut real_last = None;
    for tap in real_pyr.taps {
        let v = tape.constant(tap);
        real_layers.push(tape.group_mean(v, groups.clone())?);
        real_last = Some(v);
    }
    let real_means = crate::losses::ClassMeans {
        layers: real_layers,
        num_classes: k,
    };
    let l_f = feature_alignment_loss(&mut tape, &real_means, &synth_means)?;
    let logits = discrimination_logits(&mut tape, real_last.expect("at least one tap"), synth_means.centers())?;
    let l_d = discrimination_loss(&mut tape, logits, &real_labels)?;
    let (total, breakdown) = total_loss(&mut tape, l_f, l_d, cfg.beta)?;
    tape.backward(total)?;

    let lr = cfg.outer_lr_at(state.outer_iter);
    tape.accumulate_grad(images, &mut state.synthetic.images)?;
    crate::tensor::sgd_step([&mut state.synthetic.images], lr)?;
    state.lc_out += 1;
    state.outer_iter += 1;
    Ok(breakdown)
}

/// One SGD step on θ with cross-entropy over a synthetic batch. Returns the loss.
pub fn inner_step(state: &mut CondenseState, cfg: &CondenseConfig) -> Result<f64> {
    if state.synthetic.is_empty() {
        return Err(Error::input("synthetic set is empty"));
    }
    let (rows, labels) = state.synth_batch_rows(cfg);
    let batch_images = if rows.len() == state.synthetic.len() {
        state.synthetic.images.clone()
    } else {
        state.synthetic.images.gather_rows(&rows)?
    };
    let mut tape = Tape::new();
    let params = state.theta.bind(&mut tape, true);
    let batch = tape.constant(batch_images);
    let pyr = forward(&mut tape, &state.theta.arch, &params, batch)?;
    let loss = tape.softmax_cross_entropy_mean(pyr.logits, &labels)?;
    let value = tape.scalar(loss)?;
    tape.backward(loss)?;
    state.theta.collect_grads(&tape, &params)?;
    state.theta.sgd_step(cfg.inner_lr)?;
    state.lc_in += 1;
    Ok(value)
}

/// Accuracy of θ on a class-balanced query set of `query_size` real images.
pub fn query_accuracy<R: rand::Rng + ?Sized>(
    theta: &ModelParams,
    real: &LabeledDataset,
    cfg: &CondenseConfig,
    rng: &mut R,
) -> Result<f64> {
    let per_class = (cfg.query_size / real.num_classes).max(1);
    let (rows, labels) = sample_per_class(&real.class_indices(), per_class, rng);
    if rows.is_empty() {
        return Err(Error::input("query set is empty"));
    }
    let preds = predict(theta, &real.images.gather_rows(&rows)?)?;
    let correct = preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / rows.len() as f64)
}

impl CondenseState {
    /// Runs the adaptive bi-level loop until the outer budget is spent.
    pub fn run(
        &mut self,
        real: &LabeledDataset,
        cfg: &CondenseConfig,
        observer: &mut dyn FnMut(&MetricsRow) -> Result<()>,
    ) -> Result<RunStats> {
        cfg.validate()?;
        let mut stats = RunStats::default();
        let mut last_inner = 0;
        // the first pass uses the θ drawn at construction
        let mut fresh = true;
        while self.outer_iter < cfg.max_outer_iters {
            if !fresh {
                self.reinit_theta()?;
            }
            fresh = false;
            stats.restarts += 1;
            self.q_out.clear();
            self.q_in.clear();
            self.lc_out = 0;
            self.lc_in = 0;
            loop {
                let lr = cfg.outer_lr_at(self.outer_iter);
                let losses = outer_step(self, real, cfg)?;
                stats.outer_steps += 1;
                let acc = query_accuracy(&self.theta, real, cfg, &mut self.rng)?;
                self.q_out.push(acc)?;
                stats.max_q_out_len = stats.max_q_out_len.max(self.q_out.len());
                observer(&MetricsRow {
                    iter: self.outer_iter,
                    l_f: losses.l_f,
                    l_d: losses.l_d,
                    total: losses.total,
                    query_acc: acc,
                    lc_out: self.lc_out,
                    lc_in: last_inner,
                    lr,
                })?;
                if self.outer_iter >= cfg.max_outer_iters {
                    return Ok(stats);
                }
                if (self.q_out.is_full() && div(&self.q_out)? < cfg.lambda1) || self.lc_out > cfg.l_out {
                    self.lc_out = 0;
                    self.q_out.clear();
                    stats.outer_breaks += 1;
                    break;
                } else if self.q_out.is_full() {
                    self.q_out.pop_oldest();
                }
                loop {
                    inner_step(self, cfg)?;
                    stats.inner_steps += 1;
                    let acc = query_accuracy(&self.theta, real, cfg, &mut self.rng)?;
                    self.q_in.push(acc)?;
                    stats.max_q_in_len = stats.max_q_in_len.max(self.q_in.len());
                    if (self.q_in.is_full() && div(&self.q_in)? > cfg.lambda2) || self.lc_in > cfg.l_in {
                        last_inner = self.lc_in;
                        self.lc_in = 0;
                        self.q_in.clear();
                        stats.inner_breaks += 1;
                        break;
                    } else if self.q_in.is_full() {
                        self.q_in.pop_oldest();
                    }
                }
            }
        }
        Ok(stats)
    }
}

/// Condenses `real` into `cfg.ipc` images per class under `arch`.
pub fn run_condense(
    real: &LabeledDataset,
    arch: &Architecture,
    cfg: &CondenseConfig,
    observer: &mut dyn FnMut(&MetricsRow) -> Result<()>,
) -> Result<CondenseOutcome> {
    let mut state = CondenseState::new(real, arch, cfg)?;
    let stats = state.run(real, cfg, observer)?;
    Ok(CondenseOutcome {
        synthetic: state.synthetic,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_blobs;
    use crate::models::{ConvNetSpec, LinearSpec};

    fn blobs() -> LabeledDataset {
        make_blobs(3, 20, [1, 4, 4], 0.3, 4.0, 5).unwrap()
    }

    fn tiny_conv() -> Architecture {
        Architecture::ConvNet(ConvNetSpec::new([1, 4, 4], 3).with_channels(4).with_blocks(1))
    }

    fn small_cfg() -> CondenseConfig {
        CondenseConfig {
            ipc: 2,
            real_per_class: 8,
            query_size: 12,
            l_out: 3,
            l_in: 3,
            gamma: 2,
            max_outer_iters: 6,
            ..Default::default()
        }
    }

    #[test]
    fn zero_inner_lr_keeps_theta() {
        let real = blobs();
        let cfg = CondenseConfig { inner_lr: 0.0, ..small_cfg() };
        let mut st = CondenseState::new(&real, &tiny_conv(), &cfg).unwrap();
        let before = st.theta.clone();
        inner_step(&mut st, &cfg).unwrap();
        assert_eq!(st.theta.tensors.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(),
                   before.tensors.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>());
        assert_eq!(st.lc_in, 1);
    }

    #[test]
    fn outer_step_moves_only_pixels_and_keeps_labels() {
        let real = blobs();
        let cfg = small_cfg();
        let mut st = CondenseState::new(&real, &tiny_conv(), &cfg).unwrap();
        let labels = st.synthetic.labels().to_vec();
        let theta = st.theta.clone();
        let before = st.synthetic.images.clone();
        let b = outer_step(&mut st, &real, &cfg).unwrap();
        assert_eq!(b.total, b.l_f + b.beta * b.l_d);
        assert_ne!(st.synthetic.images.data(), before.data());
        assert_eq!(st.synthetic.labels(), labels.as_slice());
        assert_eq!(st.theta, theta);
        assert_eq!((st.lc_out, st.outer_iter), (1, 1));
    }

    #[test]
    fn missing_class_is_input_error() {
        let real = blobs();
        let cfg = small_cfg();
        let mut st = CondenseState::new(&real, &tiny_conv(), &cfg).unwrap();
        let keep: Vec<usize> = (0..real.len()).filter(|&i| real.labels[i] != 1).collect();
        let mut partial = real.subset(&keep).unwrap();
        partial.num_classes = 3;
        assert!(matches!(outer_step(&mut st, &partial, &cfg), Err(Error::Input(_))));
    }

    #[test]
    fn run_is_deterministic() {
        let real = blobs();
        let cfg = small_cfg();
        let a = run_condense(&real, &tiny_conv(), &cfg, &mut |_| Ok(())).unwrap();
        let b = run_condense(&real, &tiny_conv(), &cfg, &mut |_| Ok(())).unwrap();
        assert_eq!(a.synthetic.images.data(), b.synthetic.images.data());
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.stats.outer_steps, 6);
    }

    #[test]
    fn identical_sets_have_zero_alignment_gradient() {
        // synthetic == real with ipc == class size: class means coincide
        let real = make_blobs(2, 3, [1, 2, 2], 0.3, 3.0, 1).unwrap();
        let arch = Architecture::Linear(LinearSpec {
            input_shape: [1, 2, 2],
            num_classes: 2,
        });
        let cfg = CondenseConfig {
            ipc: 3,
            real_per_class: 3,
            ..Default::default()
        };
        let mut st = CondenseState::new(&real, &arch, &cfg).unwrap();
        let order: Vec<usize> = real.class_indices().concat();
        st.synthetic = SyntheticSet::new(real.images.gather_rows(&order).unwrap(), 2, 3).unwrap();
        let b = outer_step(&mut st, &real, &cfg).unwrap();
        assert!(b.l_f.abs() < 1e-24, "l_f = {}", b.l_f);
    }
}
