//! Feature extractors with per-layer taps.
//!
//! Every architecture produces a [`FeaturePyramid`]: one flattened
//! `[B, C']` matrix per tap plus the output logits. The last tap is always
//! the exact input of the final linear layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{sgd_step, Tape, Tensor, Var};

pub const INSTANCE_NORM_EPS: f64 = 1e-5;
const EMBED_CHUNK: usize = 64;

/// `blocks` × (Conv3x3 → InstanceNorm → ReLU → AvgPool2) followed by a linear classifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub blocks: usize,
    pub channels: usize,
    /// `(C, H, W)` of one input image.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ConvNetSpec {
    pub fn new(input_shape: [usize; 3], num_classes: usize) -> Self {
        ConvNetSpec {
            blocks: 3,
            channels: 128,
            input_shape,
            num_classes,
        }
    }

    pub fn with_channels(mut self, channels: usize) -> Self {
        self.channels = channels;
        self
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }
}

/// Fully connected ReLU network; the default `hidden = [128, 128]` gives three linear layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_shape: [usize; 3],
    pub hidden: Vec<usize>,
    pub num_classes: usize,
}

impl MlpSpec {
    pub fn new(input_shape: [usize; 3], num_classes: usize) -> Self {
        MlpSpec {
            input_shape,
            hidden: vec![128, 128],
            num_classes,
        }
    }
}

/// Identity feature extractor (the flattened input is the only tap) with a linear head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinearSpec {
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Architecture {
    ConvNet(ConvNetSpec),
    Mlp(MlpSpec),
    Linear(LinearSpec),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input_shape();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config(format!("input shape {:?} has an empty axis", self.input_shape())));
        }
        if self.num_classes() < 2 {
            return Err(Error::config("at least two classes are required"));
        }
        match self {
            Architecture::ConvNet(s) => {
                if s.blocks == 0 || s.channels == 0 {
                    return Err(Error::config("convnet needs at least one block and one channel"));
                }
                let f = 1usize.checked_shl(s.blocks as u32).unwrap_or(usize::MAX);
                if h % f != 0 || w % f != 0 {
                    return Err(Error::config(format!(
                        "input {h}x{w} is not divisible by 2^{} for {} pooling blocks",
                        s.blocks, s.blocks
                    )));
                }
            }
            Architecture::Mlp(s) => {
                if s.hidden.is_empty() || s.hidden.contains(&0) {
                    return Err(Error::config("mlp hidden widths must be non-empty and positive"));
                }
            }
            Architecture::Linear(_) => {}
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Architecture::ConvNet(s) => s.input_shape,
            Architecture::Mlp(s) => s.input_shape,
            Architecture::Linear(s) => s.input_shape,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Architecture::ConvNet(s) => s.num_classes,
            Architecture::Mlp(s) => s.num_classes,
            Architecture::Linear(s) => s.num_classes,
        }
    }

    /// Flattened width `C'` of each tap, nearest-to-input first.
    pub fn tap_widths(&self) -> Vec<usize> {
        match self {
            Architecture::ConvNet(s) => {
                let [_, h, w] = s.input_shape;
                (1..=s.blocks).map(|i| s.channels * (h >> i) * (w >> i)).collect()
            }
            Architecture::Mlp(s) => s.hidden.clone(),
            Architecture::Linear(s) => vec![s.input_shape.iter().product()],
        }
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let k = self.num_classes();
        match self {
            Architecture::ConvNet(s) => {
                let mut shapes = Vec::new();
                let mut in_ch = s.input_shape[0];
                for _ in 0..s.blocks {
                    shapes.push(vec![s.channels, in_ch, 3, 3]);
                    shapes.push(vec![s.channels]);
                    in_ch = s.channels;
                }
                let d = *self.tap_widths().last().expect("blocks >= 1");
                shapes.push(vec![d, k]);
                shapes.push(vec![k]);
                shapes
            }
            Architecture::Mlp(s) => {
                let mut shapes = Vec::new();
                let mut d: usize = s.input_shape.iter().product();
                for &h in &s.hidden {
                    shapes.push(vec![d, h]);
                    shapes.push(vec![h]);
                    d = h;
                }
                shapes.push(vec![d, k]);
                shapes.push(vec![k]);
                shapes
            }
            Architecture::Linear(s) => vec![vec![s.input_shape.iter().product(), k], vec![k]],
        }
    }

    /// Short human-readable tag, e.g. `convnet3-32`.
    pub fn label(&self) -> String {
        match self {
            Architecture::ConvNet(s) => format!("convnet{}-{}", s.blocks, s.channels),
            Architecture::Mlp(s) => {
                let widths: Vec<String> = s.hidden.iter().map(|h| h.to_string()).collect();
                format!("mlp-{}", widths.join("-"))
            }
            Architecture::Linear(_) => "linear".to_string(),
        }
    }
}

/// Ordered parameter tensors for one network: weight, bias per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub tensors: Vec<Tensor>,
}

/// He-normal weights (`N(0, 2/fan_in)`), zero biases. Deterministic per seed.
pub fn init_params(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = arch
        .param_shapes()
        .into_iter()
        .map(|shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            // conv kernels are [O, C, kh, kw]; linear weights are [D, K]
            let fan_in: usize = if shape.len() == 4 {
                shape[1..].iter().product()
            } else {
                shape[0]
            };
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_vec(shape, data).expect("shape matches data")
        })
        .collect();
    Ok(ModelParams {
        arch: arch.clone(),
        tensors,
    })
}

impl ModelParams {
    pub fn new(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() || shapes.iter().zip(&tensors).any(|(s, t)| s.as_slice() != t.shape()) {
            return Err(Error::dim(format!(
                "parameter tensors do not match the {} layout",
                arch.label()
            )));
        }
        Ok(ModelParams { arch, tensors })
    }

    /// Puts every parameter on the tape, in order.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t, requires_grad)).collect()
    }

    /// Copies gradients of the bound leaves into the parameter tensors.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &[Var]) -> Result<()> {
        for (t, &v) in self.tensors.iter_mut().zip(bound) {
            match tape.grad(v) {
                Some(g) => t.accumulate_grad(g)?,
                // unreachable parameters still take a (zero) step
                None => t.accumulate_grad(&vec![0.0; t.len()])?,
            }
        }
        Ok(())
    }

    pub fn sgd_step(&mut self, lr: f64) -> Result<()> {
        sgd_step(self.tensors.iter_mut(), lr)
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Per-tap flattened features (`taps[l]` is `[B, C'_l]`) and the output logits.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub taps: Vec<Var>,
    pub logits: Var,
}

impl FeaturePyramid {
    pub fn last_tap(&self) -> Var {
        *self.taps.last().expect("pyramids have at least one tap")
    }
}

fn check_batch(tape: &Tape, batch: Var, arch: &Architecture) -> Result<usize> {
    let shape = tape.shape(batch);
    let want = arch.input_shape();
    match shape {
        [b, c, h, w] if [*c, *h, *w] == want => Ok(*b),
        _ => Err(Error::dim(format!(
            "batch shape {shape:?} does not match input shape {want:?} of {}",
            arch.label()
        ))),
    }
}

fn check_bound(arch: &Architecture, params: &[Var]) -> Result<()> {
    let want = arch.param_shapes().len();
    if params.len() != want {
        return Err(Error::dim(format!(
            "{} expects {want} parameter tensors, got {}",
            arch.label(),
            params.len()
        )));
    }
    Ok(())
}

pub fn convnet_forward(tape: &mut Tape, spec: &ConvNetSpec, params: &[Var], batch: Var) -> Result<FeaturePyramid> {
    let arch = Architecture::ConvNet(spec.clone());
    check_bound(&arch, params)?;
    check_batch(tape, batch, &arch)?;
    let mut x = batch;
    let mut taps = Vec::with_capacity(spec.blocks);
    for blk in 0..spec.blocks {
        let conv = tape.conv2d(x, params[2 * blk], params[2 * blk + 1], 1, 1)?;
        let norm = tape.instance_norm2d(conv, INSTANCE_NORM_EPS)?;
        let act = tape.relu(norm);
        x = tape.avg_pool2d(act, 2, 2)?;
        taps.push(tape.flatten(x)?);
    }
    let n = params.len();
    let logits = tape.linear(*taps.last().expect("blocks >= 1"), params[n - 2], params[n - 1])?;
    Ok(FeaturePyramid { taps, logits })
}

pub fn mlp_forward(tape: &mut Tape, spec: &MlpSpec, params: &[Var], batch: Var) -> Result<FeaturePyramid> {
    let arch = Architecture::Mlp(spec.clone());
    check_bound(&arch, params)?;
    check_batch(tape, batch, &arch)?;
    let mut x = tape.flatten(batch)?;
    let mut taps = Vec::with_capacity(spec.hidden.len());
    for layer in 0..spec.hidden.len() {
        let z = tape.linear(x, params[2 * layer], params[2 * layer + 1])?;
        x = tape.relu(z);
        taps.push(x);
    }
    let n = params.len();
    let logits = tape.linear(x, params[n - 2], params[n - 1])?;
    Ok(FeaturePyramid { taps, logits })
}

pub fn linear_forward(tape: &mut Tape, spec: &LinearSpec, params: &[Var], batch: Var) -> Result<FeaturePyramid> {
    let arch = Architecture::Linear(spec.clone());
    check_bound(&arch, params)?;
    check_batch(tape, batch, &arch)?;
    let x = tape.flatten(batch)?;
    let logits = tape.linear(x, params[0], params[1])?;
    Ok(FeaturePyramid { taps: vec![x], logits })
}

/// Runs `arch` over a `[B,C,H,W]` batch already on the tape.
pub fn forward(tape: &mut Tape, arch: &Architecture, params: &[Var], batch: Var) -> Result<FeaturePyramid> {
    match arch {
        Architecture::ConvNet(s) => convnet_forward(tape, s, params, batch),
        Architecture::Mlp(s) => mlp_forward(tape, s, params, batch),
        Architecture::Linear(s) => linear_forward(tape, s, params, batch),
    }
}

/// Pyramid values computed outside any gradient tape.
#[derive(Debug, Clone)]
pub struct PyramidValues {
    pub taps: Vec<Tensor>,
    pub logits: Tensor,
}

fn forward_chunks(
    params: &ModelParams,
    images: &Tensor,
    mut visit: impl FnMut(&Tape, &FeaturePyramid) -> Result<()>,
) -> Result<()> {
    let n = images.rows();
    let mut start = 0;
    while start < n {
        let end = (start + EMBED_CHUNK).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let batch = tape.constant(images.gather_rows(&rows)?);
        let pyramid = forward(&mut tape, &params.arch, &bound, batch)?;
        visit(&tape, &pyramid)?;
        start = end;
    }
    Ok(())
}

/// Evaluates the full pyramid for `images` without recording gradients.
pub fn embed(params: &ModelParams, images: &Tensor) -> Result<PyramidValues> {
    let widths = params.arch.tap_widths();
    let k = params.arch.num_classes();
    let n = images.rows();
    let mut taps: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(n * w)).collect();
    let mut logits = Vec::with_capacity(n * k);
    forward_chunks(params, images, |tape, pyr| {
        for (dst, &v) in taps.iter_mut().zip(&pyr.taps) {
            dst.extend_from_slice(tape.value(v));
        }
        logits.extend_from_slice(tape.value(pyr.logits));
        Ok(())
    })?;
    let taps = taps
        .into_iter()
        .zip(&widths)
        .map(|(data, &w)| Tensor::from_vec(vec![n, w], data))
        .collect::<Result<Vec<_>>>()?;
    Ok(PyramidValues {
        taps,
        logits: Tensor::from_vec(vec![n, k], logits)?,
    })
}

/// Logits for `images` without recording gradients.
pub fn logits(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    let k = params.arch.num_classes();
    let mut out = Vec::with_capacity(images.rows() * k);
    forward_chunks(params, images, |tape, pyr| {
        out.extend_from_slice(tape.value(pyr.logits));
        Ok(())
    })?;
    Tensor::from_vec(vec![images.rows(), k], out)
}

/// Index of the largest entry in each row; ties resolve to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.row_len();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn predict(params: &ModelParams, images: &Tensor) -> Result<Vec<usize>> {
    Ok(argmax_rows(&logits(params, images)?))
}
