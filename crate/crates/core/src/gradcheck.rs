//! Central finite-difference checks of every differentiable primitive and the composed networks.
//!
//! Each check contracts the output with a fixed random weight tensor before
//! differentiating, so ops whose plain sum has a vanishing gradient
//! (instance norm, softmax) are still exercised in every direction.

use std::time::Instant;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::losses::{cwfa, discrimination_logits, discrimination_loss, feature_alignment_loss, total_loss};
use crate::models::{forward, init_params, Architecture, ConvNetSpec, MlpSpec, INSTANCE_NORM_EPS};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub step: f64,
    pub rel: f64,
    pub abs: f64,
    /// Below this analytic magnitude the absolute bound applies.
    pub near_zero: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            step: 1e-5,
            rel: 1e-3,
            abs: 1e-6,
            near_zero: 1e-8,
        }
    }
}

/// The worst-offending coordinate of a failing check.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub coord: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub mismatch: Option<Mismatch>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.mismatch.is_none()
    }
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut coord = vec![0; shape.len()];
    for (c, &s) in coord.iter_mut().zip(shape).rev() {
        *c = flat % s;
        flat /= s;
    }
    coord
}

/// Builds `build(inputs)`, contracts it with seeded weights and compares the
/// reverse-mode gradient with central differences on up to `max_coords`
/// coordinates of every input.
pub fn check<F>(name: &str, inputs: &[Tensor], max_coords: usize, seed: u64, tol: Tolerance, build: F) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eval = |vals: &[Tensor], weights: Option<&Tensor>, grad: bool| -> Result<(f64, Option<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.leaf(t, grad)).collect();
        let out = build(&mut tape, &vars)?;
        let w = match weights {
            Some(w) => w.clone(),
            None => {
                let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
                let n = tape.value(out).len();
                Tensor::from_vec(tape.shape(out).to_vec(), (0..n).map(|_| r.random_range(0.5..1.5)).collect())?
            }
        };
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv)?;
        let root = tape.sum(prod);
        let value = tape.scalar(root)?;
        let mut grads = Vec::new();
        if grad {
            tape.backward(root)?;
            for (&v, t) in vars.iter().zip(vals) {
                grads.push(match tape.grad(v) {
                    Some(g) => Tensor::from_vec(t.shape().to_vec(), g.to_vec())?,
                    None => Tensor::zeros(t.shape().to_vec()),
                });
            }
        }
        Ok((value, Some(w), grads))
    };

    let (_, weights, analytic) = eval(inputs, None, true)?;
    let weights = weights.expect("weights drawn");
    let mut report = CheckReport {
        name: name.to_string(),
        coords_checked: 0,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        mismatch: None,
    };
    let mut worst_violation = 0.0;
    let mut vals = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= max_coords {
            (0..t.len()).collect()
        } else {
            let mut c = index::sample(&mut rng, t.len(), max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for flat in coords {
            let orig = t.data()[flat];
            vals[ti].data_mut()[flat] = orig + tol.step;
            let (plus, _, _) = eval(&vals, Some(&weights), false)?;
            vals[ti].data_mut()[flat] = orig - tol.step;
            let (minus, _, _) = eval(&vals, Some(&weights), false)?;
            vals[ti].data_mut()[flat] = orig;
            let numeric = (plus - minus) / (2.0 * tol.step);
            let a = analytic[ti].data()[flat];
            let abs_err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            // ratio of error to its allowance; > 1 fails
            let violation = if a.abs() >= tol.near_zero {
                let rel = abs_err / scale;
                report.max_rel_err = report.max_rel_err.max(rel);
                rel / tol.rel
            } else {
                abs_err / tol.abs
            };
            report.max_abs_err = report.max_abs_err.max(abs_err);
            report.coords_checked += 1;
            if violation > 1.0 && violation > worst_violation {
                worst_violation = violation;
                report.mismatch = Some(Mismatch {
                    input: ti,
                    coord: unravel(flat, t.shape()),
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("sized")
}

/// Values bounded away from zero so ReLU's kink is never straddled by the step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("sized")
}

/// Outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckReport> {
        self.checks.iter().filter(|c| !c.passed())
    }

    pub fn worst_rel_err(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

/// Every primitive, then the composed ConvNet, MLP and condensation objective.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let tol = Tolerance::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    let all = usize::MAX;

    let x = uniform(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
    let k = uniform(&mut rng, &[3, 2, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.5, 0.5);
    checks.push(check("conv2d", &[x.clone(), k.clone(), b.clone()], all, seed, tol, |t, v| t.conv2d(v[0], v[1], v[2], 1, 1))?);
    checks.push(check("conv2d/stride2", &[x, k, b], all, seed + 1, tol, |t, v| t.conv2d(v[0], v[1], v[2], 2, 0))?);

    let x = uniform(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    checks.push(check("instance_norm2d", &[x], all, seed, tol, |t, v| t.instance_norm2d(v[0], INSTANCE_NORM_EPS))?);

    let x = away_from_zero(&mut rng, &[3, 7]);
    checks.push(check("relu", &[x], all, seed, tol, |t, v| Ok(t.relu(v[0])))?);

    let x = uniform(&mut rng, &[2, 2, 4, 6], -1.0, 1.0);
    checks.push(check("avg_pool2d", &[x], all, seed, tol, |t, v| t.avg_pool2d(v[0], 2, 2))?);

    let x = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let w = uniform(&mut rng, &[5, 3], -1.0, 1.0);
    let bias = uniform(&mut rng, &[3], -1.0, 1.0);
    checks.push(check("linear", &[x, w, bias], all, seed, tol, |t, v| t.linear(v[0], v[1], v[2]))?);

    let a = uniform(&mut rng, &[5, 4], -1.0, 1.0);
    let bm = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    checks.push(check("matmul_bt", &[a, bm], all, seed, tol, |t, v| t.matmul_bt(v[0], v[1]))?);

    let z = uniform(&mut rng, &[4, 3], -3.0, 3.0);
    checks.push(check("softmax_cross_entropy", &[z], all, seed, tol, |t, v| {
        t.softmax_cross_entropy_mean(v[0], &[0, 2, 1, 2])
    })?);

    let p = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let q = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let pq = [p.clone(), q.clone()];
    checks.push(check("add", &pq, all, seed, tol, |t, v| t.add(v[0], v[1]))?);
    checks.push(check("sub", &pq, all, seed, tol, |t, v| t.sub(v[0], v[1]))?);
    checks.push(check("mul", &pq, all, seed, tol, |t, v| t.mul(v[0], v[1]))?);
    checks.push(check("add_scaled", &pq, all, seed, tol, |t, v| t.add_scaled(v[0], v[1], 0.7))?);
    checks.push(check("scale", std::slice::from_ref(&p), all, seed, tol, |t, v| Ok(t.scale(v[0], -1.3)))?);
    checks.push(check("sum", std::slice::from_ref(&p), all, seed, tol, |t, v| Ok(t.sum(v[0])))?);
    checks.push(check("sum_squares", std::slice::from_ref(&p), all, seed, tol, |t, v| Ok(t.sum_squares(v[0])))?);
    checks.push(check("reshape", std::slice::from_ref(&p), all, seed, tol, |t, v| t.reshape(v[0], vec![2, 6]))?);
    checks.push(check("group_mean", std::slice::from_ref(&p), all, seed, tol, |t, v| {
        t.group_mean(v[0], vec![vec![0, 2], vec![1]])
    })?);
    checks.push(check("gather_rows", &[p], all, seed, tol, |t, v| t.gather_rows(v[0], &[2, 0, 2]))?);

    // composed networks: sampled coordinates of every parameter tensor and the input
    let conv = Architecture::ConvNet(ConvNetSpec::new([1, 8, 8], 3).with_channels(4).with_blocks(2));
    let params = init_params(&conv, seed)?;
    let mut inputs = vec![uniform(&mut rng, &[3, 1, 8, 8], -1.0, 1.0)];
    inputs.extend(params.tensors.iter().cloned());
    checks.push(check("convnet", &inputs, 20, seed, tol, |t, v| {
        let pyr = forward(t, &conv, &v[1..], v[0])?;
        t.softmax_cross_entropy_mean(pyr.logits, &[0, 1, 2])
    })?);

    let mlp = Architecture::Mlp(MlpSpec {
        input_shape: [1, 3, 3],
        hidden: vec![6, 5],
        num_classes: 3,
    });
    let params = init_params(&mlp, seed + 1)?;
    let mut inputs = vec![uniform(&mut rng, &[4, 1, 3, 3], -1.0, 1.0)];
    inputs.extend(params.tensors.iter().cloned());
    checks.push(check("mlp", &inputs, 20, seed, tol, |t, v| {
        let pyr = forward(t, &mlp, &v[1..], v[0])?;
        t.softmax_cross_entropy_mean(pyr.logits, &[0, 1, 2, 1])
    })?);

    // the condensation objective with respect to synthetic pixels
    let tiny = Architecture::ConvNet(ConvNetSpec::new([1, 8, 8], 2).with_channels(4).with_blocks(1));
    let params = init_params(&tiny, seed + 2)?;
    let real = uniform(&mut rng, &[4, 1, 8, 8], -1.0, 1.0);
    let synth = uniform(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
    checks.push(check("total_loss/synthetic", &[synth], 40, seed, tol, |t, v| {
        let bound = params.bind(t, false);
        let r = t.constant(real.clone());
        let rp = forward(t, &tiny, &bound, r)?;
        let sp = forward(t, &tiny, &bound, v[0])?;
        let rm = cwfa(t, &rp.taps, &[0, 1, 0, 1], 2)?;
        let sm = cwfa(t, &sp.taps, &[0, 1], 2)?;
        let l_f = feature_alignment_loss(t, &rm, &sm)?;
        let logits = discrimination_logits(t, rp.last_tap(), sm.centers())?;
        let l_d = discrimination_loss(t, logits, &[0, 1, 0, 1])?;
        Ok(total_loss(t, l_f, l_d, 1.0)?.0)
    })?);

    Ok(SuiteReport {
        checks,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrong_gradient_is_caught() {
        // sum_squares checked against the derivative of a different function
        let x = Tensor::from_vec(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let ok = check("square", std::slice::from_ref(&x), 10, 0, Tolerance::default(), |t, v| Ok(t.sum_squares(v[0]))).unwrap();
        assert!(ok.passed());
        let tol = Tolerance { step: 1e-5, rel: 1e-12, abs: 1e-15, near_zero: 1e-8 };
        let strict = check("square", &[x], 10, 0, tol, |t, v| Ok(t.sum_squares(v[0]))).unwrap();
        assert!(!strict.passed());
        assert_eq!(strict.mismatch.unwrap().coord.len(), 1);
    }

    #[test]
    fn unravel_row_major() {
        assert_eq!(unravel(7, &[2, 3, 2]), vec![1, 0, 1]);
    }
}
