//! Dense `f64` tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values live in plain [`Tensor`]s. To differentiate, copy them onto a
//! [`Tape`] as leaves, compose operations on the returned [`Var`] handles,
//! call [`Tape::backward`] on a scalar, then read gradients back with
//! [`Tape::grad`] or [`Tape::accumulate_grad`].
//!
//! ```
//! use condensery::tensor::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(&Tensor::from_vec(vec![3], vec![1.0, 2.0, 3.0]).unwrap(), true);
//! let b = tape.leaf(&Tensor::from_vec(vec![3], vec![4.0, 5.0, 6.0]).unwrap(), true);
//! let prod = tape.mul(a, b).unwrap();
//! let y = tape.sum(prod);
//! tape.backward(y).unwrap();
//! assert_eq!(tape.grad(a).unwrap(), &[4.0, 5.0, 6.0]);
//! ```

pub mod fault;
pub(crate) mod kernels;
mod sgd;
mod tape;

pub use sgd::sgd_step;
pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Row-major dense array with an optional gradient buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} holds {expected} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::dim(format!(
                "gradient of length {} for tensor of length {}",
                g.len(),
                self.data.len()
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of elements per index along the leading axis.
    pub fn row_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    /// Copies the listed leading-axis rows, in order, into a new tensor.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let n = self.rows();
        let w = self.row_len();
        let mut data = Vec::with_capacity(rows.len() * w);
        for &r in rows {
            if r >= n {
                return Err(Error::input(format!("row {r} out of range for {n} rows")));
            }
            data.extend_from_slice(&self.data[r * w..(r + 1) * w]);
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            return Err(Error::dim("cannot gather rows from a scalar"));
        }
        shape[0] = rows.len();
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    /// Bitwise fingerprint of the values; used to verify nothing was mutated.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for &d in &self.shape {
            h = (h ^ d as u64).wrapping_mul(0x0100_0000_01b3);
        }
        for v in &self.data {
            h = (h ^ v.to_bits()).wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}
