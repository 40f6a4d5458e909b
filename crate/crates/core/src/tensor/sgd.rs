use super::Tensor;
use crate::error::{Error, Result};

/// Plain SGD: `value -= lr * grad` for every tensor, then clears the gradients.
///
/// All tensors are checked before any is modified, so a missing gradient
/// leaves the whole set untouched.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    let params: Vec<&mut Tensor> = params.into_iter().collect();
    if let Some(i) = params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::usage(format!("parameter {i} has no gradient")));
    }
    for p in params {
        let grad = p.grad.take().expect("checked above");
        p.data.iter_mut().zip(&grad).for_each(|(v, g)| *v -= lr * g);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_grad(value: f64, grad: f64) -> Tensor {
        let mut t = Tensor::scalar(value);
        t.accumulate_grad(&[grad]).unwrap();
        t
    }

    #[test]
    fn single_step() {
        let mut p = with_grad(1.0, 2.0);
        sgd_step([&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.8).abs() < 1e-15);
        assert!(p.grad().is_none());
    }

    #[test]
    fn zero_grad_keeps_value() {
        let mut p = with_grad(1.25, 0.0);
        sgd_step([&mut p], 0.3).unwrap();
        assert_eq!(p.data()[0], 1.25);
    }

    #[test]
    fn two_steps_equal_one_doubled() {
        let g = 0.75;
        let mut a = with_grad(3.0, g);
        sgd_step([&mut a], 0.125).unwrap();
        a.accumulate_grad(&[g]).unwrap();
        sgd_step([&mut a], 0.125).unwrap();

        let mut b = with_grad(3.0, g);
        sgd_step([&mut b], 0.25).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn missing_grad_is_usage_error() {
        let mut a = with_grad(1.0, 1.0);
        let mut b = Tensor::scalar(2.0);
        let err = sgd_step([&mut a, &mut b], 0.1).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(a.data()[0], 1.0);
    }
}
