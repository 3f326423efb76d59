use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient `(f(p + h e_i) - f(p - h e_i)) / 2h`, in f64.
///
/// Used as the independent oracle for tape gradients.
pub fn finite_difference_grad<F>(mut f: F, params: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("step must be positive, got {h}")));
    }
    let base = params.data().to_vec();
    let mut grad = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let up = f(&Tensor::new(params.shape().to_vec(), probe.clone())?)?;
        probe[i] = base[i] - h;
        let down = f(&Tensor::new(params.shape().to_vec(), probe)?)?;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Numeric(format!("objective not finite at coordinate {i}")));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(params.shape().to_vec(), grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|p| Ok(p.data()[0] * p.data()[0]), &Tensor::vector(vec![3.0]), 1e-4).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn linear_gradient_is_step_independent() {
        let f = |p: &Tensor<f64>| Ok(2.0 * p.data()[0] - 0.5 * p.data()[1]);
        let x = Tensor::vector(vec![1.0, -4.0]);
        for h in [1e-1, 1e-3, 0.5] {
            let g = finite_difference_grad(f, &x, h).unwrap();
            assert!((g.data()[0] - 2.0).abs() < 1e-12);
            assert!((g.data()[1] + 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let err =
            finite_difference_grad(|p| Ok(1.0 / (p.data()[0] - 1e-4)), &Tensor::vector(vec![0.0]), 1e-4).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert!(finite_difference_grad(|_| Ok(0.0), &Tensor::vector(vec![0.0]), 0.0).is_err());
    }
}
