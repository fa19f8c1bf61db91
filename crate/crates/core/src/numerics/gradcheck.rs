//! Central finite differences, used as the independent oracle for the
//! reverse-mode gradients.

use alloc::vec::Vec;

use super::{Scalar, Tensor};
use crate::error::{bail, Result};

/// `(f(x + εeᵢ) − f(x − εeᵢ)) / 2ε` for every coordinate of `x`.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, step: T) -> Result<Tensor<T>>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(step > T::zero()) {
        bail!(Usage, "finite-difference step must be positive");
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        out.push((hi - lo) / (step + step));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Magnitude below which entries are compared absolutely rather than
/// relatively. Central differences at step 1e-6 carry ~1e-10 round-off.
pub const RELATIVE_FLOOR: f64 = 1e-4;

/// `|a − b| / max(|a|, |b|, RELATIVE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Largest [`relative_error`] over paired entries.
pub fn max_relative_error<T: Scalar>(analytic: &[T], numeric: &[T]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(a.to_f64_lossy(), n.to_f64_lossy()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let x = Tensor::new(alloc::vec![1], alloc::vec![3.0f64]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data()[0] * t.data()[0]), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let x = Tensor::<f64>::full(&[4], 1.5);
        let g = finite_difference_gradient(|_| Ok(2.0), &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_step() {
        let x = Tensor::<f64>::full(&[1], 1.0);
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
    }
}
