//! Central finite differences, used as the independent oracle for every
//! analytic gradient in the crate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_difference_gradient<F>(mut f: F, at: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let mut out = Tensor::zeros(at.shape());
    let mut x = at.clone();
    for i in 0..at.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let up = f(&x)?;
        x.data_mut()[i] = orig - h;
        let down = f(&x)?;
        x.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// `max |a − b| / max(max |b|, floor)`.
pub fn relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()));
    diff / b.max_abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn squared_norm_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 0.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.sum_sq()), &x, 1e-6).unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!(g.data()[1].abs() < 1e-8);
    }

    #[test]
    fn constant_and_sum() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 7.0]).unwrap();
        let g = finite_difference_gradient(|_| Ok(4.2), &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
        let g = finite_difference_gradient(|t| Ok(t.sum()), &x, 1e-6).unwrap();
        assert!(g.data().iter().all(|&v| (v - 1.0).abs() < 1e-8));
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::zeros(&[1]);
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &x, 0.0).is_err());
    }
}
