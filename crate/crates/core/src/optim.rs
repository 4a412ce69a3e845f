//! Adam with a per-epoch cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::Tensor;

/// `lr₀ (1 + cos(πt/T)) / 2`, floored at 0.
pub fn cosine_lr(epoch: usize, total: usize, lr0: f64) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = epoch.min(total) as f64 / total as f64;
    (lr0 * (1.0 + (PI * t).cos()) / 2.0).max(0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One bias-corrected update of every parameter of `model`, with
    /// `grads` in the model's `visit` order.
    pub fn update(&mut self, model: &mut dyn Parameterized, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        let mut names = Vec::new();
        let mut shapes = Vec::new();
        model.visit(&mut |n, t| {
            names.push(n.to_string());
            shapes.push(t.shape().to_vec());
        });
        if grads.len() != names.len() {
            return Err(Error::Contract(format!(
                "optimizer got {} gradients for {} parameters",
                grads.len(),
                names.len()
            )));
        }
        for ((name, shape), g) in names.iter().zip(&shapes).zip(grads) {
            match g {
                None => return Err(Error::Contract(format!("missing gradient for parameter {name}"))),
                Some(g) if g.shape() != shape.as_slice() => {
                    return Err(Error::shape("optimizer gradient", g.shape(), shape));
                }
                Some(g) if !g.is_finite() => return Err(Error::NonFinite(format!("gradient of {name}"))),
                Some(_) => {}
            }
        }
        if self.m.is_empty() {
            self.m = shapes.iter().map(|s| Tensor::zeros(s)).collect();
            self.v = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        } else if self.m.len() != shapes.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        self.step += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut i = 0;
        model.visit_mut(&mut |_, p| {
            let g = grads[i].as_ref().expect("checked above");
            let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
            for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (1.0 - b1) * gj;
                *vj = b2 * *vj + (1.0 - b2) * gj * gj;
                let m_hat = *mj / c1;
                let v_hat = *vj / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor);

    impl Parameterized for One {
        fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
            f("w", &self.0);
        }

        fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
            f("w", &mut self.0);
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = One(Tensor::scalar(0.0));
        let mut opt = Adam::default();
        opt.update(&mut p, &[Some(Tensor::scalar(1.0))], 1e-3).unwrap();
        assert!((p.0.data()[0] + 1e-3).abs() < 1e-10);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = One(Tensor::new(&[3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = p.0.clone();
        let mut opt = Adam::default();
        for _ in 0..3 {
            opt.update(&mut p, &[Some(Tensor::zeros(&[3]))], 1e-3).unwrap();
        }
        assert_eq!(p.0, before);
        assert_eq!(opt.step, 3);
    }

    #[test]
    fn missing_gradient_names_the_parameter() {
        let mut p = One(Tensor::scalar(0.0));
        let err = Adam::default().update(&mut p, &[None], 1e-3).unwrap_err();
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 1e-3), 1e-3);
        assert!(cosine_lr(10, 10, 1e-3).abs() < 1e-18);
        assert!((cosine_lr(5, 10, 1e-3) - 5e-4).abs() < 1e-15);
        assert!(cosine_lr(12, 10, 1e-3) >= 0.0);
    }
}
