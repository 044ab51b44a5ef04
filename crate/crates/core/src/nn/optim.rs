//! SGD with classical momentum.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Stateful optimizer: `v <- momentum*v + g; p <- p - lr*v`, elementwise.
pub struct SgdMomentum {
    lr: f32,
    momentum: f32,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f32, momentum: f32) -> Result<Self> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::invalid("SgdMomentum", format!("lr must be non-negative, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid("SgdMomentum", format!("momentum must be in [0,1), got {momentum}")));
        }
        Ok(SgdMomentum { lr, momentum, velocity: Vec::new() })
    }

    pub fn lr(&self) -> f32 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f32) {
        self.lr = lr;
    }

    /// One update step. Validates every gradient before touching any
    /// parameter: a non-finite gradient aborts the whole step.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("sgd_step", format!("{} params vs {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                let name = names.get(i).map(String::as_str).unwrap_or("?");
                return Err(Error::shape("sgd_step", format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if let Err(e) = g.check_finite("sgd_step") {
                let name = names.get(i).map(String::as_str).unwrap_or("?");
                return Err(Error::non_finite("sgd_step", format!("gradient of {name}: {e}")));
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn zero_lr_keeps_params() {
        let mut opt = SgdMomentum::new(0.0, 0.5).unwrap();
        let mut p = one(3.25);
        opt.step(&mut p, &one(7.0), &["p".into()]).unwrap();
        assert_eq!(p[0].item(), 3.25);
    }

    #[test]
    fn plain_sgd_arithmetic() {
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        let mut p = one(1.0);
        opt.step(&mut p, &one(1.0), &["p".into()]).unwrap();
        assert!((p[0].item() - 0.9).abs() < 1e-7);
    }

    #[test]
    fn momentum_two_step_recurrence() {
        // v1 = 1, p1 = -0.1; v2 = 0.9 + 1 = 1.9, p2 = -0.1 - 0.19 = -0.29
        let mut opt = SgdMomentum::new(0.1, 0.9).unwrap();
        let mut p = one(0.0);
        opt.step(&mut p, &one(1.0), &["p".into()]).unwrap();
        opt.step(&mut p, &one(1.0), &["p".into()]).unwrap();
        assert!((p[0].item() - (-0.29)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_whole_step() {
        let mut opt = SgdMomentum::new(0.1, 0.0).unwrap();
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let g = vec![Tensor::scalar(1.0), Tensor::scalar(f32::NAN)];
        let err = opt.step(&mut p, &g, &["a".into(), "b".into()]).unwrap_err();
        assert!(err.to_string().contains('b'));
        assert_eq!(p[0].item(), 1.0);
        assert_eq!(p[1].item(), 2.0);
    }

    #[test]
    fn invalid_hyperparameters_rejected() {
        assert!(SgdMomentum::new(-0.1, 0.0).is_err());
        assert!(SgdMomentum::new(0.1, 1.0).is_err());
        assert!(SgdMomentum::new(0.1, -0.1).is_err());
    }
}
