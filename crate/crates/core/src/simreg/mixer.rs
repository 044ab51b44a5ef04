//! Trainable softmax weights that mix per-layer similarity matrices.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// K trainable logits; the mixing weights are their softmax, so the weights
/// lie on the simplex by construction.
#[derive(Clone, Debug)]
pub struct GammaMixer {
    logits: Tensor,
}

impl GammaMixer {
    /// Uniform mixer: all logits zero.
    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("GammaMixer", "need at least one layer"));
        }
        Ok(GammaMixer { logits: Tensor::zeros(vec![k]) })
    }

    pub fn from_logits(logits: Tensor) -> Result<Self> {
        if logits.rank() != 1 || logits.is_empty() {
            return Err(Error::shape("GammaMixer", format!("logits must be rank-1 non-empty, got {:?}", logits.shape())));
        }
        logits.check_finite("GammaMixer logits")?;
        Ok(GammaMixer { logits })
    }

    pub fn k(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Tensor) -> Result<()> {
        if logits.shape() != self.logits.shape() {
            return Err(Error::shape("GammaMixer::set_logits", format!("{:?} vs {:?}", logits.shape(), self.logits.shape())));
        }
        self.logits = logits;
        Ok(())
    }

    /// Softmax of the logits.
    pub fn weights(&self) -> Vec<f32> {
        let max = self.logits.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = self.logits.data().iter().map(|&x| f64::from(x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.iter().map(|&e| (e / sum) as f32).collect()
    }
}

/// Elementwise convex combination of K same-shape matrices with the mixer's
/// softmax weights.
pub fn mix_layers(per_layer: &[Tensor], mixer: &GammaMixer) -> Result<Tensor> {
    if per_layer.len() != mixer.k() {
        return Err(Error::shape("mix_layers", format!("{} matrices for K={}", per_layer.len(), mixer.k())));
    }
    let shape = per_layer[0].shape().to_vec();
    let mut out = Tensor::zeros(shape);
    for (m, &w) in per_layer.iter().zip(mixer.weights().iter()) {
        out.axpy(w, m)?;
    }
    Ok(out)
}
