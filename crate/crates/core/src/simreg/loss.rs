//! The arctanh similarity loss and the differentiable similarity pipeline.
//!
//! The loss sums squared arctanh residuals over every masked ordered pair
//! (i, j), i != j; with symmetric inputs each unordered pair therefore
//! contributes twice. Network similarities are clamped into
//! `[-1 + eps, 1 - eps]` before arctanh so duplicate inputs (cosine exactly
//! 1) keep the loss finite; target values never receive gradient.

use rayon::prelude::*;

use crate::autodiff::ops::{SoftmaxOp, WeightedSumOp};
use crate::autodiff::{Tape, TapeOp, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::SimilarityTarget;

/// Odd-symmetric arctanh: guarantees `f(-x) == -f(x)` bit-exactly, so a
/// clamped similarity of -1 cancels a -1 target with zero residual.
fn atanh_odd(x: f64) -> f64 {
    if x < 0.0 {
        -(-x).atanh()
    } else {
        x.atanh()
    }
}

/// Tape op: pairwise centered-cosine similarity of row vectors.
/// Input (P,F), output (P,P) with unit diagonal.
pub struct RowCosineSimOp {
    pub label: String,
}

struct UnitRows {
    unit: Vec<f64>,
    inv_norm: Vec<f64>,
    p: usize,
    f: usize,
}

impl RowCosineSimOp {
    fn context(&self) -> String {
        format!("layer_similarity[{}]", self.label)
    }

    fn unit_rows(&self, x: &Tensor) -> Result<UnitRows> {
        if x.rank() != 2 {
            return Err(Error::shape(self.context(), format!("expected (P,F), got {:?}", x.shape())));
        }
        let (p, f) = (x.shape()[0], x.shape()[1]);
        if p < 2 {
            return Err(Error::invalid(self.context(), format!("need at least 2 vectors, got {p}")));
        }
        let mut unit = vec![0.0f64; p * f];
        let mut inv_norm = vec![0.0f64; p];
        for i in 0..p {
            let row = &x.data()[i * f..(i + 1) * f];
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / f as f64;
            let dst = &mut unit[i * f..(i + 1) * f];
            let mut norm_sq = 0.0f64;
            for (u, &v) in dst.iter_mut().zip(row) {
                *u = f64::from(v) - mean;
                norm_sq += *u * *u;
            }
            if norm_sq == 0.0 {
                return Err(Error::degenerate(
                    self.context(),
                    format!("vector {i} is constant after mean subtraction"),
                ));
            }
            inv_norm[i] = 1.0 / norm_sq.sqrt();
            for u in dst.iter_mut() {
                *u *= inv_norm[i];
            }
        }
        Ok(UnitRows { unit, inv_norm, p, f })
    }
}

impl TapeOp for RowCosineSimOp {
    fn name(&self) -> &'static str {
        "row_cosine_similarity"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let rows = self.unit_rows(inputs[0])?;
        let (p, f) = (rows.p, rows.f);
        let mut out = Tensor::zeros(vec![p, p]);
        let data = out.data_mut();
        for i in 0..p {
            data[i * p + i] = 1.0;
            let ui = &rows.unit[i * f..(i + 1) * f];
            for j in 0..i {
                let uj = &rows.unit[j * f..(j + 1) * f];
                let mut dot = 0.0f64;
                for (a, b) in ui.iter().zip(uj) {
                    dot += a * b;
                }
                let v = dot.clamp(-1.0, 1.0) as f32;
                data[i * p + j] = v;
                data[j * p + i] = v;
            }
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let rows = self.unit_rows(inputs[0])?;
        let (p, f) = (rows.p, rows.f);
        let g = grad_out.data();

        let mut grad = Tensor::zeros(vec![p, f]);
        // Each output row depends only on row i of the input; rows can be
        // filled independently and in parallel.
        grad.data_mut().par_chunks_mut(f).enumerate().for_each(|(i, grow)| {
            let ui = &rows.unit[i * f..(i + 1) * f];
            // dL/du_i = sum_{j != i} (G_ij + G_ji) * u_j    (diagonal is constant)
            let mut du = vec![0.0f64; f];
            for j in 0..p {
                if j == i {
                    continue;
                }
                let w = f64::from(g[i * p + j]) + f64::from(g[j * p + i]);
                if w == 0.0 {
                    continue;
                }
                let uj = &rows.unit[j * f..(j + 1) * f];
                for (d, &u) in du.iter_mut().zip(uj) {
                    *d += w * u;
                }
            }
            // through normalization: dv = (du - (du . u_i) u_i) / ||v_i||
            let dot: f64 = du.iter().zip(ui).map(|(a, b)| a * b).sum();
            let mut mean = 0.0f64;
            for (d, &u) in du.iter_mut().zip(ui) {
                *d = (*d - dot * u) * rows.inv_norm[i];
                mean += *d;
            }
            mean /= f as f64;
            // through centering: subtract the mean of the row gradient
            for (dst, &d) in grow.iter_mut().zip(du.iter()) {
                *dst = (d - mean) as f32;
            }
        });
        Ok(vec![Some(grad)])
    }
}

/// Tape op: masked arctanh similarity loss against a fixed target.
///
/// The target's values are captured at construction (as exact f64 arctanh
/// values), so gradient can only flow to the similarity matrix.
pub struct SimLossOp {
    pairs: Vec<(usize, usize)>,
    target_atanh: Vec<f64>,
    eps_clamp: f64,
    n: usize,
}

impl SimLossOp {
    pub fn from_target(target: &SimilarityTarget) -> Self {
        let pairs: Vec<(usize, usize)> = target.iter_masked_pairs().collect();
        let target_atanh = pairs.iter().map(|&(i, j)| target.atanh_value(i, j)).collect();
        SimLossOp { pairs, target_atanh, eps_clamp: target.eps_clamp(), n: target.n() }
    }

    fn check(&self, s: &Tensor) -> Result<()> {
        if s.rank() != 2 || s.shape()[0] != self.n || s.shape()[1] != self.n {
            return Err(Error::shape("sim_loss", format!("similarity matrix {:?} vs target over {} images", s.shape(), self.n)));
        }
        if s.data().iter().any(|v| v.is_nan()) {
            return Err(Error::non_finite("sim_loss", "NaN in similarity matrix (upstream bug, not clamped)"));
        }
        Ok(())
    }

    /// Loss over masked ordered pairs, in f64.
    fn loss_f64(&self, s: &Tensor) -> f64 {
        let lo = -1.0 + self.eps_clamp;
        let hi = 1.0 - self.eps_clamp;
        let data = s.data();
        let mut total = 0.0f64;
        for (&(i, j), &t) in self.pairs.iter().zip(&self.target_atanh) {
            for &sij in &[data[i * self.n + j], data[j * self.n + i]] {
                let c = f64::from(sij).clamp(lo, hi);
                let r = atanh_odd(c) - t;
                total += r * r;
            }
        }
        total
    }
}

impl TapeOp for SimLossOp {
    fn name(&self) -> &'static str {
        "sim_loss"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        self.check(inputs[0])?;
        Ok(Tensor::scalar(self.loss_f64(inputs[0]) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let s = inputs[0];
        self.check(s)?;
        let lo = -1.0 + self.eps_clamp;
        let hi = 1.0 - self.eps_clamp;
        let upstream = f64::from(grad_out.item());
        let data = s.data();
        let mut grad = Tensor::zeros(vec![self.n, self.n]);
        let gd = grad.data_mut();
        for (&(i, j), &t) in self.pairs.iter().zip(&self.target_atanh) {
            for &(a, b) in &[(i, j), (j, i)] {
                let raw = f64::from(data[a * self.n + b]);
                // Outside the clamp range the loss is locally constant.
                if raw < lo || raw > hi {
                    continue;
                }
                let r = atanh_odd(raw) - t;
                gd[a * self.n + b] += (upstream * 2.0 * r / (1.0 - raw * raw)) as f32;
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Plain similarity loss (f64) for analysis and tests.
pub fn sim_loss(s_cnn: &Tensor, target: &SimilarityTarget) -> Result<f64> {
    let op = SimLossOp::from_target(target);
    op.check(s_cnn)?;
    Ok(op.loss_f64(s_cnn))
}

/// Record the similarity loss of `s_cnn` against `target` on the tape.
pub fn sim_loss_op(tape: &mut Tape, s_cnn: Var, target: &SimilarityTarget) -> Result<Var> {
    tape.apply(Box::new(SimLossOp::from_target(target)), &[s_cnn])
}

/// Record the centered-cosine similarity of feature rows on the tape.
pub fn layer_similarity_op(tape: &mut Tape, features: Var, label: &str) -> Result<Var> {
    tape.apply(Box::new(RowCosineSimOp { label: label.to_string() }), &[features])
}

/// Record the gamma-weighted mixture of per-layer similarity matrices:
/// softmax over the mixer logits, then the convex combination. Gradient
/// flows to both the logits and every matrix.
pub fn mix_layers_op(tape: &mut Tape, per_layer: &[Var], logits: Var) -> Result<Var> {
    if per_layer.is_empty() {
        return Err(Error::invalid("mix_layers", "no matrices"));
    }
    if tape.value(logits).len() != per_layer.len() {
        return Err(Error::shape(
            "mix_layers",
            format!("{} matrices for K={}", per_layer.len(), tape.value(logits).len()),
        ));
    }
    let weights = tape.apply(Box::new(SoftmaxOp), &[logits])?;
    let mut inputs = vec![weights];
    inputs.extend_from_slice(per_layer);
    tape.apply(Box::new(WeightedSumOp), &inputs)
}

/// Convenience: mixer-weighted similarity loss for a stack of tap features,
/// end to end on the tape. Returns the loss Var and the per-layer
/// similarity Vars.
pub fn similarity_pipeline(
    tape: &mut Tape,
    tap_features: &[Var],
    logits: Var,
    target: &SimilarityTarget,
) -> Result<(Var, Vec<Var>)> {
    use crate::autodiff::ops::ReshapeOp;
    let mut sims = Vec::with_capacity(tap_features.len());
    for (l, &feat) in tap_features.iter().enumerate() {
        let shape = tape.value(feat).shape().to_vec();
        let p = shape[0];
        let f: usize = shape[1..].iter().product();
        let flat = tape.apply(Box::new(ReshapeOp { shape: vec![p, f] }), &[feat])?;
        sims.push(layer_similarity_op(tape, flat, &format!("tap{l}"))?);
    }
    let mixed = mix_layers_op(tape, &sims, logits)?;
    let loss = sim_loss_op(tape, mixed, target)?;
    Ok((loss, sims))
}
