//! Built-in tape operations for the CNN forward pass and losses.

use crate::error::{Error, Result};
use crate::nn::kernels::{
    avg_pool_backward, avg_pool_forward, conv2d_backward, conv2d_forward, linear_backward,
    linear_forward, ConvDims,
};
use crate::tensor::Tensor;

use super::TapeOp;

/// Sum of all elements.
pub struct SumOp;

impl TapeOp for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let mut acc = 0.0f64;
        for &x in inputs[0].data() {
            acc += f64::from(x);
        }
        Ok(Tensor::scalar(acc as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = grad_out.item();
        Ok(vec![Some(Tensor::filled(inputs[0].shape().to_vec(), g))])
    }
}

/// Elementwise sum of two same-shape tensors.
pub struct AddOp;

impl TapeOp for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        if a.shape() != b.shape() {
            return Err(Error::shape("add", format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = |need: bool| if need { Some(grad_out.clone()) } else { None };
        Ok(vec![g(needs[0]), g(needs[1])])
    }
}

/// Multiplication by a fixed scalar.
pub struct ScaleOp {
    pub factor: f32,
}

impl TapeOp for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| x * self.factor))
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad_out.map(|g| g * self.factor))])
    }
}

/// Rectified linear unit.
pub struct ReluOp;

impl TapeOp for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|x| x.max(0.0)))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad_out.data())
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect();
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), data)?)])
    }
}

/// Copy of the input under a new shape.
pub struct ReshapeOp {
    pub shape: Vec<usize>,
}

impl TapeOp for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].reshape(self.shape.clone())
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(grad_out.reshape(inputs[0].shape().to_vec())?)])
    }
}

/// 2-d convolution. Inputs: `[input (B,C,H,W), weight (O,C,kh,kw), bias (O)]`.
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
    /// Layer label used in diagnostics.
    pub label: String,
}

impl Conv2dOp {
    fn dims(&self, input: &Tensor, weight: &Tensor) -> Result<ConvDims> {
        if input.rank() != 4 {
            return Err(Error::shape(&self.label, format!("conv2d input must be (B,C,H,W), got {:?}", input.shape())));
        }
        if weight.rank() != 4 {
            return Err(Error::shape(&self.label, format!("conv2d weight must be (O,C,kh,kw), got {:?}", weight.shape())));
        }
        let (b, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (o, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if c != wc {
            return Err(Error::shape(&self.label, format!("expected {wc} input channels, got {c}")));
        }
        let dims = ConvDims { batch: b, in_ch: c, h, w, out_ch: o, kh, kw, stride: self.stride, padding: self.padding };
        if h + 2 * self.padding < kh || w + 2 * self.padding < kw {
            return Err(Error::shape(&self.label, format!("kernel {kh}x{kw} larger than padded input {h}x{w}")));
        }
        Ok(dims)
    }
}

impl TapeOp for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (input, weight, bias) = (inputs[0], inputs[1], inputs[2]);
        let dims = self.dims(input, weight)?;
        if bias.len() != dims.out_ch {
            return Err(Error::shape(&self.label, format!("bias length {} vs {} output channels", bias.len(), dims.out_ch)));
        }
        let mut out = Tensor::zeros(vec![dims.batch, dims.out_ch, dims.out_h(), dims.out_w()]);
        conv2d_forward(&dims, input.data(), weight.data(), bias.data(), out.data_mut());
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (input, weight) = (inputs[0], inputs[1]);
        let dims = self.dims(input, weight)?;
        let mut gi = needs[0].then(|| Tensor::zeros(input.shape().to_vec()));
        let mut gw = needs[1].then(|| Tensor::zeros(weight.shape().to_vec()));
        let mut gb = needs[2].then(|| Tensor::zeros(vec![dims.out_ch]));
        conv2d_backward(
            &dims,
            input.data(),
            weight.data(),
            grad_out.data(),
            gi.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
            gb.as_mut().map(|t| t.data_mut()),
        );
        Ok(vec![gi, gw, gb])
    }
}

/// Non-overlapping average pooling over (B,C,H,W).
pub struct AvgPoolOp {
    pub size: usize,
    pub label: String,
}

impl TapeOp for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if x.rank() != 4 {
            return Err(Error::shape(&self.label, format!("avg_pool input must be (B,C,H,W), got {:?}", x.shape())));
        }
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        if h % self.size != 0 || w % self.size != 0 {
            return Err(Error::shape(&self.label, format!("{h}x{w} not divisible by pool size {}", self.size)));
        }
        let mut out = Tensor::zeros(vec![b, c, h / self.size, w / self.size]);
        avg_pool_forward(b, c, h, w, self.size, x.data(), out.data_mut());
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let mut gi = Tensor::zeros(x.shape().to_vec());
        avg_pool_backward(b, c, h, w, self.size, grad_out.data(), gi.data_mut());
        Ok(vec![Some(gi)])
    }
}

/// Fully connected layer. Inputs: `[input (B,F), weight (O,F), bias (O)]`.
pub struct LinearOp {
    pub label: String,
}

impl TapeOp for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        if x.rank() != 2 || w.rank() != 2 {
            return Err(Error::shape(&self.label, format!("linear expects (B,F) x (O,F), got {:?} x {:?}", x.shape(), w.shape())));
        }
        let (batch, in_f) = (x.shape()[0], x.shape()[1]);
        let (out_f, wf) = (w.shape()[0], w.shape()[1]);
        if in_f != wf {
            return Err(Error::shape(&self.label, format!("expected {wf} input features, got {in_f}")));
        }
        if b.len() != out_f {
            return Err(Error::shape(&self.label, format!("bias length {} vs {out_f} outputs", b.len())));
        }
        let mut out = Tensor::zeros(vec![batch, out_f]);
        linear_forward(batch, in_f, out_f, x.data(), w.data(), b.data(), out.data_mut());
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (batch, in_f) = (x.shape()[0], x.shape()[1]);
        let out_f = w.shape()[0];
        let mut gi = needs[0].then(|| Tensor::zeros(x.shape().to_vec()));
        let mut gw = needs[1].then(|| Tensor::zeros(w.shape().to_vec()));
        let mut gb = needs[2].then(|| Tensor::zeros(vec![out_f]));
        linear_backward(
            batch,
            in_f,
            out_f,
            x.data(),
            w.data(),
            grad_out.data(),
            gi.as_mut().map(|t| t.data_mut()),
            gw.as_mut().map(|t| t.data_mut()),
            gb.as_mut().map(|t| t.data_mut()),
        );
        Ok(vec![gi, gw, gb])
    }
}

/// Mean softmax cross-entropy over a batch of logits (B,K).
pub struct SoftmaxCrossEntropyOp {
    pub labels: Vec<usize>,
}

impl SoftmaxCrossEntropyOp {
    fn check(&self, logits: &Tensor) -> Result<(usize, usize)> {
        if logits.rank() != 2 {
            return Err(Error::shape("softmax_cross_entropy", format!("logits must be (B,K), got {:?}", logits.shape())));
        }
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        if self.labels.len() != b {
            return Err(Error::shape("softmax_cross_entropy", format!("{} labels for batch of {b}", self.labels.len())));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= k) {
            return Err(Error::invalid("softmax_cross_entropy", format!("label {bad} out of range for {k} classes")));
        }
        Ok((b, k))
    }
}

impl TapeOp for SoftmaxCrossEntropyOp {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let logits = inputs[0];
        let (b, k) = self.check(logits)?;
        let mut total = 0.0f64;
        for (row, &y) in logits.data().chunks(k).zip(&self.labels) {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut lse = 0.0f64;
            for &z in row {
                lse += f64::from(z - max).exp();
            }
            total += lse.ln() + f64::from(max) - f64::from(row[y]);
        }
        Ok(Tensor::scalar((total / b as f64) as f32))
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let logits = inputs[0];
        let (b, k) = self.check(logits)?;
        let scale = f64::from(grad_out.item()) / b as f64;
        let mut grad = Tensor::zeros(logits.shape().to_vec());
        for (bi, (row, &y)) in logits.data().chunks(k).zip(&self.labels).enumerate() {
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut lse = 0.0f64;
            for &z in row {
                lse += f64::from(z - max).exp();
            }
            for (j, &z) in row.iter().enumerate() {
                let p = f64::from(z - max).exp() / lse;
                let onehot = if j == y { 1.0 } else { 0.0 };
                grad.data_mut()[bi * k + j] = ((p - onehot) * scale) as f32;
            }
        }
        Ok(vec![Some(grad)])
    }
}

/// Softmax over a rank-1 tensor.
pub struct SoftmaxOp;

impl TapeOp for SoftmaxOp {
    fn name(&self) -> &'static str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        if z.rank() != 1 {
            return Err(Error::shape("softmax", format!("expected rank-1 logits, got {:?}", z.shape())));
        }
        let max = z.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let exps: Vec<f64> = z.data().iter().map(|&x| f64::from(x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let data = exps.iter().map(|&e| (e / sum) as f32).collect();
        Tensor::new(z.shape().to_vec(), data)
    }

    fn backward(&self, _inputs: &[&Tensor], output: &Tensor, grad_out: &Tensor, _needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        // dL/dz_i = w_i * (g_i - Σ_j g_j w_j)
        let w = output.data();
        let g = grad_out.data();
        let dot: f64 = w.iter().zip(g).map(|(&wi, &gi)| f64::from(wi) * f64::from(gi)).sum();
        let data = w
            .iter()
            .zip(g)
            .map(|(&wi, &gi)| (f64::from(wi) * (f64::from(gi) - dot)) as f32)
            .collect();
        Ok(vec![Some(Tensor::new(output.shape().to_vec(), data)?)])
    }
}

/// Linear combination `Σ_l weights[l] · mats[l]` of K same-shape tensors with
/// a rank-1 weight vector. Inputs: `[weights, mat_0, ..., mat_{K-1}]`.
pub struct WeightedSumOp;

impl TapeOp for WeightedSumOp {
    fn name(&self) -> &'static str {
        "weighted_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let weights = inputs[0];
        let mats = &inputs[1..];
        if weights.rank() != 1 || weights.len() != mats.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} matrices", weights.len(), mats.len()),
            ));
        }
        if mats.is_empty() {
            return Err(Error::invalid("weighted_sum", "no matrices given"));
        }
        let shape = mats[0].shape().to_vec();
        for m in mats {
            if m.shape() != shape.as_slice() {
                return Err(Error::shape("weighted_sum", format!("{:?} vs {:?}", m.shape(), shape)));
            }
        }
        let mut out = Tensor::zeros(shape);
        for (l, m) in mats.iter().enumerate() {
            out.axpy(weights.data()[l], m)?;
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let weights = inputs[0];
        let mats = &inputs[1..];
        let mut out: Vec<Option<Tensor>> = Vec::with_capacity(inputs.len());
        if needs[0] {
            let mut gw = Tensor::zeros(vec![weights.len()]);
            for (l, m) in mats.iter().enumerate() {
                let mut acc = 0.0f64;
                for (&g, &v) in grad_out.data().iter().zip(m.data()) {
                    acc += f64::from(g) * f64::from(v);
                }
                gw.data_mut()[l] = acc as f32;
            }
            out.push(Some(gw));
        } else {
            out.push(None);
        }
        for (l, need) in needs[1..].iter().enumerate() {
            if *need {
                out.push(Some(grad_out.map(|g| g * weights.data()[l])));
            } else {
                out.push(None);
            }
        }
        Ok(out)
    }
}
