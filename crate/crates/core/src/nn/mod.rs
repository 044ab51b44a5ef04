//! The tap-layer CNN: a small convolutional classifier that exposes
//! post-activation feature maps at designated layers.

pub mod init;
pub mod kernels;
pub mod optim;
pub mod serialize;

use crate::autodiff::ops::{AddOp, AvgPoolOp, Conv2dOp, LinearOp, ReluOp, ReshapeOp};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One layer of a [`TapNet`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    /// 2-d convolution; `skip` adds the layer input to the output
    /// (identity shortcut, requires matching shapes).
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize, skip: bool },
    Relu,
    AvgPool { size: usize },
    Flatten,
    Linear { in_features: usize, out_features: usize },
}

impl LayerSpec {
    fn param_count(&self) -> usize {
        match self {
            LayerSpec::Conv2d { .. } | LayerSpec::Linear { .. } => 2,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeState {
    Spatial(usize, usize, usize),
    Flat(usize),
}

/// A small CNN whose forward pass exposes feature maps at K tap layers
/// in addition to the class logits.
#[derive(Clone, Debug)]
pub struct TapNet {
    layers: Vec<LayerSpec>,
    taps: Vec<usize>,
    input_shape: [usize; 3],
    num_classes: usize,
    params: Vec<Tensor>,
    arch_id: String,
}

impl TapNet {
    /// Assemble a network from explicit parts, validating every invariant.
    pub fn from_parts(
        layers: Vec<LayerSpec>,
        taps: Vec<usize>,
        input_shape: [usize; 3],
        num_classes: usize,
        params: Vec<Tensor>,
        arch_id: String,
    ) -> Result<Self> {
        if taps.is_empty() {
            return Err(Error::invalid("TapNet", "taps must be non-empty"));
        }
        if !taps.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("TapNet", format!("taps must be strictly increasing, got {taps:?}")));
        }
        if *taps.last().unwrap() >= layers.len() {
            return Err(Error::invalid(
                "TapNet",
                format!("tap index {} out of range for {} layers", taps.last().unwrap(), layers.len()),
            ));
        }
        let expected_params: usize = layers.iter().map(LayerSpec::param_count).sum();
        if params.len() != expected_params {
            return Err(Error::shape("TapNet", format!("{} parameter tensors given, layers need {expected_params}", params.len())));
        }

        let net = TapNet { layers, taps, input_shape, num_classes, params, arch_id };
        let shapes = net.infer_shapes()?;
        match shapes.last() {
            Some(ShapeState::Flat(f)) if *f == num_classes => {}
            other => {
                return Err(Error::shape(
                    "TapNet",
                    format!("final layer must produce {num_classes} logits, got {other:?}"),
                ));
            }
        }
        net.check_param_shapes()?;
        Ok(net)
    }

    /// Walk the layer list and determine each layer's output shape.
    fn infer_shapes(&self) -> Result<Vec<ShapeState>> {
        let [c, h, w] = self.input_shape;
        let mut state = ShapeState::Spatial(c, h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let label = format!("layer {i} ({})", layer_kind(layer));
            state = match (layer, state) {
                (LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, skip }, ShapeState::Spatial(c, h, w)) => {
                    if c != *in_ch {
                        return Err(Error::shape(label, format!("expected {in_ch} input channels, got {c}")));
                    }
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::shape(label, format!("kernel {kernel} larger than padded {h}x{w}")));
                    }
                    let ho = kernels::conv_out_dim(h, *kernel, *stride, *padding);
                    let wo = kernels::conv_out_dim(w, *kernel, *stride, *padding);
                    if *skip && (c != *out_ch || ho != h || wo != w) {
                        return Err(Error::shape(label, "identity skip needs matching input/output shapes".to_string()));
                    }
                    ShapeState::Spatial(*out_ch, ho, wo)
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::AvgPool { size }, ShapeState::Spatial(c, h, w)) => {
                    if h % size != 0 || w % size != 0 {
                        return Err(Error::shape(label, format!("{h}x{w} not divisible by pool size {size}")));
                    }
                    ShapeState::Spatial(c, h / size, w / size)
                }
                (LayerSpec::Flatten, ShapeState::Spatial(c, h, w)) => ShapeState::Flat(c * h * w),
                (LayerSpec::Linear { in_features, out_features }, ShapeState::Flat(f)) => {
                    if f != *in_features {
                        return Err(Error::shape(label, format!("expected {in_features} features, got {f}")));
                    }
                    ShapeState::Flat(*out_features)
                }
                (layer, state) => {
                    return Err(Error::shape(label, format!("{layer:?} cannot follow {state:?}")));
                }
            };
            out.push(state);
        }
        Ok(out)
    }

    fn check_param_shapes(&self) -> Result<()> {
        let mut idx = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                    let expect_w = vec![*out_ch, *in_ch, *kernel, *kernel];
                    if self.params[idx].shape() != expect_w.as_slice() {
                        return Err(Error::shape(format!("layer {i} weight"), format!("{:?} vs {:?}", self.params[idx].shape(), expect_w)));
                    }
                    if self.params[idx + 1].shape() != [*out_ch] {
                        return Err(Error::shape(format!("layer {i} bias"), format!("{:?} vs [{out_ch}]", self.params[idx + 1].shape())));
                    }
                    idx += 2;
                }
                LayerSpec::Linear { in_features, out_features } => {
                    let expect_w = vec![*out_features, *in_features];
                    if self.params[idx].shape() != expect_w.as_slice() {
                        return Err(Error::shape(format!("layer {i} weight"), format!("{:?} vs {:?}", self.params[idx].shape(), expect_w)));
                    }
                    if self.params[idx + 1].shape() != [*out_features] {
                        return Err(Error::shape(format!("layer {i} bias"), format!("{:?} vs [{out_features}]", self.params[idx + 1].shape())));
                    }
                    idx += 2;
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn num_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn arch_id(&self) -> &str {
        &self.arch_id
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    /// Diagnostic names for each parameter tensor, aligned with `params()`.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv2d { .. } => {
                    names.push(format!("layer{i}.conv.weight"));
                    names.push(format!("layer{i}.conv.bias"));
                }
                LayerSpec::Linear { .. } => {
                    names.push(format!("layer{i}.linear.weight"));
                    names.push(format!("layer{i}.linear.bias"));
                }
                _ => {}
            }
        }
        names
    }

    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let [c, h, w] = self.input_shape;
        if batch.rank() != 4 || batch.shape()[1..] != [c, h, w] {
            return Err(Error::shape(
                "TapNet::forward",
                format!("input {:?} does not match (B,{c},{h},{w})", batch.shape()),
            ));
        }
        batch.check_range(0.0, 1.0, "TapNet::forward input")?;
        Ok(batch.shape()[0])
    }

    /// Record the forward pass of `input` on `tape`, with parameters already
    /// registered as `param_vars` (in `params()` order). Returns the logits
    /// and one feature Var per tap layer.
    pub fn forward_on_tape(&self, tape: &mut Tape, param_vars: &[Var], input: Var) -> Result<(Var, Vec<Var>)> {
        if param_vars.len() != self.params.len() {
            return Err(Error::invalid("TapNet::forward_on_tape", format!("{} param vars for {} params", param_vars.len(), self.params.len())));
        }
        let mut cur = input;
        let mut taps = Vec::with_capacity(self.taps.len());
        let mut pi = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let label = format!("layer {i} ({})", layer_kind(layer));
            cur = match layer {
                LayerSpec::Conv2d { stride, padding, skip, .. } => {
                    let conv = tape.apply(
                        Box::new(Conv2dOp { stride: *stride, padding: *padding, label }),
                        &[cur, param_vars[pi], param_vars[pi + 1]],
                    )?;
                    pi += 2;
                    if *skip {
                        tape.apply(Box::new(AddOp), &[conv, cur])?
                    } else {
                        conv
                    }
                }
                LayerSpec::Relu => tape.apply(Box::new(ReluOp), &[cur])?,
                LayerSpec::AvgPool { size } => tape.apply(Box::new(AvgPoolOp { size: *size, label }), &[cur])?,
                LayerSpec::Flatten => {
                    let s = tape.value(cur).shape();
                    let flat = s[1] * s[2] * s[3];
                    let b = s[0];
                    tape.apply(Box::new(ReshapeOp { shape: vec![b, flat] }), &[cur])?
                }
                LayerSpec::Linear { .. } => {
                    let lin = tape.apply(Box::new(LinearOp { label }), &[cur, param_vars[pi], param_vars[pi + 1]])?;
                    pi += 2;
                    lin
                }
            };
            if self.taps.contains(&i) {
                taps.push(cur);
            }
        }
        Ok((cur, taps))
    }

    /// Register the current parameters on a tape as differentiable leaves.
    pub fn register_params(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    /// Tape-free forward pass. Returns logits `(B, num_classes)` and the K
    /// post-activation tap features.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let param_vars: Vec<Var> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        let (logits, taps) = self.forward_on_tape(&mut tape, &param_vars, input)?;
        let logits_t = tape.value(logits).clone();
        let taps_t = taps.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((logits_t, taps_t))
    }

    /// Logits only; avoids cloning tap features when they are not needed.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }

    /// Argmax class per batch row (ties resolve to the lowest index).
    pub fn predict(&self, batch: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(batch)?;
        let k = self.num_classes;
        Ok(logits
            .data()
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn layer_kind(layer: &LayerSpec) -> &'static str {
    match layer {
        LayerSpec::Conv2d { .. } => "conv2d",
        LayerSpec::Relu => "relu",
        LayerSpec::AvgPool { .. } => "avg_pool",
        LayerSpec::Flatten => "flatten",
        LayerSpec::Linear { .. } => "linear",
    }
}

/// Layer list and tap indices for a named architecture.
///
/// `desk`: four 3x3 convolutions (16/32/32/64 channels) with 2x2 average
/// pooling after the second and fourth, taps on all four activations.
/// `tiny`: two 3x3 convolutions (8/16), one pool, taps on both activations.
pub fn arch_layers(arch_id: &str, input_shape: [usize; 3], num_classes: usize) -> Result<(Vec<LayerSpec>, Vec<usize>)> {
    let [c, h, w] = input_shape;
    let conv = |in_ch, out_ch| LayerSpec::Conv2d { in_ch, out_ch, kernel: 3, stride: 1, padding: 1, skip: false };
    match arch_id {
        "desk" => {
            if h % 4 != 0 || w % 4 != 0 {
                return Err(Error::invalid("arch desk", format!("input {h}x{w} must be divisible by 4")));
            }
            let layers = vec![
                conv(c, 16),
                LayerSpec::Relu,
                conv(16, 32),
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                conv(32, 32),
                LayerSpec::Relu,
                conv(32, 64),
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: 64 * (h / 4) * (w / 4), out_features: num_classes },
            ];
            Ok((layers, vec![1, 3, 6, 8]))
        }
        "tiny" => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::invalid("arch tiny", format!("input {h}x{w} must be divisible by 2")));
            }
            let layers = vec![
                conv(c, 8),
                LayerSpec::Relu,
                conv(8, 16),
                LayerSpec::Relu,
                LayerSpec::AvgPool { size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Linear { in_features: 16 * (h / 2) * (w / 2), out_features: num_classes },
            ];
            Ok((layers, vec![1, 3]))
        }
        other => Err(Error::invalid("arch", format!("unknown architecture id '{other}'"))),
    }
}

/// Build a named architecture with seeded initialization.
pub fn build_net(arch_id: &str, input_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<TapNet> {
    let (layers, taps) = arch_layers(arch_id, input_shape, num_classes)?;
    let params = init::init_params(&layers, seed);
    TapNet::from_parts(layers, taps, input_shape, num_classes, params, arch_id.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_conv_net(weight: Vec<f32>, bias: Vec<f32>) -> TapNet {
        // 1x1 conv (identity capable), then flatten+linear to 4 classes with
        // identity-ish weights so logits echo the conv output.
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0, skip: false },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 4 },
        ];
        let mut lin_w = vec![0.0f32; 16];
        for i in 0..4 {
            lin_w[i * 4 + i] = 1.0;
        }
        let params = vec![
            Tensor::new(vec![1, 1, 1, 1], weight).unwrap(),
            Tensor::new(vec![1], bias).unwrap(),
            Tensor::new(vec![4, 4], lin_w).unwrap(),
            Tensor::new(vec![4], vec![0.0; 4]).unwrap(),
        ];
        TapNet::from_parts(layers, vec![0], [1, 2, 2], 4, params, "test".into()).unwrap()
    }

    #[test]
    fn identity_kernel_echoes_input() {
        let net = one_conv_net(vec![1.0], vec![0.0]);
        let input = Tensor::new(vec![1, 1, 2, 2], vec![0.1, 0.4, 0.7, 1.0]).unwrap();
        let (logits, taps) = net.forward(&input).unwrap();
        assert_eq!(logits.data(), input.data());
        assert_eq!(taps.len(), 1);
        assert_eq!(taps[0].data(), input.data());
    }

    #[test]
    fn zero_weights_zero_logits() {
        let net = build_net("tiny", [1, 8, 8], 10, 3).unwrap();
        let mut net = net;
        for p in net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let input = Tensor::from_fn(vec![2, 1, 8, 8], |i| ((i * 13) % 7) as f32 / 7.0);
        let (logits, _) = net.forward(&input).unwrap();
        assert!(logits.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forward_rejects_wrong_shape() {
        let net = build_net("tiny", [1, 8, 8], 10, 3).unwrap();
        let bad = Tensor::zeros(vec![2, 1, 6, 6]);
        let err = net.forward(&bad).unwrap_err();
        assert!(err.to_string().contains("does not match"));
    }

    #[test]
    fn forward_rejects_out_of_range_pixels() {
        let net = build_net("tiny", [1, 8, 8], 10, 3).unwrap();
        let mut bad = Tensor::zeros(vec![1, 1, 8, 8]);
        bad.data_mut()[5] = 1.5;
        assert!(net.forward(&bad).is_err());
    }

    #[test]
    fn desk_arch_shapes() {
        let net = build_net("desk", [1, 28, 28], 10, 0).unwrap();
        assert_eq!(net.num_taps(), 4);
        let input = Tensor::zeros(vec![3, 1, 28, 28]);
        let (logits, taps) = net.forward(&input).unwrap();
        assert_eq!(logits.shape(), &[3, 10]);
        assert_eq!(taps[0].shape(), &[3, 16, 28, 28]);
        assert_eq!(taps[1].shape(), &[3, 32, 28, 28]);
        assert_eq!(taps[2].shape(), &[3, 32, 14, 14]);
        assert_eq!(taps[3].shape(), &[3, 64, 14, 14]);
    }

    #[test]
    fn taps_validation() {
        let layers = vec![LayerSpec::Flatten, LayerSpec::Linear { in_features: 4, out_features: 2 }];
        let params = vec![Tensor::zeros(vec![2, 4]), Tensor::zeros(vec![2])];
        assert!(TapNet::from_parts(layers.clone(), vec![], [1, 2, 2], 2, params.clone(), "t".into()).is_err());
        assert!(TapNet::from_parts(layers.clone(), vec![5], [1, 2, 2], 2, params.clone(), "t".into()).is_err());
        assert!(TapNet::from_parts(layers, vec![0, 0], [1, 2, 2], 2, params, "t".into()).is_err());
    }

    #[test]
    fn skip_connection_adds_identity() {
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 3, stride: 1, padding: 1, skip: true },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 2 },
        ];
        let params = vec![
            Tensor::zeros(vec![1, 1, 3, 3]),
            Tensor::zeros(vec![1]),
            Tensor::new(vec![2, 4], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
            Tensor::zeros(vec![2]),
        ];
        let net = TapNet::from_parts(layers, vec![0], [1, 2, 2], 2, params, "t".into()).unwrap();
        // Conv weights are zero, so output = skip = input.
        let input = Tensor::new(vec![1, 1, 2, 2], vec![0.2, 0.4, 0.6, 0.8]).unwrap();
        let (logits, _) = net.forward(&input).unwrap();
        assert_eq!(logits.data(), &[0.2, 0.4]);
    }
}
