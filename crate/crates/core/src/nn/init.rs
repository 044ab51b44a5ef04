//! Seeded parameter initialization.
//!
//! Weights use fan-in scaled uniform init (bound `sqrt(6 / fan_in)`), biases
//! start at zero. The same seed always produces the same parameters.

use rand::Rng;

use crate::rng;
use crate::tensor::Tensor;

use super::LayerSpec;

/// Initialize the parameter list for a layer stack.
pub fn init_params(layers: &[LayerSpec], seed: u64) -> Vec<Tensor> {
    let mut params = Vec::new();
    for (i, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                let fan_in = in_ch * kernel * kernel;
                params.push(uniform_tensor(vec![*out_ch, *in_ch, *kernel, *kernel], fan_in, seed, i as u64));
                params.push(Tensor::zeros(vec![*out_ch]));
            }
            LayerSpec::Linear { in_features, out_features } => {
                params.push(uniform_tensor(vec![*out_features, *in_features], *in_features, seed, i as u64));
                params.push(Tensor::zeros(vec![*out_features]));
            }
            _ => {}
        }
    }
    params
}

fn uniform_tensor(shape: Vec<usize>, fan_in: usize, seed: u64, layer: u64) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let mut rng = rng::stream(seed, "init", layer);
    Tensor::from_fn(shape, |_| rng.random_range(-bound..bound))
}
