//! Shared fixtures for the benchmark suite.

use pixsim::autodiff::ops::SoftmaxCrossEntropyOp;
use pixsim::autodiff::Tape;
use pixsim::datasets::{synthetic_shapes, LabeledImageSet};
use pixsim::nn::build_net;
use pixsim::simreg::{similarity_pipeline, SimilarityTarget};
use pixsim::tensor::Tensor;
use pixsim::TapNet;

/// Deterministic pseudo-image batch in [0,1].
pub fn random_batch(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut state = seed | 1;
    Tensor::from_fn(vec![n, c, h, w], |_| {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) % 1000) as f32 / 999.0
    })
}

/// The default desk net on MNIST-sized input.
pub fn desk_net(seed: u64) -> TapNet {
    build_net("desk", [1, 28, 28], 10, seed).expect("desk arch")
}

/// A synthetic labeled set for end-to-end benches.
pub fn bench_set(n: usize) -> LabeledImageSet {
    synthetic_shapes(n, 16, 7).expect("synthetic set")
}

/// One recorded forward+backward training step (task + similarity branch),
/// returning the loss value so the optimizer stays honest.
pub fn full_step(net: &TapNet, batch: &Tensor, labels: &[usize], reg: &Tensor, target: &SimilarityTarget) -> f32 {
    let mut tape = Tape::new();
    let pv = net.register_params(&mut tape);
    let gv = tape.param(Tensor::zeros(vec![net.num_taps()]));
    let input = tape.constant(batch.clone());
    let (logits, _) = net.forward_on_tape(&mut tape, &pv, input).expect("forward");
    let l_task = tape
        .apply(Box::new(SoftmaxCrossEntropyOp { labels: labels.to_vec() }), &[logits])
        .expect("task loss");
    let reg_input = tape.constant(reg.clone());
    let (_, taps) = net.forward_on_tape(&mut tape, &pv, reg_input).expect("reg forward");
    let (l_sim, _) = similarity_pipeline(&mut tape, &taps, gv, target).expect("sim loss");
    let total = {
        use pixsim::autodiff::ops::{AddOp, ScaleOp};
        let scaled = tape.apply(Box::new(ScaleOp { factor: 4.0 }), &[l_sim]).expect("scale");
        tape.apply(Box::new(AddOp), &[l_task, scaled]).expect("add")
    };
    let grads = tape.backward(total).expect("backward");
    let _ = grads.wrt(pv[0]).expect("conv grad");
    tape.value(total).item()
}
