//! Gradient correctness: tape gradients against central finite differences
//! of the straight-line f64 reference implementations, per layer type and
//! end to end through the similarity pipeline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use pixsim::autodiff::ops::{AddOp, AvgPoolOp, Conv2dOp, LinearOp, ReluOp, SoftmaxCrossEntropyOp, SumOp};
use pixsim::autodiff::{Tape, Var};
use pixsim::nn::LayerSpec;
use pixsim::rng::stream;
use pixsim::simreg::{similarity_pipeline, SimilarityTarget};
use pixsim::tensor::Tensor;
use pixsim::testkit::{
    self, conv2d_ref, finite_difference, rel_l2_error, softmax_ce_ref, sim_pipeline_ref, to_f32,
};

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f32, hi: f32) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Tensor with values bounded away from the ReLU kink so finite
/// differences at h = 1e-3 never cross it.
fn rand_tensor_off_kink(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let mag = rng.random_range(0.01f32..1.0);
        if rng.random::<bool>() {
            mag
        } else {
            -mag
        }
    })
}

fn flat_f64(tensors: &[&Tensor]) -> Vec<f64> {
    tensors.iter().flat_map(|t| t.data().iter().map(|&x| f64::from(x))).collect()
}

fn split<'a>(template: &[&Tensor], point: &'a [f64]) -> Vec<&'a [f64]> {
    let mut out = Vec::with_capacity(template.len());
    let mut off = 0;
    for t in template {
        out.push(&point[off..off + t.len()]);
        off += t.len();
    }
    out
}

fn tape_grads_flat(tape: &Tape, grads: &pixsim::autodiff::Gradients, vars: &[Var]) -> Vec<f32> {
    let _ = tape;
    vars.iter().flat_map(|&v| grads.wrt(v).unwrap().data().to_vec()).collect()
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let mut rng = stream(101, "fd-conv", 0);
    for trial in 0..30u32 {
        let b = rng.random_range(1..=2usize);
        let cin = rng.random_range(1..=3usize);
        let cout = rng.random_range(1..=3usize);
        let k = if rng.random::<bool>() { 3 } else { 1 };
        let stride = rng.random_range(1..=2usize);
        let padding = rng.random_range(0..=1usize);
        let h = rng.random_range(k + 1..=6usize);
        let w = rng.random_range(k + 1..=6usize);

        let x = rand_tensor(&mut rng, vec![b, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, vec![cout, cin, k, k], -0.7, 0.7);
        let bias = rand_tensor(&mut rng, vec![cout], -0.3, 0.3);

        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(wt.clone());
        let bv = tape.param(bias.clone());
        let out = tape
            .apply(Box::new(Conv2dOp { stride, padding, label: format!("fd-conv-{trial}") }), &[xv, wv, bv])
            .unwrap();
        let loss = tape.apply(Box::new(SumOp), &[out]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[xv, wv, bv]);

        let template = [&x, &wt, &bias];
        let point = flat_f64(&template);
        let mut eval = |p: &[f64]| {
            let parts = split(&template, p);
            let (out, _, _) = conv2d_ref(b, cin, h, w, cout, k, stride, padding, parts[0], parts[1], parts[2]);
            out.iter().sum::<f64>()
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "conv trial {trial}: rel err {err}");
    }
}

#[test]
fn skip_connection_gradients_match_finite_differences() {
    let mut rng = stream(102, "fd-skip", 0);
    for trial in 0..10u32 {
        let b = 1usize;
        let c = rng.random_range(1..=2usize);
        let h = rng.random_range(4..=6usize);
        let w = h;
        let x = rand_tensor(&mut rng, vec![b, c, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut rng, vec![c, c, 3, 3], -0.5, 0.5);
        let bias = rand_tensor(&mut rng, vec![c], -0.2, 0.2);

        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(wt.clone());
        let bv = tape.param(bias.clone());
        let conv = tape
            .apply(Box::new(Conv2dOp { stride: 1, padding: 1, label: "fd-skip".into() }), &[xv, wv, bv])
            .unwrap();
        let added = tape.apply(Box::new(AddOp), &[conv, xv]).unwrap();
        let loss = tape.apply(Box::new(SumOp), &[added]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[xv, wv, bv]);

        let template = [&x, &wt, &bias];
        let point = flat_f64(&template);
        let mut eval = |p: &[f64]| {
            let parts = split(&template, p);
            let (conv, _, _) = conv2d_ref(b, c, h, w, c, 3, 1, 1, parts[0], parts[1], parts[2]);
            conv.iter().zip(parts[0]).map(|(o, x)| o + x).sum::<f64>()
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "skip trial {trial}: rel err {err}");
    }
}

#[test]
fn relu_gradients_match_finite_differences() {
    let mut rng = stream(103, "fd-relu", 0);
    for trial in 0..10u32 {
        let n = rng.random_range(4..=24usize);
        let x = rand_tensor_off_kink(&mut rng, vec![n]);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = tape.apply(Box::new(ReluOp), &[xv]).unwrap();
        let loss = tape.apply(Box::new(SumOp), &[out]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[xv]);

        let point = flat_f64(&[&x]);
        let mut eval = |p: &[f64]| testkit::relu_ref(p).iter().sum::<f64>();
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "relu trial {trial}: rel err {err}");
    }
}

#[test]
fn avg_pool_gradients_match_finite_differences() {
    let mut rng = stream(104, "fd-pool", 0);
    for trial in 0..10u32 {
        let (b, c) = (rng.random_range(1..=2usize), rng.random_range(1..=2usize));
        let size = 2usize;
        let h = 2 * rng.random_range(1..=3usize);
        let w = 2 * rng.random_range(1..=3usize);
        let x = rand_tensor(&mut rng, vec![b, c, h, w], -1.0, 1.0);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let out = tape.apply(Box::new(AvgPoolOp { size, label: "fd-pool".into() }), &[xv]).unwrap();
        let loss = tape.apply(Box::new(SumOp), &[out]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[xv]);

        let point = flat_f64(&[&x]);
        let mut eval = |p: &[f64]| testkit::avg_pool_ref(b, c, h, w, size, p).iter().sum::<f64>();
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "pool trial {trial}: rel err {err}");
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    let mut rng = stream(105, "fd-linear", 0);
    for trial in 0..10u32 {
        let (b, fi, fo) = (
            rng.random_range(1..=3usize),
            rng.random_range(2..=6usize),
            rng.random_range(2..=5usize),
        );
        let x = rand_tensor(&mut rng, vec![b, fi], -1.0, 1.0);
        let w = rand_tensor(&mut rng, vec![fo, fi], -0.7, 0.7);
        let bias = rand_tensor(&mut rng, vec![fo], -0.3, 0.3);
        let mut tape = Tape::new();
        let xv = tape.param(x.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(bias.clone());
        let out = tape.apply(Box::new(LinearOp { label: "fd-linear".into() }), &[xv, wv, bv]).unwrap();
        let loss = tape.apply(Box::new(SumOp), &[out]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[xv, wv, bv]);

        let template = [&x, &w, &bias];
        let point = flat_f64(&template);
        let mut eval = |p: &[f64]| {
            let parts = split(&template, p);
            testkit::linear_ref(b, fi, fo, parts[0], parts[1], parts[2]).iter().sum::<f64>()
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "linear trial {trial}: rel err {err}");
    }
}

#[test]
fn cross_entropy_gradients_match_finite_differences() {
    let mut rng = stream(106, "fd-ce", 0);
    for trial in 0..10u32 {
        let (b, k) = (rng.random_range(1..=4usize), rng.random_range(2..=6usize));
        let logits = rand_tensor(&mut rng, vec![b, k], -2.0, 2.0);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let mut tape = Tape::new();
        let zv = tape.param(logits.clone());
        let loss = tape.apply(Box::new(SoftmaxCrossEntropyOp { labels: labels.clone() }), &[zv]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &[zv]);

        let point = flat_f64(&[&logits]);
        let mut eval = |p: &[f64]| softmax_ce_ref(p, k, &labels);
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "ce trial {trial}: rel err {err}");
    }
}

/// A four-layer micro net with the desk topology (conv/relu/conv/relu/pool/
/// flatten/linear) small enough for finite differences over every weight.
fn micro_net() -> (Vec<LayerSpec>, Vec<usize>, [usize; 3]) {
    let layers = vec![
        LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, stride: 1, padding: 1, skip: false },
        LayerSpec::Relu,
        LayerSpec::Conv2d { in_ch: 2, out_ch: 3, kernel: 3, stride: 1, padding: 1, skip: false },
        LayerSpec::Relu,
        LayerSpec::AvgPool { size: 2 },
        LayerSpec::Flatten,
        LayerSpec::Linear { in_features: 12, out_features: 3 },
    ];
    (layers, vec![1, 3], [1, 4, 4])
}

fn micro_params(rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        rand_tensor(rng, vec![2, 1, 3, 3], -0.6, 0.6),
        rand_tensor(rng, vec![2], -0.2, 0.2),
        rand_tensor(rng, vec![3, 2, 3, 3], -0.5, 0.5),
        rand_tensor(rng, vec![3], -0.2, 0.2),
        rand_tensor(rng, vec![3, 12], -0.5, 0.5),
        rand_tensor(rng, vec![3], -0.2, 0.2),
    ]
}

/// Central differences through a ReLU are only valid when no pre-activation
/// sits within the step of the kink; additionally, every image's tap
/// features must be non-constant or the similarity has no direction.
/// Returns (kink margin, non-constant taps) for instance filtering.
fn micro_instance_health(params: &[Tensor], batch: &Tensor) -> (f64, bool) {
    let b = batch.shape()[0];
    let p64: Vec<Vec<f64>> = params.iter().map(|t| testkit::to_f64(t.data())).collect();
    let x64 = testkit::to_f64(batch.data());
    let (c1, _, _) = conv2d_ref(b, 1, 4, 4, 2, 3, 1, 1, &x64, &p64[0], &p64[1]);
    let r1 = testkit::relu_ref(&c1);
    let (c2, _, _) = conv2d_ref(b, 2, 4, 4, 3, 3, 1, 1, &r1, &p64[2], &p64[3]);
    let r2 = testkit::relu_ref(&c2);
    let margin = c1
        .iter()
        .chain(c2.iter())
        .map(|v| v.abs())
        .fold(f64::INFINITY, f64::min);
    let varied = |rows: &[f64], per: usize| {
        rows.chunks(per).all(|img| {
            let max = img.iter().cloned().fold(f64::MIN, f64::max);
            let min = img.iter().cloned().fold(f64::MAX, f64::min);
            max - min > 0.05
        })
    };
    (margin, varied(&r1, r1.len() / b) && varied(&r2, r2.len() / b))
}

/// Draw (params, batch) for the micro net with every pre-activation away
/// from the ReLU kink and non-degenerate tap features.
fn micro_instance_off_kink(rng: &mut ChaCha8Rng, batch_size: usize) -> (Vec<Tensor>, Tensor) {
    loop {
        let params = micro_params(rng);
        let batch = rand_tensor(rng, vec![batch_size, 1, 4, 4], 0.0, 1.0);
        let (margin, varied) = micro_instance_health(&params, &batch);
        if margin > 0.05 && varied {
            return (params, batch);
        }
    }
}

#[test]
fn whole_net_task_gradients_match_finite_differences() {
    let mut rng = stream(107, "fd-net", 0);
    let (layers, taps, input_shape) = micro_net();
    for trial in 0..10u32 {
        let (params, batch) = micro_instance_off_kink(&mut rng, 2);
        let net = pixsim::TapNet::from_parts(layers.clone(), taps.clone(), input_shape, 3, params.clone(), "micro".into()).unwrap();
        let labels = vec![rng.random_range(0..3usize), rng.random_range(0..3usize)];

        let mut tape = Tape::new();
        let pv = net.register_params(&mut tape);
        let input = tape.constant(batch.clone());
        let (logits, _) = net.forward_on_tape(&mut tape, &pv, input).unwrap();
        let loss = tape.apply(Box::new(SoftmaxCrossEntropyOp { labels: labels.clone() }), &[logits]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let ad = tape_grads_flat(&tape, &grads, &pv);

        let template: Vec<&Tensor> = params.iter().collect();
        let point = flat_f64(&template);
        let batch64 = testkit::to_f64(batch.data());
        let mut eval = |p: &[f64]| {
            let parts: Vec<Vec<f64>> = split(&template, p).into_iter().map(|s| s.to_vec()).collect();
            let (logits, _) = testkit::forward_ref(&layers, &taps, input_shape, 2, &parts, &batch64);
            softmax_ce_ref(&logits, 3, &labels)
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "net trial {trial}: rel err {err}");
    }
}

fn random_target(rng: &mut ChaCha8Rng, p: usize) -> SimilarityTarget {
    let mut t = SimilarityTarget::empty(p, 1e-6).unwrap();
    for i in 1..p {
        for j in 0..i {
            let code = [-1i8, 0, 1][rng.random_range(0..3usize)];
            let masked = rng.random_range(0..4u32) > 0;
            t.set_pair(i, j, code, masked).unwrap();
        }
    }
    t
}

fn target_pairs(t: &SimilarityTarget) -> (Vec<(usize, usize)>, Vec<f64>) {
    let pairs: Vec<(usize, usize)> = t.iter_masked_pairs().collect();
    let atanh: Vec<f64> = pairs.iter().map(|&(i, j)| t.atanh_value(i, j)).collect();
    (pairs, atanh)
}

#[test]
fn sim_pipeline_gradients_match_finite_differences() {
    // gradient through gamma logits and raw feature rows
    let mut rng = stream(108, "fd-sim", 0);
    for trial in 0..30u32 {
        let p = rng.random_range(3..=5usize);
        let n_layers = rng.random_range(1..=3usize);
        let dims: Vec<usize> = (0..n_layers).map(|_| rng.random_range(4..=9usize)).collect();
        let feats: Vec<Tensor> = dims.iter().map(|&f| rand_tensor(&mut rng, vec![p, f], -1.0, 1.0)).collect();
        let logits = rand_tensor(&mut rng, vec![n_layers], -1.0, 1.0);
        let target = random_target(&mut rng, p);
        if target.masked_pair_count() == 0 {
            continue;
        }

        let mut tape = Tape::new();
        let logit_var = tape.param(logits.clone());
        let feat_vars: Vec<Var> = feats.iter().map(|f| tape.param(f.clone())).collect();
        let (loss, _) = similarity_pipeline(&mut tape, &feat_vars, logit_var, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut vars = vec![logit_var];
        vars.extend(&feat_vars);
        let ad = tape_grads_flat(&tape, &grads, &vars);

        let mut template: Vec<&Tensor> = vec![&logits];
        template.extend(feats.iter());
        let point = flat_f64(&template);
        let (pairs, atanh) = target_pairs(&target);
        let mut eval = |pt: &[f64]| {
            let parts = split(&template, pt);
            let gamma = parts[0];
            let feats64: Vec<(Vec<f64>, usize, usize)> = parts[1..]
                .iter()
                .zip(&dims)
                .map(|(s, &f)| (s.to_vec(), p, f))
                .collect();
            sim_pipeline_ref(&feats64, gamma, &pairs, &atanh, 1e-6)
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "sim trial {trial}: rel err {err}");
    }
}

#[test]
fn sim_loss_through_net_taps_matches_finite_differences() {
    // the full regularization branch: net parameters -> tap features ->
    // per-layer similarity -> gamma mixing -> arctanh loss
    let mut rng = stream(109, "fd-net-sim", 0);
    let (layers, taps, input_shape) = micro_net();
    for trial in 0..5u32 {
        let p = 4usize;
        let (params, batch) = micro_instance_off_kink(&mut rng, p);
        let net = pixsim::TapNet::from_parts(layers.clone(), taps.clone(), input_shape, 3, params.clone(), "micro".into()).unwrap();
        let gamma = rand_tensor(&mut rng, vec![taps.len()], -0.5, 0.5);
        let target = random_target(&mut rng, p);
        if target.masked_pair_count() == 0 {
            continue;
        }

        let mut tape = Tape::new();
        let pv = net.register_params(&mut tape);
        let gv = tape.param(gamma.clone());
        let input = tape.constant(batch.clone());
        let (_, tap_vars) = net.forward_on_tape(&mut tape, &pv, input).unwrap();
        let (loss, _) = similarity_pipeline(&mut tape, &tap_vars, gv, &target).unwrap();
        let grads = tape.backward(loss).unwrap();
        // the final linear layer feeds only the logits, not the taps, so it
        // receives no gradient from the similarity loss
        assert!(grads.wrt(pv[4]).is_err());
        assert!(grads.wrt(pv[5]).is_err());
        let mut vars: Vec<Var> = pv[..4].to_vec();
        vars.push(gv);
        let ad = tape_grads_flat(&tape, &grads, &vars);

        let mut template: Vec<&Tensor> = params[..4].iter().collect();
        template.push(&gamma);
        let point = flat_f64(&template);
        let batch64 = testkit::to_f64(batch.data());
        let (pairs, atanh) = target_pairs(&target);
        let fixed_linear: Vec<Vec<f64>> =
            params[4..].iter().map(|t| testkit::to_f64(t.data())).collect();
        let mut eval = |pt: &[f64]| {
            let parts: Vec<Vec<f64>> = split(&template, pt).into_iter().map(|s| s.to_vec()).collect();
            let (gamma64, conv64) = parts.split_last().unwrap();
            let mut params64 = conv64.to_vec();
            params64.extend(fixed_linear.iter().cloned());
            let (_, tap_feats) = testkit::forward_ref(&layers, &taps, input_shape, p, &params64, &batch64);
            sim_pipeline_ref(&tap_feats, gamma64, &pairs, &atanh, 1e-6)
        };
        let fd = finite_difference(&mut eval, &point, H);
        let err = rel_l2_error(&ad, &fd);
        assert!(err < TOL, "net-sim trial {trial}: rel err {err}");
    }
}

#[test]
fn forward_logits_match_straight_line_reference() {
    let mut rng = stream(110, "fwd-oracle", 0);
    let (layers, taps, input_shape) = micro_net();
    for _ in 0..20u32 {
        let params = micro_params(&mut rng);
        let net = pixsim::TapNet::from_parts(layers.clone(), taps.clone(), input_shape, 3, params.clone(), "micro".into()).unwrap();
        let batch = rand_tensor(&mut rng, vec![3, 1, 4, 4], 0.0, 1.0);
        let (logits, tap_feats) = net.forward(&batch).unwrap();

        let params64: Vec<Vec<f64>> = params.iter().map(|t| testkit::to_f64(t.data())).collect();
        let (ref_logits, ref_taps) =
            testkit::forward_ref(&layers, &taps, input_shape, 3, &params64, &testkit::to_f64(batch.data()));
        for (a, b) in logits.data().iter().zip(to_f32(&ref_logits)) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        for (t, (r, _, _)) in tap_feats.iter().zip(&ref_taps) {
            for (a, &b) in t.data().iter().zip(r) {
                assert!((f64::from(*a) - b).abs() < 1e-4);
            }
        }
    }
}

#[test]
fn replaying_a_graph_gives_bit_identical_gradients() {
    let mut build = || {
        let mut rng = stream(111, "replay", 0);
        let (layers, taps, input_shape) = micro_net();
        let params = micro_params(&mut rng);
        let net = pixsim::TapNet::from_parts(layers, taps, input_shape, 3, params, "micro".into()).unwrap();
        let batch = rand_tensor(&mut rng, vec![2, 1, 4, 4], 0.0, 1.0);
        let mut tape = Tape::new();
        let pv = net.register_params(&mut tape);
        let input = tape.constant(batch);
        let (logits, _) = net.forward_on_tape(&mut tape, &pv, input).unwrap();
        let loss = tape.apply(Box::new(SoftmaxCrossEntropyOp { labels: vec![0, 2] }), &[logits]).unwrap();
        let grads = tape.backward(loss).unwrap();
        pv.iter().flat_map(|&v| grads.wrt(v).unwrap().data().to_vec()).collect::<Vec<f32>>()
    };
    assert_eq!(build(), build());
}
