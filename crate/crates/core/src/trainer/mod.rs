//! Joint classification + regularization training loop.
//!
//! Each step processes one classification batch (softmax cross-entropy),
//! then forwards `2k` regularization images (k sampled pairs) through the
//! same network, builds the gamma-mixed similarity matrix for those pairs,
//! scores it against the precomputed target, and backpropagates
//! `L = L_task + alpha * L_sim` once through the combined graph. With
//! `alpha = 0` the similarity branch is still evaluated and logged but the
//! parameter updates are exactly those of a task-only loop.

mod config;

pub use config::{ExperimentConfig, TargetModeSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::ops::{AddOp, ScaleOp, SoftmaxCrossEntropyOp};
use crate::autodiff::Tape;
use crate::datasets::{self, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nn::optim::SgdMomentum;
use crate::nn::{build_net, TapNet};
use crate::rng;
use crate::simreg::{
    double_threshold_target, pixel_similarity, similarity_pipeline, subset_target,
    threshold_target, GammaMixer, SimilarityTarget,
};
use crate::tensor::Tensor;

/// One line of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_acc: f64,
    pub test_acc: f64,
    pub task_loss: f64,
    pub sim_loss: f64,
    pub gamma: Vec<f32>,
}

/// Result of a training run.
pub struct TrainOutcome {
    pub net: TapNet,
    pub mixer: GammaMixer,
    pub log: Vec<EpochRecord>,
    /// Per-step similarity loss values, for trend diagnostics.
    pub step_sim_losses: Vec<f64>,
}

/// Datasets resolved and preprocessed for one run.
pub struct PreparedData {
    pub class_train: LabeledImageSet,
    pub class_test: LabeledImageSet,
    pub reg_images: LabeledImageSet,
}

/// Resolve and preprocess the datasets named by a config: grayscale
/// conversion, training-set cap, regularization selection, and resizing of
/// regularization images to the classifier input.
pub fn prepare_data(config: &ExperimentConfig) -> Result<PreparedData> {
    let (mut class_train, mut class_test) = datasets::resolve(&config.class_dataset, &config.data_dir)?;
    if config.grayscale && class_train.image_shape()[0] == 3 {
        class_train = datasets::to_grayscale(&class_train)?;
        class_test = datasets::to_grayscale(&class_test)?;
    }
    if config.class_limit > 0 && config.class_limit < class_train.len() {
        let mut r = rng::stream(config.seed, "class-limit", 0);
        let perm = rng::permutation(class_train.len(), &mut r);
        class_train = class_train.gather(&perm[..config.class_limit])?;
    }

    let (reg_train, _) = datasets::resolve(&config.reg_dataset, &config.data_dir)?;
    let mut reg = reg_train;
    let class_shape = class_train.image_shape();
    if reg.image_shape()[0] == 3 && class_shape[0] == 1 {
        reg = datasets::to_grayscale(&reg)?;
    }
    if reg.image_shape()[0] != class_shape[0] {
        return Err(Error::Dataset(format!(
            "regularization channels {} incompatible with classifier input {}",
            reg.image_shape()[0],
            class_shape[0]
        )));
    }
    let reg = datasets::select_regularization_images(&reg, config.n_reg.min(reg.len()), config.seed)?;
    let reg = datasets::resize_to(&reg, class_shape[1], class_shape[2])?;
    Ok(PreparedData { class_train, class_test, reg_images: reg })
}

/// Build the similarity target named by the config over a regularization set.
pub fn build_target(config: &ExperimentConfig, reg_images: &LabeledImageSet) -> Result<SimilarityTarget> {
    let s_pixel = pixel_similarity(reg_images.images())?;
    match config.target_kind()? {
        TargetModeSpec::Threshold => threshold_target(&s_pixel, config.th, config.eps_clamp),
        TargetModeSpec::Double => double_threshold_target(&s_pixel, config.th, config.th2, config.eps_clamp),
        TargetModeSpec::Subset(mode) => subset_target(&s_pixel, config.th, config.eps_clamp, mode),
    }
}

fn sample_pairs(
    target: &SimilarityTarget,
    k: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<(usize, usize)>> {
    let n = target.n();
    let mut r = rng::stream(seed, "pairs", step);
    let mut pairs = Vec::with_capacity(k);
    let mut attempts = 0usize;
    while pairs.len() < k {
        attempts += 1;
        if attempts > 10_000 * k.max(1) {
            return Err(Error::Degenerate {
                context: "pair sampling".into(),
                details: "target mask admits too few pairs".into(),
            });
        }
        let i = r.random_range(0..n);
        let j = r.random_range(0..n);
        if i == j || !target.masked(i, j) {
            continue;
        }
        pairs.push((i, j));
    }
    Ok(pairs)
}

/// Train a network under a config on prepared data.
pub fn train(config: &ExperimentConfig, data: &PreparedData) -> Result<TrainOutcome> {
    config.validate()?;
    let class_train = &data.class_train;
    let class_test = &data.class_test;
    let reg = &data.reg_images;
    if class_train.image_shape() != class_test.image_shape() {
        return Err(Error::shape("train", "train/test image shapes differ".to_string()));
    }
    if reg.image_shape() != class_train.image_shape() {
        return Err(Error::shape("train", "regularization images must match classifier input".to_string()));
    }

    let target = build_target(config, reg)?;
    let mut net = build_net(
        &config.arch,
        class_train.image_shape(),
        class_train.num_classes(),
        config.seed,
    )?;
    let mut mixer = GammaMixer::uniform(net.num_taps())?;

    let mut opt = SgdMomentum::new(config.lr as f32, config.momentum as f32)?;
    let mut names = net.param_names();
    names.push("gamma.logits".to_string());

    let steps_per_epoch = class_train.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let decay_step = ((total_steps as f64) * config.decay_at).floor() as usize;

    let k = config.pair_batch;
    let mut log = Vec::with_capacity(config.epochs);
    let mut step_sim_losses = Vec::with_capacity(total_steps);
    let mut global_step = 0usize;

    for epoch in 0..config.epochs {
        let mut shuffle_rng = rng::stream(config.seed, "shuffle", epoch as u64);
        let order = rng::permutation(class_train.len(), &mut shuffle_rng);
        let mut task_sum = 0.0f64;
        let mut sim_sum = 0.0f64;
        let mut correct = 0usize;
        let mut seen = 0usize;

        for chunk in order.chunks(config.batch_size) {
            if global_step == decay_step && decay_step < total_steps {
                opt.set_lr(config.lr as f32 * 0.1);
            }

            let (batch, labels) = class_train.batch(chunk);
            let pair_step = if config.freeze_reg_pairs { 0 } else { global_step as u64 };
            let pairs = sample_pairs(&target, k, config.seed, pair_step)?;

            let mut tape = Tape::new();
            let param_vars = net.register_params(&mut tape);
            let gamma_var = tape.param(mixer.logits().clone());

            // classification branch
            let input = tape.constant(batch);
            let (logits, _) = net.forward_on_tape(&mut tape, &param_vars, input)?;
            let l_task = tape.apply(Box::new(SoftmaxCrossEntropyOp { labels: labels.clone() }), &[logits])?;

            // regularization branch: image a of every pair, then image b
            let reg_indices: Vec<usize> =
                pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
            let (reg_batch, _) = reg.batch(&reg_indices);
            let reg_input = tape.constant(reg_batch);
            let (_, tap_vars) = net.forward_on_tape(&mut tape, &param_vars, reg_input)?;
            let mut batch_target = SimilarityTarget::empty(2 * k, config.eps_clamp)?;
            for (p, &(i, j)) in pairs.iter().enumerate() {
                batch_target.set_pair(p, k + p, target.code(i, j), true)?;
            }
            let (l_sim, _) = similarity_pipeline(&mut tape, &tap_vars, gamma_var, &batch_target)?;

            let total = if config.alpha > 0.0 {
                let scaled = tape.apply(Box::new(ScaleOp { factor: config.alpha as f32 }), &[l_sim])?;
                tape.apply(Box::new(AddOp), &[l_task, scaled])?
            } else {
                l_task
            };

            let task_val = f64::from(tape.value(l_task).item());
            let sim_val = f64::from(tape.value(l_sim).item());
            if !task_val.is_finite() || !sim_val.is_finite() {
                return Err(Error::non_finite(
                    "train",
                    format!("loss at step {global_step}: task {task_val}, sim {sim_val}"),
                ));
            }
            task_sum += task_val;
            sim_sum += sim_val;
            step_sim_losses.push(sim_val);

            // batch training accuracy from the already-computed logits
            let k_classes = net.num_classes();
            for (bi, &y) in labels.iter().enumerate() {
                let row = &tape.value(logits).data()[bi * k_classes..(bi + 1) * k_classes];
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                if best == y {
                    correct += 1;
                }
            }
            seen += labels.len();

            let mut grads_store = tape.backward(total)?;
            let mut grads = Vec::with_capacity(param_vars.len() + 1);
            for &v in &param_vars {
                grads.push(grads_store.take(v)?);
            }
            // With alpha = 0 the similarity branch is outside the loss graph
            // and the gamma logits receive no gradient.
            grads.push(
                grads_store
                    .take(gamma_var)
                    .unwrap_or_else(|_| Tensor::zeros(vec![mixer.k()])),
            );

            let mut all_params: Vec<Tensor> = net.params().to_vec();
            all_params.push(mixer.logits().clone());
            opt.step(&mut all_params, &grads, &names)
                .map_err(|e| Error::non_finite("train", format!("step {global_step}: {e}")))?;
            let gamma_logits = all_params.pop().expect("gamma logits");
            net.params_mut().clone_from_slice(&all_params);
            mixer.set_logits(gamma_logits)?;

            global_step += 1;
        }

        let test_acc = evaluate(&net, class_test, config.eval_limit)?;
        log.push(EpochRecord {
            epoch,
            lr: f64::from(opt.lr()),
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc,
            task_loss: task_sum / steps_per_epoch as f64,
            sim_loss: sim_sum / steps_per_epoch as f64,
            gamma: mixer.weights(),
        });
    }

    Ok(TrainOutcome { net, mixer, log, step_sim_losses })
}

/// Fraction of argmax-correct predictions over (up to `limit` of) a dataset.
/// `limit = 0` means the full set.
pub fn evaluate(net: &TapNet, set: &LabeledImageSet, limit: usize) -> Result<f64> {
    evaluate_inner(net, set, limit, None)
}

/// Accuracy under a per-image perturbation. The transform receives the
/// image index and pixels and must return same-length pixels in [0,1];
/// determinism is the transform's responsibility (derive any noise seed
/// from the image index).
pub fn evaluate_transformed(
    net: &TapNet,
    set: &LabeledImageSet,
    limit: usize,
    transform: &(dyn Fn(usize, &[f32]) -> Vec<f32> + Sync),
) -> Result<f64> {
    evaluate_inner(net, set, limit, Some(transform))
}

fn evaluate_inner(
    net: &TapNet,
    set: &LabeledImageSet,
    limit: usize,
    transform: Option<&(dyn Fn(usize, &[f32]) -> Vec<f32> + Sync)>,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Dataset("evaluate: empty dataset".into()));
    }
    let n = if limit == 0 { set.len() } else { limit.min(set.len()) };
    let [c, h, w] = set.image_shape();
    let d = c * h * w;
    let mut correct = 0usize;
    let chunk = 64usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + chunk).min(n);
        let mut data = Vec::with_capacity((end - start) * d);
        for i in start..end {
            match transform {
                Some(f) => {
                    let img = f(i, set.image(i));
                    if img.len() != d {
                        return Err(Error::shape("evaluate", format!("transform returned {} pixels, expected {d}", img.len())));
                    }
                    data.extend_from_slice(&img);
                }
                None => data.extend_from_slice(set.image(i)),
            }
        }
        let batch = Tensor::new(vec![end - start, c, h, w], data)?;
        let preds = net.predict(&batch)?;
        for (offset, &p) in preds.iter().enumerate() {
            if p == set.label(start + offset) {
                correct += 1;
            }
        }
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_shapes;

    fn toy_config() -> ExperimentConfig {
        ExperimentConfig {
            class_dataset: "synthetic".into(),
            reg_dataset: "synthetic".into(),
            arch: "tiny".into(),
            epochs: 1,
            batch_size: 16,
            pair_batch: 4,
            n_reg: 32,
            class_limit: 0,
            eval_limit: 64,
            alpha: 1.0,
            th: 0.3,
            lr: 0.05,
            ..ExperimentConfig::default()
        }
    }

    fn toy_data(cfg: &ExperimentConfig) -> PreparedData {
        let class_train = synthetic_shapes(64, 16, 11).unwrap();
        let class_test = synthetic_shapes(64, 16, 12).unwrap();
        let reg_images =
            datasets::select_regularization_images(&class_train, cfg.n_reg, cfg.seed).unwrap();
        PreparedData { class_train, class_test, reg_images }
    }

    #[test]
    fn determinism_same_seed_same_weights_and_log() {
        let cfg = toy_config();
        let data = toy_data(&cfg);
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        for (pa, pb) in a.net.params().iter().zip(b.net.params()) {
            assert_eq!(pa.data(), pb.data());
        }
        assert_eq!(a.mixer.logits().data(), b.mixer.logits().data());
        assert_eq!(
            serde_json::to_string(&a.log).unwrap(),
            serde_json::to_string(&b.log).unwrap()
        );
    }

    #[test]
    fn alpha_zero_matches_task_only_loop() {
        let mut cfg = toy_config();
        cfg.alpha = 0.0;
        cfg.decay_at = 1.0; // the hand loop below keeps a constant lr
        let data = toy_data(&cfg);
        let out = train(&cfg, &data).unwrap();
        // sim loss is still reported
        assert!(out.log[0].sim_loss > 0.0);
        // gamma never moves
        assert_eq!(out.mixer.logits().data(), &[0.0, 0.0]);

        // hand-rolled task-only loop with the same draw discipline
        let mut net = build_net("tiny", [1, 16, 16], 10, cfg.seed).unwrap();
        let mut opt = SgdMomentum::new(cfg.lr as f32, cfg.momentum as f32).unwrap();
        let names = net.param_names();
        let order = rng::permutation(data.class_train.len(), &mut rng::stream(cfg.seed, "shuffle", 0));
        for chunk in order.chunks(cfg.batch_size) {
            let (batch, labels) = data.class_train.batch(chunk);
            let mut tape = Tape::new();
            let pv = net.register_params(&mut tape);
            let input = tape.constant(batch);
            let (logits, _) = net.forward_on_tape(&mut tape, &pv, input).unwrap();
            let loss = tape
                .apply(Box::new(SoftmaxCrossEntropyOp { labels }), &[logits])
                .unwrap();
            let mut gs = tape.backward(loss).unwrap();
            let grads: Vec<Tensor> = pv.iter().map(|&v| gs.take(v).unwrap()).collect();
            let mut params = net.params().to_vec();
            opt.step(&mut params, &grads, &names).unwrap();
            net.params_mut().clone_from_slice(&params);
        }
        for (pa, pb) in out.net.params().iter().zip(net.params()) {
            assert_eq!(pa.data(), pb.data(), "alpha=0 run must be bit-identical to task-only");
        }
    }

    #[test]
    fn reg_batch_forwards_two_k_images() {
        // 2*k extra forward images per step, by construction of the
        // regularization batch.
        let cfg = toy_config();
        let data = toy_data(&cfg);
        let target = build_target(&cfg, &data.reg_images).unwrap();
        let pairs = sample_pairs(&target, cfg.pair_batch, cfg.seed, 0).unwrap();
        assert_eq!(pairs.len(), cfg.pair_batch);
        let idx: Vec<usize> = pairs.iter().map(|p| p.0).chain(pairs.iter().map(|p| p.1)).collect();
        assert_eq!(idx.len(), 2 * cfg.pair_batch);
    }

    #[test]
    fn gamma_stays_on_simplex_through_training() {
        let cfg = toy_config();
        let data = toy_data(&cfg);
        let out = train(&cfg, &data).unwrap();
        for rec in &out.log {
            let sum: f32 = rec.gamma.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!(rec.gamma.iter().all(|&g| g >= 0.0));
        }
    }

    #[test]
    fn sim_loss_trends_down_on_frozen_pairs() {
        let mut cfg = toy_config();
        cfg.freeze_reg_pairs = true;
        cfg.epochs = 4;
        cfg.alpha = 4.0;
        let data = toy_data(&cfg);
        let out = train(&cfg, &data).unwrap();
        let steps = &out.step_sim_losses;
        let tenth = (steps.len() / 10).max(1);
        let median = |xs: &[f64]| {
            let mut v = xs.to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let first = median(&steps[..tenth]);
        let last = median(&steps[steps.len() - tenth..]);
        assert!(last < first, "sim loss should trend down: first {first}, last {last}");
    }

    #[test]
    fn evaluate_edge_cases() {
        let set = synthetic_shapes(30, 16, 3).unwrap();
        let net = build_net("tiny", [1, 16, 16], 10, 0).unwrap();
        let acc = evaluate(&net, &set, 0).unwrap();
        assert!((0.0..=1.0).contains(&acc));

        // identity transform changes nothing
        let acc_t = evaluate_transformed(&net, &set, 0, &|_, img| img.to_vec()).unwrap();
        assert_eq!(acc, acc_t);

        // constant logits predict class 0 on balanced data
        let mut zero_net = build_net("tiny", [1, 16, 16], 10, 0).unwrap();
        for p in zero_net.params_mut() {
            p.data_mut().fill(0.0);
        }
        let acc0 = evaluate(&zero_net, &set, 0).unwrap();
        assert!((acc0 - 0.1).abs() < 1e-9);

        // empty sets cannot even be constructed
        assert!(set.gather(&[]).is_err());
    }
}
