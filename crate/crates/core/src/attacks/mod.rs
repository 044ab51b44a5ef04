//! Black-box attack battery: random-noise perturbations, (transferred)
//! FGSM, and the decision-based boundary attack.
//!
//! All attack outputs live in [0,1]^d. Every stochastic choice is derived
//! from an explicit seed, so curves and scores reproduce bit-exactly.

mod boundary;
mod report;

pub use boundary::{
    boundary_attack, boundary_battery, boundary_score, BatteryConfig, BoundaryConfig,
    BoundaryOutcome, BoundaryReport, BoundaryRun, RepeatOutcome,
};
pub use report::AttackReport;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::analysis::AccuracyCurve;
use crate::autodiff::ops::SoftmaxCrossEntropyOp;
use crate::autodiff::Tape;
use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::TapNet;
use crate::rng;
use crate::tensor::Tensor;
use crate::trainer::evaluate_transformed;

/// Random-noise families. `eps` parameterization: gaussian adds noise with
/// standard deviation `eps`; uniform adds noise with half-width `eps`;
/// salt-and-pepper replaces each pixel by 0 or 1 (equiprobable) with
/// probability `min(eps, 1)`. Robustness curves depend on this choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseFamily {
    Gaussian,
    Uniform,
    SaltPepper,
}

impl NoiseFamily {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(NoiseFamily::Gaussian),
            "uniform" => Ok(NoiseFamily::Uniform),
            "salt_pepper" => Ok(NoiseFamily::SaltPepper),
            other => Err(Error::invalid("noise family", format!("unknown family '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Uniform => "uniform",
            NoiseFamily::SaltPepper => "salt_pepper",
        }
    }
}

/// A seeded noise perturbation of strength `eps >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub eps: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, eps: f64, seed: u64) -> Result<Self> {
        if !(eps >= 0.0) || !eps.is_finite() {
            return Err(Error::invalid("NoiseSpec", format!("eps must be >= 0, got {eps}")));
        }
        Ok(NoiseSpec { family, eps, seed })
    }
}

/// Apply seeded noise to one image, clipping to [0,1]. With `eps == 0` the
/// output equals the input exactly.
pub fn apply_noise(x: &[f32], spec: &NoiseSpec) -> Vec<f32> {
    if spec.eps == 0.0 {
        return x.to_vec();
    }
    let mut rng = rng::stream(spec.seed, "noise", 0);
    match spec.family {
        NoiseFamily::Gaussian => x
            .iter()
            .map(|&v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                ((f64::from(v) + spec.eps * z).clamp(0.0, 1.0)) as f32
            })
            .collect(),
        NoiseFamily::Uniform => x
            .iter()
            .map(|&v| {
                let u: f64 = rng.random_range(-spec.eps..spec.eps);
                ((f64::from(v) + u).clamp(0.0, 1.0)) as f32
            })
            .collect(),
        NoiseFamily::SaltPepper => {
            let p = spec.eps.min(1.0);
            x.iter()
                .map(|&v| {
                    let u: f64 = rng.random();
                    if u < p {
                        if rng.random::<bool>() {
                            1.0
                        } else {
                            0.0
                        }
                    } else {
                        v
                    }
                })
                .collect()
        }
    }
}

/// Fast gradient sign method: `x + eps * sign(grad_x L)`, clipped to [0,1];
/// sign(0) is 0. Operates on a whole batch at once.
pub fn fgsm(net: &TapNet, x: &Tensor, labels: &[usize], eps: f32) -> Result<Tensor> {
    if eps < 0.0 || !eps.is_finite() {
        return Err(Error::invalid("fgsm", format!("eps must be >= 0, got {eps}")));
    }
    x.check_range(0.0, 1.0, "fgsm input")?;
    let mut tape = Tape::new();
    let input = tape.param(x.clone());
    let param_vars: Vec<_> = net.params().iter().map(|p| tape.constant(p.clone())).collect();
    let (logits, _) = net.forward_on_tape(&mut tape, &param_vars, input)?;
    let loss = tape.apply(Box::new(SoftmaxCrossEntropyOp { labels: labels.to_vec() }), &[logits])?;
    let grads = tape.backward(loss)?;
    let g = grads.wrt(input)?;
    g.check_finite("fgsm gradient")?;
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&v, &gv)| {
            let s = if gv > 0.0 {
                1.0
            } else if gv < 0.0 {
                -1.0
            } else {
                0.0
            };
            (v + eps * s).clamp(0.0, 1.0)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Seeded selection of up to `count` evaluation images (0 = all).
pub fn attack_subset(set: &LabeledImageSet, count: usize, seed: u64) -> Result<LabeledImageSet> {
    if count == 0 || count >= set.len() {
        return Ok(set.clone());
    }
    let mut r = rng::stream(seed, "attack-subset", 0);
    let perm = rng::permutation(set.len(), &mut r);
    set.gather(&perm[..count])
}

/// Accuracy under seeded noise for each strength in the grid.
pub fn noise_curve(
    net: &TapNet,
    set: &LabeledImageSet,
    family: NoiseFamily,
    grid: &[f64],
    images: usize,
    seed: u64,
) -> Result<AccuracyCurve> {
    let subset = attack_subset(set, images, seed)?;
    let mut acc = Vec::with_capacity(grid.len());
    for (ei, &eps) in grid.iter().enumerate() {
        NoiseSpec::new(family, eps, 0)?;
        let transform = move |i: usize, img: &[f32]| {
            let spec = NoiseSpec {
                family,
                eps,
                seed: rng::derive_seed(seed, "noise-image", (ei as u64) << 32 | i as u64),
            };
            apply_noise(img, &spec)
        };
        acc.push(evaluate_transformed(net, &subset, 0, &transform)?);
    }
    Ok(AccuracyCurve { eps: grid.to_vec(), acc })
}

/// Accuracy of `target_net` on FGSM examples crafted against
/// `substitute_net`, for each strength in the grid.
pub fn transfer_curve(
    substitute_net: &TapNet,
    target_net: &TapNet,
    set: &LabeledImageSet,
    grid: &[f64],
    images: usize,
    seed: u64,
) -> Result<AccuracyCurve> {
    if substitute_net.input_shape() != target_net.input_shape() {
        return Err(Error::shape(
            "transfer_curve",
            format!("substitute input {:?} vs target input {:?}", substitute_net.input_shape(), target_net.input_shape()),
        ));
    }
    let subset = attack_subset(set, images, seed)?;
    let n = subset.len();
    let mut acc = Vec::with_capacity(grid.len());
    for &eps in grid {
        let mut correct = 0usize;
        let chunk = 64usize;
        let mut start = 0;
        while start < n {
            let end = (start + chunk).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let (batch, labels) = subset.batch(&idx);
            let adv = fgsm(substitute_net, &batch, &labels, eps as f32)?;
            let preds = target_net.predict(&adv)?;
            correct += preds.iter().zip(&labels).filter(|(p, y)| p == y).count();
            start = end;
        }
        acc.push(correct as f64 / n as f64);
    }
    Ok(AccuracyCurve { eps: grid.to_vec(), acc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::synthetic_shapes;
    use crate::nn::build_net;

    #[test]
    fn zero_eps_noise_is_identity_for_all_families() {
        let x: Vec<f32> = (0..100).map(|i| (i as f32) / 99.0).collect();
        for family in [NoiseFamily::Gaussian, NoiseFamily::Uniform, NoiseFamily::SaltPepper] {
            let spec = NoiseSpec::new(family, 0.0, 7).unwrap();
            assert_eq!(apply_noise(&x, &spec), x);
        }
    }

    #[test]
    fn negative_eps_rejected() {
        assert!(NoiseSpec::new(NoiseFamily::Gaussian, -0.1, 0).is_err());
    }

    #[test]
    fn noise_is_seeded_and_clipped() {
        let x = vec![0.5f32; 256];
        let spec = NoiseSpec::new(NoiseFamily::Gaussian, 0.5, 3).unwrap();
        let a = apply_noise(&x, &spec);
        let b = apply_noise(&x, &spec);
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let other = apply_noise(&x, &NoiseSpec::new(NoiseFamily::Gaussian, 0.5, 4).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn gaussian_sample_std_matches_eps() {
        // Monte-Carlo estimate of the pre-clip noise distribution on a
        // mid-gray image where clipping at eps=0.1 is negligible.
        let n = 10_000;
        let x = vec![0.5f32; n];
        let spec = NoiseSpec::new(NoiseFamily::Gaussian, 0.1, 11).unwrap();
        let out = apply_noise(&x, &spec);
        let diffs: Vec<f64> = out.iter().zip(&x).map(|(&o, &i)| f64::from(o) - f64::from(i)).collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.05, "sample std {std}");
    }

    #[test]
    fn salt_pepper_replacement_fraction() {
        let n = 10_000;
        let x = vec![0.5f32; n];
        let spec = NoiseSpec::new(NoiseFamily::SaltPepper, 0.06, 5).unwrap();
        let out = apply_noise(&x, &spec);
        let replaced = out.iter().filter(|&&v| v != 0.5).count();
        let frac = replaced as f64 / n as f64;
        assert!((frac - 0.06).abs() / 0.06 < 0.10, "replaced fraction {frac}");
        assert!(out.iter().all(|&v| v == 0.0 || v == 0.5 || v == 1.0));
    }

    #[test]
    fn fgsm_zero_eps_is_identity_and_budget_holds() {
        let net = build_net("tiny", [1, 16, 16], 10, 5). unwrap();
        let set = synthetic_shapes(8, 16, 1).unwrap();
        let (batch, labels) = set.batch(&[0, 1, 2, 3, 4, 5, 6, 7]);
        let adv0 = fgsm(&net, &batch, &labels, 0.0).unwrap();
        assert_eq!(adv0.data(), batch.data());

        let eps = 0.07f32;
        let adv = fgsm(&net, &batch, &labels, eps).unwrap();
        for (&a, &b) in adv.data().iter().zip(batch.data()) {
            assert!((a - b).abs() <= eps + 1e-6);
            assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn fgsm_logistic_direction() {
        // One linear layer on a single pixel, class 0 correct: the loss
        // gradient with respect to the pixel is positive when w > 0 pushes
        // class 1... construct w so that increasing x increases the loss.
        use crate::nn::{LayerSpec, TapNet};
        let layers = vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 1, kernel: 1, stride: 1, padding: 0, skip: false },
            LayerSpec::Flatten,
            LayerSpec::Linear { in_features: 4, out_features: 2 },
        ];
        // logit_1 - logit_0 grows with mean pixel value
        let params = vec![
            Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1], vec![0.0]).unwrap(),
            Tensor::new(vec![2, 4], vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(),
        ];
        let net = TapNet::from_parts(layers, vec![0], [1, 2, 2], 2, params, "t".into()).unwrap();
        let x = Tensor::filled(vec![1, 1, 2, 2], 0.5);
        let adv = fgsm(&net, &x, &[0], 0.1).unwrap();
        // dL/dx > 0 for the true class 0, so FGSM moves pixels up
        for &v in adv.data() {
            assert!((v - 0.6).abs() < 1e-6);
        }
    }

    #[test]
    fn transfer_curve_zero_entry_is_clean_accuracy() {
        let net = build_net("tiny", [1, 16, 16], 10, 2).unwrap();
        let target = build_net("tiny", [1, 16, 16], 10, 9).unwrap();
        let set = synthetic_shapes(40, 16, 3).unwrap();
        let curve = transfer_curve(&net, &target, &set, &[0.0, 0.1], 0, 1).unwrap();
        let clean = crate::trainer::evaluate(&target, &set, 0).unwrap();
        assert_eq!(curve.acc[0], clean);
    }
}
