//! Decision-based boundary attack: start from a large adversarial
//! perturbation and walk along the decision boundary toward the original
//! image, shrinking the perturbation while staying adversarial.
//!
//! A state is accepted only if it is still misclassified and its distance
//! to the original does not grow, so the accepted-distance trajectory is
//! non-increasing by construction.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::datasets::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nn::TapNet;
use crate::rng;
use crate::tensor::Tensor;

/// Per-image attack parameters. The adaptation constants (50% target
/// acceptance, x1.5 adjustment on windows of 10, 10 bisection halvings,
/// 50 initialization draws) are standard published defaults.
#[derive(Debug, Clone)]
pub struct BoundaryConfig {
    pub steps: usize,
    pub seed: u64,
    pub init_draws: usize,
    pub bisection_steps: usize,
    pub delta_init: f64,
    pub eps_init: f64,
    pub adapt_window: usize,
    pub adapt_factor: f64,
    pub target_rate: f64,
    /// Keep every accepted state (for invariant checks).
    pub record_states: bool,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        BoundaryConfig {
            steps: 50,
            seed: 0,
            init_draws: 50,
            bisection_steps: 10,
            delta_init: 0.1,
            eps_init: 0.1,
            adapt_window: 10,
            adapt_factor: 1.5,
            target_rate: 0.5,
            record_states: false,
        }
    }
}

/// A finished per-image attack.
#[derive(Debug, Clone)]
pub struct BoundaryRun {
    /// Final adversarial image.
    pub adversarial: Vec<f32>,
    /// L2 distance to the original at every accepted state, in order.
    pub distances: Vec<f64>,
    /// Accepted states, if recording was requested.
    pub states: Option<Vec<Vec<f32>>>,
    pub orth_proposals: usize,
    pub orth_accepts: usize,
    pub inward_proposals: usize,
    pub inward_accepts: usize,
}

/// Outcome of attacking one image.
#[derive(Debug, Clone)]
pub enum BoundaryOutcome {
    /// Attack ran; the perturbation is `x - adversarial`.
    Success(BoundaryRun),
    /// The image was already misclassified, so the minimal perturbation is
    /// 0. Produced by the battery, which checks the clean decision first.
    AlreadyMisclassified,
    /// No adversarial starting point found within the allowed draws.
    InitFailed,
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}

/// Attack one image under a label-only decision function.
///
/// Expects `decision(x) == y`; when the image is already misclassified the
/// walk still runs and converges toward `x` itself (zero perturbation), but
/// callers scoring many images should skip such images up front as the
/// battery does.
pub fn boundary_attack<F>(decision: F, x: &[f32], y: usize, cfg: &BoundaryConfig) -> Result<BoundaryOutcome>
where
    F: Fn(&[f32]) -> usize,
{
    let d = x.len();
    if d == 0 {
        return Err(Error::invalid("boundary_attack", "empty image"));
    }
    if x.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::invalid("boundary_attack", "image must lie in [0,1]^d"));
    }

    let mut rng = rng::stream(cfg.seed, "boundary", 0);

    // Initialization: uniform-random images until one is misclassified.
    let mut start = None;
    for _ in 0..cfg.init_draws {
        let cand: Vec<f32> = (0..d).map(|_| rng.random::<f32>()).collect();
        if decision(&cand) != y {
            start = Some(cand);
            break;
        }
    }
    let Some(start) = start else {
        return Ok(BoundaryOutcome::InitFailed);
    };

    // Bisect toward the original, keeping the blend adversarial.
    let blend = |t: f64| -> Vec<f32> {
        start
            .iter()
            .zip(x)
            .map(|(&s, &o)| ((1.0 - t) * f64::from(s) + t * f64::from(o)) as f32)
            .collect()
    };
    let mut t_adv = 0.0f64;
    let mut t_clean = 1.0f64;
    for _ in 0..cfg.bisection_steps {
        let mid = 0.5 * (t_adv + t_clean);
        if decision(&blend(mid)) != y {
            t_adv = mid;
        } else {
            t_clean = mid;
        }
    }
    let mut adv = blend(t_adv);
    let mut dist = l2(&adv, x);
    let mut distances = vec![dist];
    let mut states = cfg.record_states.then(|| vec![adv.clone()]);

    let mut delta = cfg.delta_init;
    let mut eps_in = cfg.eps_init;
    let mut orth_window: Vec<bool> = Vec::with_capacity(cfg.adapt_window);
    let mut inward_window: Vec<bool> = Vec::with_capacity(cfg.adapt_window);
    let mut orth_proposals = 0;
    let mut orth_accepts = 0;
    let mut inward_proposals = 0;
    let mut inward_accepts = 0;

    for _ in 0..cfg.steps {
        if dist == 0.0 {
            break;
        }

        // Orthogonal proposal: Gaussian direction scaled to delta*dist,
        // radial component removed, renormalized back onto the sphere of
        // radius dist around x, clipped into the box.
        let mut eta: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eta_norm = eta.iter().map(|v| v * v).sum::<f64>().sqrt();
        if eta_norm == 0.0 {
            continue;
        }
        let scale = delta * dist / eta_norm;
        let radial: Vec<f64> = adv.iter().zip(x).map(|(&a, &o)| (f64::from(a) - f64::from(o)) / dist).collect();
        let dot: f64 = eta.iter().zip(&radial).map(|(e, r)| e * scale * r).sum();
        for (e, r) in eta.iter_mut().zip(&radial) {
            *e = *e * scale - dot * r;
        }
        let mut cand: Vec<f64> = adv
            .iter()
            .zip(&eta)
            .map(|(&a, e)| f64::from(a) + e)
            .collect();
        let cand_dist = cand.iter().zip(x).map(|(c, &o)| (c - f64::from(o)).powi(2)).sum::<f64>().sqrt();
        if cand_dist > 0.0 {
            let renorm = dist / cand_dist;
            for (c, &o) in cand.iter_mut().zip(x) {
                *c = (f64::from(o) + (*c - f64::from(o)) * renorm).clamp(0.0, 1.0);
            }
        }
        let cand32: Vec<f32> = cand.iter().map(|&v| v as f32).collect();
        let cand_dist = l2(&cand32, x);

        orth_proposals += 1;
        let orth_ok = cand_dist <= dist && decision(&cand32) != y;
        orth_window.push(orth_ok);

        if orth_ok {
            orth_accepts += 1;
            adv = cand32;
            dist = cand_dist;
            distances.push(dist);
            if let Some(s) = &mut states {
                s.push(adv.clone());
            }

            // Inward step: move toward x by a fraction of the distance.
            let inward: Vec<f32> = adv
                .iter()
                .zip(x)
                .map(|(&a, &o)| {
                    let av = f64::from(a);
                    ((av + eps_in * (f64::from(o) - av)).clamp(0.0, 1.0)) as f32
                })
                .collect();
            let inward_dist = l2(&inward, x);
            inward_proposals += 1;
            let inward_ok = inward_dist <= dist && decision(&inward) != y;
            inward_window.push(inward_ok);
            if inward_ok {
                inward_accepts += 1;
                adv = inward;
                dist = inward_dist;
                distances.push(dist);
                if let Some(s) = &mut states {
                    s.push(adv.clone());
                }
            }
        }

        if orth_window.len() >= cfg.adapt_window {
            let rate = orth_window.iter().filter(|&&b| b).count() as f64 / orth_window.len() as f64;
            if rate < cfg.target_rate {
                delta /= cfg.adapt_factor;
            } else {
                delta *= cfg.adapt_factor;
            }
            delta = delta.clamp(1e-8, 1e3);
            orth_window.clear();
        }
        if inward_window.len() >= cfg.adapt_window {
            let rate = inward_window.iter().filter(|&&b| b).count() as f64 / inward_window.len() as f64;
            if rate < cfg.target_rate {
                eps_in /= cfg.adapt_factor;
            } else {
                eps_in *= cfg.adapt_factor;
            }
            eps_in = eps_in.clamp(1e-8, 1.0);
            inward_window.clear();
        }
    }

    Ok(BoundaryOutcome::Success(BoundaryRun {
        adversarial: adv,
        distances,
        states,
        orth_proposals,
        orth_accepts,
        inward_proposals,
        inward_accepts,
    }))
}

/// Median over images of the squared L2 perturbation norm per pixel:
/// `median_i(||eta_i||_2^2 / d)`.
pub fn boundary_score(perturbations: &[Vec<f32>]) -> Result<f64> {
    if perturbations.is_empty() {
        return Err(Error::invalid("boundary_score", "no perturbations"));
    }
    let d = perturbations[0].len();
    if d == 0 {
        return Err(Error::invalid("boundary_score", "zero-length perturbation"));
    }
    let mut per_image: Vec<f64> = Vec::with_capacity(perturbations.len());
    for (i, eta) in perturbations.iter().enumerate() {
        if eta.len() != d {
            return Err(Error::shape("boundary_score", format!("perturbation {i} has {} pixels, expected {d}", eta.len())));
        }
        let sq: f64 = eta.iter().map(|&v| f64::from(v) * f64::from(v)).sum();
        per_image.push(sq / d as f64);
    }
    per_image.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = per_image.len();
    Ok(if n % 2 == 1 {
        per_image[n / 2]
    } else {
        0.5 * (per_image[n / 2 - 1] + per_image[n / 2])
    })
}

/// Battery settings: how many test images, attack steps, and repeat runs.
#[derive(Debug, Clone)]
pub struct BatteryConfig {
    pub steps: usize,
    pub images: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Collect the first repeat's perturbations as an image stack.
    pub keep_perturbations: bool,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        BatteryConfig { steps: 50, images: 1000, repeats: 5, seed: 0, keep_perturbations: false }
    }
}

/// One repeat of the battery.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RepeatOutcome {
    pub score: f64,
    pub init_failures: usize,
    pub already_misclassified: usize,
    /// Per attacked image: squared L2 perturbation norm divided by pixel
    /// count (init failures excluded).
    pub per_image_sq_per_pixel: Vec<f64>,
}

/// Full battery result.
#[derive(Debug, Clone)]
pub struct BoundaryReport {
    pub per_repeat: Vec<RepeatOutcome>,
    /// Mean of the per-repeat median scores.
    pub mean_score: f64,
    /// Perturbations (x_original - x_adversarial) from the first repeat,
    /// when requested.
    pub perturbations: Option<Tensor>,
}

/// Run the boundary attack over a seeded sample of a dataset, several
/// repeats, images attacked in parallel.
pub fn boundary_battery(net: &TapNet, set: &LabeledImageSet, cfg: &BatteryConfig) -> Result<BoundaryReport> {
    let subset = super::attack_subset(set, cfg.images, cfg.seed)?;
    let [c, h, w] = subset.image_shape();
    let decision = |img: &[f32]| -> usize {
        let batch = Tensor::new(vec![1, c, h, w], img.to_vec()).expect("image shape");
        net.predict(&batch).expect("forward on attack image")[0]
    };

    let mut per_repeat = Vec::with_capacity(cfg.repeats);
    let mut kept: Option<Tensor> = None;
    for rep in 0..cfg.repeats {
        let outcomes: Vec<(BoundaryOutcome, usize)> = (0..subset.len())
            .into_par_iter()
            .map(|i| {
                if decision(subset.image(i)) != subset.label(i) {
                    return (BoundaryOutcome::AlreadyMisclassified, i);
                }
                let per_image = BoundaryConfig {
                    steps: cfg.steps,
                    seed: rng::derive_seed(cfg.seed, "battery", (rep * subset.len() + i) as u64),
                    ..BoundaryConfig::default()
                };
                let outcome = boundary_attack(&decision, subset.image(i), subset.label(i), &per_image)
                    .expect("valid attack inputs");
                (outcome, i)
            })
            .collect();

        let mut etas: Vec<Vec<f32>> = Vec::new();
        let mut init_failures = 0usize;
        let mut already = 0usize;
        for (outcome, i) in &outcomes {
            match outcome {
                BoundaryOutcome::Success(run) => {
                    let eta: Vec<f32> = subset
                        .image(*i)
                        .iter()
                        .zip(&run.adversarial)
                        .map(|(&o, &a)| o - a)
                        .collect();
                    etas.push(eta);
                }
                BoundaryOutcome::AlreadyMisclassified => {
                    already += 1;
                    etas.push(vec![0.0; c * h * w]);
                }
                BoundaryOutcome::InitFailed => init_failures += 1,
            }
        }
        if etas.is_empty() {
            return Err(Error::Degenerate {
                context: "boundary_battery".into(),
                details: "every image failed initialization".into(),
            });
        }
        let score = boundary_score(&etas)?;
        let per_image_sq: Vec<f64> = etas
            .iter()
            .map(|e| e.iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>() / (c * h * w) as f64)
            .collect();
        if rep == 0 && cfg.keep_perturbations {
            let mut data = Vec::with_capacity(etas.len() * c * h * w);
            for e in &etas {
                data.extend_from_slice(e);
            }
            kept = Some(Tensor::new(vec![etas.len(), c, h, w], data)?);
        }
        per_repeat.push(RepeatOutcome {
            score,
            init_failures,
            already_misclassified: already,
            per_image_sq_per_pixel: per_image_sq,
        });
    }

    let mean_score = per_repeat.iter().map(|r| r.score).sum::<f64>() / per_repeat.len() as f64;
    Ok(BoundaryReport { per_repeat, mean_score, perturbations: kept })
}
