//! Straight-line f64 reference implementations and finite-difference
//! helpers, used by the test suites as oracles independent of the
//! optimized kernels and the gradient tape.
//!
//! Everything here favors the most literal possible arithmetic: nested
//! loops in declaration order, no blocking, no reuse, f64 throughout.

use crate::nn::LayerSpec;

/// arctanh via the log identity, independent of `f64::atanh`.
pub fn atanh_ref(x: f64) -> f64 {
    0.5 * ((1.0 + x) / (1.0 - x)).ln()
}

/// Direct nested-loop convolution, exact order: batch, out-channel, output
/// row, output column, then in-channel and kernel offsets.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_ref(
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * padding - kernel) / stride + 1;
    let wo = (w + 2 * padding - kernel) / stride + 1;
    let mut out = vec![0.0f64; batch * out_ch * ho * wo];
    for b in 0..batch {
        for oc in 0..out_ch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias[oc];
                    for ic in 0..in_ch {
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    let iv = input[((b * in_ch + ic) * h + iy as usize) * w + ix as usize];
                                    let wv = weight[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                                    acc += iv * wv;
                                }
                            }
                        }
                    }
                    out[((b * out_ch + oc) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn relu_ref(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

pub fn avg_pool_ref(batch: usize, c: usize, h: usize, w: usize, size: usize, x: &[f64]) -> Vec<f64> {
    let (ho, wo) = (h / size, w / size);
    let mut out = vec![0.0f64; batch * c * ho * wo];
    for b in 0..batch {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ky in 0..size {
                        for kx in 0..size {
                            acc += x[((b * c + ch) * h + oy * size + ky) * w + ox * size + kx];
                        }
                    }
                    out[((b * c + ch) * ho + oy) * wo + ox] = acc / (size * size) as f64;
                }
            }
        }
    }
    out
}

pub fn linear_ref(batch: usize, in_f: usize, out_f: usize, x: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; batch * out_f];
    for b in 0..batch {
        for o in 0..out_f {
            let mut acc = bias[o];
            for i in 0..in_f {
                acc += x[b * in_f + i] * weight[o * in_f + i];
            }
            out[b * out_f + o] = acc;
        }
    }
    out
}

/// Mean softmax cross-entropy over a batch, textbook formula.
pub fn softmax_ce_ref(logits: &[f64], k: usize, labels: &[usize]) -> f64 {
    let batch = labels.len();
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse: f64 = row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln() + max;
        total += lse - row[y];
    }
    total / batch as f64
}

pub fn softmax_ref(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Pairwise centered cosine of row vectors: the formula applied literally.
pub fn cosine_rows_ref(rows: &[f64], p: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; p * p];
    let centered: Vec<Vec<f64>> = (0..p)
        .map(|i| {
            let row = &rows[i * f..(i + 1) * f];
            let mean = row.iter().sum::<f64>() / f as f64;
            row.iter().map(|&x| x - mean).collect()
        })
        .collect();
    for i in 0..p {
        for j in 0..p {
            if i == j {
                out[i * p + j] = 1.0;
                continue;
            }
            let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
            let ni: f64 = centered[i].iter().map(|x| x * x).sum::<f64>().sqrt();
            let nj: f64 = centered[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            out[i * p + j] = dot / (ni * nj);
        }
    }
    out
}

/// Masked arctanh loss over ordered pairs, with the same clamp convention as
/// the production loss but arctanh evaluated via the log identity.
pub fn sim_loss_ref(s: &[f64], n: usize, pairs: &[(usize, usize)], target_atanh: &[f64], eps: f64) -> f64 {
    let (lo, hi) = (-1.0 + eps, 1.0 - eps);
    let mut total = 0.0;
    for (&(i, j), &t) in pairs.iter().zip(target_atanh) {
        for &v in &[s[i * n + j], s[j * n + i]] {
            let c = v.clamp(lo, hi);
            let r = atanh_ref(c) - t;
            total += r * r;
        }
    }
    total
}

/// Full reference similarity pipeline: per-layer centered cosine, softmax
/// mixing, masked arctanh loss.
pub fn sim_pipeline_ref(
    feats: &[(Vec<f64>, usize, usize)],
    gamma_logits: &[f64],
    pairs: &[(usize, usize)],
    target_atanh: &[f64],
    eps: f64,
) -> f64 {
    let p = feats[0].1;
    let gamma = softmax_ref(gamma_logits);
    let mut mixed = vec![0.0f64; p * p];
    for (l, (rows, pl, fl)) in feats.iter().enumerate() {
        assert_eq!(*pl, p);
        let s = cosine_rows_ref(rows, *pl, *fl);
        for (m, v) in mixed.iter_mut().zip(s) {
            *m += gamma[l] * v;
        }
    }
    sim_loss_ref(&mixed, p, pairs, target_atanh, eps)
}

/// Two-pass textbook Pearson correlation.
pub fn pearson_ref(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Reference forward pass over a layer list in f64. Returns the logits and
/// every tap feature (flattened, with its row count and width).
pub fn forward_ref(
    layers: &[LayerSpec],
    taps: &[usize],
    input_shape: [usize; 3],
    batch: usize,
    params: &[Vec<f64>],
    input: &[f64],
) -> (Vec<f64>, Vec<(Vec<f64>, usize, usize)>) {
    let [mut c, mut h, mut w] = input_shape;
    let mut cur = input.to_vec();
    let mut flat_features = 0usize;
    let mut tap_out = Vec::new();
    let mut pi = 0;
    for (li, layer) in layers.iter().enumerate() {
        match layer {
            LayerSpec::Conv2d { in_ch, out_ch, kernel, stride, padding, skip } => {
                assert_eq!(c, *in_ch);
                let (mut out, ho, wo) = conv2d_ref(
                    batch, c, h, w, *out_ch, *kernel, *stride, *padding, &cur, &params[pi], &params[pi + 1],
                );
                if *skip {
                    for (o, &x) in out.iter_mut().zip(cur.iter()) {
                        *o += x;
                    }
                }
                cur = out;
                c = *out_ch;
                h = ho;
                w = wo;
                pi += 2;
            }
            LayerSpec::Relu => cur = relu_ref(&cur),
            LayerSpec::AvgPool { size } => {
                cur = avg_pool_ref(batch, c, h, w, *size, &cur);
                h /= size;
                w /= size;
            }
            LayerSpec::Flatten => {
                flat_features = c * h * w;
            }
            LayerSpec::Linear { in_features, out_features } => {
                assert_eq!(flat_features, *in_features);
                cur = linear_ref(batch, *in_features, *out_features, &cur, &params[pi], &params[pi + 1]);
                flat_features = *out_features;
                pi += 2;
            }
        }
        if taps.contains(&li) {
            tap_out.push((cur.clone(), batch, cur.len() / batch));
        }
    }
    (cur, tap_out)
}

/// Deterministic smooth test image whose amplitude spectrum falls off as
/// `r^{-q}`: a synthetic stand-in for natural-image statistics, used to
/// calibrate spectral categorization. Pixels land in [0.15, 0.85] so small
/// additive corruptions stay clear of the clipping boundaries.
pub fn power_law_image(side: usize, q: f64, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut next_phase = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 33) as f64 / (1u64 << 31) as f64) * std::f64::consts::TAU
    };
    let mut img = vec![0.0f64; side * side];
    for u in 0..=side / 2 {
        for v in 0..=side / 2 {
            if u == 0 && v == 0 {
                continue;
            }
            let r = ((u * u + v * v) as f64).sqrt();
            let amp = r.powf(-q);
            let phase = next_phase();
            for y in 0..side {
                for x in 0..side {
                    let arg = std::f64::consts::TAU * (u * y + v * x) as f64 / side as f64 + phase;
                    img[y * side + x] += amp * arg.cos();
                }
            }
        }
    }
    let max = img.iter().cloned().fold(f64::MIN, f64::max);
    let min = img.iter().cloned().fold(f64::MAX, f64::min);
    let span = (max - min).max(1e-12);
    for v in &mut img {
        *v = 0.15 + 0.7 * (*v - min) / span;
    }
    img
}

/// Central finite differences of `eval` at `point` with step `h`.
pub fn finite_difference(eval: &mut dyn FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    let mut grad = vec![0.0f64; point.len()];
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = eval(&x);
        x[i] = orig - h;
        let fm = eval(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative L2 error between a computed gradient (f32) and a reference (f64).
pub fn rel_l2_error(computed: &[f32], reference: &[f64]) -> f64 {
    assert_eq!(computed.len(), reference.len());
    let mut diff = 0.0f64;
    let mut norm = 0.0f64;
    for (&a, &b) in computed.iter().zip(reference) {
        let d = f64::from(a) - b;
        diff += d * d;
        norm += b * b;
    }
    (diff / norm.max(1e-16)).sqrt()
}

pub fn to_f64(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&x| f64::from(x)).collect()
}

pub fn to_f32(xs: &[f64]) -> Vec<f32> {
    xs.iter().map(|&x| x as f32).collect()
}
