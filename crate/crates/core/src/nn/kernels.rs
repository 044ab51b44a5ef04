//! Plain-tensor kernels for convolution, pooling, and linear layers.
//!
//! Forward and backward passes are free functions over raw slices so the
//! same code serves tape-free inference and recorded training. Convolutions
//! go through im2col and a single-threaded sgemm; batch-level parallelism
//! uses fixed work splits so results do not depend on the thread count.

use rayon::prelude::*;

use crate::tensor::matmul;

/// Output spatial size for a conv/pool window.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Copy one image (C,H,W) into a zero-padded buffer (C, H+2p, W+2p).
fn pad_image(src: &[f32], c: usize, h: usize, w: usize, p: usize, dst: &mut [f32]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    dst.fill(0.0);
    for ch in 0..c {
        for y in 0..h {
            let s = ch * h * w + y * w;
            let d = ch * hp * wp + (y + p) * wp + p;
            dst[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
}

/// im2col over a padded image: rows are (c, ky, kx) patch coordinates,
/// columns are output positions, so `weight (Cout, C*kh*kw) · cols` yields
/// the convolution output directly.
fn im2col(
    padded: &[f32],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    let row_len = ho * wo;
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh * kw + ky * kw + kx) * row_len;
                for oy in 0..ho {
                    let src = ch * hp * wp + (oy * stride + ky) * wp + kx;
                    let dst = row + oy * wo;
                    if stride == 1 {
                        cols[dst..dst + wo].copy_from_slice(&padded[src..src + wo]);
                    } else {
                        for ox in 0..wo {
                            cols[dst + ox] = padded[src + ox * stride];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back into a padded image buffer.
fn col2im(
    cols: &[f32],
    c: usize,
    hp: usize,
    wp: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ho: usize,
    wo: usize,
    padded: &mut [f32],
) {
    let row_len = ho * wo;
    padded.fill(0.0);
    for ch in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ch * kh * kw + ky * kw + kx) * row_len;
                for oy in 0..ho {
                    let dst = ch * hp * wp + (oy * stride + ky) * wp + kx;
                    let src = row + oy * wo;
                    for ox in 0..wo {
                        padded[dst + ox * stride] += cols[src + ox];
                    }
                }
            }
        }
    }
}

fn unpad_image(padded: &[f32], c: usize, h: usize, w: usize, p: usize, dst: &mut [f32]) {
    let (hp, wp) = (h + 2 * p, w + 2 * p);
    for ch in 0..c {
        for y in 0..h {
            let s = ch * hp * wp + (y + p) * wp + p;
            let d = ch * h * w + y * w;
            dst[d..d + w].copy_from_slice(&padded[s..s + w]);
        }
    }
}

pub struct ConvDims {
    pub batch: usize,
    pub in_ch: usize,
    pub h: usize,
    pub w: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        conv_out_dim(self.h, self.kh, self.stride, self.padding)
    }
    pub fn out_w(&self) -> usize {
        conv_out_dim(self.w, self.kw, self.stride, self.padding)
    }
}

/// Batched 2-d convolution: input (B,C,H,W), weight (Cout,C,kh,kw),
/// bias (Cout) -> output (B,Cout,Ho,Wo).
pub fn conv2d_forward(dims: &ConvDims, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let (ho, wo) = (dims.out_h(), dims.out_w());
    let (hp, wp) = (dims.h + 2 * dims.padding, dims.w + 2 * dims.padding);
    let img = dims.in_ch * dims.h * dims.w;
    let out_img = dims.out_ch * ho * wo;
    let krows = dims.in_ch * dims.kh * dims.kw;

    out.par_chunks_mut(out_img)
        .zip(input.par_chunks(img))
        .for_each(|(out_b, in_b)| {
            let mut padded = vec![0.0f32; dims.in_ch * hp * wp];
            let mut cols = vec![0.0f32; krows * ho * wo];
            pad_image(in_b, dims.in_ch, dims.h, dims.w, dims.padding, &mut padded);
            im2col(&padded, dims.in_ch, hp, wp, dims.kh, dims.kw, dims.stride, ho, wo, &mut cols);
            matmul(dims.out_ch, krows, ho * wo, weight, &cols, out_b);
            for oc in 0..dims.out_ch {
                let b = bias[oc];
                for v in &mut out_b[oc * ho * wo..(oc + 1) * ho * wo] {
                    *v += b;
                }
            }
        });
}

/// Gradients of a batched convolution. Any of the output slots may be `None`
/// when that gradient is not needed.
pub fn conv2d_backward(
    dims: &ConvDims,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_input: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    let (ho, wo) = (dims.out_h(), dims.out_w());
    let (hp, wp) = (dims.h + 2 * dims.padding, dims.w + 2 * dims.padding);
    let img = dims.in_ch * dims.h * dims.w;
    let out_img = dims.out_ch * ho * wo;
    let krows = dims.in_ch * dims.kh * dims.kw;

    if let Some(gi) = grad_input {
        // dX = col2im(Wᵀ · dY), per image.
        let mut wt = vec![0.0f32; krows * dims.out_ch];
        for oc in 0..dims.out_ch {
            for r in 0..krows {
                wt[r * dims.out_ch + oc] = weight[oc * krows + r];
            }
        }
        gi.par_chunks_mut(img)
            .zip(grad_out.par_chunks(out_img))
            .for_each(|(gi_b, go_b)| {
                let mut dcols = vec![0.0f32; krows * ho * wo];
                let mut padded = vec![0.0f32; dims.in_ch * hp * wp];
                matmul(krows, dims.out_ch, ho * wo, &wt, go_b, &mut dcols);
                col2im(&dcols, dims.in_ch, hp, wp, dims.kh, dims.kw, dims.stride, ho, wo, &mut padded);
                unpad_image(&padded, dims.in_ch, dims.h, dims.w, dims.padding, gi_b);
            });
    }

    if let Some(gw) = grad_weight {
        // dW[oc][r] = Σ_b dY_b[oc] · cols_bᵀ[r]; accumulate per-image results
        // in index order so the sum is independent of scheduling.
        let per_image: Vec<Vec<f32>> = (0..dims.batch)
            .into_par_iter()
            .map(|b| {
                let mut padded = vec![0.0f32; dims.in_ch * hp * wp];
                let mut cols = vec![0.0f32; krows * ho * wo];
                pad_image(&input[b * img..(b + 1) * img], dims.in_ch, dims.h, dims.w, dims.padding, &mut padded);
                im2col(&padded, dims.in_ch, hp, wp, dims.kh, dims.kw, dims.stride, ho, wo, &mut cols);
                // cols is (krows, ho*wo); we need dY (out_ch, ho*wo) · colsᵀ.
                let mut colst = vec![0.0f32; ho * wo * krows];
                for r in 0..krows {
                    for p in 0..ho * wo {
                        colst[p * krows + r] = cols[r * ho * wo + p];
                    }
                }
                let mut dw = vec![0.0f32; dims.out_ch * krows];
                matmul(dims.out_ch, ho * wo, krows, &grad_out[b * out_img..(b + 1) * out_img], &colst, &mut dw);
                dw
            })
            .collect();
        gw.fill(0.0);
        for dw in &per_image {
            for (g, &d) in gw.iter_mut().zip(dw.iter()) {
                *g += d;
            }
        }
    }

    if let Some(gb) = grad_bias {
        gb.fill(0.0);
        for b in 0..dims.batch {
            for oc in 0..dims.out_ch {
                let base = b * out_img + oc * ho * wo;
                let mut acc = 0.0f32;
                for p in 0..ho * wo {
                    acc += grad_out[base + p];
                }
                gb[oc] += acc;
            }
        }
    }
}

/// Non-overlapping average pooling over (B,C,H,W) with window `size`.
/// H and W must be divisible by `size`.
pub fn avg_pool_forward(batch: usize, c: usize, h: usize, w: usize, size: usize, input: &[f32], out: &mut [f32]) {
    let (ho, wo) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    for b in 0..batch {
        for ch in 0..c {
            let ibase = (b * c + ch) * h * w;
            let obase = (b * c + ch) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0f32;
                    for ky in 0..size {
                        let row = ibase + (oy * size + ky) * w + ox * size;
                        for kx in 0..size {
                            acc += input[row + kx];
                        }
                    }
                    out[obase + oy * wo + ox] = acc * inv;
                }
            }
        }
    }
}

pub fn avg_pool_backward(batch: usize, c: usize, h: usize, w: usize, size: usize, grad_out: &[f32], grad_in: &mut [f32]) {
    let (ho, wo) = (h / size, w / size);
    let inv = 1.0 / (size * size) as f32;
    for b in 0..batch {
        for ch in 0..c {
            let ibase = (b * c + ch) * h * w;
            let obase = (b * c + ch) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = grad_out[obase + oy * wo + ox] * inv;
                    for ky in 0..size {
                        let row = ibase + (oy * size + ky) * w + ox * size;
                        for kx in 0..size {
                            grad_in[row + kx] = g;
                        }
                    }
                }
            }
        }
    }
}

/// y (B,O) = x (B,F) · Wᵀ (F,O) + bias, weight stored (O,F).
pub fn linear_forward(batch: usize, in_f: usize, out_f: usize, input: &[f32], weight: &[f32], bias: &[f32], out: &mut [f32]) {
    let mut wt = vec![0.0f32; in_f * out_f];
    for o in 0..out_f {
        for i in 0..in_f {
            wt[i * out_f + o] = weight[o * in_f + i];
        }
    }
    matmul(batch, in_f, out_f, input, &wt, out);
    for b in 0..batch {
        for o in 0..out_f {
            out[b * out_f + o] += bias[o];
        }
    }
}

pub fn linear_backward(
    batch: usize,
    in_f: usize,
    out_f: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_input: Option<&mut [f32]>,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
) {
    if let Some(gi) = grad_input {
        // dX = dY (B,O) · W (O,F)
        matmul(batch, out_f, in_f, grad_out, weight, gi);
    }
    if let Some(gw) = grad_weight {
        // dW = dYᵀ (O,B) · X (B,F)
        let mut gt = vec![0.0f32; out_f * batch];
        for b in 0..batch {
            for o in 0..out_f {
                gt[o * batch + b] = grad_out[b * out_f + o];
            }
        }
        matmul(out_f, batch, in_f, &gt, input, gw);
    }
    if let Some(gb) = grad_bias {
        gb.fill(0.0);
        for b in 0..batch {
            for o in 0..out_f {
                gb[o] += grad_out[b * out_f + o];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution used as a structural sanity check here;
    /// the full f64 oracle comparison lives in the integration tests.
    fn conv_naive(dims: &ConvDims, input: &[f32], weight: &[f32], bias: &[f32]) -> Vec<f32> {
        let (ho, wo) = (dims.out_h(), dims.out_w());
        let mut out = vec![0.0f32; dims.batch * dims.out_ch * ho * wo];
        for b in 0..dims.batch {
            for oc in 0..dims.out_ch {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = bias[oc];
                        for ic in 0..dims.in_ch {
                            for ky in 0..dims.kh {
                                for kx in 0..dims.kw {
                                    let iy = (oy * dims.stride + ky) as isize - dims.padding as isize;
                                    let ix = (ox * dims.stride + kx) as isize - dims.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < dims.h && (ix as usize) < dims.w {
                                        let iv = input[((b * dims.in_ch + ic) * dims.h + iy as usize) * dims.w + ix as usize];
                                        let wv = weight[((oc * dims.in_ch + ic) * dims.kh + ky) * dims.kw + kx];
                                        acc += iv * wv;
                                    }
                                }
                            }
                        }
                        out[((b * dims.out_ch + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_forward_matches_naive() {
        let dims = ConvDims { batch: 2, in_ch: 3, h: 5, w: 6, out_ch: 4, kh: 3, kw: 3, stride: 1, padding: 1 };
        let n_in = dims.batch * dims.in_ch * dims.h * dims.w;
        let n_w = dims.out_ch * dims.in_ch * dims.kh * dims.kw;
        let input: Vec<f32> = (0..n_in).map(|i| ((i * 37 % 101) as f32) / 101.0 - 0.5).collect();
        let weight: Vec<f32> = (0..n_w).map(|i| ((i * 53 % 97) as f32) / 97.0 - 0.5).collect();
        let bias = vec![0.1, -0.2, 0.3, 0.0];
        let mut out = vec![0.0f32; dims.batch * dims.out_ch * dims.out_h() * dims.out_w()];
        conv2d_forward(&dims, &input, &weight, &bias, &mut out);
        let expect = conv_naive(&dims, &input, &weight, &bias);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn conv_strided_matches_naive() {
        let dims = ConvDims { batch: 1, in_ch: 2, h: 7, w: 7, out_ch: 3, kh: 3, kw: 3, stride: 2, padding: 0 };
        let n_in = dims.in_ch * dims.h * dims.w;
        let n_w = dims.out_ch * dims.in_ch * 9;
        let input: Vec<f32> = (0..n_in).map(|i| (i as f32).sin()).collect();
        let weight: Vec<f32> = (0..n_w).map(|i| (i as f32 * 0.7).cos()).collect();
        let bias = vec![0.0; 3];
        let mut out = vec![0.0f32; dims.out_ch * dims.out_h() * dims.out_w()];
        conv2d_forward(&dims, &input, &weight, &bias, &mut out);
        let expect = conv_naive(&dims, &input, &weight, &bias);
        for (a, b) in out.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn avg_pool_round_trip() {
        let input: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let mut out = vec![0.0f32; 4];
        avg_pool_forward(1, 1, 4, 4, 2, &input, &mut out);
        assert_eq!(out, vec![2.5, 4.5, 10.5, 12.5]);
        let mut gi = vec![0.0f32; 16];
        avg_pool_backward(1, 1, 4, 4, 2, &[4.0, 0.0, 0.0, 0.0], &mut gi);
        assert_eq!(gi[0], 1.0);
        assert_eq!(gi[1], 1.0);
        assert_eq!(gi[4], 1.0);
        assert_eq!(gi[5], 1.0);
        assert_eq!(gi[2], 0.0);
    }

    #[test]
    fn linear_matches_naive() {
        let (b, f, o) = (3, 5, 4);
        let x: Vec<f32> = (0..b * f).map(|i| i as f32 * 0.1).collect();
        let w: Vec<f32> = (0..o * f).map(|i| (i as f32 * 0.31).sin()).collect();
        let bias: Vec<f32> = (0..o).map(|i| i as f32).collect();
        let mut y = vec![0.0f32; b * o];
        linear_forward(b, f, o, &x, &w, &bias, &mut y);
        for bi in 0..b {
            for oi in 0..o {
                let mut acc = bias[oi];
                for fi in 0..f {
                    acc += x[bi * f + fi] * w[oi * f + fi];
                }
                assert!((y[bi * o + oi] - acc).abs() < 1e-5);
            }
        }
    }
}
