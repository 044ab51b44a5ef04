//! Fourier analysis of perturbations and corruptions.
//!
//! Convention: unnormalized forward DFT, `F(u,v) = sum_x x(t) e^{-2 pi i ...}`,
//! so Parseval reads `sum |F|^2 = H*W * sum |x|^2`. Spectra are computed on a
//! canonical circular shift of the input (the lexicographically smallest
//! rotation), which leaves the true spectrum unchanged and makes power
//! spectra of translated images identical bit for bit.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Dense f64 matrix used for spectra.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(h: usize, w: usize) -> Self {
        Grid { h, w, data: vec![0.0; h * w] }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    /// `log(1 + x)` view for visualization.
    pub fn log1p_view(&self) -> Grid {
        Grid { h: self.h, w: self.w, data: self.data.iter().map(|&v| v.ln_1p()).collect() }
    }

    /// One CSV row per grid row.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> crate::error::Result<()> {
        for row in self.data.chunks(self.w) {
            let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn image_grid(t: &Tensor, context: &str) -> Result<(usize, usize, Vec<f32>)> {
    match t.shape() {
        [h, w] => Ok((*h, *w, t.data().to_vec())),
        [1, h, w] => Ok((*h, *w, t.data().to_vec())),
        other => Err(Error::shape(context, format!("expected a single-channel HxW image, got {other:?}"))),
    }
}

/// Lexicographically smallest circular 2-d shift of the image, compared by
/// f32 total order. Ties resolve to the smallest (dy, dx).
fn canonical_shift(h: usize, w: usize, img: &[f32]) -> Vec<f32> {
    let better = |cand: (usize, usize), best: (usize, usize)| -> bool {
        for y in 0..h {
            for x in 0..w {
                let a = img[((y + cand.0) % h) * w + (x + cand.1) % w];
                let b = img[((y + best.0) % h) * w + (x + best.1) % w];
                match a.total_cmp(&b) {
                    std::cmp::Ordering::Less => return true,
                    std::cmp::Ordering::Greater => return false,
                    std::cmp::Ordering::Equal => {}
                }
            }
        }
        false
    };
    let mut best = (0usize, 0usize);
    for dy in 0..h {
        for dx in 0..w {
            if (dy, dx) != (0, 0) && better((dy, dx), best) {
                best = (dy, dx);
            }
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = img[((y + best.0) % h) * w + (x + best.1) % w];
        }
    }
    out
}

/// 2-d DFT (rows then columns), unnormalized forward convention.
fn dft2d(h: usize, w: usize, img: &[f64]) -> Vec<Complex<f64>> {
    let mut planner = FftPlanner::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);

    let mut buf: Vec<Complex<f64>> = img.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    buf
}

fn fftshift(h: usize, w: usize, data: Vec<f64>) -> Vec<f64> {
    let mut out = vec![0.0f64; h * w];
    for u in 0..h {
        for v in 0..w {
            out[((u + h / 2) % h) * w + (v + w / 2) % w] = data[u * w + v];
        }
    }
    out
}

/// Centered power spectrum `|DFT(x)|^2` of a single-channel image.
pub fn fourier_power(perturbation: &Tensor) -> Result<Grid> {
    let (h, w, img) = image_grid(perturbation, "fourier_power")?;
    let canonical = canonical_shift(h, w, &img);
    let img64: Vec<f64> = canonical.iter().map(|&v| f64::from(v)).collect();
    let spectrum = dft2d(h, w, &img64);
    let power: Vec<f64> = spectrum.iter().map(|c| c.norm_sqr()).collect();
    Ok(Grid { h, w, data: fftshift(h, w, power) })
}

/// Centered magnitude spectrum `|DFT(x)|` of a single-channel image.
pub fn magnitude_spectrum(image: &Tensor) -> Result<Grid> {
    let (h, w, img) = image_grid(image, "magnitude_spectrum")?;
    let canonical = canonical_shift(h, w, &img);
    let img64: Vec<f64> = canonical.iter().map(|&v| f64::from(v)).collect();
    let spectrum = dft2d(h, w, &img64);
    let mag: Vec<f64> = spectrum.iter().map(|c| c.norm()).collect();
    Ok(Grid { h, w, data: fftshift(h, w, mag) })
}

/// Radial profile of a centered spectrum.
///
/// Bin `r` holds pixels at integer radius `floor(sqrt(du^2 + dv^2))` from
/// the center; the last bin (`floor(min(H,W)/2)`) also absorbs the corner
/// radii beyond it, so the bins partition the whole spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile {
    pub sum: Vec<f64>,
    pub count: Vec<usize>,
}

impl RadialProfile {
    pub fn len(&self) -> usize {
        self.sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sum.is_empty()
    }

    pub fn mean(&self, r: usize) -> f64 {
        if self.count[r] == 0 {
            0.0
        } else {
            self.sum[r] / self.count[r] as f64
        }
    }

    pub fn means(&self) -> Vec<f64> {
        (0..self.len()).map(|r| self.mean(r)).collect()
    }

    pub fn total(&self) -> f64 {
        self.sum.iter().sum()
    }

    /// CSV with header `radius,mean,count`.
    pub fn write_csv(&self, w: &mut impl std::io::Write) -> crate::error::Result<()> {
        writeln!(w, "radius,mean,count")?;
        for r in 0..self.len() {
            writeln!(w, "{r},{},{}", self.mean(r), self.count[r])?;
        }
        Ok(())
    }
}

/// Bin a centered spectrum by integer radius from the center bin.
pub fn radial_spectrum(power: &Grid) -> RadialProfile {
    let (cy, cx) = (power.h / 2, power.w / 2);
    let rmax = power.h.min(power.w) / 2;
    let mut sum = vec![0.0f64; rmax + 1];
    let mut count = vec![0usize; rmax + 1];
    for y in 0..power.h {
        for x in 0..power.w {
            let dy = y as f64 - cy as f64;
            let dx = x as f64 - cx as f64;
            let r = ((dy * dy + dx * dx).sqrt().floor() as usize).min(rmax);
            sum[r] += power.at(y, x);
            count[r] += 1;
        }
    }
    RadialProfile { sum, count }
}

/// Mean magnitude spectrum of corruption residuals `C(X) - X` over an image
/// set, plus the log(1+x) view used for visualization.
pub fn corruption_spectrum(
    clean: &[Tensor],
    corrupt: &dyn Fn(usize, &Tensor) -> Tensor,
) -> Result<(Grid, Grid)> {
    if clean.is_empty() {
        return Err(Error::invalid("corruption_spectrum", "no images"));
    }
    let mut mean: Option<Grid> = None;
    for (i, img) in clean.iter().enumerate() {
        let corrupted = corrupt(i, img);
        if corrupted.shape() != img.shape() {
            return Err(Error::shape("corruption_spectrum", format!("corruption changed shape at image {i}")));
        }
        let residual = Tensor::new(
            img.shape().to_vec(),
            corrupted.data().iter().zip(img.data()).map(|(&c, &x)| c - x).collect(),
        )?;
        let mag = magnitude_spectrum(&residual)?;
        match &mut mean {
            None => mean = Some(mag),
            Some(acc) => {
                for (a, m) in acc.data.iter_mut().zip(mag.data) {
                    *a += m;
                }
            }
        }
    }
    let mut mean = mean.expect("non-empty");
    for v in &mut mean.data {
        *v /= clean.len() as f64;
    }
    let view = mean.log1p_view();
    Ok((mean, view))
}

/// Dominant-frequency category of a corruption, from its radial profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FreqCategory {
    Low,
    Medium,
    High,
}

impl FreqCategory {
    pub fn as_str(&self) -> &'static str {
        match self {
            FreqCategory::Low => "low",
            FreqCategory::Medium => "medium",
            FreqCategory::High => "high",
        }
    }
}

/// Calibration thresholds on the energy-weighted mean radius (normalized by
/// the maximum radius), chosen so that constant-shift residuals land low,
/// mild-blur residuals land medium, and white-noise residuals land high.
pub const CATEGORY_T_LOW: f64 = 0.2;
pub const CATEGORY_T_HIGH: f64 = 0.5;

/// Additive brightness shift, clipped to [0,1].
pub fn brightness_shift(img: &Tensor, delta: f32) -> Tensor {
    img.map(|v| (v + delta).clamp(0.0, 1.0))
}

/// 3x3 box blur with clamp-to-edge padding on an HxW (or 1xHxW) image.
pub fn box_blur3(img: &Tensor) -> Result<Tensor> {
    let (h, w, data) = image_grid(img, "box_blur3")?;
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                    acc += f64::from(data[yy * w + xx]);
                }
            }
            out[y * w + x] = (acc / 9.0) as f32;
        }
    }
    Tensor::new(img.shape().to_vec(), out)
}

/// Classify a corruption spectrum by its energy-weighted mean radius.
pub fn frequency_category(profile: &RadialProfile) -> Result<(FreqCategory, f64)> {
    let total = profile.total();
    if total <= 0.0 {
        return Err(Error::degenerate("frequency_category", "zero-energy spectrum"));
    }
    let rmax = (profile.len() - 1).max(1) as f64;
    let weighted: f64 = profile.sum.iter().enumerate().map(|(r, &s)| r as f64 * s).sum();
    let mean_radius = weighted / total / rmax;
    let cat = if mean_radius < CATEGORY_T_LOW {
        FreqCategory::Low
    } else if mean_radius > CATEGORY_T_HIGH {
        FreqCategory::High
    } else {
        FreqCategory::Medium
    };
    Ok((cat, mean_radius))
}
