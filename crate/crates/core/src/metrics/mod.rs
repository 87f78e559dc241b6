//! Shift- and brightness-corrected quality metrics over clear pixels.
//!
//! The target is cropped by [`BORDER`] pixels on every side; the prediction
//! window slides over the `(2 * BORDER + 1)^2` offsets and the best score is
//! kept. A per-offset brightness bias (mean residual over clear pixels) is
//! removed before scoring.

mod eval;
mod report;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use eval::{bicubic_upsample, evaluate_dataset, BicubicBaseline, ModelPredictor, Predictor};
pub use report::{MetricReport, SceneMetrics};

/// Maximum shift per axis; the grid is `0..=2 * BORDER`.
pub const BORDER: usize = 3;
/// Reported when the corrected MSE falls below [`SATURATION_MSE`].
pub const SATURATION_DB: f64 = 100.0;
pub const SATURATION_MSE: f64 = 1e-10;

pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Best score over the shift grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    pub value: f64,
    /// `(row, column)` offset of the prediction window.
    pub shift: (usize, usize),
    /// Brightness bias added to the prediction at that offset.
    pub bias: f64,
    /// cPSNR hit the cap.
    pub saturated: bool,
}

/// A single-channel image in f64, from `[1, H, W]` or `[H, W]`.
pub(crate) struct Plane {
    pub h: usize,
    pub w: usize,
    pub v: Vec<f64>,
}

impl Plane {
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let (h, w) = match t.shape() {
            [1, h, w] | [h, w] => (*h, *w),
            s => return shape_err(format!("expected a [1,H,W] or [H,W] image, got {s:?}")),
        };
        Ok(Self { h, w, v: t.data().iter().map(|&x| x as f64).collect() })
    }
}

/// Validated inputs: target crop, its clear mask, and the full prediction.
struct Aligned {
    ch: usize,
    cw: usize,
    hr: Vec<f64>,
    clear: Vec<bool>,
    n_clear: usize,
    sr: Plane,
}

impl Aligned {
    fn new(sr: &Tensor<f32>, hr: &Tensor<f32>, sm: &[bool]) -> Result<Self> {
        let sr = Plane::from_tensor(sr)?;
        let hr = Plane::from_tensor(hr)?;
        if (sr.h, sr.w) != (hr.h, hr.w) {
            return shape_err(format!("prediction {}x{} vs target {}x{}", sr.h, sr.w, hr.h, hr.w));
        }
        if sm.len() != hr.h * hr.w {
            return shape_err(format!("status mask of {} pixels for {}x{}", sm.len(), hr.h, hr.w));
        }
        if hr.h <= 2 * BORDER || hr.w <= 2 * BORDER {
            return shape_err(format!("image {}x{} too small for a {BORDER}-pixel border", hr.h, hr.w));
        }
        let (ch, cw) = (hr.h - 2 * BORDER, hr.w - 2 * BORDER);
        let mut crop = Vec::with_capacity(ch * cw);
        let mut clear = Vec::with_capacity(ch * cw);
        for y in 0..ch {
            let row = (y + BORDER) * hr.w + BORDER;
            crop.extend_from_slice(&hr.v[row..row + cw]);
            clear.extend_from_slice(&sm[row..row + cw]);
        }
        let n_clear = clear.iter().filter(|&&c| c).count();
        if n_clear == 0 {
            return Err(Error::Contract("no clear pixels in the cropped target".into()));
        }
        Ok(Self { ch, cw, hr: crop, clear, n_clear, sr })
    }

    fn window(&self, u: usize, v: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.ch).flat_map(move |y| self.sr.v[(y + u) * self.sr.w + v..][..self.cw].iter().copied())
    }

    /// Mean of `hr - sr` over clear pixels at offset `(u, v)`.
    fn bias(&self, u: usize, v: usize) -> f64 {
        let s: f64 = self.window(u, v).zip(&self.hr).zip(&self.clear).filter(|(_, &c)| c).map(|((s, h), _)| h - s).sum();
        s / self.n_clear as f64
    }
}

fn shifts() -> impl Iterator<Item = (usize, usize)> {
    (0..=2 * BORDER).flat_map(|u| (0..=2 * BORDER).map(move |v| (u, v)))
}

/// Bias-corrected MSE of the window at `(u, v)` and the bias used.
fn corrected_mse(a: &Aligned, u: usize, v: usize) -> (f64, f64) {
    let b = a.bias(u, v);
    let s: f64 = a
        .window(u, v)
        .zip(&a.hr)
        .zip(&a.clear)
        .filter(|(_, &c)| c)
        .map(|((s, h), _)| (h - s - b).powi(2))
        .sum();
    (s / a.n_clear as f64, b)
}

/// Clear-pixel cPSNR in dB. `sm` is row-major over the full target with
/// `true` for clear pixels. Errors when the cropped target has no clear pixel.
pub fn cpsnr(sr: &Tensor<f32>, hr: &Tensor<f32>, sm: &[bool]) -> Result<Score> {
    let a = Aligned::new(sr, hr, sm)?;
    let mut best: Option<Score> = None;
    for (u, v) in shifts() {
        let (mse, bias) = corrected_mse(&a, u, v);
        let saturated = mse < SATURATION_MSE;
        let db = if saturated { SATURATION_DB } else { -10.0 * mse.log10() };
        if best.is_none_or(|s| db > s.value) {
            best = Some(Score { value: db, shift: (u, v), bias, saturated });
        }
    }
    Ok(best.expect("shift grid is non-empty"))
}

/// Normalized Gaussian taps of the SSIM window.
pub(crate) fn ssim_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|x| x / s).collect()
}

/// Valid-mode separable correlation: output `(h - n + 1) x (w - n + 1)`.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let n = taps.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        let row = &img[y * w..][..w];
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().zip(&row[x..x + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean masked SSIM of `x` against `y` on a `h x w` grid. Window statistics
/// weight each pixel by the Gaussian tap times its clear flag; windows whose
/// centre is not clear are skipped. `None` when no window qualifies.
pub(crate) fn masked_ssim(x: &[f64], y: &[f64], clear: &[bool], h: usize, w: usize, taps: &[f64]) -> Option<f64> {
    let n = taps.len();
    if h < n || w < n {
        return None;
    }
    let m: Vec<f64> = clear.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).zip(&m).map(|((p, q), k)| p * q * k).collect() };
    let ones = vec![1.0; h * w];
    let sw = filter_valid(&m, h, w, taps);
    let sx = filter_valid(&prod(x, &ones), h, w, taps);
    let sy = filter_valid(&prod(y, &ones), h, w, taps);
    let sxx = filter_valid(&prod(x, x), h, w, taps);
    let syy = filter_valid(&prod(y, y), h, w, taps);
    let sxy = filter_valid(&prod(x, y), h, w, taps);
    let (ow, r) = (w + 1 - n, n / 2);
    let (mut total, mut count) = (0.0, 0usize);
    for (i, &wt) in sw.iter().enumerate() {
        let (cy, cx) = (i / ow + r, i % ow + r);
        if !clear[cy * w + cx] || wt <= 0.0 {
            continue;
        }
        let (mx, my) = (sx[i] / wt, sy[i] / wt);
        let vx = (sxx[i] / wt - mx * mx).max(0.0);
        let vy = (syy[i] / wt - my * my).max(0.0);
        let cxy = sxy[i] / wt - mx * my;
        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Clear-pixel cSSIM: best masked SSIM over the shift grid, after removing
/// the per-offset brightness bias from the prediction.
pub fn cssim(sr: &Tensor<f32>, hr: &Tensor<f32>, sm: &[bool]) -> Result<Score> {
    let a = Aligned::new(sr, hr, sm)?;
    let taps = ssim_taps();
    let mut best: Option<Score> = None;
    for (u, v) in shifts() {
        let bias = a.bias(u, v);
        let x: Vec<f64> = a.window(u, v).map(|s| s + bias).collect();
        let Some(value) = masked_ssim(&x, &a.hr, &a.clear, a.ch, a.cw, &taps) else {
            return Err(Error::Contract("no clear window centre for SSIM".into()));
        };
        if best.is_none_or(|s| value > s.value) {
            best = Some(Score { value, shift: (u, v), bias, saturated: false });
        }
    }
    Ok(best.expect("shift grid is non-empty"))
}

/// `sr` window at `(u, v)` plus `bias`, the cropped target and its clear
/// flags; exposed for oracle comparisons.
#[doc(hidden)]
pub fn aligned_window(sr: &Tensor<f32>, hr: &Tensor<f32>, sm: &[bool], u: usize, v: usize, bias: f64) -> Result<(usize, usize, Vec<f64>, Vec<f64>, Vec<bool>)> {
    let a = Aligned::new(sr, hr, sm)?;
    let x = a.window(u, v).map(|s| s + bias).collect();
    Ok((a.ch, a.cw, x, a.hr, a.clear))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(&[1, h, w], |i| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = (s >> 40) as f32 / (1u64 << 24) as f32;
            0.3 + 0.2 * ((i % w) as f32 / 5.0).sin() + 0.1 * ((i / w) as f32 / 3.0).cos() + 0.1 * noise
        })
    }

    #[test]
    fn identity_saturates() {
        let hr = textured(20, 22, 1);
        let sm = vec![true; 20 * 22];
        let s = cpsnr(&hr, &hr, &sm).unwrap();
        assert!(s.saturated);
        assert_eq!(s.value, SATURATION_DB);
        assert_eq!(s.shift, (BORDER, BORDER));
        assert!((cssim(&hr, &hr, &sm).unwrap().value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_is_absorbed_by_bias() {
        let hr = textured(20, 20, 2);
        let sr = hr.map(|v| v + 0.1);
        let s = cpsnr(&sr, &hr, &vec![true; 400]).unwrap();
        assert_eq!(s.value, SATURATION_DB);
        assert!((s.bias + 0.1).abs() < 1e-6);
    }

    #[test]
    fn translation_is_realigned() {
        let hr = textured(24, 24, 3);
        // Shift right by two pixels: sr(y, x) = hr(y, x - 2).
        let sr = Tensor::from_fn(&[1, 24, 24], |i| {
            let (y, x) = (i / 24, i % 24);
            hr.data()[y * 24 + x.saturating_sub(2)]
        });
        let s = cpsnr(&sr, &hr, &vec![true; 576]).unwrap();
        assert_eq!(s.value, SATURATION_DB);
        assert_eq!(s.shift, (BORDER, BORDER + 2));
    }

    #[test]
    fn inverted_image_scores_lower_ssim() {
        let hr = textured(24, 24, 4);
        let inv = hr.map(|v| 1.0 - v);
        assert!(cssim(&inv, &hr, &vec![true; 576]).unwrap().value < 1.0);
    }

    #[test]
    fn no_clear_pixels_is_an_error() {
        let hr = textured(12, 12, 5);
        assert!(cpsnr(&hr, &hr, &vec![false; 144]).is_err());
        assert!(cssim(&hr, &hr, &vec![false; 144]).is_err());
    }

    #[test]
    fn valid_filter_of_constant_is_constant() {
        let out = filter_valid(&vec![2.0; 15 * 13], 15, 13, &ssim_taps());
        assert_eq!(out.len(), 5 * 3);
        assert!(out.iter().all(|v| (v - 2.0).abs() < 1e-12));
    }
}
