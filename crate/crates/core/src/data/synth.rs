//! Synthetic degradation: known HR in, multi-frame LR scene out.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::procedural::procedural_hr;
use super::{compute_clearance, Band, Mask, Scene, MAX_FRAMES};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    /// Downscale factor between HR and LR.
    pub scale: usize,
    /// Per-frame shifts are uniform in `±max_shift` LR pixels on each axis.
    pub max_shift: f64,
    /// Gaussian blur sigma in HR pixels; `0` disables blurring.
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    /// Fraction of each LR frame covered by cloud.
    pub coverage: f64,
    pub frames: usize,
    pub seed: u64,
    /// Round LR values to 16-bit levels so scenes survive a PNG round trip.
    pub quantize: bool,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { scale: 3, max_shift: 0.5, blur_sigma: 1.0, noise_sigma: 0.01, coverage: 0.1, frames: 9, seed: 0, quantize: true }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.coverage) {
            return Err(Error::Config(format!("coverage {} outside [0, 1)", self.coverage)));
        }
        if !(1..=MAX_FRAMES).contains(&self.frames) {
            return Err(Error::Config(format!("frame count {} outside 1..={MAX_FRAMES}", self.frames)));
        }
        if self.max_shift < 0.0 || self.blur_sigma < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::Config("shift, blur and noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Rounds to the nearest 16-bit level, matching PNG decoding bit for bit.
pub(crate) fn quantize16(v: f64) -> f32 {
    ((v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0) as f32
}

pub(crate) fn keys(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Translates by `(dy, dx)` pixels with bicubic interpolation and clamped
/// borders: `out(y, x) = img(y - dy, x - dx)`.
pub fn shift_bicubic(img: &[f64], h: usize, w: usize, dy: f64, dx: f64) -> Vec<f64> {
    if dy == 0.0 && dx == 0.0 {
        return img.to_vec();
    }
    let taps = |pos: f64, n: usize| -> [(usize, f64); 4] {
        let base = pos.floor();
        let frac = pos - base;
        std::array::from_fn(|j| {
            let idx = (base as i64 + j as i64 - 1).clamp(0, n as i64 - 1) as usize;
            (idx, keys(frac - (j as f64 - 1.0)))
        })
    };
    let cols: Vec<_> = (0..w).map(|x| taps(x as f64 - dx, w)).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let rows = taps(y as f64 - dy, h);
        for (x, cx) in cols.iter().enumerate() {
            out[y * w + x] = rows
                .iter()
                .map(|&(ry, wy)| wy * cx.iter().map(|&(rx, wx)| wx * img[ry * w + rx]).sum::<f64>())
                .sum();
        }
    }
    out
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, clamped borders.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * img[y * w + clamp(x as i64 + j as i64 - r, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k.iter().enumerate().map(|(j, kv)| kv * tmp[clamp(y as i64 + j as i64 - r, h) * w + x]).sum();
        }
    }
    out
}

/// Mean over non-overlapping `r x r` blocks; `h` and `w` must be multiples of `r`.
pub fn area_downsample(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let (lh, lw) = (h / r, w / r);
    let norm = (r * r) as f64;
    let mut out = vec![0.0; lh * lw];
    for y in 0..lh {
        for x in 0..lw {
            let mut s = 0.0;
            for dy in 0..r {
                for dx in 0..r {
                    s += img[(y * r + dy) * w + x * r + dx];
                }
            }
            out[y * lw + x] = s / norm;
        }
    }
    out
}

/// Blobby cloud mask with exactly `round(coverage * h * w)` cloudy pixels.
fn cloud_mask(h: usize, w: usize, coverage: f64, rng: &mut impl Rng) -> Mask {
    let n = h * w;
    let cloudy = (coverage * n as f64).round() as usize;
    if cloudy == 0 {
        return Mask::full(h, w, true);
    }
    let noise: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let field = gaussian_blur(&noise, h, w, (h.min(w) as f64 / 16.0).max(1.0));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| field[b].total_cmp(&field[a]).then(a.cmp(&b)));
    let mut data = vec![true; n];
    for &i in &order[..cloudy] {
        data[i] = false;
    }
    Mask { h, w, data }
}

/// Degrades `hr` (`[1, H, W]`) into `p.frames` shifted, blurred, downsampled,
/// noisy and cloud-masked LR frames. Deterministic in `p.seed`.
pub fn synthesize_scene(hr: &Tensor<f32>, p: &SynthParams) -> Result<Scene> {
    p.validate()?;
    let s = hr.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::Shape(format!("HR must be [1,H,W], got {s:?}")));
    }
    let (hh, hw) = (s[1], s[2]);
    if hh % p.scale != 0 || hw % p.scale != 0 || hh == 0 || hw == 0 {
        return Err(Error::Contract(format!("HR {hh}x{hw} not divisible by {}", p.scale)));
    }
    let (lh, lw) = (hh / p.scale, hw / p.scale);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noise = Normal::new(0.0, p.noise_sigma.max(f64::MIN_POSITIVE)).unwrap();
    let base: Vec<f64> = hr.data().iter().map(|&v| v as f64).collect();

    let mut frames = Vec::with_capacity(p.frames * lh * lw);
    let mut masks = Vec::with_capacity(p.frames);
    for _ in 0..p.frames {
        let (dy, dx) = if p.max_shift > 0.0 {
            (rng.gen_range(-p.max_shift..=p.max_shift), rng.gen_range(-p.max_shift..=p.max_shift))
        } else {
            (0.0, 0.0)
        };
        let shifted = shift_bicubic(&base, hh, hw, dy * p.scale as f64, dx * p.scale as f64);
        let blurred = gaussian_blur(&shifted, hh, hw, p.blur_sigma);
        let mut lr = area_downsample(&blurred, hh, hw, p.scale);
        if p.noise_sigma > 0.0 {
            lr.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
        let qm = cloud_mask(lh, lw, p.coverage, &mut rng);
        for (v, &clear) in lr.iter().zip(&qm.data) {
            let v = if clear { v.clamp(0.0, 1.0) } else { 0.0 };
            frames.push(if p.quantize { quantize16(v) } else { v as f32 });
        }
        masks.push(qm);
    }
    let scene = Scene {
        scene_id: format!("synth{}", p.seed),
        band: Band::Nir,
        lr_frames: Tensor::new(&[p.frames, 1, lh, lw], frames)?,
        clearance: masks.iter().map(compute_clearance).collect(),
        qm_masks: masks,
        hr: Some(hr.clone()),
        sm_mask: Some(Mask::full(hh, hw, true)),
    };
    scene.validate()?;
    Ok(scene)
}

/// `count` scenes over procedural HR rasters of LR size `lr_size`, named
/// `imgset0000`, `imgset0001`, ... Per-scene seeds derive from `p.seed`.
pub fn synthesize_dataset(count: usize, lr_size: usize, p: &SynthParams) -> Result<Vec<Scene>> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    (0..count)
        .map(|i| {
            let hr = procedural_hr(lr_size * p.scale, lr_size * p.scale, &mut rng);
            let mut scene = synthesize_scene(&hr, &SynthParams { seed: rng.gen(), ..p.clone() })?;
            scene.scene_id = format!("imgset{i:04}");
            Ok(scene)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Vec<f64> {
        (0..h * w).map(|i| ((i / w) * 7 + (i % w) * 3) as f64 / 100.0).collect()
    }

    #[test]
    fn integer_shift_translates() {
        let img = ramp(6, 7);
        let out = shift_bicubic(&img, 6, 7, 1.0, 2.0);
        for y in 1..6 {
            for x in 2..7 {
                assert!((out[y * 7 + x] - img[(y - 1) * 7 + x - 2]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bicubic_reproduces_linear_ramps_inside() {
        // Keys' kernel reproduces polynomials up to degree 2 away from borders.
        let img = ramp(10, 10);
        let out = shift_bicubic(&img, 10, 10, 0.3, -0.45);
        let f = |y: f64, x: f64| (y * 7.0 + x * 3.0) / 100.0;
        for y in 3..7 {
            for x in 3..7 {
                assert!((out[y * 10 + x] - f(y as f64 - 0.3, x as f64 + 0.45)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_preserves_constants_and_mass_in_interior() {
        let out = gaussian_blur(&vec![0.4; 49], 7, 7, 1.3);
        assert!(out.iter().all(|v| (v - 0.4).abs() < 1e-12));
    }

    #[test]
    fn area_downsample_block_means() {
        let img: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let out = area_downsample(&img, 6, 6, 3);
        // Block (0,0): rows 0..3 cols 0..3 of an index ramp.
        assert_eq!(out, vec![7.0, 10.0, 25.0, 28.0]);
    }

    #[test]
    fn degenerate_degradation_is_area_average() {
        let hr = procedural_hr(24, 30, &mut ChaCha8Rng::seed_from_u64(1));
        let p = SynthParams { max_shift: 0.0, blur_sigma: 0.0, noise_sigma: 0.0, coverage: 0.0, frames: 3, quantize: false, ..Default::default() };
        let scene = synthesize_scene(&hr, &p).unwrap();
        let hr64: Vec<f64> = hr.data().iter().map(|&v| v as f64).collect();
        let expect: Vec<f32> = area_downsample(&hr64, 24, 30, 3).into_iter().map(|v| v as f32).collect();
        for i in 0..3 {
            assert_eq!(scene.lr_frames.index_first(i).data(), &expect[..]);
            assert_eq!(scene.clearance[i], 1.0);
        }
    }

    #[test]
    fn coverage_matches_request() {
        let hr = Tensor::full(&[1, 384, 384], 0.5f32);
        let p = SynthParams { coverage: 0.25, frames: 2, ..Default::default() };
        let scene = synthesize_scene(&hr, &p).unwrap();
        for m in &scene.qm_masks {
            let cloudy = 1.0 - compute_clearance(m);
            assert!((cloudy - 0.25).abs() <= 0.02, "{cloudy}");
        }
        for (i, m) in scene.qm_masks.iter().enumerate() {
            let frame = scene.lr_frames.index_first(i);
            assert!(m.data.iter().zip(frame.data()).all(|(&c, &v)| c || v == 0.0));
        }
    }

    #[test]
    fn same_seed_same_scene() {
        let hr = procedural_hr(36, 36, &mut ChaCha8Rng::seed_from_u64(2));
        let p = SynthParams { seed: 9, ..Default::default() };
        assert_eq!(synthesize_scene(&hr, &p).unwrap(), synthesize_scene(&hr, &p).unwrap());
        let q = SynthParams { seed: 10, ..Default::default() };
        assert_ne!(synthesize_scene(&hr, &p).unwrap().lr_frames, synthesize_scene(&hr, &q).unwrap().lr_frames);
    }

    #[test]
    fn rejects_bad_inputs() {
        let hr = Tensor::full(&[1, 10, 9], 0.5f32);
        assert!(matches!(synthesize_scene(&hr, &SynthParams::default()), Err(Error::Contract(_))));
        let hr = Tensor::full(&[1, 9, 9], 0.5f32);
        assert!(synthesize_scene(&hr, &SynthParams { coverage: 1.0, ..Default::default() }).is_err());
        assert!(synthesize_scene(&hr, &SynthParams { frames: 0, ..Default::default() }).is_err());
    }
}
