//! Procedural high-resolution rasters: field-like polygons with smooth
//! illumination and fine texture, so that there is detail to recover.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::synth::{gaussian_blur, quantize16};
use crate::tensor::Tensor;

/// A `[1, h, w]` raster in `[0, 1]`, quantized to 16-bit levels.
pub fn procedural_hr(h: usize, w: usize, rng: &mut impl Rng) -> Tensor<f32> {
    // Voronoi parcels with per-parcel brightness.
    let cells = ((h * w) as f64 / 900.0).ceil().max(4.0) as usize;
    let seeds: Vec<(f64, f64, f64)> =
        (0..cells).map(|_| (rng.gen::<f64>() * h as f64, rng.gen::<f64>() * w as f64, rng.gen_range(0.15..0.85))).collect();
    let (gy, gx) = (rng.gen_range(-0.2..0.2) / h as f64, rng.gen_range(-0.2..0.2) / w as f64);
    let (fy, fx, phase) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4), rng.gen_range(0.0..std::f64::consts::TAU));

    let mut img = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let mut best = (f64::INFINITY, 0.0);
            for &(sy, sx, v) in &seeds {
                let d = (yf - sy).powi(2) + (xf - sx).powi(2);
                if d < best.0 {
                    best = (d, v);
                }
            }
            let stripes = 0.04 * (fy * yf + fx * xf + phase).sin();
            img[y * w + x] = best.1 + gy * (yf - h as f64 / 2.0) + gx * (xf - w as f64 / 2.0) + stripes;
        }
    }

    // Soften parcel borders slightly, then add grain.
    let mut img = gaussian_blur(&img, h, w, 0.7);
    let grain = Normal::new(0.0, 0.01).unwrap();
    for v in &mut img {
        *v = (*v + grain.sample(rng)).clamp(0.0, 1.0);
    }
    Tensor::new(&[1, h, w], img.into_iter().map(quantize16).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_and_in_range() {
        let a = procedural_hr(30, 36, &mut ChaCha8Rng::seed_from_u64(3));
        let b = procedural_hr(30, 36, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 30, 36]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let mean = a.sum() / a.len() as f32;
        let var = a.data().iter().map(|v| (v - mean).powi(2)).sum::<f32>() / a.len() as f32;
        assert!(var > 1e-3, "raster too flat: {var}");
    }
}
