use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::report::{MetricReport, SceneMetrics};
use super::{cpsnr, cssim};
use crate::data::{batch_scenes, keys, Scene};
use crate::error::{Error, Result};
use crate::model::{clearest_index, Model};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Produces a `[1, H, W]` prediction for a scene.
pub trait Predictor {
    fn predict(&self, scene: &Scene) -> Result<Tensor<f32>>;
}

/// Bicubic (Keys, a = -0.5) upsampling by `r` with pixel-centre alignment
/// and clamped borders.
pub fn bicubic_upsample(img: &[f64], h: usize, w: usize, r: usize) -> Vec<f64> {
    let taps = |dst: usize, n: usize| -> [(usize, f64); 4] {
        let src = (dst as f64 + 0.5) / r as f64 - 0.5;
        let base = src.floor();
        let frac = src - base;
        std::array::from_fn(|j| ((base as i64 + j as i64 - 1).clamp(0, n as i64 - 1) as usize, keys(frac - (j as f64 - 1.0))))
    };
    let (oh, ow) = (h * r, w * r);
    let cols: Vec<_> = (0..ow).map(|x| taps(x, w)).collect();
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let rows = taps(y, h);
        for (x, cx) in cols.iter().enumerate() {
            out[y * ow + x] =
                rows.iter().map(|&(ry, wy)| wy * cx.iter().map(|&(rx, wx)| wx * img[ry * w + rx]).sum::<f64>()).sum();
        }
    }
    out
}

/// Bicubic upsampling of the clearest frame.
#[derive(Clone, Copy, Debug)]
pub struct BicubicBaseline {
    pub scale: usize,
}

impl Predictor for BicubicBaseline {
    fn predict(&self, scene: &Scene) -> Result<Tensor<f32>> {
        let best = clearest_index(&scene.clearance).ok_or_else(|| Error::Contract("scene has no frames".into()))?;
        let (h, w) = scene.lr_size();
        let frame: Vec<f64> = scene.lr_frames.index_first(best).data().iter().map(|&v| v as f64).collect();
        let up = bicubic_upsample(&frame, h, w, self.scale);
        Tensor::new(&[1, h * self.scale, w * self.scale], up.into_iter().map(|v| v as f32).collect())
    }
}

/// Eval-mode inference with fixed weights and `k` input frames.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
    pub k: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, scene: &Scene) -> Result<Tensor<f32>> {
        // No crop is taken, so the generator is never drawn from.
        let batch = batch_scenes([scene], self.k, None, &mut ChaCha8Rng::seed_from_u64(0))?;
        let out = self.model.infer(self.store, &batch.input(self.model.cfg.in_channels)?)?;
        let s = out.shape().to_vec();
        out.reshape(&s[1..])
    }
}

/// Scores every scene with a target; scenes without one are listed as
/// excluded, scenes without clear pixels are flagged as skipped.
pub fn evaluate_dataset(predictor: &dyn Predictor, scenes: &[Scene]) -> Result<MetricReport> {
    let mut records = Vec::new();
    let mut excluded = Vec::new();
    for scene in scenes {
        let (Some(hr), Some(sm)) = (&scene.hr, &scene.sm_mask) else {
            excluded.push(scene.scene_id.clone());
            continue;
        };
        let sr = predictor.predict(scene)?;
        match (cpsnr(&sr, hr, &sm.data), cssim(&sr, hr, &sm.data)) {
            (Ok(p), Ok(s)) => records.push(SceneMetrics {
                scene_id: scene.scene_id.clone(),
                cpsnr: Some(p.value),
                cssim: Some(s.value),
                u: p.shift.0,
                v: p.shift.1,
                b: p.bias,
                saturated: p.saturated,
                skipped: None,
            }),
            (Err(Error::Contract(msg)), _) | (_, Err(Error::Contract(msg))) => {
                log::warn!("scene {}: {msg}", scene.scene_id);
                records.push(SceneMetrics::skipped(&scene.scene_id, msg));
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        }
    }
    Ok(MetricReport::new(records, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsampling_preserves_constants_and_ramps() {
        let c = bicubic_upsample(&vec![0.3; 12], 3, 4, 3);
        assert_eq!(c.len(), 9 * 12);
        assert!(c.iter().all(|v| (v - 0.3).abs() < 1e-12));
        // Interior of a linear ramp is reproduced at the mapped coordinates.
        let img: Vec<f64> = (0..64).map(|i| (i % 8) as f64).collect();
        let up = bicubic_upsample(&img, 8, 8, 3);
        for x in 6..18 {
            let src = (x as f64 + 0.5) / 3.0 - 0.5;
            assert!((up[10 * 24 + x] - src).abs() < 1e-12);
        }
    }
}
