//! Training experiments behind the end-to-end and frame-order checks.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{synthesize_dataset, Scene, SynthParams};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, BicubicBaseline, ModelPredictor};
use crate::model::{FrameBiasMode, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{EpochRecord, TrainConfig, Trainer};

/// Synthetic train / validation split plus the configurations to fit on it.
#[derive(Clone, Debug)]
pub struct LearningSetup {
    pub train_scenes: usize,
    pub val_scenes: usize,
    /// LR side of the synthesized scenes.
    pub lr_size: usize,
    pub synth: SynthParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl LearningSetup {
    /// 50 / 10 scenes, crop 32, K = 4, 30 epochs, seed 42, one shuffled copy
    /// per scene and epoch.
    pub fn desk() -> Self {
        Self {
            train_scenes: 50,
            val_scenes: 10,
            lr_size: 40,
            synth: SynthParams { seed: 42, ..SynthParams::default() },
            model: ModelConfig::desk(),
            train: TrainConfig { seed: 42, shuffle_t: 1, ..TrainConfig::desk() },
        }
    }

    pub fn scenes(&self) -> Result<(Vec<Scene>, Vec<Scene>)> {
        let mut all = synthesize_dataset(self.train_scenes + self.val_scenes, self.lr_size, &self.synth)?;
        let val = all.split_off(self.train_scenes);
        Ok((all, val))
    }
}

#[derive(Clone, Debug)]
pub struct LearningOutcome {
    /// Mean validation cPSNR of the selected weights.
    pub model_cpsnr: f64,
    pub bicubic_cpsnr: f64,
    pub history: Vec<EpochRecord>,
    pub seconds: f64,
}

impl LearningOutcome {
    pub fn margin(&self) -> f64 {
        self.model_cpsnr - self.bicubic_cpsnr
    }
}

fn mean_cpsnr(report: &crate::metrics::MetricReport, what: &str) -> Result<f64> {
    report.mean_cpsnr().ok_or_else(|| Error::Contract(format!("no scored validation scenes for {what}")))
}

/// Trains on the synthetic split and scores the best weights and the
/// bicubic baseline on the same centrally cropped validation scenes.
pub fn learning_run(setup: &LearningSetup) -> Result<LearningOutcome> {
    let start = Instant::now();
    let (train, val) = setup.scenes()?;
    let mut trainer = Trainer::new(&setup.model, &setup.train)?;
    let fit = trainer.fit(&train, &val, None)?;
    let view = trainer.validation_view(&val)?;
    let model = evaluate_dataset(&ModelPredictor { model: &trainer.model, store: &fit.best_store, k: setup.train.k }, &view)?;
    let bicubic = evaluate_dataset(&BicubicBaseline { scale: setup.model.upscale }, &view)?;
    Ok(LearningOutcome {
        model_cpsnr: mean_cpsnr(&model, "the model")?,
        bicubic_cpsnr: mean_cpsnr(&bicubic, "bicubic")?,
        history: fit.history,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Keeps frames `order` of `scene`, in that order.
pub fn reorder_scene(scene: &Scene, order: &[usize]) -> Result<Scene> {
    if order.iter().any(|&i| i >= scene.frames()) {
        return Err(Error::Contract(format!("frame order {order:?} exceeds {} frames", scene.frames())));
    }
    Ok(Scene {
        lr_frames: Tensor::stack(&order.iter().map(|&i| scene.lr_frames.index_first(i)).collect::<Vec<_>>())?,
        qm_masks: order.iter().map(|&i| scene.qm_masks[i].clone()).collect(),
        clearance: order.iter().map(|&i| scene.clearance[i]).collect(),
        ..scene.clone()
    })
}

/// Spread of validation cPSNR over evaluation frame orders.
#[derive(Clone, Debug)]
pub struct OrderSpread {
    pub shuffle_t: usize,
    /// Mean validation cPSNR for each evaluation order.
    pub per_order: Vec<f64>,
}

impl OrderSpread {
    pub fn mean(&self) -> f64 {
        self.per_order.iter().sum::<f64>() / self.per_order.len() as f64
    }

    /// Population standard deviation of `per_order`.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        (self.per_order.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / self.per_order.len() as f64).sqrt()
    }
}

/// Small setup for the frame-order experiment: crop 16, full-sequence bias,
/// scenes with exactly K frames so every evaluation order reaches the model.
pub fn order_setup() -> LearningSetup {
    let mut model = ModelConfig::desk();
    model.frame_bias_mode = FrameBiasMode::FullSequence;
    model.bias_extent = 16;
    LearningSetup {
        train_scenes: 16,
        val_scenes: 6,
        lr_size: 16,
        synth: SynthParams { seed: 7, frames: 4, ..SynthParams::default() },
        model,
        train: TrainConfig { seed: 7, epochs: 12, crop: Some(16), val_crop: Some(16), shuffle_t: 0, ..TrainConfig::desk() },
    }
}

/// Trains once per entry of `shuffle_ts` (same seed, hence same init) and
/// scores each model under `orders` random frame orders of the validation
/// scenes, one shared order per evaluation.
pub fn order_spread(setup: &LearningSetup, shuffle_ts: &[usize], orders: usize, order_seed: u64) -> Result<Vec<OrderSpread>> {
    let (train, val) = setup.scenes()?;
    let k = setup.train.k;
    if let Some(s) = val.iter().find(|s| s.frames() != k) {
        return Err(Error::Contract(format!("scene {} has {} frames, expected exactly {k}", s.scene_id, s.frames())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(order_seed);
    let perms: Vec<Vec<usize>> = (0..orders)
        .map(|_| {
            let mut p: Vec<usize> = (0..k).collect();
            p.shuffle(&mut rng);
            p
        })
        .collect();
    shuffle_ts
        .iter()
        .map(|&t| {
            let mut trainer = Trainer::new(&setup.model, &TrainConfig { shuffle_t: t, ..setup.train.clone() })?;
            let fit = trainer.fit(&train, &[], None)?;
            let view = trainer.validation_view(&val)?;
            let predictor = ModelPredictor { model: &trainer.model, store: &fit.best_store, k };
            let per_order = perms
                .iter()
                .map(|p| {
                    let scenes = view.iter().map(|s| reorder_scene(s, p)).collect::<Result<Vec<_>>>()?;
                    mean_cpsnr(&evaluate_dataset(&predictor, &scenes)?, "an evaluation order")
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OrderSpread { shuffle_t: t, per_order })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reorder_moves_every_frame_field() {
        let scenes = synthesize_dataset(1, 6, &SynthParams { frames: 3, ..SynthParams::default() }).unwrap();
        let s = &scenes[0];
        let r = reorder_scene(s, &[2, 0]).unwrap();
        assert_eq!(r.frames(), 2);
        assert_eq!(r.lr_frames.index_first(0).data(), s.lr_frames.index_first(2).data());
        assert_eq!(r.qm_masks[1], s.qm_masks[0]);
        assert_eq!(r.clearance, vec![s.clearance[2], s.clearance[0]]);
        assert!(reorder_scene(s, &[3]).is_err());
    }

    #[test]
    fn spread_is_population_std() {
        let s = OrderSpread { shuffle_t: 0, per_order: vec![1.0, 3.0] };
        assert_eq!(s.std(), 1.0);
    }
}
