//! Optimization: L2 objective, frame-order shuffling, Adam, checkpoints and
//! the epoch loop with validation-based model selection.

mod adam;
mod checkpoint;
mod trainer;

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::model::FrameStack;
use crate::real::Real;
use crate::tensor::Tensor;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use trainer::{EpochRecord, EpochStats, FitResult, Streams, Trainer, HISTORY_HEADER};

/// Optimization hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per sample after padding/selection.
    pub k: usize,
    /// Shuffled copies of each scene per epoch; 0 keeps the original order.
    pub shuffle_t: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Random training crop (LR pixels); `None` trains on full frames.
    pub crop: Option<usize>,
    /// Central validation crop (LR pixels).
    pub val_crop: Option<usize>,
    /// Average the loss over clear target pixels only.
    pub masked_loss: bool,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Momentum of the batch-norm running statistics.
    pub bn_momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 400,
            batch_size: 4,
            k: 24,
            shuffle_t: 6,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            crop: None,
            val_crop: None,
            masked_loss: false,
            patience: None,
            bn_momentum: 0.1,
        }
    }
}

fn opt_text(v: Option<usize>) -> String {
    v.map_or_else(|| "none".into(), |v| v.to_string())
}

impl TrainConfig {
    /// CPU-sized runs: crop 32, K = 4, 30 epochs.
    pub fn desk() -> Self {
        Self { epochs: 30, k: 4, crop: Some(32), val_crop: Some(32), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.shuffle_t > 10 {
            return Err(Error::Config(format!("shuffle_t {} outside 0..=10", self.shuffle_t)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("invalid optimizer settings".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config(format!("bn_momentum {} outside [0, 1]", self.bn_momentum)));
        }
        if self.crop == Some(0) || self.val_crop == Some(0) {
            return Err(Error::Config("crops must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("k", self.k.to_string()),
            ("shuffle_t", self.shuffle_t.to_string()),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("seed", self.seed.to_string()),
            ("crop", opt_text(self.crop)),
            ("val_crop", opt_text(self.val_crop)),
            ("masked_loss", self.masked_loss.to_string()),
            ("patience", opt_text(self.patience)),
            ("bn_momentum", self.bn_momentum.to_string()),
        ]
    }

    /// Sets one field from text; unknown keys are a config error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
        }
        fn opt(key: &str, v: &str) -> Result<Option<usize>> {
            match v.trim() {
                "none" | "" => Ok(None),
                s => num(key, s).map(Some),
            }
        }
        match key {
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "k" => self.k = num(key, value)?,
            "shuffle_t" => self.shuffle_t = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "crop" => self.crop = opt(key, value)?,
            "val_crop" => self.val_crop = opt(key, value)?,
            "masked_loss" => self.masked_loss = num(key, value)?,
            "patience" => self.patience = opt(key, value)?,
            "bn_momentum" => self.bn_momentum = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown train key '{key}'"))),
        }
        Ok(())
    }
}

/// Applies one uniformly random permutation to every per-frame field.
pub fn shuffle_frames<R: Real>(stack: &FrameStack<R>, rng: &mut impl Rng) -> Result<FrameStack<R>> {
    let mut order: Vec<usize> = (0..stack.len()).collect();
    order.shuffle(rng);
    stack.permuted(&order)
}

/// Mean squared error between prediction and target. With `mask`, the mean
/// runs over clear pixels only; an all-zero mask falls back to the plain mean.
pub fn loss_l2<'t, R: Real>(sr: Var<'t, R>, hr: Var<'t, R>, mask: Option<&Tensor<R>>) -> Result<Var<'t, R>> {
    let shape = sr.shape();
    let weights = match mask {
        Some(m) if m.len() != sr.value().len() => {
            return Err(Error::Shape(format!("loss mask of {} values for prediction {shape:?}", m.len())));
        }
        Some(m) if m.sum() > R::zero() => m.clone().reshape(&shape)?,
        Some(_) => {
            log::warn!("loss mask has no clear pixel; using the unmasked mean");
            Tensor::ones(&shape)
        }
        None => Tensor::ones(&shape),
    };
    sr.weighted_sq_err(hr, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::model::pad_scene;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn loss(sr: &Tensor<f64>, hr: &Tensor<f64>, mask: Option<&Tensor<f64>>) -> f64 {
        let tape = Tape::inference();
        loss_l2(tape.constant(sr.clone()), tape.constant(hr.clone()), mask).unwrap().value().item()
    }

    #[test]
    fn l2_examples() {
        let hr = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64 / 16.0);
        assert_eq!(loss(&hr, &hr, None), 0.0);
        assert!((loss(&hr.map(|v| v + 0.5), &hr, None) - 0.25).abs() < 1e-15);
        // Corrupt the second half, mask it out: loss of the clean half only.
        let mut sr = hr.map(|v| v + 0.1);
        sr.data_mut()[8..].iter_mut().for_each(|v| *v = 9.0);
        let mask = Tensor::from_fn(&[4, 4], |i| if i < 8 { 1.0 } else { 0.0 });
        assert!((loss(&sr, &hr, Some(&mask)) - 0.01).abs() < 1e-12);
        let empty = Tensor::zeros(&[4, 4]);
        assert_eq!(loss(&sr, &hr, Some(&empty)), loss(&sr, &hr, None));
    }

    fn stack(k: usize) -> FrameStack<f64> {
        let frames = Tensor::from_fn(&[k, 1, 1, 1], |i| i as f64);
        pad_scene(&frames, None, &(0..k).map(|i| i as f64).collect::<Vec<_>>(), k).unwrap()
    }

    #[test]
    fn single_frame_is_fixed() {
        let s = stack(1);
        let out = shuffle_frames(&s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(out.frames, s.frames);
    }

    #[test]
    fn shuffle_replays_under_seed() {
        let s = stack(8);
        let a = shuffle_frames(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = shuffle_frames(&s, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a.source, b.source);
        assert_eq!(a.clearance, a.source.iter().map(|&i| i as f64).collect::<Vec<_>>());
    }

    #[test]
    fn permutations_are_uniform() {
        let s = stack(3);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut counts = std::collections::HashMap::new();
        let draws = 10_000;
        for _ in 0..draws {
            *counts.entry(shuffle_frames(&s, &mut rng).unwrap().source).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = draws as f64 / 6.0;
        let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 5 degrees of freedom.
        assert!(chi2 < 20.52, "chi2 = {chi2}");
        for &c in counts.values() {
            assert!((c as f64 / draws as f64 - 1.0 / 6.0).abs() < 0.02);
        }
    }

    #[test]
    fn config_pairs_roundtrip() {
        let mut c = TrainConfig::desk();
        c.patience = Some(3);
        c.shuffle_t = 0;
        let mut back = TrainConfig::default();
        for (k, v) in c.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        let err = back.set("shufle_t", "3").unwrap_err();
        assert!(err.to_string().contains("shufle_t"));
    }
}
