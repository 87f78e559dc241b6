use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::Adam;
use super::checkpoint::{save_checkpoint, Checkpoint, RngState};
use super::{loss_l2, shuffle_frames, TrainConfig};
use crate::autodiff::Tape;
use crate::data::{center_crop, prepare_sample, Batch, Sample, Scene};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, MetricReport, ModelPredictor};
use crate::model::{Model, ModelConfig};
use crate::nn::{update_running_stats, Ctx, Mode, ParamStore};

pub const HISTORY_HEADER: &str = "epoch,train_loss,val_cpsnr,val_cssim,wall_seconds";

/// Independent generators derived from one seed.
#[derive(Clone, Debug)]
pub struct Streams {
    /// Scene order and crop origins.
    pub data: ChaCha8Rng,
    /// Frame permutations.
    pub shuffle: ChaCha8Rng,
    /// Parameter initialization.
    pub init: ChaCha8Rng,
}

impl Streams {
    pub fn new(seed: u64) -> Self {
        let stream = |id| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(id);
            r
        };
        Self { data: stream(1), shuffle: stream(2), init: stream(3) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    /// Mean global gradient norm over steps.
    pub grad_norm: f64,
    pub samples: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: u64,
    pub train_loss: f64,
    pub val_cpsnr: Option<f64>,
    pub val_cssim: Option<f64>,
    pub wall_seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
        format!("{},{:.8},{},{},{:.3}", self.epoch, self.train_loss, opt(self.val_cpsnr), opt(self.val_cssim), self.wall_seconds)
    }
}

#[derive(Clone, Debug)]
pub struct FitResult {
    /// Weights with the best validation cPSNR (the last ones without validation).
    pub best_store: ParamStore<f32>,
    pub best: Option<(f64, u64)>,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Model, weights, optimizer and generator state of one training run.
pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub store: ParamStore<f32>,
    pub adam: Adam,
    pub streams: Streams,
    /// Completed epochs.
    pub epoch: u64,
    pub best: Option<(f64, u64)>,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(model_cfg)?;
        let mut streams = Streams::new(cfg.seed);
        let store = model.init(&mut streams.init);
        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self { model, cfg: cfg.clone(), store, adam, streams, epoch: 0, best: None })
    }

    /// Resumes from a checkpoint; `cfg` may change the epoch budget or
    /// patience but not the optimizer.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.train.validate()?;
        let model = Model::new(&ck.model)?;
        let streams = Streams { data: ck.rngs[0].restore(), shuffle: ck.rngs[1].restore(), init: ck.rngs[2].restore() };
        Ok(Self { model, cfg: ck.train, store: ck.store, adam: ck.adam, streams, epoch: ck.epoch, best: ck.best })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.cfg.clone(),
            train: self.cfg.clone(),
            epoch: self.epoch,
            best: self.best,
            rngs: [RngState::capture(&self.streams.data), RngState::capture(&self.streams.shuffle), RngState::capture(&self.streams.init)],
            store: self.store.clone(),
            adam: self.adam.clone(),
        }
    }

    /// Samples of one epoch: `max(1, shuffle_t)` copies per scene, each with
    /// its own crop and (when `shuffle_t > 0`) its own frame permutation,
    /// in random order.
    pub fn epoch_samples(&mut self, scenes: &[Scene]) -> Result<Vec<Sample>> {
        let copies = self.cfg.shuffle_t.max(1);
        let mut samples = Vec::with_capacity(scenes.len() * copies);
        for scene in scenes {
            for _ in 0..copies {
                let mut s = prepare_sample(scene, self.cfg.k, self.cfg.crop, &mut self.streams.data)?;
                if self.cfg.shuffle_t > 0 {
                    s.stack = shuffle_frames(&s.stack, &mut self.streams.shuffle)?;
                }
                samples.push(s);
            }
        }
        samples.shuffle(&mut self.streams.data);
        Ok(samples)
    }

    /// One optimizer step; returns the loss and the global gradient norm.
    pub fn step(&mut self, batch: &Batch) -> Result<(f64, f64)> {
        let hr = batch.hr.as_ref().ok_or_else(|| Error::Contract(format!("training batch {:?} lacks targets", batch.ids)))?;
        let tape = Tape::new();
        let (loss, grads, bn) = {
            let ctx = Ctx::new(&tape, &self.store, Mode::Train);
            let x = tape.constant(batch.input(self.model.cfg.in_channels)?);
            let out = self.model.forward(&ctx, x)?;
            let mask = if self.cfg.masked_loss { batch.sm.as_ref() } else { None };
            let loss = loss_l2(out, tape.constant(hr.clone()), mask)?;
            let value = loss.value().item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss {value} on scene(s) {}", batch.ids.join(", "))));
            }
            let mut g = tape.backward(loss)?;
            (value, ctx.named_grads(&mut g), ctx.take_bn_stats())
        };
        let norm = grads.values().flat_map(|g| g.data()).map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient on scene(s) {}", batch.ids.join(", "))));
        }
        self.adam.update(&mut self.store, &grads)?;
        update_running_stats(&mut self.store, &bn, self.cfg.bn_momentum as f32)?;
        Ok((loss, norm))
    }

    /// One pass over every enqueued sample of `scenes`.
    pub fn train_epoch(&mut self, scenes: &[Scene]) -> Result<EpochStats> {
        let samples = self.epoch_samples(scenes)?;
        let n = samples.len();
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        let mut it = samples.into_iter().peekable();
        while it.peek().is_some() {
            let chunk: Vec<Sample> = it.by_ref().take(self.cfg.batch_size).collect();
            let b = chunk.len();
            let (loss, norm) = self.step(&Batch::from_samples(chunk)?)?;
            loss_sum += loss * b as f64;
            norm_sum += norm;
            steps += 1;
        }
        self.epoch += 1;
        Ok(EpochStats {
            mean_loss: if n > 0 { loss_sum / n as f64 } else { 0.0 },
            grad_norm: if steps > 0 { norm_sum / steps as f64 } else { 0.0 },
            samples: n,
            steps,
        })
    }

    /// Validation scenes as scored: centrally cropped to `val_crop`.
    pub fn validation_view(&self, scenes: &[Scene]) -> Result<Vec<Scene>> {
        match self.cfg.val_crop {
            Some(c) => scenes.iter().map(|s| center_crop(s, c)).collect(),
            None => Ok(scenes.to_vec()),
        }
    }

    /// Metrics of the current weights on already-prepared scenes.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<MetricReport> {
        evaluate_dataset(&ModelPredictor { model: &self.model, store: &self.store, k: self.cfg.k }, scenes)
    }

    /// Trains until `cfg.epochs` epochs are complete (or patience runs out),
    /// keeping the weights with the best validation cPSNR. With `out`, the
    /// history is appended to `history.csv` and `last.ckpt` / `best.ckpt`
    /// are written each epoch; the history row is flushed before the
    /// checkpoint so a failed write leaves a complete history.
    pub fn fit(&mut self, train: &[Scene], val: &[Scene], out: Option<&Path>) -> Result<FitResult> {
        let val = self.validation_view(val)?;
        let mut history_file = match out {
            Some(dir) => Some(open_history(dir, self.epoch == 0)?),
            None => None,
        };
        let mut best_store = self.store.clone();
        let mut history = Vec::new();
        let mut stopped_early = false;
        let start = Instant::now();
        while (self.epoch as usize) < self.cfg.epochs {
            let stats = self.train_epoch(train)?;
            let report = if val.is_empty() { None } else { Some(self.evaluate(&val)?) };
            let record = EpochRecord {
                epoch: self.epoch,
                train_loss: stats.mean_loss,
                val_cpsnr: report.as_ref().and_then(|r| r.mean_cpsnr()),
                val_cssim: report.as_ref().and_then(|r| r.mean_cssim()),
                wall_seconds: start.elapsed().as_secs_f64(),
            };
            log::info!("{}", record.csv_row());
            if let Some(f) = history_file.as_mut() {
                writeln!(f, "{}", record.csv_row())?;
                f.flush()?;
            }
            let improved = match (record.val_cpsnr, self.best) {
                (Some(v), Some((b, _))) => v > b,
                (Some(_), None) => true,
                (None, _) => false,
            };
            if improved {
                self.best = Some((record.val_cpsnr.expect("improved implies a score"), self.epoch));
                best_store = self.store.clone();
            } else if record.val_cpsnr.is_none() {
                best_store = self.store.clone();
            }
            history.push(record);
            if let Some(dir) = out {
                let ck = self.checkpoint();
                save_checkpoint(&dir.join("last.ckpt"), &ck)?;
                if improved {
                    save_checkpoint(&dir.join("best.ckpt"), &ck)?;
                }
            }
            if let (Some(p), Some((_, at))) = (self.cfg.patience, self.best) {
                if self.epoch - at >= p as u64 {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(FitResult { best_store, best: self.best, history, stopped_early })
    }
}

fn open_history(dir: &Path, fresh: bool) -> Result<BufWriter<File>> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("history.csv");
    let mut f = if fresh || !path.exists() {
        let mut f = BufWriter::new(File::create(&path)?);
        writeln!(f, "{HISTORY_HEADER}")?;
        f
    } else {
        BufWriter::new(OpenOptions::new().append(true).open(&path)?)
    };
    f.flush()?;
    Ok(f)
}
