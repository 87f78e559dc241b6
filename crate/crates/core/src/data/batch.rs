//! Cropping and stacking scenes into model-ready batches.

use rand::Rng;

use super::Scene;
use crate::error::{shape_err, Error, Result};
use crate::model::{pad_scene, FrameStack};
use crate::tensor::Tensor;

/// `B` scenes with exactly `K` frames each.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, K, 1, h, w]`.
    pub lr: Tensor<f32>,
    /// Quality masks `[B, K, h, w]`, 1 = reliable.
    pub masks: Tensor<f32>,
    /// `[B, 1, H, W]` when every scene has a target.
    pub hr: Option<Tensor<f32>>,
    /// `[B, H, W]` alongside `hr`.
    pub sm: Option<Tensor<f32>>,
    pub ids: Vec<String>,
    pub pad_flags: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Model input with `channels` per frame: the LR values, optionally
    /// followed by the quality mask.
    pub fn input(&self, channels: usize) -> Result<Tensor<f32>> {
        match channels {
            1 => Ok(self.lr.clone()),
            2 => {
                let s = self.lr.shape();
                let (b, k, h, w) = (s[0], s[1], s[3], s[4]);
                let plane = h * w;
                let mut data = Vec::with_capacity(2 * self.lr.len());
                for i in 0..b * k {
                    data.extend_from_slice(&self.lr.data()[i * plane..][..plane]);
                    data.extend_from_slice(&self.masks.data()[i * plane..][..plane]);
                }
                Tensor::new(&[b, k, 2, h, w], data)
            }
            c => Err(Error::Config(format!("input channels must be 1 or 2, got {c}"))),
        }
    }
}

/// Integer HR/LR ratio of a scene (1 without a target).
fn scale_of(scene: &Scene) -> Result<usize> {
    let (h, w) = scene.lr_size();
    match &scene.hr {
        None => Ok(1),
        Some(hr) => {
            let (hh, hw) = (hr.dim(1), hr.dim(2));
            if hh % h != 0 || hw % w != 0 || hh / h != hw / w {
                return shape_err(format!("scene {}: HR {hh}x{hw} is not an integer multiple of LR {h}x{w}", scene.scene_id));
            }
            Ok(hh / h)
        }
    }
}

fn crop_plane(t: &Tensor<f32>, y0: usize, x0: usize, size: usize) -> Tensor<f32> {
    let s = t.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let lead: usize = s[..s.len() - 2].iter().product();
    let mut data = Vec::with_capacity(lead * size * size);
    for p in 0..lead {
        for y in 0..size {
            data.extend_from_slice(&t.data()[p * h * w + (y0 + y) * w + x0..][..size]);
        }
    }
    let mut shape = s[..s.len() - 2].to_vec();
    shape.extend([size, size]);
    Tensor::new(&shape, data).unwrap()
}

impl Scene {
    /// Square LR window of side `size` at `(y0, x0)` with the aligned HR
    /// window (origin and side scaled by the HR/LR ratio).
    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<Scene> {
        let (h, w) = self.lr_size();
        if size == 0 || y0 + size > h || x0 + size > w {
            return Err(Error::Contract(format!(
                "crop {size} at ({y0},{x0}) exceeds {h}x{w} frames of scene {}",
                self.scene_id
            )));
        }
        let r = scale_of(self)?;
        Ok(Scene {
            scene_id: self.scene_id.clone(),
            band: self.band,
            lr_frames: crop_plane(&self.lr_frames, y0, x0, size),
            qm_masks: self.qm_masks.iter().map(|m| m.crop(y0, x0, size, size)).collect(),
            hr: self.hr.as_ref().map(|t| crop_plane(t, r * y0, r * x0, r * size)),
            sm_mask: self.sm_mask.as_ref().map(|m| m.crop(r * y0, r * x0, r * size, r * size)),
            clearance: self.clearance.clone(),
        })
    }
}

/// Central square window of side `size`.
pub fn center_crop(scene: &Scene, size: usize) -> Result<Scene> {
    let (h, w) = scene.lr_size();
    if size > h || size > w {
        return Err(Error::Contract(format!("crop {size} exceeds {h}x{w} frames of scene {}", scene.scene_id)));
    }
    scene.crop((h - size) / 2, (w - size) / 2, size)
}

/// One scene after cropping and padding/selection to `K` frames.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scene_id: String,
    pub stack: FrameStack<f32>,
    /// `[1, H, W]`.
    pub hr: Option<Tensor<f32>>,
    /// `[H, W]`, 1 = clear.
    pub sm: Option<Tensor<f32>>,
}

/// Crops `scene` at a random aligned origin (when `crop` is set) and fixes
/// its frame count at `k`.
pub fn prepare_sample(scene: &Scene, k: usize, crop: Option<usize>, rng: &mut impl Rng) -> Result<Sample> {
    let cropped;
    let scene = match crop {
        Some(size) => {
            let (h, w) = scene.lr_size();
            if size == 0 || size > h || size > w {
                return Err(Error::Contract(format!("crop {size} exceeds {h}x{w} frames of scene {}", scene.scene_id)));
            }
            cropped = scene.crop(rng.gen_range(0..=h - size), rng.gen_range(0..=w - size), size)?;
            &cropped
        }
        None => scene,
    };
    let stack = pad_scene(&scene.lr_frames, Some(&scene.mask_tensor()), &scene.clearance, k)?;
    if stack.len() != k {
        return Err(Error::Contract(format!("padding produced {} frames, expected {k}", stack.len())));
    }
    let (hr, sm) = match (&scene.hr, &scene.sm_mask) {
        (Some(t), Some(m)) => (Some(t.clone()), Some(m.to_tensor())),
        _ => (None, None),
    };
    Ok(Sample { scene_id: scene.scene_id.clone(), stack, hr, sm })
}

impl Batch {
    /// Stacks samples that share `K` and frame size.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Batch> {
        if samples.is_empty() {
            return Err(Error::Contract("cannot batch zero scenes".into()));
        }
        let all_targets = samples.iter().all(|s| s.hr.is_some());
        let mut lr = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        let mut hr = Vec::new();
        let mut sm = Vec::new();
        let mut ids = Vec::with_capacity(samples.len());
        let mut pad_flags = Vec::with_capacity(samples.len());
        for s in samples {
            lr.push(s.stack.frames);
            masks.push(s.stack.masks.ok_or_else(|| Error::Contract(format!("sample {} has no masks", s.scene_id)))?);
            pad_flags.push(s.stack.pad_flags);
            ids.push(s.scene_id);
            if all_targets {
                hr.push(s.hr.expect("checked above"));
                sm.push(s.sm.expect("paired with hr"));
            }
        }
        let (hr, sm) = if all_targets { (Some(Tensor::stack(&hr)?), Some(Tensor::stack(&sm)?)) } else { (None, None) };
        Ok(Batch { lr: Tensor::stack(&lr)?, masks: Tensor::stack(&masks)?, hr, sm, ids, pad_flags })
    }
}

/// Crops (at a random aligned origin), pads/selects each scene to `k`
/// frames, and stacks. Scenes must share their (cropped) size.
pub fn batch_scenes<'a>(
    scenes: impl IntoIterator<Item = &'a Scene>,
    k: usize,
    crop: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let samples = scenes.into_iter().map(|s| prepare_sample(s, k, crop, rng)).collect::<Result<Vec<_>>>()?;
    Batch::from_samples(samples)
}
