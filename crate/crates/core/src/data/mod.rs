//! Scenes: ingestion of the on-disk layout, quality masks, clearance,
//! synthetic generation and batching.

mod batch;
mod layout;
pub mod npy;
mod png;
mod procedural;
mod synth;

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use batch::{batch_scenes, center_crop, prepare_sample, Batch, Sample};
pub use layout::{list_scenes, load_dataset, load_scene, scene_dir, write_scene};
pub use png::{read_gray16, write_gray16, Gray};
pub use procedural::procedural_hr;
pub(crate) use synth::keys;
pub use synth::{area_downsample, gaussian_blur, shift_bicubic, synthesize_dataset, synthesize_scene, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Band {
    Nir,
    Red,
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Band::Nir => "NIR",
            Band::Red => "RED",
        })
    }
}

impl FromStr for Band {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nir" => Ok(Band::Nir),
            "red" => Ok(Band::Red),
            _ => Err(Error::Config(format!("unknown band '{s}' (expected nir or red)"))),
        }
    }
}

/// Boolean image mask, row-major; `true` marks a reliable pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask of {} values for {h}x{w}", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn full(h: usize, w: usize, v: bool) -> Self {
        Self { h, w, data: vec![v; h * w] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    /// 1.0 where reliable, 0.0 elsewhere.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.h, self.w], self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).unwrap()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Mask {
        let data = (0..h).flat_map(|y| self.data[(y0 + y) * self.w + x0..][..w].iter().copied()).collect();
        Mask { h, w, data }
    }
}

/// Fraction of reliable pixels.
pub fn compute_clearance(qm: &Mask) -> f64 {
    if qm.data.is_empty() {
        return 0.0;
    }
    qm.count() as f64 / qm.data.len() as f64
}

/// One multi-frame record.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub band: Band,
    /// `[N, 1, h, w]` in `[0, 1]`.
    pub lr_frames: Tensor<f32>,
    pub qm_masks: Vec<Mask>,
    /// `[1, H, W]` in `[0, 1]`.
    pub hr: Option<Tensor<f32>>,
    pub sm_mask: Option<Mask>,
    pub clearance: Vec<f64>,
}

pub const MAX_FRAMES: usize = 35;

impl Scene {
    pub fn frames(&self) -> usize {
        self.lr_frames.dim(0)
    }

    pub fn lr_size(&self) -> (usize, usize) {
        (self.lr_frames.dim(2), self.lr_frames.dim(3))
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(format!("scene {}: {m}", self.scene_id)));
        let s = self.lr_frames.shape();
        if s.len() != 4 || s[1] != 1 {
            return bad(format!("LR stack must be [N,1,h,w], got {s:?}"));
        }
        let n = s[0];
        if !(1..=MAX_FRAMES).contains(&n) {
            return bad(format!("{n} frames outside 1..={MAX_FRAMES}"));
        }
        if self.qm_masks.len() != n || self.clearance.len() != n {
            return bad(format!("{} masks / {} clearance scores for {n} frames", self.qm_masks.len(), self.clearance.len()));
        }
        if self.qm_masks.iter().any(|m| (m.h, m.w) != (s[2], s[3])) {
            return bad("quality mask size differs from frames".into());
        }
        match (&self.hr, &self.sm_mask) {
            (Some(hr), Some(sm)) if hr.shape() != [1, sm.h, sm.w] => bad("status mask size differs from HR".into()),
            (Some(_), None) | (None, Some(_)) => bad("HR and status mask must come together".into()),
            _ => Ok(()),
        }
    }

    /// Quality masks as a `[N, h, w]` tensor.
    pub fn mask_tensor(&self) -> Tensor<f32> {
        Tensor::stack(&self.qm_masks.iter().map(Mask::to_tensor).collect::<Vec<_>>()).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clearance_is_clear_fraction() {
        assert_eq!(compute_clearance(&Mask::full(4, 4, true)), 1.0);
        assert_eq!(compute_clearance(&Mask::full(4, 4, false)), 0.0);
        let m = Mask::new(128, 128, (0..128 * 128).map(|i| i % 2 == 0).collect()).unwrap();
        assert_eq!(m.count(), 8192);
        assert_eq!(compute_clearance(&m), 0.5);
    }

    #[test]
    fn band_parses_case_insensitively() {
        assert_eq!("NIR".parse::<Band>().unwrap(), Band::Nir);
        assert_eq!("red".parse::<Band>().unwrap(), Band::Red);
        assert!("blue".parse::<Band>().is_err());
    }
}
