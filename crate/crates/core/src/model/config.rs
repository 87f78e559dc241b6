use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Bias layout of the joint cross-frame attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameBiasMode {
    /// Bias depends only on token kinds and spatial offset; the fusion is
    /// invariant to frame order.
    FrameAgnostic,
    /// Adds a learnable frame-pair term spanning the whole joint sequence.
    FullSequence,
}

/// Fusion block used between encoder and decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionBlock {
    /// Message-token blocks followed by joint cross-frame attention.
    Misab,
    /// Plain transformer blocks over all image tokens of all frames.
    SelfAttention,
    /// Mean over frames only.
    MeanPool,
}

macro_rules! text_enum {
    ($t:ty { $($v:ident => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
                    $($s => Ok(Self::$v),)+
                    other => Err(Error::Config(format!("unknown {} '{other}'", stringify!($t)))),
                }
            }
        }
    };
}

text_enum!(FrameBiasMode { FrameAgnostic => "frame-agnostic", FullSequence => "full-sequence" });
text_enum!(FusionBlock { Misab => "misab", SelfAttention => "self-attention", MeanPool => "mean-pool" });

/// Architectural hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels per input frame: 1 (image) or 2 (image and quality mask).
    pub in_channels: usize,
    /// Width of the convolutional stem and the encoder block.
    pub embed_dim: usize,
    /// Width of encoder output, fusion tokens and decoder.
    pub feature_dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub misab_blocks: usize,
    /// Pixels per message-token patch.
    pub patch_pixels: usize,
    /// Frames per scene after padding.
    pub frames: usize,
    /// Relative offsets are clipped to `±(bias_extent - 1)` on each axis.
    pub bias_extent: usize,
    pub frame_bias_mode: FrameBiasMode,
    pub fusion_block: FusionBlock,
    /// Fraction of decoder channels routed through the spectral branch.
    pub ffc_alpha: f64,
    pub ffc_blocks: usize,
    pub upscale: usize,
    /// Bands of the super-resolved image.
    pub image_channels: usize,
    /// Bias terms on attention projections.
    pub proj_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            embed_dim: 16,
            feature_dim: 32,
            heads: 2,
            mlp_ratio: 2,
            misab_blocks: 6,
            patch_pixels: 1,
            frames: 24,
            bias_extent: 128,
            frame_bias_mode: FrameBiasMode::FullSequence,
            fusion_block: FusionBlock::Misab,
            ffc_alpha: 0.5,
            ffc_blocks: 1,
            upscale: 3,
            image_channels: 1,
            proj_bias: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration for CPU-scale experiments on 32x32 crops.
    pub fn desk() -> Self {
        Self { feature_dim: 16, misab_blocks: 2, frames: 4, bias_extent: 32, ..Self::default() }
    }

    /// Local / global channel split of the decoder.
    pub fn ffc_split(&self) -> Result<(usize, usize)> {
        let c = self.feature_dim;
        let local = ((1.0 - self.ffc_alpha) * c as f64).round() as usize;
        if !(self.ffc_alpha > 0.0 && self.ffc_alpha < 1.0) || local == 0 || local >= c {
            return Err(Error::Config(format!(
                "ffc_alpha {} leaves an empty branch for {c} channels",
                self.ffc_alpha
            )));
        }
        Ok((local, c - local))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.in_channels) {
            return bad(format!("in_channels must be 1 or 2, got {}", self.in_channels));
        }
        for (k, v) in [
            ("embed_dim", self.embed_dim),
            ("feature_dim", self.feature_dim),
            ("heads", self.heads),
            ("patch_pixels", self.patch_pixels),
            ("frames", self.frames),
            ("bias_extent", self.bias_extent),
            ("upscale", self.upscale),
            ("image_channels", self.image_channels),
            ("mlp_ratio", self.mlp_ratio),
            ("ffc_blocks", self.ffc_blocks),
        ] {
            if v == 0 {
                return bad(format!("{k} must be positive"));
            }
        }
        if self.fusion_block == FusionBlock::Misab && self.misab_blocks == 0 {
            return bad("misab_blocks must be at least 1".into());
        }
        if self.embed_dim % self.heads != 0 || self.feature_dim % self.heads != 0 {
            return bad(format!("heads {} must divide embed_dim and feature_dim", self.heads));
        }
        if self.frames > u16::MAX as usize {
            return bad("too many frames".into());
        }
        self.ffc_split().map(|_| ())
    }

    /// Flat `key = value` view, stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("in_channels", self.in_channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("feature_dim", self.feature_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("misab_blocks", self.misab_blocks.to_string()),
            ("patch_pixels", self.patch_pixels.to_string()),
            ("frames", self.frames.to_string()),
            ("bias_extent", self.bias_extent.to_string()),
            ("frame_bias_mode", self.frame_bias_mode.to_string()),
            ("fusion_block", self.fusion_block.to_string()),
            ("ffc_alpha", self.ffc_alpha.to_string()),
            ("ffc_blocks", self.ffc_blocks.to_string()),
            ("upscale", self.upscale.to_string()),
            ("image_channels", self.image_channels.to_string()),
            ("proj_bias", self.proj_bias.to_string()),
        ]
    }

    /// Sets one field from text; unknown keys are a config error naming the key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("invalid value '{v}' for key '{key}'")))
        }
        match key {
            "in_channels" => self.in_channels = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "feature_dim" => self.feature_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "mlp_ratio" => self.mlp_ratio = num(key, value)?,
            "misab_blocks" => self.misab_blocks = num(key, value)?,
            "patch_pixels" => self.patch_pixels = num(key, value)?,
            "frames" => self.frames = num(key, value)?,
            "bias_extent" => self.bias_extent = num(key, value)?,
            "frame_bias_mode" => self.frame_bias_mode = value.parse()?,
            "fusion_block" => self.fusion_block = value.parse()?,
            "ffc_alpha" => self.ffc_alpha = num(key, value)?,
            "ffc_blocks" => self.ffc_blocks = num(key, value)?,
            "upscale" => self.upscale = num(key, value)?,
            "image_channels" => self.image_channels = num(key, value)?,
            "proj_bias" => self.proj_bias = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key '{key}'"))),
        }
        Ok(())
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_roundtrip() {
        let mut c = ModelConfig::desk();
        c.frame_bias_mode = FrameBiasMode::FrameAgnostic;
        c.ffc_alpha = 0.25;
        let pairs = c.to_pairs();
        let back = ModelConfig::from_pairs(pairs.iter().map(|(k, v)| (*k, v.as_str()))).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ModelConfig::default().set("colour", "red").unwrap_err();
        assert!(err.to_string().contains("colour"));
    }

    #[test]
    fn empty_ffc_branch_is_rejected() {
        let c = ModelConfig { ffc_alpha: 0.01, feature_dim: 8, ..ModelConfig::default() };
        assert!(matches!(c.ffc_split(), Err(Error::Config(_))));
        let c = ModelConfig { ffc_alpha: 0.5, feature_dim: 8, ..ModelConfig::default() };
        assert_eq!(c.ffc_split().unwrap(), (4, 4));
    }
}
