//! The super-resolution network: per-frame encoder, cross-frame fusion,
//! Fourier-convolution decoder with pixel-shuffle upsampling.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod fusion;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, Mode, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub use config::{FrameBiasMode, FusionBlock, ModelConfig};
pub use decoder::{Decoder, Ffc, SpectralTransform};
pub use encoder::{clearest_index, pad_scene, CmtBlock, Encoder, FrameStack};
pub use fusion::{Fusion, FusionStage, JointBlock, Misab};

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub fusion: Fusion,
    pub decoder: Decoder,
}

impl Model {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg: cfg.clone(), encoder: Encoder::new(cfg), fusion: Fusion::new(cfg), decoder: Decoder::new(cfg)? })
    }

    /// Fresh parameters drawn from `rng`.
    pub fn init<R: Real>(&self, rng: &mut impl Rng) -> ParamStore<R> {
        let mut store = ParamStore::new();
        self.encoder.init(&mut store, rng);
        self.fusion.init(&mut store, rng);
        self.decoder.init(&mut store, rng);
        store
    }

    /// `[B, K, C_in, h, w]` frames -> `[B, 1, r*h, r*w]`.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        let &[b, k, c, h, w] = s.as_slice() else {
            return shape_err(format!("model expects [B,K,C,h,w], got {s:?}"));
        };
        if c != self.cfg.in_channels {
            return shape_err(format!("model expects {} input channels, got {c}", self.cfg.in_channels));
        }
        let frames = x.reshape(&[b * k, c, h, w])?;
        let feats = self.encoder.forward(ctx, frames)?;
        let fused = self.fusion.forward(ctx, feats, k)?;
        self.decoder.forward(ctx, fused)
    }

    /// Eval-mode forward without gradient bookkeeping.
    pub fn infer<R: Real>(&self, store: &ParamStore<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, store, Mode::Eval);
        let input = tape.constant(x.clone());
        let out = self.forward(&ctx, input)?;
        Ok(out.value().as_ref().clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { embed_dim: 4, feature_dim: 4, misab_blocks: 1, frames: 2, bias_extent: 4, ..ModelConfig::default() }
    }

    #[test]
    fn output_shape_is_upscaled_single_band() {
        for fb in [FusionBlock::Misab, FusionBlock::SelfAttention, FusionBlock::MeanPool] {
            let cfg = ModelConfig { fusion_block: fb, ..tiny() };
            let m = Model::new(&cfg).unwrap();
            let store = m.init::<f32>(&mut ChaCha8Rng::seed_from_u64(1));
            let x = Tensor::from_fn(&[2, 2, 1, 4, 5], |i| (i % 7) as f32 / 7.0);
            let y = m.infer(&store, &x).unwrap();
            assert_eq!(y.shape(), [2, 1, 12, 15]);
        }
    }

    #[test]
    fn wrong_channel_count_is_shape_error() {
        let m = Model::new(&tiny()).unwrap();
        let store = m.init::<f32>(&mut ChaCha8Rng::seed_from_u64(1));
        let x = Tensor::zeros(&[1, 2, 2, 4, 4]);
        assert!(matches!(m.infer(&store, &x), Err(crate::Error::Shape(_))));
    }
}
