//! Fourier-convolution decoder and pixel-shuffle upsampler.

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{BatchNorm, Conv, Ctx, ParamStore};
use crate::real::Real;

/// Global-branch transform: residual 1x1 convolutions on the stacked
/// real/imaginary spectrum.
#[derive(Clone, Debug)]
pub struct SpectralTransform {
    pub conv1: Conv,
    pub conv2: Conv,
}

impl SpectralTransform {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            conv1: Conv::new(format!("{name}.conv1"), 2 * channels, 2 * channels, 1, false),
            conv2: Conv::new(format!("{name}.conv2"), 2 * channels, 2 * channels, 1, false),
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, fg: Var<'t, R>) -> Result<Var<'t, R>> {
        let spec = fg.fft2_stacked()?;
        let z = self.conv2.forward(ctx, self.conv1.forward(ctx, spec)?.relu()?)?;
        fg.add(z.ifft2_real()?)
    }
}

/// One local/global split block.
#[derive(Clone, Debug)]
pub struct Ffc {
    pub local: usize,
    pub global: usize,
    pub l2l: Conv,
    pub g2l: Conv,
    pub l2g: Conv,
    pub g2g: SpectralTransform,
    pub bn_l: BatchNorm,
    pub bn_g: BatchNorm,
}

impl Ffc {
    pub fn new(name: &str, local: usize, global: usize) -> Self {
        Self {
            local,
            global,
            l2l: Conv::new(format!("{name}.l2l"), local, local, 3, false),
            g2l: Conv::new(format!("{name}.g2l"), global, local, 3, false),
            l2g: Conv::new(format!("{name}.l2g"), local, global, 3, false),
            g2g: SpectralTransform::new(&format!("{name}.spectral"), global),
            bn_l: BatchNorm::new(format!("{name}.bn_l"), local),
            bn_g: BatchNorm::new(format!("{name}.bn_g"), global),
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.l2l.init(store, rng);
        self.g2l.init(store, rng);
        self.l2g.init(store, rng);
        self.g2g.init(store, rng);
        self.bn_l.init(store);
        self.bn_g.init(store);
    }

    /// `[B, C, H, W]` -> `[B, C, H, W]`, local channels first.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let c = x.shape()[1];
        if c != self.local + self.global {
            return shape_err(format!("ffc expects {} channels, got {c}", self.local + self.global));
        }
        let fl = x.narrow(1, 0, self.local)?;
        let fg = x.narrow(1, self.local, self.global)?;
        let xl = self.l2l.forward(ctx, fl)?.add(self.g2l.forward(ctx, fg)?)?;
        let xg = self.l2g.forward(ctx, fl)?.add(self.g2g.forward(ctx, fg)?)?;
        let xl = self.bn_l.forward(ctx, xl)?.relu()?;
        let xg = self.bn_g.forward(ctx, xg)?.relu()?;
        Var::concat(&[xl, xg], 1)
    }
}

/// FFC blocks, output conv, tail conv to `r^2 * C_img` channels, pixel
/// shuffle and a final conv to the single output band.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub blocks: Vec<Ffc>,
    pub out: Conv,
    pub tail: Conv,
    pub final_conv: Conv,
    pub upscale: usize,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let (local, global) = cfg.ffc_split()?;
        let c = cfg.feature_dim;
        let r = cfg.upscale;
        Ok(Self {
            blocks: (0..cfg.ffc_blocks).map(|i| Ffc::new(&format!("dec.ffc{i}"), local, global)).collect(),
            out: Conv::new("dec.out", c, c, 3, true),
            tail: Conv::new("dec.tail", c, r * r * cfg.image_channels, 3, true),
            final_conv: Conv::new("dec.final", cfg.image_channels, 1, 3, true),
            upscale: r,
        })
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        for b in &self.blocks {
            b.init(store, rng);
        }
        self.out.init(store, rng);
        self.tail.init(store, rng);
        self.final_conv.init(store, rng);
    }

    /// Fused features -> decoded features `[B, C, H, W]`.
    pub fn decode<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, mut x: Var<'t, R>) -> Result<Var<'t, R>> {
        for b in &self.blocks {
            x = b.forward(ctx, x)?;
        }
        self.out.forward(ctx, x)
    }

    /// Decoded features -> `[B, 1, rH, rW]`.
    pub fn upsample<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, fd: Var<'t, R>) -> Result<Var<'t, R>> {
        let t = self.tail.forward(ctx, fd)?;
        self.final_conv.forward(ctx, t.pixel_shuffle(self.upscale)?)
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let d = self.decode(ctx, x)?;
        self.upsample(ctx, d)
    }
}
