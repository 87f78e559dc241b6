//! Cross-frame fusion. Each block summarizes every frame's pixels into
//! message tokens, lets them attend within their own frame, then runs one
//! joint attention over the image and message tokens of all frames. The
//! frames are averaged at the end.

use std::rc::Rc;

use rand::Rng;

use super::config::{FrameBiasMode, FusionBlock, ModelConfig};
use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::nn::{Ctx, LayerNorm, Linear, Mhsa, Mlp, ParamStore};
use crate::ops::{BiasLayout, RelativeLayout, TokenPos};
use crate::real::Real;

pub const IMAGE_TOKEN: u8 = 0;
pub const MESSAGE_TOKEN: u8 = 1;

/// Grid position represented by message token `j`: the first pixel of its
/// patch of `n` contiguous row-major pixels.
pub fn patch_position(j: usize, n: usize, w: usize) -> (i32, i32) {
    let p = j * n;
    ((p / w) as i32, (p % w) as i32)
}

fn check_patch(h: usize, w: usize, n: usize) -> Result<usize> {
    if n == 0 || (h * w) % n != 0 {
        return shape_err(format!("patch of {n} pixels does not divide a {h}x{w} map"));
    }
    Ok(h * w / n)
}

/// Bias layout of the per-frame message attention.
pub fn message_layout(h: usize, w: usize, n: usize, extent: usize) -> Result<RelativeLayout> {
    let count = check_patch(h, w, n)?;
    let tokens = (0..count)
        .map(|j| {
            let (y, x) = patch_position(j, n, w);
            TokenPos { frame: 0, kind: IMAGE_TOKEN, y, x }
        })
        .collect();
    RelativeLayout::new(tokens, 1, (extent, extent), None)
}

/// Bias layout of the joint attention over `k` frames, each contributing
/// `h*w` image tokens followed by its message tokens (`n = None` for none).
pub fn joint_layout(k: usize, h: usize, w: usize, n: Option<usize>, extent: usize, mode: FrameBiasMode, max_frames: usize) -> Result<RelativeLayout> {
    let count = n.map(|n| check_patch(h, w, n)).transpose()?;
    let mut tokens = Vec::with_capacity(k * (h * w + count.unwrap_or(0)));
    for f in 0..k {
        let frame = f as u16;
        tokens.extend((0..h * w).map(|p| TokenPos { frame, kind: IMAGE_TOKEN, y: (p / w) as i32, x: (p % w) as i32 }));
        if let (Some(n), Some(count)) = (n, count) {
            tokens.extend((0..count).map(|j| {
                let (y, x) = patch_position(j, n, w);
                TokenPos { frame, kind: MESSAGE_TOKEN, y, x }
            }));
        }
    }
    let frames = match mode {
        FrameBiasMode::FrameAgnostic => None,
        FrameBiasMode::FullSequence => {
            if k > max_frames {
                return shape_err(format!("{k} frames exceed the {max_frames}-frame bias table"));
            }
            Some(max_frames)
        }
    };
    RelativeLayout::new(tokens, if n.is_some() { 2 } else { 1 }, (extent, extent), frames)
}

fn joint_entries(cfg: &ModelConfig, kinds: usize) -> usize {
    let spatial = kinds * kinds * (2 * cfg.bias_extent - 1).pow(2);
    match cfg.frame_bias_mode {
        FrameBiasMode::FrameAgnostic => spatial,
        FrameBiasMode::FullSequence => spatial + (cfg.frames * kinds).pow(2),
    }
}

/// One message-token block.
#[derive(Clone, Debug)]
pub struct Misab {
    pub msg_proj: Linear,
    pub msg_ln: LayerNorm,
    pub msg_attn: Mhsa,
    pub ln1: LayerNorm,
    pub misa: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub patch_pixels: usize,
    pub extent: usize,
    pub mode: FrameBiasMode,
    pub max_frames: usize,
}

impl Misab {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.feature_dim;
        let n = cfg.patch_pixels;
        Self {
            msg_proj: Linear::new(format!("{name}.msg_proj"), n * c, c, true),
            msg_ln: LayerNorm::new(format!("{name}.msg_ln"), c),
            msg_attn: Mhsa::new(&format!("{name}.msg_attn"), c, cfg.heads, (2 * cfg.bias_extent - 1).pow(2), cfg.proj_bias),
            ln1: LayerNorm::new(format!("{name}.ln1"), c),
            misa: Mhsa::new(&format!("{name}.misa"), c, cfg.heads, joint_entries(cfg, 2), cfg.proj_bias),
            ln2: LayerNorm::new(format!("{name}.ln2"), c),
            mlp: Mlp::new(&format!("{name}.mlp"), c, c * cfg.mlp_ratio),
            patch_pixels: n,
            extent: cfg.bias_extent,
            mode: cfg.frame_bias_mode,
            max_frames: cfg.frames,
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.msg_proj.init(store, rng);
        self.msg_ln.init(store);
        self.msg_attn.init(store, rng);
        self.ln1.init(store);
        self.misa.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    /// Image tokens `[S, H*W, C]` -> message tokens `[S, N, C]`.
    pub fn message_tokens<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        let n = self.patch_pixels;
        if s[1] % n != 0 {
            return shape_err(format!("patch of {n} pixels does not divide {} tokens", s[1]));
        }
        let patches = x.reshape(&[s[0], s[1] / n, n * s[2]])?;
        self.msg_proj.forward(ctx, patches)
    }

    /// Residual attention among one frame's message tokens `[S, N, C]`.
    pub fn message_attention<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, m: Var<'t, R>, layout: &Rc<BiasLayout>) -> Result<Var<'t, R>> {
        m.add(self.msg_attn.forward(ctx, self.msg_ln.forward(ctx, m)?, layout)?)
    }

    /// Joint block over `[B, K*(H*W+N), C]`.
    pub fn joint<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, f: Var<'t, R>, layout: &Rc<BiasLayout>) -> Result<Var<'t, R>> {
        let y = f.add(self.misa.forward(ctx, self.ln1.forward(ctx, f)?, layout)?)?;
        y.add(self.mlp.forward(ctx, self.ln2.forward(ctx, y)?)?)
    }

    /// `x` holds image tokens `[B*K, H*W, C]`; returns the updated image tokens.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>, k: usize, h: usize, w: usize) -> Result<Var<'t, R>> {
        let s = x.shape();
        let (bk, hw, c) = (s[0], s[1], s[2]);
        if hw != h * w || k == 0 || bk % k != 0 {
            return shape_err(format!("misab: tokens {s:?} inconsistent with K={k}, {h}x{w}"));
        }
        let msg_layout = Rc::new(BiasLayout::Relative(message_layout(h, w, self.patch_pixels, self.extent)?));
        let m = self.message_tokens(ctx, x)?;
        let m = self.message_attention(ctx, m, &msg_layout)?;
        let count = m.shape()[1];
        let per_frame = hw + count;
        let f = Var::concat(&[x, m], 1)?.reshape(&[bk / k, k * per_frame, c])?;
        let layout = Rc::new(BiasLayout::Relative(joint_layout(k, h, w, Some(self.patch_pixels), self.extent, self.mode, self.max_frames)?));
        let out = self.joint(ctx, f, &layout)?.reshape(&[bk, per_frame, c])?;
        out.narrow(1, 0, hw)
    }
}

/// Plain transformer block over all image tokens of all frames.
#[derive(Clone, Debug)]
pub struct JointBlock {
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub extent: usize,
    pub mode: FrameBiasMode,
    pub max_frames: usize,
}

impl JointBlock {
    pub fn new(name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.feature_dim;
        Self {
            ln1: LayerNorm::new(format!("{name}.ln1"), c),
            attn: Mhsa::new(&format!("{name}.attn"), c, cfg.heads, joint_entries(cfg, 1), cfg.proj_bias),
            ln2: LayerNorm::new(format!("{name}.ln2"), c),
            mlp: Mlp::new(&format!("{name}.mlp"), c, c * cfg.mlp_ratio),
            extent: cfg.bias_extent,
            mode: cfg.frame_bias_mode,
            max_frames: cfg.frames,
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>, k: usize, h: usize, w: usize) -> Result<Var<'t, R>> {
        let s = x.shape();
        let (bk, hw, c) = (s[0], s[1], s[2]);
        let f = x.reshape(&[bk / k, k * hw, c])?;
        let layout = Rc::new(BiasLayout::Relative(joint_layout(k, h, w, None, self.extent, self.mode, self.max_frames)?));
        let y = f.add(self.attn.forward(ctx, self.ln1.forward(ctx, f)?, &layout)?)?;
        let z = y.add(self.mlp.forward(ctx, self.ln2.forward(ctx, y)?)?)?;
        z.reshape(&[bk, hw, c])
    }
}

#[derive(Clone, Debug)]
pub enum FusionStage {
    Misab(Vec<Misab>),
    SelfAttention(Vec<JointBlock>),
    MeanPool,
}

/// Fusion blocks followed by the mean over frames.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub stage: FusionStage,
}

impl Fusion {
    pub fn new(cfg: &ModelConfig) -> Self {
        let stage = match cfg.fusion_block {
            FusionBlock::Misab => FusionStage::Misab((0..cfg.misab_blocks).map(|i| Misab::new(&format!("fuse.b{i}"), cfg)).collect()),
            FusionBlock::SelfAttention => {
                FusionStage::SelfAttention((0..cfg.misab_blocks).map(|i| JointBlock::new(&format!("fuse.b{i}"), cfg)).collect())
            }
            FusionBlock::MeanPool => FusionStage::MeanPool,
        };
        Self { stage }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        match &self.stage {
            FusionStage::Misab(b) => b.iter().for_each(|b| b.init(store, rng)),
            FusionStage::SelfAttention(b) => b.iter().for_each(|b| b.init(store, rng)),
            FusionStage::MeanPool => {}
        }
    }

    /// Per-frame token maps `[B*K, H*W, C]` after all blocks, before the mean.
    pub fn per_frame<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, mut x: Var<'t, R>, k: usize, h: usize, w: usize) -> Result<Var<'t, R>> {
        match &self.stage {
            FusionStage::Misab(blocks) => {
                for b in blocks {
                    x = b.forward(ctx, x, k, h, w)?;
                }
            }
            FusionStage::SelfAttention(blocks) => {
                for b in blocks {
                    x = b.forward(ctx, x, k, h, w)?;
                }
            }
            FusionStage::MeanPool => {}
        }
        Ok(x)
    }

    /// Encoded features `[B*K, C, H, W]` -> fused `[B, C, H, W]`.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, feats: Var<'t, R>, k: usize) -> Result<Var<'t, R>> {
        let s = feats.shape();
        let &[bk, c, h, w] = s.as_slice() else {
            return shape_err(format!("fusion expects [B*K,C,H,W], got {s:?}"));
        };
        if k == 0 || bk % k != 0 {
            return shape_err(format!("{bk} feature maps do not split into frames of {k}"));
        }
        let x = super::encoder::to_tokens(feats)?;
        let x = self.per_frame(ctx, x, k, h, w)?;
        let fused = x.reshape(&[bk / k, k, h * w, c])?.mean_axis(1)?;
        super::encoder::from_tokens(fused, h, w)
    }
}
