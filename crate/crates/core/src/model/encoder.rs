//! Per-frame encoder: convolutional stem, one conv/attention block, output
//! convolution. Frames are processed as independent batch entries.

use std::rc::Rc;

use rand::Rng;

use super::config::ModelConfig;
use crate::autodiff::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm, Conv, Ctx, LayerNorm, Mhsa, Mlp, ParamStore};
use crate::ops::{BiasLayout, RelativeLayout};
use crate::real::Real;
use crate::tensor::Tensor;

/// Frames of one scene after padding/selection to exactly `K`.
#[derive(Clone, Debug)]
pub struct FrameStack<R> {
    /// `[K, C_in, H, W]`.
    pub frames: Tensor<R>,
    /// Quality masks `[K, H, W]` (1 = reliable), when known.
    pub masks: Option<Tensor<R>>,
    pub clearance: Vec<f64>,
    /// True for appended copies of the clearest frame.
    pub pad_flags: Vec<bool>,
    /// Index of the source frame each slot was taken from.
    pub source: Vec<usize>,
}

impl<R: Real> FrameStack<R> {
    pub fn len(&self) -> usize {
        self.pad_flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pad_flags.is_empty()
    }

    /// Reorders every per-frame field; `order[i]` is the slot moved to position `i`.
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let k = self.len();
        let mut seen = vec![false; k];
        if order.len() != k || order.iter().any(|&i| i >= k || std::mem::replace(&mut seen[i], true)) {
            return Err(Error::Contract(format!("{order:?} is not a permutation of {k} frames")));
        }
        let pick = |t: &Tensor<R>| Tensor::stack(&order.iter().map(|&i| t.index_first(i)).collect::<Vec<_>>());
        Ok(Self {
            frames: pick(&self.frames)?,
            masks: self.masks.as_ref().map(pick).transpose()?,
            clearance: order.iter().map(|&i| self.clearance[i]).collect(),
            pad_flags: order.iter().map(|&i| self.pad_flags[i]).collect(),
            source: order.iter().map(|&i| self.source[i]).collect(),
        })
    }
}

/// Index of the clearest frame; ties go to the lowest index.
pub fn clearest_index(clearance: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &c) in clearance.iter().enumerate() {
        if best.is_none_or(|b| c > clearance[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fixes the frame count at `k`: keeps the `k` clearest frames (stable
/// descending order) or appends copies of the clearest frame.
pub fn pad_scene<R: Real>(frames: &Tensor<R>, masks: Option<&Tensor<R>>, clearance: &[f64], k: usize) -> Result<FrameStack<R>> {
    let n = frames.shape().first().copied().unwrap_or(0);
    if n == 0 || frames.rank() != 4 {
        return Err(Error::Contract(format!("pad_scene needs a non-empty [N,C,H,W] stack, got {:?}", frames.shape())));
    }
    if k == 0 {
        return Err(Error::Contract("pad_scene needs K >= 1".into()));
    }
    if clearance.len() != n {
        return shape_err(format!("{} clearance scores for {n} frames", clearance.len()));
    }
    if let Some(m) = masks {
        if m.shape() != [n, frames.dim(2), frames.dim(3)] {
            return shape_err(format!("masks {:?} do not match frames {:?}", m.shape(), frames.shape()));
        }
    }
    let (source, pad_flags): (Vec<usize>, Vec<bool>) = if n >= k {
        if n == k {
            ((0..n).collect(), vec![false; k])
        } else {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| clearance[b].total_cmp(&clearance[a]));
            order.truncate(k);
            (order, vec![false; k])
        }
    } else {
        let best = clearest_index(clearance).unwrap_or(0);
        let src = (0..n).chain(std::iter::repeat_n(best, k - n)).collect();
        (src, (0..k).map(|i| i >= n).collect())
    };
    let pick = |t: &Tensor<R>| Tensor::stack(&source.iter().map(|&i| t.index_first(i)).collect::<Vec<_>>());
    Ok(FrameStack {
        frames: pick(frames)?,
        masks: masks.map(pick).transpose()?,
        clearance: source.iter().map(|&i| clearance[i]).collect(),
        pad_flags,
        source,
    })
}

/// `[N, C, H, W]` -> `[N, H*W, C]`.
pub fn to_tokens<'t, R: Real>(x: Var<'t, R>) -> Result<Var<'t, R>> {
    let s = x.shape();
    let &[n, c, h, w] = s.as_slice() else {
        return shape_err(format!("to_tokens expects [N,C,H,W], got {s:?}"));
    };
    x.permute(&[0, 2, 3, 1])?.reshape(&[n, h * w, c])
}

/// `[N, H*W, C]` -> `[N, C, H, W]`.
pub fn from_tokens<'t, R: Real>(x: Var<'t, R>, h: usize, w: usize) -> Result<Var<'t, R>> {
    let s = x.shape();
    let &[n, t, c] = s.as_slice() else {
        return shape_err(format!("from_tokens expects [N,T,C], got {s:?}"));
    };
    if t != h * w {
        return shape_err(format!("{t} tokens cannot form a {h}x{w} map"));
    }
    x.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// Conv/attention block over `[N, C, H, W]` with full attention across all
/// `H*W` tokens.
#[derive(Clone, Debug)]
pub struct CmtBlock {
    pub lpu: Conv,
    pub ln1: LayerNorm,
    pub attn: Mhsa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
    pub extent: usize,
}

impl CmtBlock {
    pub fn new(name: &str, channels: usize, cfg: &ModelConfig) -> Self {
        let extent = cfg.bias_extent;
        let entries = (2 * extent - 1).pow(2);
        Self {
            lpu: Conv::new(format!("{name}.lpu"), channels, channels, 3, true),
            ln1: LayerNorm::new(format!("{name}.ln1"), channels),
            attn: Mhsa::new(&format!("{name}.attn"), channels, cfg.heads, entries, cfg.proj_bias),
            ln2: LayerNorm::new(format!("{name}.ln2"), channels),
            mlp: Mlp::new(&format!("{name}.mlp"), channels, channels * cfg.mlp_ratio),
            extent,
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.lpu.init(store, rng);
        self.ln1.init(store);
        self.attn.init(store, rng);
        self.ln2.init(store);
        self.mlp.init(store, rng);
    }

    pub fn layout(&self, h: usize, w: usize) -> Result<Rc<BiasLayout>> {
        Ok(Rc::new(BiasLayout::Relative(RelativeLayout::grid(h, w, (self.extent, self.extent))?)))
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        let (h, w) = (s[2], s[3]);
        let xc = x.add(self.lpu.forward(ctx, x)?)?;
        let t = to_tokens(xc)?;
        let layout = self.layout(h, w)?;
        let a = t.add(self.attn.forward(ctx, self.ln1.forward(ctx, t)?, &layout)?)?;
        let m = a.add(self.mlp.forward(ctx, self.ln2.forward(ctx, a)?)?)?;
        from_tokens(m, h, w)
    }
}

/// Stem (three conv -> GELU -> batch norm layers), one [`CmtBlock`], output conv.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub stem: Vec<(Conv, BatchNorm)>,
    pub block: CmtBlock,
    pub out: Conv,
}

impl Encoder {
    pub fn new(cfg: &ModelConfig) -> Self {
        let e = cfg.embed_dim;
        let stem = (0..3)
            .map(|i| {
                let cin = if i == 0 { cfg.in_channels } else { e };
                (Conv::new(format!("enc.stem{i}.conv"), cin, e, 3, true), BatchNorm::new(format!("enc.stem{i}.bn"), e))
            })
            .collect();
        Self {
            stem,
            block: CmtBlock::new("enc.cmtb", e, cfg),
            out: Conv::new("enc.out", e, cfg.feature_dim, 3, true),
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        for (c, bn) in &self.stem {
            c.init(store, rng);
            bn.init(store);
        }
        self.block.init(store, rng);
        self.out.init(store, rng);
    }

    pub fn stem<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, mut x: Var<'t, R>) -> Result<Var<'t, R>> {
        for (c, bn) in &self.stem {
            x = bn.forward(ctx, c.forward(ctx, x)?.gelu()?)?;
        }
        Ok(x)
    }

    /// `[N, C_in, H, W]` frames -> `[N, C, H, W]` features, shared weights.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.stem[0].0.cin {
            return shape_err(format!("encoder expects [N,{},H,W], got {s:?}", self.stem[0].0.cin));
        }
        let xc = self.stem(ctx, x)?;
        let xm = self.block.forward(ctx, xc)?;
        self.out.forward(ctx, xm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames(n: usize) -> Tensor<f32> {
        Tensor::from_fn(&[n, 1, 2, 2], |i| (i / 4) as f32)
    }

    #[test]
    fn pad_no_op() {
        let s = pad_scene(&frames(4), None, &[0.1, 0.2, 0.3, 0.4], 4).unwrap();
        assert_eq!(s.frames, frames(4));
        assert!(s.pad_flags.iter().all(|&p| !p));
    }

    #[test]
    fn pad_with_clearest() {
        let s = pad_scene(&frames(2), None, &[0.3, 0.9], 4).unwrap();
        assert_eq!(s.source, vec![0, 1, 1, 1]);
        assert_eq!(s.pad_flags, vec![false, false, true, true]);
        assert_eq!(s.frames.index_first(3), frames(2).index_first(1));
    }

    #[test]
    fn pad_tie_goes_to_lowest_index() {
        let s = pad_scene(&frames(3), None, &[0.5, 0.5, 0.2], 4).unwrap();
        assert_eq!(s.source, vec![0, 1, 2, 0]);
    }

    #[test]
    fn selects_clearest_when_too_many() {
        let s = pad_scene(&frames(5), None, &[0.1, 0.9, 0.5, 0.9, 0.2], 3).unwrap();
        assert_eq!(s.source, vec![1, 3, 2]);
    }

    #[test]
    fn empty_stack_is_contract_error() {
        let e = pad_scene(&Tensor::<f32>::zeros(&[0, 1, 2, 2]), None, &[], 4).unwrap_err();
        assert!(matches!(e, Error::Contract(_)));
    }
}
