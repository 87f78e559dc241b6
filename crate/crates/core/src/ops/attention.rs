//! Fused multi-head scaled dot-product attention with an additive, learnable
//! position bias.
//!
//! The forward pass keeps only the per-row log-sum-exp; the backward pass
//! recomputes attention probabilities row by row. Memory therefore stays
//! linear in the token count, which matters for the joint cross-frame
//! attention where sequences reach several thousand tokens.

use std::rc::Rc;

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Position of a token for bias lookup.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenPos {
    /// Frame the token belongs to.
    pub frame: u16,
    /// Token kind (0 = image token, 1 = message token).
    pub kind: u8,
    pub y: i32,
    pub x: i32,
}

/// Relative-offset bias: a table indexed by the token-kind pair and the
/// clipped spatial offset, optionally plus a frame-pair table.
#[derive(Clone, Debug)]
pub struct RelativeLayout {
    tokens: Vec<TokenPos>,
    kinds: usize,
    /// Offsets are clipped to `[-(extent - 1), extent - 1]` per axis.
    extent: (usize, usize),
    /// Number of frames when the frame-pair table is present.
    frames: Option<usize>,
    /// Maximal row segments: same frame, kind and `y`, `x` stepping by one.
    runs: Vec<Run>,
}

#[derive(Clone, Copy, Debug)]
struct Run {
    start: usize,
    len: usize,
}

fn find_runs(tokens: &[TokenPos]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if let Some(r) = runs.last_mut() {
            let p = &tokens[i - 1];
            if (p.frame, p.kind, p.y, p.x + 1) == (t.frame, t.kind, t.y, t.x) {
                r.len += 1;
                continue;
            }
        }
        runs.push(Run { start: i, len: 1 });
    }
    runs
}

impl RelativeLayout {
    pub fn new(tokens: Vec<TokenPos>, kinds: usize, extent: (usize, usize), frames: Option<usize>) -> Result<Self> {
        if extent.0 == 0 || extent.1 == 0 || kinds == 0 {
            return shape_err("relative layout needs positive extent and kinds");
        }
        for t in &tokens {
            if t.kind as usize >= kinds || frames.is_some_and(|f| t.frame as usize >= f) {
                return shape_err(format!("token {t:?} outside layout ({kinds} kinds, {frames:?} frames)"));
            }
        }
        let runs = find_runs(&tokens);
        Ok(Self { tokens, kinds, extent, frames, runs })
    }

    /// Single-kind layout of an `h x w` grid in row-major order.
    pub fn grid(h: usize, w: usize, extent: (usize, usize)) -> Result<Self> {
        let tokens = (0..h * w)
            .map(|i| TokenPos { frame: 0, kind: 0, y: (i / w) as i32, x: (i % w) as i32 })
            .collect();
        Self::new(tokens, 1, extent, None)
    }

    fn spatial_side(&self) -> (usize, usize) {
        (2 * self.extent.0 - 1, 2 * self.extent.1 - 1)
    }

    fn spatial_entries(&self) -> usize {
        let (sy, sx) = self.spatial_side();
        self.kinds * self.kinds * sy * sx
    }

    pub fn entries(&self) -> usize {
        self.spatial_entries() + self.frames.map_or(0, |f| (f * self.kinds).pow(2))
    }

    pub fn tokens(&self) -> &[TokenPos] {
        &self.tokens
    }

    #[inline]
    fn spatial_index(&self, a: &TokenPos, b: &TokenPos) -> usize {
        let (ey, ex) = (self.extent.0 as i32 - 1, self.extent.1 as i32 - 1);
        let (sy, sx) = self.spatial_side();
        let dy = (a.y - b.y).clamp(-ey, ey) + ey;
        let dx = (a.x - b.x).clamp(-ex, ex) + ex;
        ((a.kind as usize * self.kinds + b.kind as usize) * sy + dy as usize) * sx + dx as usize
    }

    #[inline]
    fn frame_index(&self, a: &TokenPos, b: &TokenPos) -> Option<usize> {
        self.frames.map(|f| {
            let side = f * self.kinds;
            let qa = a.frame as usize * self.kinds + a.kind as usize;
            let kb = b.frame as usize * self.kinds + b.kind as usize;
            self.spatial_entries() + qa * side + kb
        })
    }
}

/// Table indices of one run of keys.
enum RunIndex<'a> {
    /// Unclipped run: indices `lo + n - 1` down to `lo`.
    Reversed(usize, usize),
    Each(&'a [usize]),
}

impl RunIndex<'_> {
    fn len(&self) -> usize {
        match self {
            RunIndex::Reversed(_, n) => *n,
            RunIndex::Each(ix) => ix.len(),
        }
    }
}

impl RelativeLayout {
    /// Calls `f(first key, spatial indices, frame-pair index)` for every key
    /// run as seen from query `i`.
    #[inline(always)]
    fn visit_row(&self, i: usize, mut f: impl FnMut(usize, RunIndex<'_>, Option<usize>)) {
        let a = &self.tokens[i];
        let ex = self.extent.1 as i32 - 1;
        let mut scratch = Vec::new();
        for run in &self.runs {
            let b0 = &self.tokens[run.start];
            let frame = self.frame_index(a, b0);
            let (first, last) = (a.x - b0.x, a.x - (b0.x + run.len as i32 - 1));
            if first <= ex && last >= -ex {
                let lo = self.spatial_index(a, &TokenPos { x: b0.x + run.len as i32 - 1, ..*b0 });
                f(run.start, RunIndex::Reversed(lo, run.len), frame);
            } else {
                scratch.clear();
                scratch.extend(self.tokens[run.start..run.start + run.len].iter().map(|b| self.spatial_index(a, b)));
                f(run.start, RunIndex::Each(&scratch), frame);
            }
        }
    }
}

/// How the bias table maps onto token pairs.
#[derive(Clone, Debug)]
pub enum BiasLayout {
    /// Independent entry per `(query, key)` pair; table holds `T * T` entries.
    Dense { tokens: usize },
    Relative(RelativeLayout),
}

impl BiasLayout {
    pub fn tokens(&self) -> usize {
        match self {
            BiasLayout::Dense { tokens } => *tokens,
            BiasLayout::Relative(r) => r.tokens.len(),
        }
    }

    pub fn entries(&self) -> usize {
        match self {
            BiasLayout::Dense { tokens } => tokens * tokens,
            BiasLayout::Relative(r) => r.entries(),
        }
    }

    /// Adds the bias of query row `i` onto `scores`.
    #[inline(always)]
    fn add_row<R: Real>(&self, i: usize, table: &[R], scores: &mut [R]) {
        match self {
            BiasLayout::Dense { tokens } => {
                for (s, &b) in scores.iter_mut().zip(&table[i * tokens..(i + 1) * tokens]) {
                    *s += b;
                }
            }
            BiasLayout::Relative(r) => r.visit_row(i, |start, idx, frame| {
                let out = &mut scores[start..start + idx.len()];
                match idx {
                    RunIndex::Reversed(lo, n) => {
                        for (s, &b) in out.iter_mut().zip(table[lo..lo + n].iter().rev()) {
                            *s += b;
                        }
                    }
                    RunIndex::Each(ix) => {
                        for (s, &k) in out.iter_mut().zip(ix) {
                            *s += table[k];
                        }
                    }
                }
                if let Some(fi) = frame {
                    let b = table[fi];
                    for s in out.iter_mut() {
                        *s += b;
                    }
                }
            }),
        }
    }

    #[inline(always)]
    fn scatter_row<R: Real>(&self, i: usize, ds: &[R], gtable: &mut [R]) {
        match self {
            BiasLayout::Dense { tokens } => {
                for (g, &d) in gtable[i * tokens..(i + 1) * tokens].iter_mut().zip(ds) {
                    *g += d;
                }
            }
            BiasLayout::Relative(r) => r.visit_row(i, |start, idx, frame| {
                let d = &ds[start..start + idx.len()];
                match idx {
                    RunIndex::Reversed(lo, n) => {
                        for (g, &v) in gtable[lo..lo + n].iter_mut().rev().zip(d) {
                            *g += v;
                        }
                    }
                    RunIndex::Each(ix) => {
                        for (&k, &v) in ix.iter().zip(d) {
                            gtable[k] += v;
                        }
                    }
                }
                if let Some(fi) = frame {
                    let mut acc = R::zero();
                    for &v in d {
                        acc += v;
                    }
                    gtable[fi] += acc;
                }
            }),
        }
    }

    /// Materializes the `[T, T]` bias of one head; used by oracles and tests.
    pub fn dense_head<R: Real>(&self, table_head: &[R]) -> Tensor<R> {
        let t = self.tokens();
        let mut out = vec![R::zero(); t * t];
        for (i, row) in out.chunks_mut(t).enumerate() {
            self.add_row(i, table_head, row);
        }
        Tensor::new(&[t, t], out).unwrap()
    }
}

#[derive(Clone, Copy)]
struct Dims {
    s: usize,
    t: usize,
    c: usize,
    heads: usize,
    d: usize,
}

/// Whether the 256-bit kernels can run on this CPU.
#[cfg(target_arch = "x86_64")]
fn wide_simd() -> bool {
    std::arch::is_x86_feature_detected!("avx2")
}

/// Rows per work item; a function of `T` only so partial sums reduce in a
/// fixed order regardless of thread count.
fn row_chunk(t: usize) -> usize {
    t.div_ceil(8).max(128).min(t.max(1))
}

/// `[S, T, C]` -> `[S, heads, T, d]`.
fn split_heads<R: Real>(x: &[R], dm: Dims) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for s in 0..dm.s {
        for t in 0..dm.t {
            let src = &x[(s * dm.t + t) * dm.c..][..dm.c];
            for h in 0..dm.heads {
                let dst = ((s * dm.heads + h) * dm.t + t) * dm.d;
                out[dst..dst + dm.d].copy_from_slice(&src[h * dm.d..(h + 1) * dm.d]);
            }
        }
    }
    out
}

/// Keys per panel.
const LANES: usize = 8;
/// Query rows processed together so each key panel is loaded once per group.
const GROUP: usize = 4;

/// `[S, T, C]` -> `[S, heads, panels, d, LANES]`, zero-padded to whole panels.
fn to_panels<R: Real>(x: &[R], dm: Dims) -> Vec<R> {
    let np = dm.t.div_ceil(LANES);
    let mut out = vec![R::zero(); dm.s * dm.heads * np * dm.d * LANES];
    for s in 0..dm.s {
        for t in 0..dm.t {
            let src = &x[(s * dm.t + t) * dm.c..][..dm.c];
            for (ch, &v) in src.iter().enumerate() {
                let (h, e) = (ch / dm.d, ch % dm.d);
                out[(((s * dm.heads + h) * np + t / LANES) * dm.d + e) * LANES + t % LANES] = v;
            }
        }
    }
    out
}

/// Inverse of [`to_panels`].
fn from_panels<R: Real>(x: &[R], dm: Dims) -> Vec<R> {
    let np = dm.t.div_ceil(LANES);
    let mut out = vec![R::zero(); dm.s * dm.t * dm.c];
    for s in 0..dm.s {
        for t in 0..dm.t {
            let dst = &mut out[(s * dm.t + t) * dm.c..][..dm.c];
            for (ch, o) in dst.iter_mut().enumerate() {
                let (h, e) = (ch / dm.d, ch % dm.d);
                *o = x[(((s * dm.heads + h) * np + t / LANES) * dm.d + e) * LANES + t % LANES];
            }
        }
    }
    out
}

fn merge_heads<R: Real>(x: &[R], dm: Dims) -> Vec<R> {
    let mut out = vec![R::zero(); x.len()];
    for s in 0..dm.s {
        for h in 0..dm.heads {
            for t in 0..dm.t {
                let src = ((s * dm.heads + h) * dm.t + t) * dm.d;
                let dst = (s * dm.t + t) * dm.c + h * dm.d;
                out[dst..dst + dm.d].copy_from_slice(&x[src..src + dm.d]);
            }
        }
    }
    out
}

#[inline(always)]
fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    a.iter().zip(b).fold(R::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline(always)]
fn lanes<R>(s: &[R]) -> &[R; LANES] {
    s.try_into().expect("panel lane")
}

#[inline(always)]
fn lanes_mut<R>(s: &mut [R]) -> &mut [R; LANES] {
    s.try_into().expect("panel lane")
}

#[inline(always)]
fn lane_sum<R: Real>(a: &[R]) -> R {
    ((a[0] + a[4]) + (a[1] + a[5])) + ((a[2] + a[6]) + (a[3] + a[7]))
}

#[inline(always)]
fn sum<R: Real>(a: &[R]) -> R {
    let mut acc = [R::zero(); LANES];
    let c = a.chunks_exact(LANES);
    let r = c.remainder().iter().fold(R::zero(), |a, &b| a + b);
    for x in c {
        for l in 0..LANES {
            acc[l] += x[l];
        }
    }
    lane_sum(&acc) + r
}

/// `out[g, j] = rows[g] . panels[j]` for `rows` of `d` values each; `out`
/// rows are `stride` long.
#[inline(always)]
fn panel_products<R: Real>(rows: &[R], d: usize, panels: &[R], out: &mut [R], stride: usize) {
    match d {
        4 => panel_products_fixed::<R, 4>(rows, panels, out, stride),
        8 => panel_products_fixed::<R, 8>(rows, panels, out, stride),
        16 => panel_products_fixed::<R, 16>(rows, panels, out, stride),
        _ => {
            for (p, panel) in panels.chunks_exact(d * LANES).enumerate() {
                for (g, row) in rows.chunks_exact(d).enumerate() {
                    let mut acc = [R::zero(); LANES];
                    for (&x, lane) in row.iter().zip(panel.chunks_exact(LANES)) {
                        let lane = lanes(lane);
                        for l in 0..LANES {
                            acc[l] += x * lane[l];
                        }
                    }
                    out[g * stride + p * LANES..][..LANES].copy_from_slice(&acc);
                }
            }
        }
    }
}

#[inline(always)]
fn panel_products_fixed<R: Real, const D: usize>(rows: &[R], panels: &[R], out: &mut [R], stride: usize) {
    for (p, panel) in panels.chunks_exact(D * LANES).enumerate() {
        for (g, row) in rows.chunks_exact(D).enumerate() {
            let mut acc = [R::zero(); LANES];
            for (e, &x) in row.iter().enumerate() {
                for l in 0..LANES {
                    acc[l] += x * panel[e * LANES + l];
                }
            }
            out[g * stride + p * LANES..][..LANES].copy_from_slice(&acc);
        }
    }
}

/// `acc[g, e, lane] = sum over panels of weights[g, j] * panels[j, e]`.
#[inline(always)]
fn panel_weighted<R: Real>(weights: &[R], stride: usize, groups: usize, d: usize, panels: &[R], acc: &mut [R]) {
    match d {
        4 => panel_weighted_fixed::<R, 4>(weights, stride, groups, panels, acc),
        8 => panel_weighted_fixed::<R, 8>(weights, stride, groups, panels, acc),
        16 => panel_weighted_fixed::<R, 16>(weights, stride, groups, panels, acc),
        _ => {
            for g in 0..groups {
                let w = &weights[g * stride..(g + 1) * stride];
                for e in 0..d {
                    let mut a = [R::zero(); LANES];
                    for (wl, panel) in w.chunks_exact(LANES).zip(panels.chunks_exact(d * LANES)) {
                        let (wl, vl) = (lanes(wl), lanes(&panel[e * LANES..(e + 1) * LANES]));
                        for l in 0..LANES {
                            a[l] += wl[l] * vl[l];
                        }
                    }
                    acc[(g * d + e) * LANES..][..LANES].copy_from_slice(&a);
                }
            }
        }
    }
}

/// [`panel_weighted`] with the head width known at compile time, so the
/// accumulators stay in registers.
#[inline(always)]
fn panel_weighted_fixed<R: Real, const D: usize>(weights: &[R], stride: usize, groups: usize, panels: &[R], acc: &mut [R]) {
    for g in 0..groups {
        let w = &weights[g * stride..(g + 1) * stride];
        let mut a = [[R::zero(); LANES]; D];
        for (wl, panel) in w.chunks_exact(LANES).zip(panels.chunks_exact(D * LANES)) {
            let wl = lanes(wl);
            for (ae, vl) in a.iter_mut().zip(panel.chunks_exact(LANES)) {
                let vl = lanes(vl);
                for l in 0..LANES {
                    ae[l] += wl[l] * vl[l];
                }
            }
        }
        for (e, ae) in a.iter().enumerate() {
            acc[(g * D + e) * LANES..][..LANES].copy_from_slice(ae);
        }
    }
}

struct Saved<R> {
    qh: Vec<R>,
    /// Keys and values in panel layout.
    kp: Vec<R>,
    vp: Vec<R>,
    oh: Vec<R>,
    lse: Vec<R>,
}

fn row_tasks(dm: Dims, chunk: usize) -> Vec<(usize, usize, usize)> {
    let per_seq = dm.t.div_ceil(chunk);
    (0..dm.s)
        .flat_map(|s| (0..dm.heads).flat_map(move |h| (0..per_seq).map(move |c| (s, h, c))))
        .collect()
}

/// Scaled query rows `[g, d]` of rows `i0..i0+g`.
#[inline(always)]
fn scaled_rows<R: Real>(src: &[R], i0: usize, g: usize, d: usize, scale: R, out: &mut Vec<R>) {
    out.clear();
    out.extend(src[i0 * d..(i0 + g) * d].iter().map(|&v| v * scale));
}

/// Turns score rows into probabilities `exp(s - shift)` with zeroed padding.
#[inline(always)]
fn add_bias<R: Real>(bias: Option<(&BiasLayout, &[R])>, i: usize, row: &mut [R]) {
    if let Some((layout, table)) = bias {
        layout.add_row(i, table, row);
    }
}

#[derive(Clone, Copy)]
struct FwdArgs<'a, R> {
    qh: &'a [R],
    kp: &'a [R],
    vp: &'a [R],
    bias: Option<(&'a BiasLayout, &'a [R])>,
    dm: Dims,
    scale: R,
    tp: usize,
    span: usize,
    chunk: usize,
}

#[inline(always)]
fn forward_task<R: Real>(args: &FwdArgs<'_, R>, (s, h, ci): (usize, usize, usize)) -> (Vec<R>, Vec<R>) {
    let FwdArgs { qh, kp, vp, bias, dm, scale, tp, span, chunk } = *args;
    let sh = s * dm.heads + h;
    let qb = &qh[sh * dm.t * dm.d..][..dm.t * dm.d];
    let kb = &kp[sh * span..][..span];
    let vb = &vp[sh * span..][..span];
    let table = bias.map(|(l, tb)| (l, &tb[h * l.entries()..(h + 1) * l.entries()]));
    let rows = ci * chunk..((ci + 1) * chunk).min(dm.t);
    let mut out = vec![R::zero(); rows.len() * dm.d];
    let mut lse = Vec::with_capacity(rows.len());
    let mut sc = vec![R::zero(); GROUP * tp];
    let mut qs = Vec::with_capacity(GROUP * dm.d);
    let mut acc = vec![R::zero(); GROUP * dm.d * LANES];
    for i0 in rows.clone().step_by(GROUP) {
        let g = GROUP.min(rows.end - i0);
        scaled_rows(qb, i0, g, dm.d, scale, &mut qs);
        panel_products(&qs, dm.d, kb, &mut sc, tp);
        let mut inv = [R::zero(); GROUP];
        for r in 0..g {
            let row = &mut sc[r * tp..(r + 1) * tp];
            add_bias(table, i0 + r, &mut row[..dm.t]);
            let m = row[..dm.t].iter().copied().fold(R::neg_infinity(), R::max);
            row[..dm.t].iter_mut().for_each(|p| *p -= m);
            R::exp_slice(&mut row[..dm.t]);
            row[dm.t..].fill(R::zero());
            let l = sum(row);
            inv[r] = R::one() / l;
            lse.push(m + l.ln());
        }
        acc.fill(R::zero());
        panel_weighted(&sc, tp, g, dm.d, vb, &mut acc);
        for r in 0..g {
            let o = &mut out[(i0 - rows.start + r) * dm.d..][..dm.d];
            for (e, ov) in o.iter_mut().enumerate() {
                *ov = lane_sum(&acc[(r * dm.d + e) * LANES..][..LANES]) * inv[r];
            }
        }
    }
    (out, lse)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn forward_task_avx2<R: Real>(args: &FwdArgs<'_, R>, t: (usize, usize, usize)) -> (Vec<R>, Vec<R>) {
    forward_task(args, t)
}

fn forward<R: Real>(q: &[R], k: &[R], v: &[R], dm: Dims, bias: Option<(&BiasLayout, &[R])>) -> Saved<R> {
    let (qh, kp, vp) = (split_heads(q, dm), to_panels(k, dm), to_panels(v, dm));
    let scale = R::one() / R::lit(dm.d as f64).sqrt();
    let np = dm.t.div_ceil(LANES);
    let (tp, span) = (np * LANES, np * dm.d * LANES);
    let chunk = row_chunk(dm.t);
    let tasks = row_tasks(dm, chunk);
    let args = FwdArgs { qh: &qh, kp: &kp, vp: &vp, bias, dm, scale, tp, span, chunk };
    let results: Vec<(Vec<R>, Vec<R>)> = tasks
        .par_iter()
        .map(|&t| {
            #[cfg(target_arch = "x86_64")]
            if wide_simd() {
                // SAFETY: the CPU supports the enabled features.
                return unsafe { forward_task_avx2(&args, t) };
            }
            forward_task(&args, t)
        })
        .collect();
    let mut oh = vec![R::zero(); qh.len()];
    let mut lse = vec![R::zero(); dm.s * dm.heads * dm.t];
    for (&(s, h, ci), (o, l)) in tasks.iter().zip(results) {
        let row0 = (s * dm.heads + h) * dm.t + ci * chunk;
        oh[row0 * dm.d..row0 * dm.d + o.len()].copy_from_slice(&o);
        lse[row0..row0 + l.len()].copy_from_slice(&l);
    }
    Saved { qh, kp, vp, oh, lse }
}

struct Grads<R> {
    dq: Vec<R>,
    dk: Vec<R>,
    dv: Vec<R>,
    dtable: Option<Vec<R>>,
}

struct Part<R> {
    dq: Vec<R>,
    /// Panel layout like the saved keys and values.
    dkp: Vec<R>,
    dvp: Vec<R>,
    db: Vec<R>,
}

#[derive(Clone, Copy)]
struct BwdArgs<'a, R> {
    sv: &'a Saved<R>,
    doh: &'a [R],
    bias: Option<(&'a BiasLayout, &'a [R])>,
    dm: Dims,
    scale: R,
    tp: usize,
    span: usize,
    chunk: usize,
    entries: usize,
}

/// `dv[e] += sum_r gs[r, e] * pw[r]` and `dk[e] += sum_r qs[r, e] * dw[r]`
/// over one panel; rows past the group are zero.
#[inline(always)]
fn rank_update<R: Real>(dkpan: &mut [R], dvpan: &mut [R], pw: &[[R; LANES]; GROUP], dw: &[[R; LANES]; GROUP], gs: &[R], qs: &[R], d: usize) {
    for (e, (dk, dv)) in dkpan.chunks_exact_mut(LANES).zip(dvpan.chunks_exact_mut(LANES)).enumerate() {
        let (dk, dv) = (lanes_mut(dk), lanes_mut(dv));
        let (mut ka, mut va) = (*dk, *dv);
        for r in 0..GROUP {
            let (gv, qv) = (gs[r * d + e], qs[r * d + e]);
            for l in 0..LANES {
                va[l] += gv * pw[r][l];
                ka[l] += qv * dw[r][l];
            }
        }
        *dk = ka;
        *dv = va;
    }
}

#[inline(always)]
fn backward_task<R: Real>(args: &BwdArgs<'_, R>, (s, h, ci): (usize, usize, usize)) -> Part<R> {
    let BwdArgs { sv, doh, bias, dm, scale, tp, span, chunk, entries } = *args;
    let sh = s * dm.heads + h;
    let qb = &sv.qh[sh * dm.t * dm.d..][..dm.t * dm.d];
    let ob = &sv.oh[sh * dm.t * dm.d..][..dm.t * dm.d];
    let gb = &doh[sh * dm.t * dm.d..][..dm.t * dm.d];
    let kb = &sv.kp[sh * span..][..span];
    let vb = &sv.vp[sh * span..][..span];
    let lse = &sv.lse[sh * dm.t..][..dm.t];
    let table = bias.map(|(l, tb)| (l, &tb[h * entries..(h + 1) * entries]));
    let rows = ci * chunk..((ci + 1) * chunk).min(dm.t);
    let mut part = Part {
        dq: vec![R::zero(); rows.len() * dm.d],
        dkp: vec![R::zero(); span],
        dvp: vec![R::zero(); span],
        db: vec![R::zero(); entries],
    };
    let mut p = vec![R::zero(); GROUP * tp];
    let mut ds = vec![R::zero(); GROUP * tp];
    let (mut qs, mut gs) = (Vec::with_capacity(GROUP * dm.d), Vec::with_capacity(GROUP * dm.d));
    let mut dq_acc = vec![R::zero(); GROUP * dm.d * LANES];
    for i0 in rows.clone().step_by(GROUP) {
        let g = GROUP.min(rows.end - i0);
        scaled_rows(qb, i0, g, dm.d, scale, &mut qs);
        scaled_rows(gb, i0, g, dm.d, R::one(), &mut gs);
        qs.resize(GROUP * dm.d, R::zero());
        gs.resize(GROUP * dm.d, R::zero());
        panel_products(&qs, dm.d, kb, &mut p, tp);
        panel_products(&gs, dm.d, vb, &mut ds, tp);
        for r in 0..g {
            let i = i0 + r;
            let di = dot(&gb[i * dm.d..(i + 1) * dm.d], &ob[i * dm.d..(i + 1) * dm.d]);
            let pr = &mut p[r * tp..(r + 1) * tp];
            add_bias(table, i, &mut pr[..dm.t]);
            pr[..dm.t].iter_mut().for_each(|v| *v -= lse[i]);
            R::exp_slice(&mut pr[..dm.t]);
            pr[dm.t..].fill(R::zero());
            // ds = p * (g . v_j - di)
            for (d, &pj) in ds[r * tp..(r + 1) * tp].iter_mut().zip(pr.iter()) {
                *d = pj * (*d - di);
            }
        }
        for (pi, (dkpan, dvpan)) in part.dkp.chunks_exact_mut(dm.d * LANES).zip(part.dvp.chunks_exact_mut(dm.d * LANES)).enumerate() {
            let (mut pw, mut dw) = ([[R::zero(); LANES]; GROUP], [[R::zero(); LANES]; GROUP]);
            for r in 0..g {
                pw[r] = *lanes(&p[r * tp + pi * LANES..][..LANES]);
                dw[r] = *lanes(&ds[r * tp + pi * LANES..][..LANES]);
            }
            rank_update(dkpan, dvpan, &pw, &dw, &gs, &qs, dm.d);
        }
        panel_weighted(&ds, tp, g, dm.d, kb, &mut dq_acc);
        for r in 0..g {
            let dq = &mut part.dq[(i0 - rows.start + r) * dm.d..][..dm.d];
            for (e, v) in dq.iter_mut().enumerate() {
                *v = scale * lane_sum(&dq_acc[(r * dm.d + e) * LANES..][..LANES]);
            }
            if let Some((layout, _)) = table {
                layout.scatter_row(i0 + r, &ds[r * tp..r * tp + dm.t], &mut part.db);
            }
        }
    }
    part
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn backward_task_avx2<R: Real>(args: &BwdArgs<'_, R>, t: (usize, usize, usize)) -> Part<R> {
    backward_task(args, t)
}

fn backward<R: Real>(sv: &Saved<R>, dout: &[R], dm: Dims, bias: Option<(&BiasLayout, &[R])>) -> Grads<R> {
    let doh = split_heads(dout, dm);
    let scale = R::one() / R::lit(dm.d as f64).sqrt();
    let np = dm.t.div_ceil(LANES);
    let (tp, span) = (np * LANES, np * dm.d * LANES);
    let chunk = row_chunk(dm.t);
    let entries = bias.map_or(0, |(l, _)| l.entries());
    let tasks = row_tasks(dm, chunk);
    let args = BwdArgs { sv, doh: &doh, bias, dm, scale, tp, span, chunk, entries };
    let parts: Vec<Part<R>> = tasks
        .par_iter()
        .map(|&t| {
            #[cfg(target_arch = "x86_64")]
            if wide_simd() {
                // SAFETY: the CPU supports the enabled features.
                return unsafe { backward_task_avx2(&args, t) };
            }
            backward_task(&args, t)
        })
        .collect();
    let n = dm.s * dm.heads * dm.t * dm.d;
    let mut dq = vec![R::zero(); n];
    let (mut dkp, mut dvp) = (vec![R::zero(); sv.kp.len()], vec![R::zero(); sv.vp.len()]);
    let mut db = bias.map(|_| vec![R::zero(); dm.heads * entries]);
    for (&(s, h, ci), part) in tasks.iter().zip(parts) {
        let sh = s * dm.heads + h;
        let row0 = (sh * dm.t + ci * chunk) * dm.d;
        dq[row0..row0 + part.dq.len()].copy_from_slice(&part.dq);
        for (a, b) in dkp[sh * span..(sh + 1) * span].iter_mut().zip(&part.dkp) {
            *a += *b;
        }
        for (a, b) in dvp[sh * span..(sh + 1) * span].iter_mut().zip(&part.dvp) {
            *a += *b;
        }
        if let Some(db) = db.as_mut() {
            for (a, b) in db[h * entries..(h + 1) * entries].iter_mut().zip(&part.db) {
                *a += *b;
            }
        }
    }
    Grads { dq: merge_heads(&dq, dm), dk: from_panels(&dkp, dm), dv: from_panels(&dvp, dm), dtable: db }
}

/// Attention on plain tensors (no tape).
pub fn attention_tensor<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    heads: usize,
    bias: Option<(&BiasLayout, &Tensor<R>)>,
) -> Result<Tensor<R>> {
    let dm = dims(q, k, v, heads, bias.map(|(l, t)| (l, t.shape())))?;
    let sv = forward(q.data(), k.data(), v.data(), dm, bias.map(|(l, t)| (l, t.data())));
    Tensor::new(q.shape(), merge_heads(&sv.oh, dm))
}

fn dims<R: Real>(
    q: &Tensor<R>,
    k: &Tensor<R>,
    v: &Tensor<R>,
    heads: usize,
    bias: Option<(&BiasLayout, &[usize])>,
) -> Result<Dims> {
    let &[s, t, c] = q.shape() else {
        return shape_err(format!("attention expects [S,T,C] operands, got {:?}", q.shape()));
    };
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return shape_err(format!("attention q/k/v shapes differ: {:?} {:?} {:?}", q.shape(), k.shape(), v.shape()));
    }
    if heads == 0 || c % heads != 0 {
        return shape_err(format!("attention: {c} channels not divisible by {heads} heads"));
    }
    if let Some((layout, tshape)) = bias {
        if layout.tokens() != t {
            return shape_err(format!("attention: bias layout covers {} tokens, input has {t}", layout.tokens()));
        }
        if tshape != [heads, layout.entries()] {
            return shape_err(format!("attention: bias table {:?}, expected [{heads}, {}]", tshape, layout.entries()));
        }
    }
    Ok(Dims { s, t, c, heads, d: c / heads })
}

impl<'t, R: Real> Var<'t, R> {
    /// `softmax(Q K^T / sqrt(d) + B) V` per head over `[S, T, C]` operands
    /// (`S` independent sequences). The bias table is `[heads, entries]`.
    pub fn attention(
        self,
        k: Var<'t, R>,
        v: Var<'t, R>,
        heads: usize,
        bias: Option<(Var<'t, R>, Rc<BiasLayout>)>,
    ) -> Result<Var<'t, R>> {
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let table = bias.as_ref().map(|(b, l)| (b.value(), l.clone()));
        let dm = dims(&qv, &kv, &vv, heads, table.as_ref().map(|(t, l)| (l.as_ref(), t.shape())))?;
        let saved = forward(qv.data(), kv.data(), vv.data(), dm, table.as_ref().map(|(t, l)| (l.as_ref(), t.data())));
        let out = Tensor::new(qv.shape(), merge_heads(&saved.oh, dm))?;
        let mut parents = vec![self, k, v];
        if let Some((b, _)) = &bias {
            parents.push(*b);
        }
        let shape = qv.shape().to_vec();
        self.tape().push("attention", out, &parents, move || {
            Box::new(move |g| {
                let tb = table.as_ref().map(|(t, l)| (l.as_ref(), t.data()));
                let gr = backward(&saved, g.data(), dm, tb);
                let mut v = vec![
                    Some(Tensor::new(&shape, gr.dq).unwrap()),
                    Some(Tensor::new(&shape, gr.dk).unwrap()),
                    Some(Tensor::new(&shape, gr.dv).unwrap()),
                ];
                if let (Some(db), Some((t, _))) = (gr.dtable, &table) {
                    v.push(Some(Tensor::new(t.shape(), db).unwrap()));
                }
                v
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed;
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn single_token_returns_its_value() {
        let mut r = lcg(1);
        let q = Tensor::<f64>::from_fn(&[1, 1, 4], |_| r());
        let k = Tensor::<f64>::from_fn(&[1, 1, 4], |_| r());
        let v = Tensor::<f64>::from_fn(&[1, 1, 4], |_| r());
        let layout = BiasLayout::Dense { tokens: 1 };
        let table = Tensor::full(&[2, 1], 3.0);
        let o = attention_tensor(&q, &k, &v, 2, Some((&layout, &table))).unwrap();
        assert!(o.max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn relative_grid_indices_are_translation_invariant() {
        let l = RelativeLayout::grid(3, 3, (3, 3)).unwrap();
        let t = l.tokens();
        assert_eq!(l.spatial_index(&t[0], &t[4]), l.spatial_index(&t[4], &t[8]));
        assert_ne!(l.spatial_index(&t[0], &t[4]), l.spatial_index(&t[4], &t[0]));
        assert_eq!(l.entries(), 25);
    }

    #[test]
    fn offsets_beyond_extent_are_clipped() {
        let l = RelativeLayout::grid(1, 6, (1, 2)).unwrap();
        let t = l.tokens();
        assert_eq!(l.spatial_index(&t[0], &t[5]), l.spatial_index(&t[0], &t[1]));
    }

    #[test]
    fn run_gather_matches_pairwise_lookup() {
        let mut r = lcg(4);
        let mut tokens = Vec::new();
        for frame in 0..3u16 {
            for kind in 0..2u8 {
                for p in 0..20 {
                    tokens.push(TokenPos { frame, kind, y: p / 5, x: p % 5 });
                }
            }
        }
        tokens.push(TokenPos { frame: 1, kind: 0, y: 9, x: -4 });
        let rel = RelativeLayout::new(tokens, 2, (3, 2), Some(4)).unwrap();
        let table: Vec<f64> = (0..rel.entries()).map(|_| r()).collect();
        let layout = BiasLayout::Relative(rel.clone());
        let dense = layout.dense_head(&table);
        let t = rel.tokens();
        let mut grad = vec![0.0; table.len()];
        let mut want = vec![0.0; table.len()];
        for (i, a) in t.iter().enumerate() {
            let ds: Vec<f64> = (0..t.len()).map(|_| r()).collect();
            layout.scatter_row(i, &ds, &mut grad);
            for (j, b) in t.iter().enumerate() {
                let fi = rel.frame_index(a, b).unwrap();
                assert_eq!(dense.data()[i * t.len() + j], table[rel.spatial_index(a, b)] + table[fi]);
                want[rel.spatial_index(a, b)] += ds[j];
                want[fi] += ds[j];
            }
        }
        assert!(grad.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn mismatched_bias_is_a_dimension_error() {
        let q = Tensor::<f64>::zeros(&[1, 3, 4]);
        let layout = BiasLayout::Dense { tokens: 2 };
        let table = Tensor::zeros(&[1, 4]);
        assert!(attention_tensor(&q, &q, &q, 1, Some((&layout, &table))).is_err());
        assert!(attention_tensor(&q, &q, &q, 3, None).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let q = Tensor::<f32>::full(&[1, 3, 2], 300.0);
        let v = Tensor::<f32>::from_fn(&[1, 3, 2], |i| i as f32);
        let o = attention_tensor(&q, &q, &v, 1, None).unwrap();
        assert!(o.is_finite());
    }
}
