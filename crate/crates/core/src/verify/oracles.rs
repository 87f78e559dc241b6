//! Step-by-step oracles for the composite blocks, built from
//! [`reference`](super::reference) loops and read straight from a parameter
//! store in `f64`.

use super::reference::{self as rf, MhsaWeights};
use crate::model::config::FrameBiasMode;
use crate::model::{CmtBlock, Ffc, Misab, SpectralTransform};
use crate::nn::{Linear, Mhsa, Mlp, ParamStore};
use crate::tensor::Tensor;

fn p<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.get(name).unwrap_or_else(|e| panic!("{e}"))
}

fn opt<'a>(store: &'a ParamStore<f64>, name: &str) -> Option<&'a Tensor<f64>> {
    store.get(name).ok()
}

fn lin(store: &ParamStore<f64>, l: &Linear, x: &Tensor<f64>) -> Tensor<f64> {
    rf::linear(x, p(store, &format!("{}.weight", l.name)), opt(store, &format!("{}.bias", l.name)))
}

fn ln(store: &ParamStore<f64>, name: &str, x: &Tensor<f64>) -> Tensor<f64> {
    rf::layer_norm(x, p(store, &format!("{name}.gamma")), p(store, &format!("{name}.beta")), 1e-5)
}

fn mlp(store: &ParamStore<f64>, m: &Mlp, x: &Tensor<f64>) -> Tensor<f64> {
    lin(store, &m.fc2, &rf::gelu(&lin(store, &m.fc1, x)))
}

fn weights<'a>(store: &'a ParamStore<f64>, m: &Mhsa) -> MhsaWeights<'a> {
    let w = |l: &Linear| p(store, &format!("{}.weight", l.name));
    let b = |l: &Linear| opt(store, &format!("{}.bias", l.name));
    MhsaWeights { wq: w(&m.q), bq: b(&m.q), wk: w(&m.k), bk: b(&m.k), wv: w(&m.v), bv: b(&m.v), wo: w(&m.o), bo: b(&m.o) }
}

/// `(frame, kind, y, x)` of a token.
type Pos = (usize, usize, i64, i64);

/// Per-head `[T, T]` bias gathered from a relative table: kind pair and
/// clipped offset index the spatial part; with `frames`, a frame/kind pair
/// indexes an additional term.
fn gather_bias(table: &Tensor<f64>, tokens: &[Pos], kinds: usize, extent: usize, frames: Option<usize>) -> Vec<Tensor<f64>> {
    let heads = table.dim(0);
    let side = 2 * extent - 1;
    let e = extent as i64 - 1;
    let spatial = kinds * kinds * side * side;
    let t = tokens.len();
    (0..heads)
        .map(|h| {
            let mut b = Tensor::zeros(&[t, t]);
            for (i, a) in tokens.iter().enumerate() {
                for (j, c) in tokens.iter().enumerate() {
                    let dy = ((a.2 - c.2).clamp(-e, e) + e) as usize;
                    let dx = ((a.3 - c.3).clamp(-e, e) + e) as usize;
                    let mut v = table.at(&[h, ((a.1 * kinds + c.1) * side + dy) * side + dx]);
                    if let Some(f) = frames {
                        let row = a.0 * kinds + a.1;
                        let col = c.0 * kinds + c.1;
                        v += table.at(&[h, spatial + row * f * kinds + col]);
                    }
                    b.set(&[i, j], v);
                }
            }
            b
        })
        .collect()
}

fn grid(h: usize, w: usize) -> Vec<Pos> {
    (0..h * w).map(|i| (0, 0, (i / w) as i64, (i % w) as i64)).collect()
}

fn rows(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let c = x.dim(1);
    Tensor::new(&[len, c], x.data()[start * c..(start + len) * c].to_vec()).unwrap()
}

fn vstack(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let c = parts[0].dim(1);
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new(&[data.len() / c, c], data).unwrap()
}

/// `[C, H, W]` plane stack of image `b` -> `[H*W, C]` tokens.
fn image_tokens(x: &Tensor<f64>, b: usize) -> Tensor<f64> {
    let (c, h, w) = (x.dim(1), x.dim(2), x.dim(3));
    let mut t = Tensor::zeros(&[h * w, c]);
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                t.set(&[y * w + xx, ch], x.at(&[b, ch, y, xx]));
            }
        }
    }
    t
}

fn put_image_tokens(dst: &mut Tensor<f64>, b: usize, t: &Tensor<f64>) {
    let (c, h, w) = (dst.dim(1), dst.dim(2), dst.dim(3));
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dst.set(&[b, ch, y, xx], t.at(&[y * w + xx, ch]));
            }
        }
    }
}

/// Conv/attention block on `[N, C, H, W]`: `x + conv(x)`, then attention and
/// MLP residuals over the `H*W` tokens of each image.
pub fn cmt_block(store: &ParamStore<f64>, blk: &CmtBlock, x: &Tensor<f64>) -> Tensor<f64> {
    let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let lpu = rf::conv2d(x, p(store, &format!("{}.weight", blk.lpu.name)), opt(store, &format!("{}.bias", blk.lpu.name)), 1, 1);
    let xc = rf::add(x, &lpu);
    let bias = gather_bias(p(store, &blk.attn.table_name()), &grid(h, w), 1, blk.extent, None);
    let mut out = xc.clone();
    for b in 0..n {
        let t = image_tokens(&xc, b);
        let a = rf::add(&t, &rf::mhsa(&ln(store, &blk.ln1.name, &t), &weights(store, &blk.attn), blk.attn.heads, Some(&bias)));
        let m = rf::add(&a, &mlp(store, &blk.mlp, &ln(store, &blk.ln2.name, &a)));
        put_image_tokens(&mut out, b, &m);
    }
    out
}

/// Message-token block on image tokens `[B*K, H*W, C]`, flattened: every
/// joint attention is one explicit `[T, T]` attention over the concatenated
/// image and message tokens of all `K` frames of a sample.
pub fn misab(store: &ParamStore<f64>, blk: &Misab, x: &Tensor<f64>, k: usize, h: usize, w: usize) -> Tensor<f64> {
    let (bk, hw, c) = (x.dim(0), x.dim(1), x.dim(2));
    debug_assert_eq!(hw, h * w);
    let n = blk.patch_pixels;
    let count = hw / n;
    let msg_pos: Vec<(i64, i64)> = (0..count).map(|j| (((j * n) / w) as i64, ((j * n) % w) as i64)).collect();
    let msg_tokens: Vec<Pos> = msg_pos.iter().map(|&(y, xx)| (0, 0, y, xx)).collect();
    let msg_bias = gather_bias(p(store, &blk.msg_attn.table_name()), &msg_tokens, 1, blk.extent, None);

    let mut per_image = Vec::with_capacity(bk);
    for i in 0..bk {
        let img = Tensor::new(&[hw, c], x.data()[i * hw * c..(i + 1) * hw * c].to_vec()).unwrap();
        let mut patches = Tensor::zeros(&[count, n * c]);
        for j in 0..count {
            for q in 0..n {
                for ch in 0..c {
                    patches.set(&[j, q * c + ch], img.at(&[j * n + q, ch]));
                }
            }
        }
        let m = lin(store, &blk.msg_proj, &patches);
        let m = rf::add(&m, &rf::mhsa(&ln(store, &blk.msg_ln.name, &m), &weights(store, &blk.msg_attn), blk.msg_attn.heads, Some(&msg_bias)));
        per_image.push((img, m));
    }

    let frames = match blk.mode {
        FrameBiasMode::FrameAgnostic => None,
        FrameBiasMode::FullSequence => Some(blk.max_frames),
    };
    let mut tokens = Vec::new();
    for f in 0..k {
        tokens.extend((0..hw).map(|q| (f, 0, (q / w) as i64, (q % w) as i64)));
        tokens.extend(msg_pos.iter().map(|&(y, xx)| (f, 1, y, xx)));
    }
    let joint_bias = gather_bias(p(store, &blk.misa.table_name()), &tokens, 2, blk.extent, frames);

    let mut out = Vec::with_capacity(bk * hw * c);
    for b in 0..bk / k {
        let parts: Vec<Tensor<f64>> = (0..k)
            .flat_map(|f| {
                let (img, m) = &per_image[b * k + f];
                [img.clone(), m.clone()]
            })
            .collect();
        let fm = vstack(&parts);
        let y = rf::add(&fm, &rf::mhsa(&ln(store, &blk.ln1.name, &fm), &weights(store, &blk.misa), blk.misa.heads, Some(&joint_bias)));
        let z = rf::add(&y, &mlp(store, &blk.mlp, &ln(store, &blk.ln2.name, &y)));
        for f in 0..k {
            out.extend_from_slice(rows(&z, f * (hw + count), hw).data());
        }
    }
    Tensor::new(&[bk, hw, c], out).unwrap()
}

fn channel_slice(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let (n, h, w) = (x.dim(0), x.dim(2), x.dim(3));
    let mut out = Tensor::zeros(&[n, len, h, w]);
    for b in 0..n {
        for c in 0..len {
            for y in 0..h {
                for xx in 0..w {
                    out.set(&[b, c, y, xx], x.at(&[b, start + c, y, xx]));
                }
            }
        }
    }
    out
}

fn concat_channels(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (n, ca, cb, h, w) = (a.dim(0), a.dim(1), b.dim(1), a.dim(2), a.dim(3));
    let mut out = Tensor::zeros(&[n, ca + cb, h, w]);
    for i in 0..n {
        for c in 0..ca + cb {
            for y in 0..h {
                for xx in 0..w {
                    let v = if c < ca { a.at(&[i, c, y, xx]) } else { b.at(&[i, c - ca, y, xx]) };
                    out.set(&[i, c, y, xx], v);
                }
            }
        }
    }
    out
}

fn conv(store: &ParamStore<f64>, name: &str, x: &Tensor<f64>, pad: usize) -> Tensor<f64> {
    rf::conv2d(x, p(store, &format!("{name}.weight")), opt(store, &format!("{name}.bias")), 1, pad)
}

/// `f + Re(IDFT(conv(relu(conv(DFT(f))))))` with the spectrum stacked as
/// real channels followed by imaginary channels.
pub fn spectral(store: &ParamStore<f64>, st: &SpectralTransform, fg: &Tensor<f64>) -> Tensor<f64> {
    let (n, c, h, w) = (fg.dim(0), fg.dim(1), fg.dim(2), fg.dim(3));
    let plane = h * w;
    let mut spec = Tensor::zeros(&[n, 2 * c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let re: Vec<f64> = fg.data()[(b * c + ch) * plane..][..plane].to_vec();
            let (fr, fi) = rf::dft2(&re, &vec![0.0; plane], h, w, false);
            spec.data_mut()[(b * 2 * c + ch) * plane..][..plane].copy_from_slice(&fr);
            spec.data_mut()[(b * 2 * c + c + ch) * plane..][..plane].copy_from_slice(&fi);
        }
    }
    let z = conv(store, &st.conv2.name, &rf::relu(&conv(store, &st.conv1.name, &spec, 0)), 0);
    let mut out = fg.clone();
    for b in 0..n {
        for ch in 0..c {
            let re = &z.data()[(b * 2 * c + ch) * plane..][..plane];
            let im = &z.data()[(b * 2 * c + c + ch) * plane..][..plane];
            let (back, _) = rf::dft2(re, im, h, w, true);
            for (o, v) in out.data_mut()[(b * c + ch) * plane..][..plane].iter_mut().zip(back) {
                *o += v;
            }
        }
    }
    out
}

/// Local/global block with training-mode (batch statistic) normalization.
pub fn ffc(store: &ParamStore<f64>, blk: &Ffc, x: &Tensor<f64>) -> Tensor<f64> {
    let fl = channel_slice(x, 0, blk.local);
    let fg = channel_slice(x, blk.local, blk.global);
    let xl = rf::add(&conv(store, &blk.l2l.name, &fl, 1), &conv(store, &blk.g2l.name, &fg, 1));
    let xg = rf::add(&conv(store, &blk.l2g.name, &fl, 1), &spectral(store, &blk.g2g, &fg));
    let bn = |name: &str, t: &Tensor<f64>| rf::batch_norm(t, p(store, &format!("{name}.gamma")), p(store, &format!("{name}.beta")), 1e-5);
    let xl = rf::relu(&bn(&blk.bn_l.name, &xl));
    let xg = rf::relu(&bn(&blk.bn_g.name, &xg));
    concat_channels(&xl, &xg)
}
