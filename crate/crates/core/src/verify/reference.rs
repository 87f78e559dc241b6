//! Brute-force reference implementations in `f64`, written as explicit
//! loops straight from the textbook definitions. They share no code with the
//! fast kernels in [`crate::ops`].

use crate::tensor::Tensor;

/// Cross-correlation of `[N, Ci, H, W]` with `[Co, Ci, kh, kw]`.
pub fn conv2d(x: &Tensor<f64>, k: &Tensor<f64>, bias: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, ci, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (co, kh, kw) = (k.dim(0), k.dim(2), k.dim(3));
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[n, co, ho, wo]);
    for b in 0..n {
        for o in 0..co {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (xx * stride + j) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x.at(&[b, c, iy as usize, ix as usize]) * k.at(&[o, c, i, j]);
                                }
                            }
                        }
                    }
                    out.set(&[b, o, y, xx], acc);
                }
            }
        }
    }
    out
}

/// `x W + b` over the last axis; `W` is `[Cin, Cout]`.
pub fn linear(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>) -> Tensor<f64> {
    let (cin, cout) = (w.dim(0), w.dim(1));
    let rows = x.len() / cin;
    let mut data = vec![0.0; rows * cout];
    for r in 0..rows {
        for o in 0..cout {
            let mut acc = b.map_or(0.0, |b| b.data()[o]);
            for i in 0..cin {
                acc += x.data()[r * cin + i] * w.data()[i * cout + o];
            }
            data[r * cout + o] = acc;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = cout;
    Tensor::new(&shape, data).unwrap()
}

pub fn layer_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let c = gamma.len();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
        }
    }
    out
}

/// Batch norm of `[N, C, H, W]` with the batch's own (biased) statistics.
pub fn batch_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>, eps: f64) -> Tensor<f64> {
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let mut out = x.clone();
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|b| (0..h * w).map(move |p| (b, p))).map(|(b, p)| x.at(&[b, ch, p / w, p % w])).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for b in 0..n {
            for p in 0..h * w {
                let v = x.at(&[b, ch, p / w, p % w]);
                out.set(&[b, ch, p / w, p % w], (v - mean) / (var + eps).sqrt() * gamma.data()[ch] + beta.data()[ch]);
            }
        }
    }
    out
}

pub fn gelu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
}

pub fn relu(x: &Tensor<f64>) -> Tensor<f64> {
    x.map(|v| v.max(0.0))
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    a.zip_map(b, |x, y| x + y).unwrap()
}

/// Single-sequence multi-head attention on projected operands `[T, C]`.
/// `bias[h]` is the `[T, T]` additive bias of head `h`.
pub fn attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, heads: usize, bias: Option<&[Tensor<f64>]>) -> Tensor<f64> {
    let (t, c) = (q.dim(0), q.dim(1));
    let d = c / heads;
    let mut out = Tensor::zeros(&[t, c]);
    for h in 0..heads {
        for i in 0..t {
            let mut logits = vec![0.0; t];
            for (j, l) in logits.iter_mut().enumerate() {
                let mut dot = 0.0;
                for e in 0..d {
                    dot += q.at(&[i, h * d + e]) * k.at(&[j, h * d + e]);
                }
                *l = dot / (d as f64).sqrt() + bias.map_or(0.0, |b| b[h].at(&[i, j]));
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
            for e in 0..d {
                let mut acc = 0.0;
                for (j, l) in logits.iter().enumerate() {
                    acc += (l - max).exp() / z * v.at(&[j, h * d + e]);
                }
                out.set(&[i, h * d + e], acc);
            }
        }
    }
    out
}

/// Projection weights of one attention layer.
pub struct MhsaWeights<'a> {
    pub wq: &'a Tensor<f64>,
    pub bq: Option<&'a Tensor<f64>>,
    pub wk: &'a Tensor<f64>,
    pub bk: Option<&'a Tensor<f64>>,
    pub wv: &'a Tensor<f64>,
    pub bv: Option<&'a Tensor<f64>>,
    pub wo: &'a Tensor<f64>,
    pub bo: Option<&'a Tensor<f64>>,
}

/// Full multi-head self-attention on one `[T, C]` sequence.
pub fn mhsa(x: &Tensor<f64>, w: &MhsaWeights<'_>, heads: usize, bias: Option<&[Tensor<f64>]>) -> Tensor<f64> {
    let q = linear(x, w.wq, w.bq);
    let k = linear(x, w.wk, w.bk);
    let v = linear(x, w.wv, w.bv);
    linear(&attention(&q, &k, &v, heads, bias), w.wo, w.bo)
}

/// Direct `O(N^2)` 2-D DFT of one complex plane, `exp(-2 pi i (uy/H + vx/W))`.
pub fn dft2(re: &[f64], im: &[f64], h: usize, w: usize, inverse: bool) -> (Vec<f64>, Vec<f64>) {
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut or = vec![0.0; h * w];
    let mut oi = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut ar, mut ai) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let phase = sign * 2.0 * std::f64::consts::PI * ((u * y) as f64 / h as f64 + (v * x) as f64 / w as f64);
                    let (s, c) = phase.sin_cos();
                    let (a, b) = (re[y * w + x], im[y * w + x]);
                    ar += a * c - b * s;
                    ai += a * s + b * c;
                }
            }
            let norm = if inverse { (h * w) as f64 } else { 1.0 };
            or[u * w + v] = ar / norm;
            oi[u * w + v] = ai / norm;
        }
    }
    (or, oi)
}

/// `output[c, r*y + a, r*x + b] = input[c*r*r + a*r + b, y, x]` per batch entry.
pub fn pixel_shuffle(x: &Tensor<f64>, r: usize) -> Tensor<f64> {
    let (n, cr, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let c = cr / (r * r);
    let mut out = Tensor::zeros(&[n, c, h * r, w * r]);
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    for a in 0..r {
                        for bb in 0..r {
                            out.set(&[b, ch, r * y + a, r * xx + bb], x.at(&[b, ch * r * r + a * r + bb, y, xx]));
                        }
                    }
                }
            }
        }
    }
    out
}

/// Mean over clear window centres of per-window SSIM, with every window's
/// statistics accumulated directly (two-pass, explicit 2-D Gaussian).
#[allow(clippy::too_many_arguments)]
pub fn masked_ssim(x: &[f64], y: &[f64], clear: &[bool], h: usize, w: usize, sigma: f64, size: usize, c1: f64, c2: f64) -> Option<f64> {
    let r = size / 2;
    let (mut total, mut count) = (0.0, 0usize);
    for cy in r..h.saturating_sub(r) {
        for cx in r..w.saturating_sub(r) {
            if !clear[cy * w + cx] {
                continue;
            }
            let mut pts = Vec::new();
            for dy in 0..size {
                for dx in 0..size {
                    let (py, px) = (cy + dy - r, cx + dx - r);
                    if clear[py * w + px] {
                        let d2 = (dy as f64 - r as f64).powi(2) + (dx as f64 - r as f64).powi(2);
                        pts.push(((-d2 / (2.0 * sigma * sigma)).exp(), x[py * w + px], y[py * w + px]));
                    }
                }
            }
            let wsum: f64 = pts.iter().map(|p| p.0).sum();
            let mx = pts.iter().map(|p| p.0 * p.1).sum::<f64>() / wsum;
            let my = pts.iter().map(|p| p.0 * p.2).sum::<f64>() / wsum;
            let vx = pts.iter().map(|p| p.0 * (p.1 - mx).powi(2)).sum::<f64>() / wsum;
            let vy = pts.iter().map(|p| p.0 * (p.2 - my).powi(2)).sum::<f64>() / wsum;
            let cxy = pts.iter().map(|p| p.0 * (p.1 - mx) * (p.2 - my)).sum::<f64>() / wsum;
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    (count > 0).then(|| total / count as f64)
}

/// Exhaustive shift sweep of the bias-corrected PSNR using the variance
/// form `E[d^2] - E[d]^2` of the residual `d = hr - sr`. Returns the best dB
/// (uncapped) and its offset.
pub fn cpsnr_sweep(sr: &[f64], hr: &[f64], clear: &[bool], h: usize, w: usize, border: usize) -> (f64, (usize, usize)) {
    let mut best = (f64::NEG_INFINITY, (0, 0));
    for u in 0..=2 * border {
        for v in 0..=2 * border {
            let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
            for y in border..h - border {
                for x in border..w - border {
                    if clear[y * w + x] {
                        let d = hr[y * w + x] - sr[(y - border + u) * w + x - border + v];
                        n += 1.0;
                        s1 += d;
                        s2 += d * d;
                    }
                }
            }
            let mse = s2 / n - (s1 / n).powi(2);
            let db = -10.0 * mse.log10();
            if db > best.0 {
                best = (db, (u, v));
            }
        }
    }
    best
}
