//! 2-D cross-correlation over `[N, C, H, W]` batches.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, kcin, kh, kw]) = (x, k) else {
            return shape_err(format!("conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernel, got {x:?} and {k:?}"));
        };
        if cin != kcin {
            return shape_err(format!("conv2d: input has {cin} channels, kernel expects {kcin}"));
        }
        if stride == 0 || h + 2 * pad < kh || w + 2 * pad < kw {
            return shape_err(format!("conv2d: kernel {kh}x{kw} does not fit {h}x{w} with padding {pad}"));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(Self { n, cin, h, w, cout, kh, kw, oh, ow, stride, pad })
    }

    /// Output index range along one axis for which `o*stride + k - pad` lands
    /// inside `[0, len)`.
    fn valid(&self, k: usize, len: usize, out_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((len as isize - 1 - off).div_euclid(s) + 1).clamp(0, out_len as isize);
        let lo = lo.min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }
}

fn forward<R: Real>(x: &[R], k: &[R], bias: Option<&[R]>, g: Geometry) -> Vec<R> {
    let plane = g.oh * g.ow;
    let mut out = vec![R::zero(); g.n * g.cout * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (ni, co) = (idx / g.cout, idx % g.cout);
        if let Some(b) = bias {
            dst.fill(b[co]);
        }
        for ci in 0..g.cin {
            let src = &x[(ni * g.cin + ci) * g.h * g.w..][..g.h * g.w];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        let srow = &src[iy * g.w..(iy + 1) * g.w];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in drow[ox0..ox1].iter_mut().zip(&srow[ix0..]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox] += wv * srow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn grad_input<R: Real>(gout: &[R], k: &[R], g: Geometry) -> Vec<R> {
    let plane = g.h * g.w;
    let mut gx = vec![R::zero(); g.n * g.cin * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (ni, ci) = (idx / g.cin, idx % g.cin);
        for co in 0..g.cout {
            let src = &gout[(ni * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ky in 0..g.kh {
                let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                for kx in 0..g.kw {
                    let wv = k[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                    let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                    for oy in oy0..oy1 {
                        let iy = oy * g.stride + ky - g.pad;
                        let drow = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = ox0 + kx - g.pad;
                            for (d, &s) in drow[ix0..].iter_mut().zip(&srow[ox0..ox1]) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in ox0..ox1 {
                                drow[ox * g.stride + kx - g.pad] += wv * srow[ox];
                            }
                        }
                    }
                }
            }
        }
    });
    gx
}

fn grad_kernel<R: Real>(gout: &[R], x: &[R], g: Geometry) -> Vec<R> {
    let ksize = g.cin * g.kh * g.kw;
    let mut gk = vec![R::zero(); g.cout * ksize];
    gk.par_chunks_mut(ksize).enumerate().for_each(|(co, dst)| {
        for ni in 0..g.n {
            let go = &gout[(ni * g.cout + co) * g.oh * g.ow..][..g.oh * g.ow];
            for ci in 0..g.cin {
                let src = &x[(ni * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                for ky in 0..g.kh {
                    let (oy0, oy1) = g.valid(ky, g.h, g.oh);
                    for kx in 0..g.kw {
                        let (ox0, ox1) = g.valid(kx, g.w, g.ow);
                        let mut acc = R::zero();
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &go[oy * g.ow..(oy + 1) * g.ow];
                            let srow = &src[iy * g.w..(iy + 1) * g.w];
                            if g.stride == 1 {
                                let ix0 = ox0 + kx - g.pad;
                                acc += grow[ox0..ox1].iter().zip(&srow[ix0..]).map(|(&a, &b)| a * b).sum::<R>();
                            } else {
                                for ox in ox0..ox1 {
                                    acc += grow[ox] * srow[ox * g.stride + kx - g.pad];
                                }
                            }
                        }
                        dst[(ci * g.kh + ky) * g.kw + kx] += acc;
                    }
                }
            }
        }
    });
    gk
}

/// Cross-correlation of a plain tensor (no tape).
pub fn conv2d_tensor<R: Real>(
    x: &Tensor<R>,
    kernel: &Tensor<R>,
    bias: Option<&Tensor<R>>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<R>> {
    let g = Geometry::new(x.shape(), kernel.shape(), stride, padding)?;
    Tensor::new(&[g.n, g.cout, g.oh, g.ow], forward(x.data(), kernel.data(), bias.map(|b| b.data()), g))
}

impl<'t, R: Real> Var<'t, R> {
    /// Cross-correlation (no kernel flip) with zero padding.
    pub fn conv2d(self, kernel: Var<'t, R>, bias: Option<Var<'t, R>>, stride: usize, padding: usize) -> Result<Var<'t, R>> {
        let (x, k) = (self.value(), kernel.value());
        let g = Geometry::new(x.shape(), k.shape(), stride, padding)?;
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [g.cout] {
                return shape_err(format!("conv2d bias {:?} does not match {} output channels", b.shape(), g.cout));
            }
        }
        let out = Tensor::new(&[g.n, g.cout, g.oh, g.ow], forward(x.data(), k.data(), bv.as_ref().map(|b| b.data()), g))?;
        let mut parents = vec![self, kernel];
        parents.extend(bias);
        let has_bias = bias.is_some();
        let (xs, ks) = (x.shape().to_vec(), k.shape().to_vec());
        self.tape().push("conv2d", out, &parents, move || {
            Box::new(move |gout| {
                let gd = gout.data();
                let mut v = vec![
                    Some(Tensor::new(&xs, grad_input(gd, k.data(), g)).unwrap()),
                    Some(Tensor::new(&ks, grad_kernel(gd, x.data(), g)).unwrap()),
                ];
                if has_bias {
                    let plane = g.oh * g.ow;
                    let mut gb = vec![R::zero(); g.cout];
                    for (idx, chunk) in gd.chunks(plane).enumerate() {
                        gb[idx % g.cout] += chunk.iter().copied().sum::<R>();
                    }
                    v.push(Some(Tensor::new(&[g.cout], gb).unwrap()));
                }
                v
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_is_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 5, 4], |i| (i as f64).sin());
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        assert_eq!(conv2d_tensor(&x, &k, None, 1, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_overlap() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let k = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d_tensor(&x, &k, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert_eq!(y.at(&[0, 0, 1, 1]), 9.0);
        for (r, c) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(&[0, 0, r, c]), 4.0);
        }
        assert_eq!(y.at(&[0, 0, 0, 1]), 6.0);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d_tensor(&x, &k, None, 1, 1).is_err());
    }

    #[test]
    fn strided_output_size() {
        let x = Tensor::<f32>::zeros(&[1, 1, 7, 8]);
        let k = Tensor::<f32>::zeros(&[2, 1, 3, 3]);
        assert_eq!(conv2d_tensor(&x, &k, None, 2, 1).unwrap().shape(), &[1, 2, 4, 4]);
    }
}
