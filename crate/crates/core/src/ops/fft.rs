//! Mixed-radix FFT for arbitrary lengths and the 2-D transforms used by the
//! spectral branch of the decoder.
//!
//! Lengths are factored into primes and transformed by recursive
//! decimation in time; each prime-radix butterfly is a direct DFT of that
//! radix, so prime lengths fall back to O(n^2).

use std::f64::consts::PI;

use num_complex::Complex;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::{ComplexTensor, Tensor};

/// Precomputed factorization and twiddles for one transform length.
#[derive(Clone, Debug)]
pub struct FftPlan<R> {
    n: usize,
    factors: Vec<usize>,
    /// `exp(-2 pi i t / n)` for `t in 0..n`.
    twiddles: Vec<Complex<R>>,
}

fn prime_factors(mut n: usize) -> Vec<usize> {
    let mut f = Vec::new();
    let mut p = 2;
    while p * p <= n {
        while n % p == 0 {
            f.push(p);
            n /= p;
        }
        p += 1;
    }
    if n > 1 {
        f.push(n);
    }
    f
}

impl<R: Real> FftPlan<R> {
    pub fn new(n: usize) -> Self {
        let twiddles = (0..n)
            .map(|t| {
                let a = -2.0 * PI * t as f64 / n as f64;
                Complex::new(R::lit(a.cos()), R::lit(a.sin()))
            })
            .collect();
        Self { n, factors: prime_factors(n), twiddles }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Forward transform of `input[0], input[stride], ...` into `out`.
    pub fn forward_strided(&self, input: &[Complex<R>], stride: usize, out: &mut [Complex<R>]) {
        debug_assert_eq!(out.len(), self.n);
        if self.n == 0 {
            return;
        }
        self.rec(input, stride, self.n, out, &self.factors, 1);
    }

    pub fn forward(&self, data: &mut [Complex<R>]) {
        let input = data.to_vec();
        self.forward_strided(&input, 1, data);
    }

    /// Unnormalized inverse transform (`sum x_k exp(+2 pi i k n / N)`).
    pub fn inverse_unnormalized(&self, data: &mut [Complex<R>]) {
        for v in data.iter_mut() {
            *v = v.conj();
        }
        self.forward(data);
        for v in data.iter_mut() {
            *v = v.conj();
        }
    }

    fn rec(&self, input: &[Complex<R>], stride: usize, n: usize, out: &mut [Complex<R>], factors: &[usize], tw_stride: usize) {
        if n == 1 {
            out[0] = input[0];
            return;
        }
        let p = factors[0];
        let m = n / p;
        for r in 0..p {
            self.rec(&input[r * stride..], stride * p, m, &mut out[r * m..(r + 1) * m], &factors[1..], tw_stride * p);
        }
        let mut sub = vec![Complex::new(R::zero(), R::zero()); p];
        for k in 0..m {
            for (r, s) in sub.iter_mut().enumerate() {
                *s = out[r * m + k];
            }
            for q in 0..p {
                let kk = k + q * m;
                let mut acc = sub[0];
                for (r, &s) in sub.iter().enumerate().skip(1) {
                    let t = (r * kk) % n;
                    acc = acc + s * self.twiddles[t * tw_stride];
                }
                out[kk] = acc;
            }
        }
    }
}

/// 2-D transform over the last two axes; `inverse` applies `1/(H*W)`.
fn transform2<R: Real>(x: &ComplexTensor<R>, inverse: bool) -> Result<ComplexTensor<R>> {
    let shape = x.shape().to_vec();
    if shape.len() < 2 {
        return shape_err(format!("fft2 needs at least 2 axes, got {shape:?}"));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let planes = if h * w == 0 { 0 } else { x.re.len() / (h * w) };
    let (ph, pw) = (FftPlan::<R>::new(h), FftPlan::<R>::new(w));
    let mut re = vec![R::zero(); x.re.len()];
    let mut im = vec![R::zero(); x.im.len()];
    let mut buf: Vec<Complex<R>> = vec![Complex::new(R::zero(), R::zero()); h * w];
    let mut line = vec![Complex::new(R::zero(), R::zero()); h.max(w)];
    let conj = |c: Complex<R>| if inverse { c.conj() } else { c };
    for pl in 0..planes {
        let off = pl * h * w;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = conj(Complex::new(x.re[off + i], x.im[off + i]));
        }
        for row in 0..h {
            let src = buf[row * w..(row + 1) * w].to_vec();
            pw.forward_strided(&src, 1, &mut line[..w]);
            buf[row * w..(row + 1) * w].copy_from_slice(&line[..w]);
        }
        let snapshot = buf.clone();
        for col in 0..w {
            ph.forward_strided(&snapshot[col..], w, &mut line[..h]);
            for row in 0..h {
                buf[row * w + col] = line[row];
            }
        }
        let norm = if inverse { R::one() / R::lit((h * w) as f64) } else { R::one() };
        for (i, b) in buf.iter().enumerate() {
            let v = conj(*b);
            re[off + i] = v.re * norm;
            im[off + i] = v.im * norm;
        }
    }
    ComplexTensor::new(&shape, re, im)
}

/// Unnormalized forward 2-D DFT over the last two axes.
pub fn fft2<R: Real>(x: &ComplexTensor<R>) -> Result<ComplexTensor<R>> {
    transform2(x, false)
}

/// Inverse 2-D DFT with `1/(H*W)` normalization, so `ifft2(fft2(x)) == x`.
pub fn ifft2<R: Real>(x: &ComplexTensor<R>) -> Result<ComplexTensor<R>> {
    transform2(x, true)
}

pub fn fft2_real<R: Real>(x: &Tensor<R>) -> Result<ComplexTensor<R>> {
    fft2(&ComplexTensor::from_real(x))
}

fn split_stacked<R: Real>(t: &Tensor<R>) -> Result<(Vec<usize>, ComplexTensor<R>)> {
    let &[n, c2, h, w] = t.shape() else {
        return shape_err(format!("expected [N, 2C, H, W], got {:?}", t.shape()));
    };
    if c2 % 2 != 0 {
        return shape_err(format!("stacked spectrum needs an even channel count, got {c2}"));
    }
    let c = c2 / 2;
    let plane = c * h * w;
    let mut re = Vec::with_capacity(n * plane);
    let mut im = Vec::with_capacity(n * plane);
    for ni in 0..n {
        let base = ni * 2 * plane;
        re.extend_from_slice(&t.data()[base..base + plane]);
        im.extend_from_slice(&t.data()[base + plane..base + 2 * plane]);
    }
    let shape = vec![n, c, h, w];
    let ct = ComplexTensor::new(&shape, re, im)?;
    Ok((shape, ct))
}

fn stack_spectrum<R: Real>(z: &ComplexTensor<R>) -> Tensor<R> {
    let s = z.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = c * h * w;
    let mut data = Vec::with_capacity(2 * z.re.len());
    for ni in 0..n {
        data.extend_from_slice(&z.re[ni * plane..(ni + 1) * plane]);
        data.extend_from_slice(&z.im[ni * plane..(ni + 1) * plane]);
    }
    Tensor::new(&[n, 2 * c, h, w], data).unwrap()
}

impl<'t, R: Real> Var<'t, R> {
    /// `[N, C, H, W]` real input -> `[N, 2C, H, W]` spectrum with the real
    /// parts in the first `C` channels and imaginary parts in the rest.
    pub fn fft2_stacked(self) -> Result<Var<'t, R>> {
        let x = self.value();
        if x.rank() != 4 {
            return shape_err(format!("fft2_stacked expects [N,C,H,W], got {:?}", x.shape()));
        }
        let out = stack_spectrum(&fft2_real(&x)?);
        let shape = x.shape().to_vec();
        let hw = R::lit((shape[2] * shape[3]) as f64);
        self.tape().push("fft2_stacked", out, &[self], move || {
            Box::new(move |g| {
                let (_, gc) = split_stacked(g).unwrap();
                let back = ifft2(&gc).unwrap();
                let data = back.re.iter().map(|&v| v * hw).collect();
                vec![Some(Tensor::new(&shape, data).unwrap())]
            })
        })
    }

    /// Inverse of [`Var::fft2_stacked`] keeping only the real part.
    pub fn ifft2_real(self) -> Result<Var<'t, R>> {
        let x = self.value();
        let (shape, z) = split_stacked(&x)?;
        let out = ifft2(&z)?.real();
        let in_shape = x.shape().to_vec();
        let hw = R::lit((shape[2] * shape[3]) as f64);
        self.tape().push("ifft2_real", out, &[self], move || {
            Box::new(move |g| {
                let f = fft2_real(g).unwrap();
                let scaled = ComplexTensor::new(
                    f.shape(),
                    f.re.iter().map(|&v| v / hw).collect(),
                    f.im.iter().map(|&v| v / hw).collect(),
                )
                .unwrap();
                let t = stack_spectrum(&scaled);
                debug_assert_eq!(t.shape(), in_shape.as_slice());
                vec![Some(t)]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factorization() {
        assert_eq!(prime_factors(12), vec![2, 2, 3]);
        assert_eq!(prime_factors(13), vec![13]);
        assert_eq!(prime_factors(1), Vec::<usize>::new());
    }

    #[test]
    fn constant_image_has_only_dc() {
        let (h, w) = (5, 6);
        let x = Tensor::<f64>::full(&[1, h, w], 0.75);
        let f = fft2_real(&x).unwrap();
        assert!((f.re[0] - 0.75 * (h * w) as f64).abs() < 1e-9);
        assert!(f.im[0].abs() < 1e-9);
        for i in 1..h * w {
            assert!(f.re[i].abs() < 1e-9 && f.im[i].abs() < 1e-9, "bin {i}");
        }
    }

    #[test]
    fn one_dimensional_roundtrip_all_small_lengths() {
        for n in 1..40 {
            let plan = FftPlan::<f64>::new(n);
            let orig: Vec<Complex<f64>> = (0..n).map(|i| Complex::new((i as f64 * 0.37).sin(), (i as f64).cos())).collect();
            let mut data = orig.clone();
            plan.forward(&mut data);
            plan.inverse_unnormalized(&mut data);
            for (a, b) in data.iter().zip(&orig) {
                assert!((a / n as f64 - b).norm() < 1e-12, "n={n}");
            }
        }
    }
}
