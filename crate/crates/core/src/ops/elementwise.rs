//! Pointwise arithmetic, activations and reductions.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Exact GELU, `x * Phi(x)`.
pub fn gelu_scalar<R: Real>(x: R) -> R {
    let half = R::lit(0.5);
    x * half * (R::one() + (x * R::lit(FRAC_1_SQRT_2)).erf())
}

/// Derivative of [`gelu_scalar`].
pub fn gelu_grad_scalar<R: Real>(x: R) -> R {
    let cdf = R::lit(0.5) * (R::one() + (x * R::lit(FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * R::lit(0.5)).exp() * R::lit(1.0 / (2.0 * PI).sqrt());
    cdf + x * pdf
}

impl<'t, R: Real> Var<'t, R> {
    pub fn add(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x + y)?;
        self.tape().push("add", out, &[self, other], || Box::new(|g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x - y)?;
        self.tape().push("sub", out, &[self, other], || {
            Box::new(|g| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y)?;
        self.tape().push("mul", out, &[self, other], move || {
            Box::new(move |g| {
                vec![
                    Some(g.zip_map(&b, |gv, bv| gv * bv).unwrap()),
                    Some(g.zip_map(&a, |gv, av| gv * av).unwrap()),
                ]
            })
        })
    }

    pub fn scale(self, s: R) -> Result<Var<'t, R>> {
        let out = self.value().map(|v| v * s);
        self.tape().push("scale", out, &[self], move || Box::new(move |g| vec![Some(g.map(|v| v * s))]))
    }

    pub fn add_scalar(self, s: R) -> Result<Var<'t, R>> {
        let out = self.value().map(|v| v + s);
        self.tape().push("add_scalar", out, &[self], || Box::new(|g| vec![Some(g.clone())]))
    }

    pub fn relu(self) -> Result<Var<'t, R>> {
        let x = self.value();
        let out = x.map(|v| if v > R::zero() { v } else { R::zero() });
        self.tape().push("relu", out, &[self], move || {
            Box::new(move |g| vec![Some(g.zip_map(&x, |gv, xv| if xv > R::zero() { gv } else { R::zero() }).unwrap())])
        })
    }

    pub fn gelu(self) -> Result<Var<'t, R>> {
        let x = self.value();
        let out = x.map(gelu_scalar);
        self.tape().push("gelu", out, &[self], move || {
            Box::new(move |g| vec![Some(g.zip_map(&x, |gv, xv| gv * gelu_grad_scalar(xv)).unwrap())])
        })
    }

    pub fn sum(self) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape().push("sum", Tensor::scalar(x.sum()), &[self], move || {
            Box::new(move |g| vec![Some(Tensor::full(&shape, g.item()))])
        })
    }

    pub fn mean(self) -> Result<Var<'t, R>> {
        let n = self.value().len();
        self.sum()?.scale(R::one() / R::lit(n as f64))
    }

    /// `sum(w * (self - target)^2) / sum(w)` with constant weights `w`.
    pub fn weighted_sq_err(self, target: Var<'t, R>, weights: &Tensor<R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), target.value());
        a.expect_same_shape(&b, "weighted_sq_err")?;
        a.expect_same_shape(weights, "weighted_sq_err")?;
        let wsum = weights.sum();
        if wsum <= R::zero() {
            return shape_err("weighted_sq_err: weights sum to zero");
        }
        let diff = a.zip_map(&b, |x, y| x - y)?;
        let loss = diff.data().iter().zip(weights.data()).map(|(&d, &w)| w * d * d).sum::<R>() / wsum;
        let w = weights.clone();
        self.tape().push("weighted_sq_err", Tensor::scalar(loss), &[self, target], move || {
            Box::new(move |g| {
                let k = g.item() * R::lit(2.0) / wsum;
                let ga = diff.zip_map(&w, |d, wv| k * wv * d).unwrap();
                let gb = ga.map(|v| -v);
                vec![Some(ga), Some(gb)]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn activation_fixed_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new(&[2], vec![-1.0, 2.0]).unwrap());
        assert_eq!(x.relu().unwrap().value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn gelu_matches_quadrature_of_gaussian_cdf() {
        // Phi(x) = 1/2 + integral_0^x phi(t) dt, composite Simpson with 2000 panels.
        fn phi_quad(x: f64) -> f64 {
            let n = 2000;
            let h = x / n as f64;
            let pdf = |t: f64| (-(t * t) / 2.0).exp() / (2.0 * PI).sqrt();
            let mut s = pdf(0.0) + pdf(x);
            for i in 1..n {
                let w = if i % 2 == 1 { 4.0 } else { 2.0 };
                s += w * pdf(i as f64 * h);
            }
            0.5 + s * h / 3.0
        }
        let mut state = 0x1234_5678_u64;
        for _ in 0..200 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let x = ((state >> 11) as f64 / (1u64 << 53) as f64) * 10.0 - 5.0;
            let expect = x * phi_quad(x);
            assert!((gelu_scalar(x) - expect).abs() < 1e-4, "x={x}");
            assert!(((gelu_scalar(x as f32) as f64) - expect).abs() < 1e-4, "f32 x={x}");
        }
    }

    #[test]
    fn weighted_error_ignores_zero_weight_pixels() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[4], vec![1.0, 2.0, 9.0, 9.0]).unwrap());
        let b = tape.constant(Tensor::new(&[4], vec![0.0, 0.0, 0.0, 0.0]).unwrap());
        let w = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = a.weighted_sq_err(b, &w).unwrap();
        assert_eq!(l.item(), 2.5);
    }
}
