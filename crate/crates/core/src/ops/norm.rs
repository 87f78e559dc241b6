//! Batch and layer normalization.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Biased (population) variance.
    pub var: Vec<R>,
    /// Elements reduced per channel.
    pub count: usize,
}

fn check_affine<R: Real>(gamma: &Tensor<R>, beta: &Tensor<R>, c: usize, op: &str) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!("{op}: affine params {:?}/{:?} do not match {c} channels", gamma.shape(), beta.shape()));
    }
    Ok(())
}

/// Gradient of `y = gamma * xhat + beta` w.r.t. the normalized group input,
/// where `xhat` was normalized with the group's own statistics.
fn normalized_grad<'a, R: Real>(g: &'a [R], xhat: &'a [R], gamma: R, inv_std: R) -> impl Iterator<Item = R> + 'a {
    let m = R::lit(g.len() as f64);
    let sg: R = g.iter().copied().sum();
    let sgx: R = g.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
    let k = gamma * inv_std / m;
    g.iter().zip(xhat).map(move |(&gi, &xi)| k * (m * gi - sg - xi * sgx))
}

impl<'t, R: Real> Var<'t, R> {
    /// Training-mode batch norm over `[N, C, H, W]` using batch statistics.
    pub fn batch_norm_train(self, gamma: Var<'t, R>, beta: Var<'t, R>, eps: R) -> Result<(Var<'t, R>, BatchStats<R>)> {
        let x = self.value();
        let &[n, c, h, w] = x.shape() else {
            return shape_err(format!("batch_norm expects [N,C,H,W], got {:?}", x.shape()));
        };
        let (gv, bv) = (gamma.value(), beta.value());
        check_affine(&gv, &bv, c, "batch_norm")?;
        let plane = h * w;
        let m = n * plane;
        let mut mean = vec![R::zero(); c];
        let mut var = vec![R::zero(); c];
        for ci in 0..c {
            let mut s = R::zero();
            for ni in 0..n {
                s += x.data()[(ni * c + ci) * plane..][..plane].iter().copied().sum::<R>();
            }
            let mu = s / R::lit(m as f64);
            let mut v = R::zero();
            for ni in 0..n {
                v += x.data()[(ni * c + ci) * plane..][..plane].iter().map(|&a| (a - mu) * (a - mu)).sum::<R>();
            }
            mean[ci] = mu;
            var[ci] = v / R::lit(m as f64);
        }
        let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![R::zero(); x.len()];
        let mut y = vec![R::zero(); x.len()];
        for (idx, (xc, (hc, yc))) in x.data().chunks(plane).zip(xhat.chunks_mut(plane).zip(y.chunks_mut(plane))).enumerate() {
            let ci = idx % c;
            for ((&a, hh), yy) in xc.iter().zip(hc.iter_mut()).zip(yc.iter_mut()) {
                *hh = (a - mean[ci]) * inv_std[ci];
                *yy = gv.data()[ci] * *hh + bv.data()[ci];
            }
        }
        let out = Tensor::new(x.shape(), y)?;
        let stats = BatchStats { mean, var, count: m };
        let shape = x.shape().to_vec();
        let v = self.tape().push("batch_norm_train", out, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let gd = g.data();
                let mut gx = vec![R::zero(); gd.len()];
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                let mut gbuf = Vec::with_capacity(m);
                let mut hbuf = Vec::with_capacity(m);
                for ci in 0..c {
                    gbuf.clear();
                    hbuf.clear();
                    for ni in 0..n {
                        let o = (ni * c + ci) * plane;
                        gbuf.extend_from_slice(&gd[o..o + plane]);
                        hbuf.extend_from_slice(&xhat[o..o + plane]);
                    }
                    gbeta[ci] = gbuf.iter().copied().sum();
                    ggamma[ci] = gbuf.iter().zip(&hbuf).map(|(&a, &b)| a * b).sum();
                    for (j, val) in normalized_grad(&gbuf, &hbuf, gv.data()[ci], inv_std[ci]).enumerate() {
                        let (ni, p) = (j / plane, j % plane);
                        gx[(ni * c + ci) * plane + p] = val;
                    }
                }
                vec![
                    Some(Tensor::new(&shape, gx).unwrap()),
                    Some(Tensor::new(&[c], ggamma).unwrap()),
                    Some(Tensor::new(&[c], gbeta).unwrap()),
                ]
            })
        })?;
        Ok((v, stats))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, R>,
        beta: Var<'t, R>,
        running_mean: &Tensor<R>,
        running_var: &Tensor<R>,
        eps: R,
    ) -> Result<Var<'t, R>> {
        let x = self.value();
        let &[_, c, h, w] = x.shape() else {
            return shape_err(format!("batch_norm expects [N,C,H,W], got {:?}", x.shape()));
        };
        let (gv, bv) = (gamma.value(), beta.value());
        check_affine(&gv, &bv, c, "batch_norm")?;
        check_affine(running_mean, running_var, c, "batch_norm running stats")?;
        let plane = h * w;
        let inv_std: Vec<R> = running_var.data().iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
        let mean = running_mean.data().to_vec();
        let xhat: Vec<R> = x
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(idx, xc)| {
                let ci = idx % c;
                let (mu, is) = (mean[ci], inv_std[ci]);
                xc.iter().map(move |&a| (a - mu) * is)
            })
            .collect();
        let y: Vec<R> = xhat
            .chunks(plane)
            .enumerate()
            .flat_map(|(idx, hc)| {
                let ci = idx % c;
                let (ga, be) = (gv.data()[ci], bv.data()[ci]);
                hc.iter().map(move |&a| ga * a + be)
            })
            .collect();
        let out = Tensor::new(x.shape(), y)?;
        let shape = x.shape().to_vec();
        self.tape().push("batch_norm_eval", out, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(g.len());
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                for (idx, (gc, hc)) in g.data().chunks(plane).zip(xhat.chunks(plane)).enumerate() {
                    let ci = idx % c;
                    let k = gv.data()[ci] * inv_std[ci];
                    gx.extend(gc.iter().map(|&a| a * k));
                    gbeta[ci] += gc.iter().copied().sum::<R>();
                    ggamma[ci] += gc.iter().zip(hc).map(|(&a, &b)| a * b).sum::<R>();
                }
                vec![
                    Some(Tensor::new(&shape, gx).unwrap()),
                    Some(Tensor::new(&[c], ggamma).unwrap()),
                    Some(Tensor::new(&[c], gbeta).unwrap()),
                ]
            })
        })
    }

    /// Layer norm over the last axis with learnable scale and shift.
    pub fn layer_norm(self, gamma: Var<'t, R>, beta: Var<'t, R>, eps: R) -> Result<Var<'t, R>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&0);
        let (gv, bv) = (gamma.value(), beta.value());
        check_affine(&gv, &bv, c, "layer_norm")?;
        let rows = x.len() / c.max(1);
        let mut xhat = vec![R::zero(); x.len()];
        let mut inv_std = vec![R::zero(); rows];
        let mut y = vec![R::zero(); x.len()];
        let cf = R::lit(c as f64);
        for (r, (xr, hr)) in x.data().chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mu = xr.iter().copied().sum::<R>() / cf;
            let var = xr.iter().map(|&a| (a - mu) * (a - mu)).sum::<R>() / cf;
            let is = R::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for (h, &a) in hr.iter_mut().zip(xr) {
                *h = (a - mu) * is;
            }
        }
        for (yr, hr) in y.chunks_mut(c).zip(xhat.chunks(c)) {
            for ((yy, &h), (&ga, &be)) in yr.iter_mut().zip(hr).zip(gv.data().iter().zip(bv.data())) {
                *yy = ga * h + be;
            }
        }
        let out = Tensor::new(x.shape(), y)?;
        let shape = x.shape().to_vec();
        self.tape().push("layer_norm", out, &[self, gamma, beta], move || {
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(g.len());
                let mut ggamma = vec![R::zero(); c];
                let mut gbeta = vec![R::zero(); c];
                let mut gh = vec![R::zero(); c];
                for (r, (gr, hr)) in g.data().chunks(c).zip(xhat.chunks(c)).enumerate() {
                    for j in 0..c {
                        gbeta[j] += gr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gh[j] = gr[j] * gv.data()[j];
                    }
                    gx.extend(normalized_grad(&gh, hr, R::one(), inv_std[r]));
                }
                vec![
                    Some(Tensor::new(&shape, gx).unwrap()),
                    Some(Tensor::new(&[c], ggamma).unwrap()),
                    Some(Tensor::new(&[c], gbeta).unwrap()),
                ]
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full(&[3, 5], 7.25));
        let g = tape.constant(Tensor::ones(&[5]));
        let b = tape.constant(Tensor::zeros(&[5]));
        let y = x.layer_norm(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_normalizes_each_channel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 2, 2], |i| (i * i % 7) as f64));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let (y, stats) = x.batch_norm_train(g, b, 1e-12).unwrap();
        assert_eq!(stats.count, 8);
        let y = y.value();
        for ci in 0..3 {
            let vals: Vec<f64> = (0..2).flat_map(|n| (0..4).map(move |p| (n, p))).map(|(n, p)| y.data()[(n * 3 + ci) * 4 + p]).collect();
            let mu: f64 = vals.iter().sum::<f64>() / 8.0;
            assert!(mu.abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_of_zeros_is_beta() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
        let g = tape.constant(Tensor::ones(&[2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, _) = x.batch_norm_train(g, b, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }
}
