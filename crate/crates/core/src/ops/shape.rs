//! Shape manipulation: reshape, permute, concat, slicing, axis means and
//! pixel shuffle.

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn inverse_perm(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Channel-to-space rearrangement on `[N, C*r*r, H, W]`:
/// `out[n, c, r*h + a, r*w + b] = in[n, c*r*r + a*r + b, h, w]`.
pub fn pixel_shuffle_tensor<R: Real>(x: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let &[n, cr, h, w] = x.shape() else {
        return shape_err(format!("pixel_shuffle expects rank 4, got {:?}", x.shape()));
    };
    if r == 0 || cr % (r * r) != 0 {
        return shape_err(format!("pixel_shuffle: {cr} channels not divisible by r^2 = {}", r * r));
    }
    let c = cr / (r * r);
    let (oh, ow) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![R::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for a in 0..r {
                for b in 0..r {
                    let sc = ci * r * r + a * r + b;
                    let sbase = ((ni * cr) + sc) * h * w;
                    for hi in 0..h {
                        let obase = ((ni * c + ci) * oh + r * hi + a) * ow;
                        for wi in 0..w {
                            out[obase + r * wi + b] = src[sbase + hi * w + wi];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, c, oh, ow], out)
}

/// Inverse of [`pixel_shuffle_tensor`] (space-to-channel).
pub fn pixel_unshuffle_tensor<R: Real>(x: &Tensor<R>, r: usize) -> Result<Tensor<R>> {
    let &[n, c, oh, ow] = x.shape() else {
        return shape_err(format!("pixel_unshuffle expects rank 4, got {:?}", x.shape()));
    };
    if r == 0 || oh % r != 0 || ow % r != 0 {
        return shape_err(format!("pixel_unshuffle: {oh}x{ow} not divisible by {r}"));
    }
    let (h, w, cr) = (oh / r, ow / r, c * r * r);
    let src = x.data();
    let mut out = vec![R::zero(); src.len()];
    for ni in 0..n {
        for ci in 0..c {
            for a in 0..r {
                for b in 0..r {
                    let oc = ci * r * r + a * r + b;
                    let obase = ((ni * cr) + oc) * h * w;
                    for hi in 0..h {
                        let sbase = ((ni * c + ci) * oh + r * hi + a) * ow;
                        for wi in 0..w {
                            out[obase + hi * w + wi] = src[sbase + r * wi + b];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, cr, h, w], out)
}

impl<'t, R: Real> Var<'t, R> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, R>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        self.tape().push("reshape", out, &[self], move || {
            Box::new(move |g| vec![Some(g.clone().reshape(&orig).unwrap())])
        })
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t, R>> {
        let out = self.value().permute(axes)?;
        let inv = inverse_perm(axes);
        self.tape().push("permute", out, &[self], move || {
            Box::new(move |g| vec![Some(g.permute(&inv).unwrap())])
        })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, R>], axis: usize) -> Result<Var<'t, R>> {
        let Some(first) = parts.first() else {
            return shape_err("concat of nothing");
        };
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return shape_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for v in &values {
            let s = v.shape();
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
                return shape_err(format!("concat: incompatible shapes {:?} and {:?}", base, s));
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        first.tape().push("concat", out, parts, move || {
            Box::new(move |g| {
                let gd = g.data();
                let mut grads: Vec<Vec<R>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gv, &l) in grads.iter_mut().zip(&lens) {
                        gv.extend_from_slice(&gd[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&lens)
                    .map(|(d, &l)| {
                        let mut s = base.clone();
                        s[axis] = l;
                        Some(Tensor::new(&s, d).unwrap())
                    })
                    .collect()
            })
        })
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return shape_err(format!("narrow({axis}, {start}, {len}) out of range for {shape:?}"));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(&out_shape, data)?;
        self.tape().push("narrow", out, &[self], move || {
            Box::new(move |g| {
                let mut gx = Tensor::zeros(&shape);
                let gd = gx.data_mut();
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gd[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            })
        })
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t, R>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() {
            return shape_err(format!("mean_axis {axis} out of range for {shape:?}"));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let scale = R::one() / R::lit(len as f64);
        let mut data = vec![R::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for k in 0..len {
                let src = &x.data()[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, data)?;
        self.tape().push("mean_axis", out, &[self], move || {
            Box::new(move |g| {
                let mut gx = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for _ in 0..len {
                        gx.extend(src.iter().map(|&v| v * scale));
                    }
                }
                vec![Some(Tensor::new(&shape, gx).unwrap())]
            })
        })
    }

    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'t, R>> {
        let out = pixel_shuffle_tensor(&self.value(), r)?;
        self.tape().push("pixel_shuffle", out, &[self], move || {
            Box::new(move |g| vec![Some(pixel_unshuffle_tensor(g, r).unwrap())])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;

    #[test]
    fn pixel_shuffle_identity_for_r1() {
        let x = Tensor::<f64>::from_fn(&[1, 3, 4, 5], |i| i as f64);
        assert_eq!(pixel_shuffle_tensor(&x, 1).unwrap(), x);
    }

    #[test]
    fn pixel_shuffle_two_by_two() {
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let y = pixel_shuffle_tensor(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[10.0, 11.0, 12.0, 13.0]);
    }

    #[test]
    fn pixel_shuffle_shapes() {
        let x = Tensor::<f32>::zeros(&[1, 18, 4, 4]);
        assert_eq!(pixel_shuffle_tensor(&x, 3).unwrap().shape(), &[1, 2, 12, 12]);
        let bad = Tensor::<f32>::zeros(&[1, 10, 4, 4]);
        assert!(pixel_shuffle_tensor(&bad, 3).is_err());
    }

    #[test]
    fn pixel_shuffle_matches_index_formula() {
        let (c, r, h, w) = (2, 3, 2, 3);
        let x = Tensor::<f64>::from_fn(&[1, c * r * r, h, w], |i| i as f64);
        let y = pixel_shuffle_tensor(&x, r).unwrap();
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    for a in 0..r {
                        for b in 0..r {
                            assert_eq!(y.at(&[0, ci, r * hi + a, r * wi + b]), x.at(&[0, ci * r * r + a * r + b, hi, wi]));
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn pixel_unshuffle_inverts_shuffle(n in 1usize..3, c in 1usize..3, r in 1usize..4, h in 1usize..4, w in 1usize..4) {
            let x = Tensor::<f32>::from_fn(&[n, c * r * r, h, w], |i| i as f32);
            let y = pixel_shuffle_tensor(&x, r).unwrap();
            prop_assert_eq!(pixel_unshuffle_tensor(&y, r).unwrap(), x);
        }
    }

    #[test]
    fn concat_and_narrow_roundtrip() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
        let b = tape.param(Tensor::from_fn(&[2, 1, 2], |i| 100.0 + i as f64));
        let cat = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(cat.shape(), vec![2, 4, 2]);
        let back = cat.narrow(1, 3, 1).unwrap();
        assert_eq!(*back.value(), *b.value());
        let g = tape.backward(back.sum().unwrap()).unwrap();
        assert_eq!(g.get(a).unwrap().sum(), 0.0);
        assert_eq!(g.get(b).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn mean_axis_averages() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
        let m = x.mean_axis(0).unwrap();
        assert_eq!(m.value().data(), &[2.0, 3.0]);
    }
}
