//! Matrix products and the token-wise linear layer.

use rayon::prelude::*;

use crate::autodiff::Var;
use crate::error::{shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Rows per parallel work item. Fixed so reductions sum in the same order on
/// any thread count.
const ROW_CHUNK: usize = 512;

/// `out[m, n] = sum_k a[m, k] * b[k, n]`.
pub fn gemm_nn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * n];
    out.par_chunks_mut(ROW_CHUNK * n).enumerate().for_each(|(ci, chunk)| {
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            let i = ci * ROW_CHUNK + ri;
            let arow = &a[i * k..(i + 1) * k];
            for (kk, &av) in arow.iter().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    });
    out
}

/// `out[m, k] = sum_n a[m, n] * b[k, n]` (right operand transposed).
pub fn gemm_nt<R: Real>(a: &[R], b: &[R], m: usize, n: usize, k: usize) -> Vec<R> {
    let mut out = vec![R::zero(); m * k];
    out.par_chunks_mut(ROW_CHUNK * k).enumerate().for_each(|(ci, chunk)| {
        for (ri, orow) in chunk.chunks_mut(k).enumerate() {
            let i = ci * ROW_CHUNK + ri;
            let arow = &a[i * n..(i + 1) * n];
            for (kk, o) in orow.iter_mut().enumerate() {
                let brow = &b[kk * n..(kk + 1) * n];
                *o = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            }
        }
    });
    out
}

/// `out[k, n] = sum_m a[m, k] * b[m, n]` (left operand transposed).
pub fn gemm_tn<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let partials: Vec<Vec<R>> = (0..m.div_ceil(ROW_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let mut acc = vec![R::zero(); k * n];
            for i in ci * ROW_CHUNK..((ci + 1) * ROW_CHUNK).min(m) {
                let brow = &b[i * n..(i + 1) * n];
                for (kk, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
                    let dst = &mut acc[kk * n..(kk + 1) * n];
                    for (d, &bv) in dst.iter_mut().zip(brow) {
                        *d += av * bv;
                    }
                }
            }
            acc
        })
        .collect();
    let mut out = vec![R::zero(); k * n];
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
    out
}

fn column_sums<R: Real>(g: &[R], rows: usize, cols: usize) -> Vec<R> {
    let mut out = vec![R::zero(); cols];
    for r in 0..rows {
        for (o, &v) in out.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
            *o += v;
        }
    }
    out
}

impl<'t, R: Real> Var<'t, R> {
    /// Plain 2-D matrix product.
    pub fn matmul(self, other: Var<'t, R>) -> Result<Var<'t, R>> {
        let (a, b) = (self.value(), other.value());
        let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
            return shape_err(format!("matmul expects 2-D operands, got {:?} x {:?}", a.shape(), b.shape()));
        };
        if k != k2 {
            return shape_err(format!("matmul inner dims differ: {:?} x {:?}", a.shape(), b.shape()));
        }
        let out = Tensor::new(&[m, n], gemm_nn(a.data(), b.data(), m, k, n))?;
        self.tape().push("matmul", out, &[self, other], move || {
            Box::new(move |g| {
                let ga = gemm_nt(g.data(), b.data(), m, n, k);
                let gb = gemm_tn(a.data(), g.data(), m, k, n);
                vec![Some(Tensor::new(&[m, k], ga).unwrap()), Some(Tensor::new(&[k, n], gb).unwrap())]
            })
        })
    }

    /// Applies `x W + b` along the last axis of `self`. `weight` is
    /// `[C_in, C_out]`, `bias` is `[C_out]`.
    pub fn linear(self, weight: Var<'t, R>, bias: Option<Var<'t, R>>) -> Result<Var<'t, R>> {
        let (x, w) = (self.value(), weight.value());
        let xs = x.shape().to_vec();
        let &[cin, cout] = w.shape() else {
            return shape_err(format!("linear weight must be 2-D, got {:?}", w.shape()));
        };
        if xs.last() != Some(&cin) {
            return shape_err(format!("linear: input {:?} does not end in {cin}", xs));
        }
        let rows = x.len() / cin;
        let mut y = gemm_nn(x.data(), w.data(), rows, cin, cout);
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            if b.shape() != [cout] {
                return shape_err(format!("linear bias {:?} does not match {cout}", b.shape()));
            }
            for row in y.chunks_mut(cout) {
                for (o, &bb) in row.iter_mut().zip(b.data()) {
                    *o += bb;
                }
            }
        }
        let mut os = xs.clone();
        *os.last_mut().unwrap() = cout;
        let out = Tensor::new(&os, y)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        self.tape().push("linear", out, &parents, move || {
            Box::new(move |g| {
                let gx = gemm_nt(g.data(), w.data(), rows, cout, cin);
                let gw = gemm_tn(x.data(), g.data(), rows, cin, cout);
                let mut v = vec![Some(Tensor::new(&xs, gx).unwrap()), Some(Tensor::new(&[cin, cout], gw).unwrap())];
                if has_bias {
                    v.push(Some(Tensor::new(&[cout], column_sums(g.data(), rows, cout)).unwrap()));
                }
                v
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn matmul_small() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::new(&[2, 1], vec![5.0, 6.0]).unwrap());
        assert_eq!(a.matmul(b).unwrap().value().data(), &[17.0, 39.0]);
        let bad = tape.constant(Tensor::zeros(&[3, 1]));
        assert!(a.matmul(bad).is_err());
    }

    #[test]
    fn transposed_products_agree() {
        let (m, k, n) = (1100, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..m * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let tn = gemm_tn(&a, &b, m, k, n);
        for kk in 0..k {
            for nn in 0..n {
                let s: f64 = (0..m).map(|i| a[i * k + kk] * b[i * n + nn]).sum();
                assert_eq!(tn[kk * n + nn], s);
            }
        }
    }
}
