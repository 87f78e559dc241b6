//! Central finite-difference gradient checks in double precision.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub step: f64,
    /// Coordinates perturbed per input tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    /// Lower bound of the relative-error denominator. Tensors whose true
    /// gradient vanishes (e.g. key-projection biases, which cancel in the
    /// softmax) are then judged on absolute error.
    pub floor: f64,
    /// Corrupts the backward rule of the named op (negative control).
    pub fault: Option<&'static str>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { step: 1e-3, max_coords: None, floor: 1e-8, fault: None }
    }
}

/// Outcome for one function: worst relative error over its inputs.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    /// Input index with the worst error.
    pub worst_input: usize,
    pub coords: usize,
    /// Relative error of each input.
    pub per_input: Vec<f64>,
}

/// Relative error `|a - n| / max(|a|, |n|, floor)` using Euclidean norms
/// over the checked coordinates of one tensor.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied())).max(floor);
    diff / scale
}

/// Compares reverse-mode gradients of `sum(w * f(inputs))` (random fixed `w`)
/// against central differences.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: &GradCheckOptions, rng: &mut impl Rng) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    if let Some(op) = opts.fault {
        tape.inject_fault(op);
    }
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let weights = Tensor::from_fn(&out.shape(), |_| StandardNormal.sample(rng));
    let loss = out.mul(tape.constant(weights.clone()))?.sum()?;
    let mut grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> =
        vars.iter().map(|v| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()))).collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::inference();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let v = out.value();
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let mut report = GradCheck { max_rel_err: 0.0, worst_input: 0, coords: 0, per_input: Vec::new() };
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < input.len() => sample(rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        let mut a = Vec::with_capacity(coords.len());
        let mut n = Vec::with_capacity(coords.len());
        for &c in &coords {
            let x0 = input.data()[c];
            work[i].data_mut()[c] = x0 + opts.step;
            let plus = eval(&work)?;
            work[i].data_mut()[c] = x0 - opts.step;
            let minus = eval(&work)?;
            work[i].data_mut()[c] = x0;
            n.push((plus - minus) / (2.0 * opts.step));
            a.push(analytic[i].data()[c]);
        }
        let err = relative_error(&a, &n, opts.floor);
        report.coords += coords.len();
        report.per_input.push(err);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_input = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn square_passes_and_fault_fails() {
        let x = Tensor::from_fn(&[5], |i| i as f64 - 1.7);
        fn f<'t>(_: &'t Tape<f64>, v: &[Var<'t, f64>]) -> Result<Var<'t, f64>> {
            v[0].mul(v[0])
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ok = gradcheck(&[x.clone()], f, &GradCheckOptions::default(), &mut rng).unwrap();
        assert!(ok.max_rel_err < 1e-8, "{ok:?}");
        let opts = GradCheckOptions { fault: Some("mul"), ..GradCheckOptions::default() };
        let bad = gradcheck(&[x], f, &opts, &mut rng).unwrap();
        assert!(bad.max_rel_err > 0.1, "{bad:?}");
    }
}
