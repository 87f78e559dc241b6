//! Parameterized building blocks shared by the encoder, fusion and decoder.
//!
//! A layer is a small descriptor (parameter name prefix plus sizes). It can
//! initialize its tensors into a [`ParamStore`] and run forward inside a
//! [`Ctx`], which binds the store to a tape.

mod layers;
mod params;

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::BatchStats;
use crate::real::Real;
use crate::tensor::Tensor;

pub use layers::{BatchNorm, Conv, LayerNorm, Linear, Mhsa, Mlp};
pub use params::{Param, ParamKind, ParamStore};

/// Whether batch norm uses batch statistics (and records them) or running
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward-pass context: trainable tensors bound as tape leaves.
pub struct Ctx<'a, 't, R: Real> {
    pub tape: &'t Tape<R>,
    pub mode: Mode,
    store: &'a ParamStore<R>,
    vars: BTreeMap<String, Var<'t, R>>,
    bn_stats: RefCell<Vec<(String, BatchStats<R>)>>,
}

impl<'a, 't, R: Real> Ctx<'a, 't, R> {
    pub fn new(tape: &'t Tape<R>, store: &'a ParamStore<R>, mode: Mode) -> Self {
        let vars = store
            .trainable()
            .map(|(name, t)| (name.to_string(), tape.param(t.clone())))
            .collect();
        Self { tape, mode, store, vars, bn_stats: RefCell::new(Vec::new()) }
    }

    /// Context whose trainable tensors are the given, already-bound
    /// variables (e.g. leaves a gradient check perturbs).
    pub fn with_bindings(
        tape: &'t Tape<R>,
        store: &'a ParamStore<R>,
        mode: Mode,
        bindings: impl IntoIterator<Item = (String, Var<'t, R>)>,
    ) -> Self {
        Self { tape, mode, store, vars: bindings.into_iter().collect(), bn_stats: RefCell::new(Vec::new()) }
    }

    /// Tape variable of a trainable tensor.
    pub fn var(&self, name: &str) -> Result<Var<'t, R>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not bound")))
    }

    /// Non-trainable tensor straight from the store.
    pub fn buffer(&self, name: &str) -> Result<&'a Tensor<R>> {
        self.store.get(name)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t, R>)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub(crate) fn record_bn(&self, prefix: &str, stats: BatchStats<R>) {
        self.bn_stats.borrow_mut().push((prefix.to_string(), stats));
    }

    /// Batch statistics recorded by training-mode batch norms, in call order.
    pub fn take_bn_stats(&self) -> Vec<(String, BatchStats<R>)> {
        std::mem::take(&mut self.bn_stats.borrow_mut())
    }

    /// Gradients by parameter name after `tape.backward`.
    pub fn named_grads(&self, grads: &mut Gradients<R>) -> BTreeMap<String, Tensor<R>> {
        self.vars
            .iter()
            .map(|(name, v)| {
                let g = grads.take(*v).unwrap_or_else(|| Tensor::zeros(&v.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Folds recorded batch statistics into the running buffers.
pub fn update_running_stats<R: Real>(store: &mut ParamStore<R>, stats: &[(String, BatchStats<R>)], momentum: R) -> Result<()> {
    for (prefix, s) in stats {
        let unbias = if s.count > 1 { R::lit(s.count as f64 / (s.count - 1) as f64) } else { R::one() };
        let rm = store.get_mut(&format!("{prefix}.running_mean"))?;
        for (r, &m) in rm.data_mut().iter_mut().zip(&s.mean) {
            *r = (R::one() - momentum) * *r + momentum * m;
        }
        let rv = store.get_mut(&format!("{prefix}.running_var"))?;
        for (r, &v) in rv.data_mut().iter_mut().zip(&s.var) {
            *r = (R::one() - momentum) * *r + momentum * v * unbias;
        }
    }
    Ok(())
}

pub(crate) fn normal_tensor<R: Real>(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor<R> {
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| R::lit(dist.sample(rng)))
}
