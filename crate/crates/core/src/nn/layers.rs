use std::rc::Rc;

use rand::Rng;

use super::{normal_tensor, Ctx, Mode, ParamKind, ParamStore};
use crate::autodiff::Var;
use crate::error::Result;
use crate::ops::BiasLayout;
use crate::real::Real;
use crate::tensor::Tensor;

/// Square-kernel convolution with "same" padding and stride 1.
#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, bias: bool) -> Self {
        Self { name: name.into(), cin, cout, kernel, bias }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        let fan_in = self.cin * self.kernel * self.kernel;
        let w = normal_tensor(&[self.cout, self.cin, self.kernel, self.kernel], (2.0 / fan_in as f64).sqrt(), rng);
        store.insert(format!("{}.weight", self.name), w, ParamKind::Trainable);
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]), ParamKind::Trainable);
        }
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(ctx.var(&format!("{}.bias", self.name))?) } else { None };
        x.conv2d(w, b, 1, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, eps: 1e-5 }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>) {
        let c = self.channels;
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[c]), ParamKind::Trainable);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[c]), ParamKind::Trainable);
        store.insert(format!("{}.running_mean", self.name), Tensor::zeros(&[c]), ParamKind::Buffer);
        store.insert(format!("{}.running_var", self.name), Tensor::ones(&[c]), ParamKind::Buffer);
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let g = ctx.var(&format!("{}.gamma", self.name))?;
        let b = ctx.var(&format!("{}.beta", self.name))?;
        match ctx.mode {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(g, b, R::lit(self.eps))?;
                ctx.record_bn(&self.name, stats);
                Ok(y)
            }
            Mode::Eval => {
                let rm = ctx.buffer(&format!("{}.running_mean", self.name))?;
                let rv = ctx.buffer(&format!("{}.running_var", self.name))?;
                x.batch_norm_eval(g, b, rm, rv, R::lit(self.eps))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        Self { name: name.into(), channels, eps: 1e-5 }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.channels]), ParamKind::Trainable);
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]), ParamKind::Trainable);
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let g = ctx.var(&format!("{}.gamma", self.name))?;
        let b = ctx.var(&format!("{}.beta", self.name))?;
        x.layer_norm(g, b, R::lit(self.eps))
    }
}

/// Token-wise `x W + b`; `W` is `[cin, cout]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub bias: bool,
}

impl Linear {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, bias: bool) -> Self {
        Self { name: name.into(), cin, cout, bias }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        let w = normal_tensor(&[self.cin, self.cout], (1.0 / self.cin as f64).sqrt(), rng);
        store.insert(format!("{}.weight", self.name), w, ParamKind::Trainable);
        if self.bias {
            store.insert(format!("{}.bias", self.name), Tensor::zeros(&[self.cout]), ParamKind::Trainable);
        }
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let w = ctx.var(&format!("{}.weight", self.name))?;
        let b = if self.bias { Some(ctx.var(&format!("{}.bias", self.name))?) } else { None };
        x.linear(w, b)
    }
}

/// Two linear layers with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(name: &str, channels: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(format!("{name}.fc1"), channels, hidden, true),
            fc2: Linear::new(format!("{name}.fc2"), hidden, channels, true),
        }
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        self.fc1.init(store, rng);
        self.fc2.init(store, rng);
    }

    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>) -> Result<Var<'t, R>> {
        let h = self.fc1.forward(ctx, x)?.gelu()?;
        self.fc2.forward(ctx, h)
    }
}

/// Multi-head self-attention with Q/K/V/O projections and a learnable
/// additive position bias table of shape `[heads, bias_entries]`.
#[derive(Clone, Debug)]
pub struct Mhsa {
    pub name: String,
    pub channels: usize,
    pub heads: usize,
    pub bias_entries: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Mhsa {
    pub fn new(name: &str, channels: usize, heads: usize, bias_entries: usize, proj_bias: bool) -> Self {
        let lin = |p: &str| Linear::new(format!("{name}.{p}"), channels, channels, proj_bias);
        Self {
            name: name.to_string(),
            channels,
            heads,
            bias_entries,
            q: lin("q"),
            k: lin("k"),
            v: lin("v"),
            o: lin("o"),
        }
    }

    pub fn table_name(&self) -> String {
        format!("{}.rel_bias", self.name)
    }

    pub fn init<R: Real>(&self, store: &mut ParamStore<R>, rng: &mut impl Rng) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(store, rng);
        }
        store.insert(self.table_name(), normal_tensor(&[self.heads, self.bias_entries], 0.02, rng), ParamKind::Trainable);
    }

    /// `x` is `[S, T, C]`; `layout` maps token pairs to bias entries.
    pub fn forward<'t, R: Real>(&self, ctx: &Ctx<'_, 't, R>, x: Var<'t, R>, layout: &Rc<BiasLayout>) -> Result<Var<'t, R>> {
        let q = self.q.forward(ctx, x)?;
        let k = self.k.forward(ctx, x)?;
        let v = self.v.forward(ctx, x)?;
        let table = ctx.var(&self.table_name())?;
        let a = q.attention(k, v, self.heads, Some((table, layout.clone())))?;
        self.o.forward(ctx, a)
    }
}
