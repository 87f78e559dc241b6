use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Adam with bias correction and no weight decay. Moments are kept per
/// parameter name and created lazily.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moment per parameter.
    pub moments: BTreeMap<String, (Tensor<f32>, Tensor<f32>)>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { lr, beta1, beta2, eps, step: 0, moments: BTreeMap::new() }
    }

    /// One update of every trainable tensor that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powf(self.step as f64);
        let c2 = 1.0 - self.beta2.powf(self.step as f64);
        for (name, g) in grads {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient {:?} for parameter '{name}' {:?}", g.shape(), p.shape())));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                let gv = gv as f64;
                let m1 = self.beta1 * *mv as f64 + (1.0 - self.beta1) * gv;
                let v1 = self.beta2 * *vv as f64 + (1.0 - self.beta2) * gv * gv;
                *mv = m1 as f32;
                *vv = v1 as f32;
                let delta = self.lr * (m1 / c1) / ((v1 / c2).sqrt() + self.eps);
                *pv = (*pv as f64 - delta) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_fn(&[3], |i| i as f32 - 1.0), ParamKind::Trainable);
        let before = store.clone();
        let mut adam = Adam::new(5e-4, 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([("w".to_string(), Tensor::zeros(&[3]))]);
        for _ in 0..3 {
            adam.update(&mut store, &grads).unwrap();
        }
        assert!(store.bit_equal(&before));
    }

    #[test]
    fn first_step_moves_by_lr_against_the_sign() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(&[2], vec![1.0, 1.0]).unwrap(), ParamKind::Trainable);
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8);
        let grads = BTreeMap::from([("w".to_string(), Tensor::new(&[2], vec![3.0, -0.5]).unwrap())]);
        adam.update(&mut store, &grads).unwrap();
        let w = store.get("w").unwrap().data();
        assert!((w[0] - 0.99).abs() < 1e-6 && (w[1] - 1.01).abs() < 1e-6, "{w:?}");
    }
}
