//! Adam optimizer over named parameter arrays.

use crate::networks::ParamStore;
use ndarray::prelude::*;
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, ArrayD<f64>>,
    pub v: BTreeMap<String, ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update over the supplied gradients; moment buffers are created on
    /// first touch.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, ArrayD<f64>>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, g) in grads {
            let entry = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            azip_update(m, v, &mut entry.value, g, self.beta1, self.beta2, self.lr, self.eps, bc1, bc2);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn azip_update(
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    p: &mut ArrayD<f64>,
    g: &ArrayD<f64>,
    beta1: f64,
    beta2: f64,
    lr: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(m)
        .and(v)
        .and(p)
        .and(g)
        .for_each(|m, v, p, &g| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{ParamEntry, ParamKind};

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert(
            "w".into(),
            ParamEntry {
                value: ArrayD::from_elem(ndarray::IxDyn(&[1]), 5.0),
                kind: ParamKind::DenseWeight,
            },
        );
        let mut opt = Adam::new(0.1, 0.9, 0.999, 1e-8);
        for _ in 0..500 {
            let w = store.get("w").unwrap().value[[0]];
            let mut grads = BTreeMap::new();
            grads.insert("w".to_string(), ArrayD::from_elem(ndarray::IxDyn(&[1]), 2.0 * w));
            opt.apply(&mut store, &grads);
        }
        assert!(store.get("w").unwrap().value[[0]].abs() < 1e-3);
    }
}
