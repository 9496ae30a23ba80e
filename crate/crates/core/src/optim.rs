//! Adam with bias correction.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{GradMap, ParamStore};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    m: IndexMap<String, Vec<T>>,
    v: IndexMap<String, Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&[T]> {
        self.m.get(name).map(Vec::as_slice)
    }
}

/// One Adam update of every parameter that has a gradient in `grads`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &GradMap<T>,
    state: &mut AdamState<T>,
) -> Result<()> {
    for (name, g) in &grads.grads {
        let p = params.param(name)?;
        if p.shape() != g.shape() {
            return Err(Error::shape(
                format!("adam[{name}]"),
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
    }
    state.t += 1;
    let c = state.config;
    let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    let step = T::c(c.lr / bc1);
    let bc2_sqrt = T::c(bc2.sqrt());
    let eps = T::c(c.epsilon);
    for (name, g) in &grads.grads {
        let n = g.numel();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); n]);
        let p = params.param_mut(name)?;
        for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
            *pi = *pi - step * *mi / ((*vi).sqrt() / bc2_sqrt + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn setup(val: f64) -> (ParamStore<f64>, GradMap<f64>) {
        let mut p = ParamStore::new();
        p.insert_param("w", Tensor::full(&[3], 1.0));
        let g = GradMap {
            grads: [("w".to_string(), Tensor::full(&[3], val))].into_iter().collect(),
            disconnected: vec![],
        };
        (p, g)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, g) = setup(0.0);
        let before = p.clone();
        let mut s = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.t, 5);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        // With a constant gradient the bias-corrected ratio m/sqrt(v) is exactly 1,
        // so every step moves lr * g/(|g| + eps*...) ~ lr.
        let (mut p, g) = setup(0.37);
        let mut s = AdamState::new(AdamConfig::with_lr(1e-3));
        let mut prev = p.param("w").unwrap().data()[0];
        for _ in 0..200 {
            adam_step(&mut p, &g, &mut s).unwrap();
            let cur = p.param("w").unwrap().data()[0];
            assert!(((prev - cur) - 1e-3).abs() < 1e-9);
            prev = cur;
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let (mut p, mut g) = setup(1.0);
        g.grads.insert("w".into(), Tensor::zeros(&[2]));
        let mut s = AdamState::new(AdamConfig::default());
        assert!(adam_step(&mut p, &g, &mut s).is_err());
        assert_eq!(s.t, 0);
    }
}
