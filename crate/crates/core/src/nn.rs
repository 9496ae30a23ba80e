//! Named parameter storage and the handful of layer types the networks use.

use indexmap::IndexMap;
use rand::Rng;

use crate::autodiff::{BatchStats, Gradients, Graph, NormKind, Var};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Ordered trainable parameters plus non-trainable buffers (running statistics).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
    buffers: IndexMap<String, Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        }
    }

    pub fn insert_param(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.params.insert(name.into(), t);
    }

    pub fn insert_buffer(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.buffers.insert(name.into(), t);
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown buffer {name}")))
    }

    pub fn params(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.buffers.iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn merge(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
        self.buffers.extend(other.buffers);
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Register every parameter as a trainable leaf of `g`.
    pub fn bind(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Register every parameter as a constant (inference without gradient bookkeeping).
    pub fn bind_frozen(&self, g: &mut Graph<T>) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.input(v.clone())))
                .collect(),
        }
    }

    /// Fold observed batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::c(BN_MOMENTUM);
        for (name, s) in stats {
            for (suffix, vals) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{name}.{suffix}");
                let buf = self
                    .buffers
                    .get_mut(&key)
                    .ok_or_else(|| Error::invalid(format!("unknown buffer {key}")))?;
                for (b, &v) in buf.data_mut().iter_mut().zip(vals.iter()) {
                    *b = (T::one() - m) * *b + m * v;
                }
            }
        }
        Ok(())
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound { vars: iter.into_iter().collect() }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("unbound parameter {name}")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients per parameter name; parameters the loss never touched get
    /// zeros and are listed in `disconnected`.
    pub fn collect<T: Scalar>(&self, g: &Graph<T>, grads: &Gradients<T>) -> GradMap<T> {
        let mut out = GradMap {
            grads: IndexMap::new(),
            disconnected: Vec::new(),
        };
        for (name, &v) in &self.vars {
            match grads.get(v) {
                Some(t) => {
                    out.grads.insert(name.clone(), t.clone());
                }
                None => {
                    out.grads.insert(name.clone(), Tensor::zeros(g.shape(v)));
                    out.disconnected.push(name.clone());
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct GradMap<T> {
    pub grads: IndexMap<String, Tensor<T>>,
    pub disconnected: Vec<String>,
}

impl<T: Scalar> GradMap<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }
}

/// Per-forward context: train/eval switch and collected batch-norm statistics.
#[derive(Debug)]
pub struct Ctx<T> {
    pub mode: Mode,
    pub stats: Vec<(String, BatchStats<T>)>,
}

impl<T> Ctx<T> {
    pub fn new(mode: Mode) -> Self {
        Ctx {
            mode,
            stats: Vec::new(),
        }
    }
}

fn kaiming_uniform<T: Scalar>(shape: &[usize], fan_in: usize, master: u64, name: &str) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let mut rng = rng_for(master, name);
    Tensor::from_fn(shape, |_| T::c(rng.gen_range(-bound..bound)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

pub const LEAKY_SLOPE: f64 = 0.2;

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu => g.leaky_relu(x, LEAKY_SLOPE),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Same-size 3x3 convolution.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            k: 3,
            stride: 1,
            pad: 1,
        }
    }

    pub fn num_params(&self) -> usize {
        self.cout * self.cin * self.k * self.k + self.cout
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let w = format!("{}.w", self.name);
        store.insert_param(
            w.clone(),
            kaiming_uniform(&[self.cout, self.cin, self.k, self.k], self.cin * self.k * self.k, seed, &w),
        );
        store.insert_param(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Stride-2 transposed convolution that doubles the spatial size (k=3, pad=1, out_pad=1).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
}

impl ConvTranspose {
    pub const K: usize = 3;

    pub fn num_params(&self) -> usize {
        self.cin * self.cout * Self::K * Self::K + self.cout
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let w = format!("{}.w", self.name);
        let fan_in = self.cin * Self::K * Self::K / 4;
        store.insert_param(
            w.clone(),
            kaiming_uniform(&[self.cin, self.cout, Self::K, Self::K], fan_in.max(1), seed, &w),
        );
        store.insert_param(format!("{}.b", self.name), Tensor::zeros(&[self.cout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        g.conv_transpose2d(x, w, Some(b), 2, 1, 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub name: String,
    pub fin: usize,
    pub fout: usize,
}

impl Dense {
    pub fn new(name: impl Into<String>, fin: usize, fout: usize) -> Self {
        Dense {
            name: name.into(),
            fin,
            fout,
        }
    }

    pub fn num_params(&self) -> usize {
        self.fin * self.fout + self.fout
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>, seed: u64) {
        let w = format!("{}.w", self.name);
        store.insert_param(w.clone(), kaiming_uniform(&[self.fout, self.fin], self.fin, seed, &w));
        store.insert_param(format!("{}.b", self.name), Tensor::zeros(&[self.fout]));
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let w = p.get(&format!("{}.w", self.name))?;
        let b = p.get(&format!("{}.b", self.name))?;
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub name: String,
    pub kind: NormKind,
    pub channels: usize,
    /// Batch norm uses batch statistics even in eval mode (no running buffers).
    pub batch_stats_only: bool,
}

impl Norm {
    pub fn new(name: impl Into<String>, kind: NormKind, channels: usize) -> Self {
        Norm {
            name: name.into(),
            kind,
            channels,
            batch_stats_only: false,
        }
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    fn tracks_running(&self) -> bool {
        self.kind == NormKind::Batch && !self.batch_stats_only
    }

    pub fn init<T: Scalar>(&self, store: &mut ParamStore<T>) {
        store.insert_param(format!("{}.gamma", self.name), Tensor::full(&[self.channels], T::one()));
        store.insert_param(format!("{}.beta", self.name), Tensor::zeros(&[self.channels]));
        if self.tracks_running() {
            store.insert_buffer(format!("{}.running_mean", self.name), Tensor::zeros(&[self.channels]));
            store.insert_buffer(
                format!("{}.running_var", self.name),
                Tensor::full(&[self.channels], T::one()),
            );
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut Ctx<T>,
    ) -> Result<Var> {
        let gamma = p.get(&format!("{}.gamma", self.name))?;
        let beta = p.get(&format!("{}.beta", self.name))?;
        if self.tracks_running() && ctx.mode == Mode::Eval {
            let mean = store.buffer(&format!("{}.running_mean", self.name))?;
            let var = store.buffer(&format!("{}.running_var", self.name))?;
            return g.batch_norm_eval(x, gamma, beta, mean.data(), var.data(), NORM_EPS);
        }
        let (y, stats) = g.norm(x, gamma, beta, self.kind, NORM_EPS)?;
        if self.tracks_running() {
            ctx.stats.push((self.name.clone(), stats));
        }
        Ok(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded_per_layer() {
        let conv = Conv::same("a", 2, 3);
        let mut s1 = ParamStore::<f32>::new();
        let mut s2 = ParamStore::<f32>::new();
        conv.init(&mut s1, 5);
        conv.init(&mut s2, 5);
        assert_eq!(s1, s2);
        assert_eq!(s1.num_params(), conv.num_params());
        let bound = (6.0f32 / 18.0).sqrt();
        assert!(s1.param("a.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(s1.param("a.b").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn running_stats_follow_momentum() {
        let norm = Norm::new("bn", NormKind::Batch, 2);
        let mut store = ParamStore::<f64>::new();
        norm.init(&mut store);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(Tensor::from_fn(&[2, 2, 1, 1], |i| i as f64));
        let mut ctx = Ctx::new(Mode::Train);
        norm.forward(&mut g, &p, &store, x, &mut ctx).unwrap();
        store.update_running_stats(&ctx.stats).unwrap();
        // channel 0 sees {0, 2}: mean 1, var 1
        let m = store.buffer("bn.running_mean").unwrap().data()[0];
        let v = store.buffer("bn.running_var").unwrap().data()[0];
        assert!((m - 0.1).abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disconnected_params_get_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        Dense::new("used", 2, 1).init(&mut store, 1);
        Dense::new("unused", 2, 1).init(&mut store, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g);
        let x = g.input(Tensor::full(&[1, 2], 1.0));
        let y = Dense::new("used", 2, 1).forward(&mut g, &p, x).unwrap();
        let l = g.sum(y).unwrap();
        let grads = p.collect(&g, &g.backward(l).unwrap());
        assert_eq!(grads.disconnected, vec!["unused.w".to_string(), "unused.b".to_string()]);
        assert!(grads.get("unused.w").unwrap().data().iter().all(|&v| v == 0.0));
    }
}
