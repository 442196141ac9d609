use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchStats, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Named tensors in a stable (sorted) order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Names present in exactly one of the two stores: `(only_self, only_other)`.
    pub fn name_difference(&self, other: &Self) -> (Vec<String>, Vec<String>) {
        let a: Vec<String> = self.tensors.keys().filter(|k| !other.tensors.contains_key(*k)).cloned().collect();
        let b: Vec<String> = other.tensors.keys().filter(|k| !self.tensors.contains_key(*k)).cloned().collect();
        (a, b)
    }

    /// Every tensor bitwise equal to its counterpart.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().all(|(k, v)| {
                other.tensors.get(k).is_some_and(|o| {
                    let (mut a, mut b) = (Vec::new(), Vec::new());
                    T::write_le(v.data(), &mut a);
                    T::write_le(o.data(), &mut b);
                    o.shape() == v.shape() && a == b
                })
            })
    }
}

/// Parameters of one model placed on a graph.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (name.to_string(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// A graph plus the mode flags and side outputs of one forward pass.
pub struct Session<T> {
    pub graph: Graph<T>,
    train: bool,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

impl<T: Scalar> Session<T> {
    pub fn new(train: bool) -> Self {
        Self {
            graph: Graph::new(),
            train,
            bn_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }

    pub fn conv(&mut self, b: &Bound, prefix: &str, x: Var, stride: usize, pad: usize, bias: bool) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = if bias { Some(b.get(&format!("{prefix}.bias"))?) } else { None };
        self.graph.conv2d(x, w, bias, stride, pad)
    }

    pub fn depthwise(&mut self, b: &Bound, prefix: &str, x: Var, pad: usize) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = b.get(&format!("{prefix}.bias"))?;
        self.graph.depthwise_conv2d(x, w, Some(bias), pad)
    }

    pub fn linear(&mut self, b: &Bound, prefix: &str, x: Var, bias: bool) -> Result<Var> {
        let w = b.get(&format!("{prefix}.weight"))?;
        let bias = if bias { Some(b.get(&format!("{prefix}.bias"))?) } else { None };
        self.graph.linear(x, w, bias)
    }

    pub fn channel_norm(&mut self, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let gamma = b.get(&format!("{prefix}.weight"))?;
        let beta = b.get(&format!("{prefix}.bias"))?;
        self.graph.channel_norm(x, gamma, beta, T::of(NORM_EPS))
    }

    /// Batch norm: batch statistics (recorded for the running averages) in
    /// training mode, running statistics otherwise.
    pub fn batch_norm(&mut self, b: &Bound, buffers: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let gamma = b.get(&format!("{prefix}.weight"))?;
        let beta = b.get(&format!("{prefix}.bias"))?;
        if self.train {
            let (y, stats) = self.graph.batch_norm(x, gamma, beta, T::of(NORM_EPS))?;
            self.bn_updates.push((prefix.to_string(), stats));
            Ok(y)
        } else {
            let rm = buffers.get(&format!("{prefix}.running_mean"))?.data().to_vec();
            let rv = buffers.get(&format!("{prefix}.running_var"))?.data().to_vec();
            self.graph.batch_norm_eval(x, gamma, beta, &rm, &rv, T::of(NORM_EPS))
        }
    }
}

/// Folds recorded batch statistics into running averages. Entries whose
/// prefix has no buffers in `buffers` are skipped.
pub fn apply_bn_updates<T: Scalar>(buffers: &mut ParamStore<T>, updates: &[(String, BatchStats<T>)]) {
    let m = T::of(BN_MOMENTUM);
    let keep = T::one() - m;
    for (prefix, stats) in updates {
        for (suffix, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
            if let Ok(buf) = buffers.get_mut(&format!("{prefix}.{suffix}")) {
                for (r, &v) in buf.data_mut().iter_mut().zip(values) {
                    *r = keep * *r + m * v;
                }
            }
        }
    }
}

/// Parameter initialization helpers, all driven by one seeded stream.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    /// He-uniform weights for a layer with `fan_in` inputs.
    pub fn he<T: Scalar>(&mut self, shape: &[usize], fan_in: usize) -> Tensor<T> {
        let bound = (6.0 / fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }

    pub fn uniform<T: Scalar>(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        Tensor::from_fn(shape, |_| T::of(self.rng.gen_range(-bound..bound)))
    }

    pub fn conv<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, cout: usize, cin: usize, k: usize, bias: bool) {
        let fan_in = cin * k * k;
        store.insert(format!("{prefix}.weight"), self.he(&[cout, cin, k, k], fan_in));
        if bias {
            let bound = 1.0 / (fan_in as f64).sqrt();
            store.insert(format!("{prefix}.bias"), self.uniform(&[cout], bound));
        }
    }

    pub fn depthwise<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, channels: usize, k: usize) {
        store.insert(format!("{prefix}.weight"), self.he(&[channels, 1, k, k], k * k));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
    }

    pub fn linear<T: Scalar>(&mut self, store: &mut ParamStore<T>, prefix: &str, dout: usize, din: usize, bias: bool) {
        store.insert(format!("{prefix}.weight"), self.he(&[dout, din], din));
        if bias {
            let bound = 1.0 / (din as f64).sqrt();
            store.insert(format!("{prefix}.bias"), self.uniform(&[dout], bound));
        }
    }

    pub fn norm<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) {
        store.insert(format!("{prefix}.weight"), Tensor::full(&[channels], T::one()));
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[channels]));
    }

    pub fn bn_buffers<T: Scalar>(buffers: &mut ParamStore<T>, prefix: &str, channels: usize) {
        buffers.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[channels]));
        buffers.insert(format!("{prefix}.running_var"), Tensor::full(&[channels], T::one()));
    }
}
