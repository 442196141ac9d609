use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
    pub eps: f64,
    /// EMA smoothing factor for the teacher.
    pub ema_alpha: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_backbone: 6e-4,
            lr_heads: 6e-5,
            betas: [0.9, 0.999],
            weight_decay: 0.01,
            eps: 1e-8,
            ema_alpha: 0.99,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_backbone >= 0.0 && self.lr_heads >= 0.0) || !self.lr_backbone.is_finite() || !self.lr_heads.is_finite() {
            return bad("learning rates must be finite and non-negative");
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("weight_decay must be >= 0 and eps > 0");
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad("ema_alpha must lie in [0, 1]");
        }
        Ok(())
    }
}

/// Named set of parameters sharing a base learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub lr: f64,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub steps: u64,
}

/// Decoupled weight decay Adam with per-parameter step counts.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    betas: [f64; 2],
    weight_decay: f64,
    eps: f64,
    groups: Vec<ParamGroup>,
    group_of: BTreeMap<String, usize>,
    state: BTreeMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: &OptimConfig, groups: Vec<ParamGroup>) -> Result<Self> {
        cfg.validate()?;
        let mut group_of = BTreeMap::new();
        for (gi, g) in groups.iter().enumerate() {
            for p in &g.params {
                if group_of.insert(p.clone(), gi).is_some() {
                    return Err(Error::Config(format!("parameter {p} is in more than one group")));
                }
            }
        }
        Ok(Self {
            betas: cfg.betas,
            weight_decay: cfg.weight_decay,
            eps: cfg.eps,
            groups,
            group_of,
            state: BTreeMap::new(),
        })
    }

    pub fn groups(&self) -> &[ParamGroup] {
        &self.groups
    }

    pub fn manages(&self, name: &str) -> bool {
        self.group_of.contains_key(name)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.group_of.keys().map(String::as_str)
    }

    pub fn base_lr(&self, name: &str) -> Result<f64> {
        self.group_of
            .get(name)
            .map(|&g| self.groups[g].lr)
            .ok_or_else(|| Error::Config(format!("parameter {name} is not managed by the optimizer")))
    }

    pub fn state(&self) -> &BTreeMap<String, Moments<T>> {
        &self.state
    }

    pub fn set_state(&mut self, state: BTreeMap<String, Moments<T>>) -> Result<()> {
        if let Some(n) = state.keys().find(|n| !self.manages(n)) {
            return Err(Error::Checkpoint(format!("optimizer state for unknown parameter {n}")));
        }
        self.state = state;
        Ok(())
    }

    /// One update of `param` with its gradient, at `lr_factor` times the group rate.
    pub fn update(&mut self, name: &str, param: &mut Tensor<T>, grad: &Tensor<T>, lr_factor: f64) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::Shape(format!(
                "gradient shape {:?} does not match parameter {name} {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let lr = self.base_lr(name)? * lr_factor;
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.shape()),
            v: Tensor::zeros(param.shape()),
            steps: 0,
        });
        st.steps += 1;
        let [b1, b2] = self.betas;
        let t = st.steps as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2_sqrt = (1.0 - b2.powi(t)).sqrt();
        let step_size = T::of(lr / bc1);
        let decay = T::of(1.0 - lr * self.weight_decay);
        let (b1t, b2t) = (T::of(b1), T::of(b2));
        let (c1, c2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (bc2t, eps) = (T::of(bc2_sqrt), T::of(self.eps));
        let m = st.m.data_mut();
        let v = st.v.data_mut();
        for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *p = *p * decay;
            *m = b1t * *m + c1 * g;
            *v = b2t * *v + c2 * g * g;
            let denom = v.sqrt() / bc2t + eps;
            *p = *p - step_size * *m / denom;
        }
        Ok(())
    }
}
