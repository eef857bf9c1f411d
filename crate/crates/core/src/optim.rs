//! SGD and AdamW over a store's trainable parameters.
//!
//! Optimizer state exists only for keys the store reports as trainable;
//! a gradient for any other key is rejected.

use std::collections::BTreeMap;
use std::fmt::Debug;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Anything that owns named parameters, some of them trainable.
pub trait ParamStore {
    type Key: Ord + Clone + Debug;

    fn trainable_keys(&self) -> Vec<Self::Key>;

    fn param(&self, key: &Self::Key) -> Option<&Tensor>;

    /// Mutable access, granted only for trainable keys.
    fn param_mut(&mut self, key: &Self::Key) -> Option<&mut Tensor>;
}

impl<K: Ord + Clone + Debug> ParamStore for BTreeMap<K, Tensor> {
    type Key = K;

    fn trainable_keys(&self) -> Vec<K> {
        self.keys().cloned().collect()
    }

    fn param(&self, key: &K) -> Option<&Tensor> {
        self.get(key)
    }

    fn param_mut(&mut self, key: &K) -> Option<&mut Tensor> {
        self.get_mut(key)
    }
}

pub type Grads<K> = BTreeMap<K, Tensor>;

fn target<'a, S: ParamStore>(store: &'a mut S, key: &S::Key, grad: &Tensor) -> Result<&'a mut Tensor> {
    let p = store
        .param_mut(key)
        .ok_or_else(|| Error::State(format!("gradient for non-trainable parameter {key:?}")))?;
    p.check_same_shape("optimizer step", grad)?;
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `p ← p − lr·g` for every gradient.
pub fn sgd_step<S: ParamStore>(store: &mut S, grads: &Grads<S::Key>, cfg: &SgdConfig) -> Result<()> {
    cfg.validate()?;
    sgd_apply(store, grads, cfg.lr)
}

fn sgd_apply<S: ParamStore>(store: &mut S, grads: &Grads<S::Key>, lr: f64) -> Result<()> {
    for (key, g) in grads {
        target(store, key, g)?.axpy(-lr, g)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Parameter(format!("invalid AdamW config {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments per trainable parameter, plus the step count.
#[derive(Clone, Debug)]
pub struct AdamWState<K> {
    step: u64,
    moments: BTreeMap<K, (Tensor, Tensor)>,
}

impl<K: Ord + Clone + Debug> AdamWState<K> {
    /// Zero moments for exactly the store's trainable parameters.
    pub fn new<S: ParamStore<Key = K>>(store: &S) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for key in store.trainable_keys() {
            let p = store
                .param(&key)
                .ok_or_else(|| Error::State(format!("trainable key {key:?} has no tensor")))?;
            let z = Tensor::zeros(p.shape())?.with_precision(p.precision());
            moments.insert(key, (z.clone(), z));
        }
        Ok(Self { step: 0, moments })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Elements held across both moment buffers.
    pub fn element_count(&self) -> usize {
        self.moments.values().map(|(m, v)| m.numel() + v.numel()).sum()
    }

    pub fn moments(&self, key: &K) -> Option<(&Tensor, &Tensor)> {
        self.moments.get(key).map(|(m, v)| (m, v))
    }
}

/// One AdamW step with bias correction and decoupled weight decay.
pub fn adamw_step<S: ParamStore>(
    store: &mut S,
    grads: &Grads<S::Key>,
    state: &mut AdamWState<S::Key>,
    cfg: &AdamWConfig,
) -> Result<()> {
    cfg.validate()?;
    adamw_apply(store, grads, state, cfg, cfg.lr)
}

fn adamw_apply<S: ParamStore>(
    store: &mut S,
    grads: &Grads<S::Key>,
    state: &mut AdamWState<S::Key>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if let Some(k) = grads.keys().find(|k| !state.moments.contains_key(k)) {
        return Err(Error::State(format!("no AdamW state for {k:?}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (key, g) in grads {
        let p = target(store, key, g)?;
        let (m, v) = state.moments.get_mut(key).expect("checked above");
        m.check_same_shape("adamw", g)?;
        let f32_params = p.precision() == crate::tensor::Precision::F32;
        let (md, vd) = (m.data_mut(), v.data_mut());
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(md.iter_mut()).zip(vd.iter_mut()) {
            *pv -= lr * cfg.weight_decay * *pv;
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            if f32_params {
                *pv = *pv as f32 as f64;
            }
        }
        if p.data().iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("adamw"));
        }
    }
    Ok(())
}

/// Optimizer choice as it appears in run configs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    #[serde(rename = "adamw")]
    AdamW(AdamWConfig),
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lr,
            OptimizerConfig::AdamW(c) => c.lr,
        }
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        match &mut self {
            OptimizerConfig::Sgd(c) => c.lr = lr,
            OptimizerConfig::AdamW(c) => c.lr = lr,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OptimizerConfig::Sgd(c) => c.validate(),
            OptimizerConfig::AdamW(c) => c.validate(),
        }
    }
}

/// A configured optimizer bound to one store's key type.
#[derive(Clone, Debug)]
pub enum Optimizer<K> {
    Sgd(SgdConfig),
    AdamW(AdamWConfig, AdamWState<K>),
}

impl<K: Ord + Clone + Debug> Optimizer<K> {
    pub fn new<S: ParamStore<Key = K>>(cfg: OptimizerConfig, store: &S) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg {
            OptimizerConfig::Sgd(c) => Optimizer::Sgd(c),
            OptimizerConfig::AdamW(c) => Optimizer::AdamW(c, AdamWState::new(store)?),
        })
    }

    /// Applies one update with the configured rate multiplied by `lr_scale`
    /// (the warmup hook).
    pub fn step<S: ParamStore<Key = K>>(&mut self, store: &mut S, grads: &Grads<K>, lr_scale: f64) -> Result<()> {
        match self {
            Optimizer::Sgd(c) => sgd_apply(store, grads, c.lr * lr_scale),
            Optimizer::AdamW(c, state) => {
                let lr = c.lr * lr_scale;
                adamw_apply(store, grads, state, c, lr)
            }
        }
    }

    pub fn state_elements(&self) -> usize {
        match self {
            Optimizer::Sgd(_) => 0,
            Optimizer::AdamW(_, s) => s.element_count(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[(u8, f64)]) -> BTreeMap<u8, Tensor> {
        values.iter().map(|&(k, v)| (k, Tensor::scalar(v).unwrap())).collect()
    }

    #[test]
    fn sgd_by_hand() {
        let mut s = store(&[(0, 1.0)]);
        let g = store(&[(0, 2.0)]);
        sgd_step(&mut s, &g, &SgdConfig { lr: 0.1 }).unwrap();
        assert!((s[&0].data()[0] - 0.8).abs() < 1e-15);
        let zero = store(&[(0, 0.0)]);
        let before = s[&0].clone();
        sgd_step(&mut s, &zero, &SgdConfig { lr: 0.1 }).unwrap();
        assert!(s[&0].bitwise_eq(&before));
    }

    #[test]
    fn sgd_rejects_shape_mismatch_and_bad_lr() {
        let mut s = store(&[(0, 1.0)]);
        let mut g = BTreeMap::new();
        g.insert(0u8, Tensor::zeros(&[2]).unwrap());
        assert!(matches!(sgd_step(&mut s, &g, &SgdConfig { lr: 0.1 }), Err(Error::Dimension { .. })));
        assert!(sgd_step(&mut s, &store(&[(0, 0.0)]), &SgdConfig { lr: 0.0 }).is_err());
    }

    #[test]
    fn adamw_first_step_closed_form() {
        // m̂ = g, v̂ = g², so Δp = −lr·g/(|g| + eps)
        for g in [2.0, -0.5, 1e-3] {
            let mut s = store(&[(0, 1.0)]);
            let cfg = AdamWConfig::new(0.01);
            let mut st = AdamWState::new(&s).unwrap();
            adamw_step(&mut s, &store(&[(0, g)]), &mut st, &cfg).unwrap();
            let expect = 1.0 - 0.01 * g / (g.abs() + 1e-8);
            assert!((s[&0].data()[0] - expect).abs() < 1e-15, "g={g}");
        }
    }

    #[test]
    fn adamw_zero_gradient_no_decay_is_identity() {
        let mut s = store(&[(0, 3.0), (1, -2.0)]);
        let mut st = AdamWState::new(&s).unwrap();
        let cfg = AdamWConfig::new(0.1);
        for _ in 0..10 {
            adamw_step(&mut s, &store(&[(0, 0.0), (1, 0.0)]), &mut st, &cfg).unwrap();
        }
        assert_eq!(s[&0].data(), &[3.0]);
        assert_eq!(s[&1].data(), &[-2.0]);
        assert_eq!(st.step(), 10);
    }

    #[test]
    fn adamw_state_mirrors_trainable_set() {
        let s = store(&[(0, 1.0), (1, 2.0), (2, 3.0)]);
        let st = AdamWState::new(&s).unwrap();
        assert_eq!(st.element_count(), 6);
        let mut other = store(&[(0, 1.0)]);
        let mut st = AdamWState::new(&other).unwrap();
        let err = adamw_step(&mut other, &store(&[(5, 1.0)]), &mut st, &AdamWConfig::new(0.1));
        assert!(matches!(err, Err(Error::State(_))));
    }

    #[test]
    fn config_json_is_tagged() {
        let cfg: OptimizerConfig = serde_json::from_str(r#"{"kind":"adamw","lr":0.001}"#).unwrap();
        assert_eq!(cfg, OptimizerConfig::AdamW(AdamWConfig::new(0.001)));
        let sgd: OptimizerConfig = serde_json::from_str(r#"{"kind":"sgd","lr":0.5}"#).unwrap();
        assert_eq!(sgd.lr(), 0.5);
    }
}
