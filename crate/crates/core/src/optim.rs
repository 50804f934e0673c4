//! Momentum SGD with per-group learning-rate factors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

/// Multipliers applied to the base learning rate per parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupFactors {
    pub image: f64,
    pub text: f64,
    pub task: f64,
}

impl Default for GroupFactors {
    fn default() -> Self {
        Self {
            image: 0.1,
            text: 0.0,
            task: 1.0,
        }
    }
}

impl GroupFactors {
    pub fn get(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::Image => self.image,
            ParamGroup::Text => self.text,
            ParamGroup::Task => self.task,
        }
    }
}

/// `v ← μ·v + g`, `θ ← θ − lr·factor·v`.
///
/// Parameters whose factor is exactly zero are never touched, not even by a
/// zero-valued update.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub factors: GroupFactors,
    /// Rescales the gradient when its global norm exceeds this value.
    pub clip_norm: Option<f64>,
    velocity: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, factors: GroupFactors) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidConfig(format!("momentum must be in [0, 1), got {momentum}")));
        }
        for f in [factors.image, factors.text, factors.task] {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::InvalidConfig(format!("lr factor must be >= 0, got {f}")));
            }
        }
        Ok(Self {
            lr,
            momentum,
            factors,
            clip_norm: None,
            velocity: Vec::new(),
        })
    }

    /// Applies one update. `grads` is indexed by parameter id; `None` means
    /// the parameter took no part in the loss.
    ///
    /// Returns the global gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<f64> {
        if grads.len() != store.len() {
            return Err(Error::dim("gradient list", store.len(), grads.len()));
        }
        self.velocity.resize(store.len(), None);
        let norm = grads
            .iter()
            .zip(store.ids())
            .filter(|(_, id)| self.factors.get(store.group(*id)) != 0.0)
            .filter_map(|(g, _)| g.as_ref())
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for id in store.ids().collect::<Vec<_>>() {
            let factor = self.factors.get(store.group(id));
            if factor == 0.0 {
                continue;
            }
            let Some(g) = &grads[id.index()] else { continue };
            let vel = self.velocity[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let step = self.lr * factor;
            let theta = store.get_mut(id);
            for ((v, &gi), t) in vel.data_mut().iter_mut().zip(g.data()).zip(theta.data_mut()) {
                *v = self.momentum * *v + scale * gi;
                *t -= step * *v;
            }
        }
        Ok(norm)
    }
}

/// Element-wise sum of per-example gradient lists, in list order.
pub fn accumulate(total: &mut Vec<Option<Tensor>>, part: Vec<Option<Tensor>>) {
    if total.is_empty() {
        *total = part;
        return;
    }
    for (t, p) in total.iter_mut().zip(part) {
        match (t.as_mut(), p) {
            (Some(a), Some(b)) => {
                for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                    *x += y;
                }
            }
            (None, Some(b)) => *t = Some(b),
            _ => {}
        }
    }
}
