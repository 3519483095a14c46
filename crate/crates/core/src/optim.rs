//! Adam with bias correction and a step-decay learning-rate schedule.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for (((x, &g), m), v) in value.iter_mut().zip(grad).zip(m.data_mut()).zip(v.data_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, store: &ParamStore, ck: &mut Checkpoint) {
        ck.set("adam.t", self.t);
        for (((name, _), m), v) in store.iter().zip(&self.m).zip(&self.v) {
            ck.push_tensor(format!("adam.m.{name}"), m.clone());
            ck.push_tensor(format!("adam.v.{name}"), v.clone());
        }
    }

    pub fn from_checkpoint(store: &ParamStore, ck: &Checkpoint) -> Result<Self> {
        let mut adam = Self::new(store);
        adam.t = ck.require("adam.t")?;
        for (i, (name, p)) in store.iter().enumerate() {
            let m = ck.require_tensor(&format!("adam.m.{name}"))?;
            let v = ck.require_tensor(&format!("adam.v.{name}"))?;
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("optimizer state for `{name}` has the wrong shape")));
            }
            adam.m[i] = m.clone();
            adam.v[i] = v.clone();
        }
        Ok(adam)
    }
}

/// `lr0 · factor^k` where `k` counts milestones at or before the (1-based)
/// epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr0: f64,
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn new(lr0: f64, milestones: Vec<usize>) -> Self {
        Self {
            lr0,
            milestones,
            factor: 0.5,
        }
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.lr0 * self.factor.powi(k as i32)
    }
}
