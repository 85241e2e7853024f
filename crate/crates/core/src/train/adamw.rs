use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Real, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay.
///
/// Moments are kept per store entry; buffers carry empty moment vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Real = f32> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParamStore<T>) -> Self {
        let sizes: Vec<usize> = params
            .entries()
            .iter()
            .map(|e| match e.kind {
                ParamKind::Trainable => e.tensor.numel(),
                ParamKind::Buffer => 0,
            })
            .collect();
        Self {
            cfg,
            step: 0,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    /// One update. `grads[i]` is the gradient of store entry `i`; a missing
    /// gradient counts as zero.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} entries, store has {}, got {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let c = &self.cfg;
        let t = self.step as i32;
        let bc1 = T::of(1.0 - c.beta1.powi(t));
        let bc2 = T::of(1.0 - c.beta2.powi(t));
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (lr, eps, wd) = (T::of(c.lr), T::of(c.eps), T::of(c.weight_decay));
        let ids: Vec<_> = params.trainable_ids().collect();
        for id in ids {
            let i = id.index();
            let theta = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if m.len() != theta.len() {
                return Err(Error::InvalidArgument(format!("moment size mismatch for entry {i}")));
            }
            let g = grads[i].as_deref();
            for j in 0..theta.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                theta[j] = theta[j] - lr * (mhat / (vhat.sqrt() + eps)) - lr * wd * theta[j];
            }
        }
        Ok(())
    }
}

/// Gathers parameter gradients from a tape, one slot per store entry.
pub fn collect_grads<T: Real>(tape: &Tape<T>, params: &ParamStore<T>) -> Vec<Option<Vec<T>>> {
    let mut out: Vec<Option<Vec<T>>> = vec![None; params.len()];
    for (id, g) in tape.param_grads() {
        match &mut out[id.index()] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
    out
}
