//! Adam, learning-rate schedules and the single training step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::nn::{Ctx, ParamStore, Routing};
use crate::net::Fadpnet;
use crate::tape::Grads;
use crate::{Error, Result, Scalar, Tensor};
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64) -> Self {
        let zeros = || store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect::<Vec<_>>();
        Self { beta1, beta2, eps: 1e-8, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update; parameters that received no gradient are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Grads<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - libm::pow(b1, self.t as f64);
        let c2 = 1.0 - libm::pow(b2, self.t as f64);
        let step = T::from_f64(lr / c1);
        let (tb1, tb2) = (T::from_f64(b1), T::from_f64(b2));
        let (ob1, ob2) = (T::from_f64(1.0 - b1), T::from_f64(1.0 - b2));
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for (id, g) in grads.params() {
            let Some(g) = g else { continue };
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = tb1 * m[k] + ob1 * gk;
                v[k] = tb2 * v[k] + ob2 * gk * gk;
                p[k] -= step * m[k] / ((v[k] * inv_c2).sqrt() + eps);
            }
        }
    }
}

/// Learning-rate schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Constant,
    /// Half-cosine decay from the base rate to zero over the whole run.
    Cosine,
}

impl Schedule {
    pub fn lr(&self, base: f64, step: u64, total: u64) -> f64 {
        match self {
            Self::Constant => base,
            Self::Cosine => {
                let f = if total == 0 { 0.0 } else { (step as f64 / total as f64).min(1.0) };
                0.5 * base * (1.0 + libm::cos(core::f64::consts::PI * f))
            }
        }
    }
}

/// Result of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
}

/// Forward, mean-L1 loss, backward and Adam update on one batch.
///
/// A non-finite loss aborts before any parameter is touched; the error names
/// `step` and summarizes parameter norms.
pub fn train_step<T: Scalar>(
    net: &Fadpnet,
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    input: &Tensor<T>,
    target: &Tensor<T>,
    rng: &mut dyn RngCore,
    lr: f64,
    step: u64,
) -> Result<StepStats> {
    let grads;
    let loss;
    {
        let mut cx = Ctx::new(store, Routing::Train).with_rng(rng);
        let x = cx.constant(input.clone());
        let y = cx.constant(target.clone());
        let out = net.forward(&mut cx, x)?.output;
        let l = cx.graph.l1_loss(out, y)?;
        loss = cx.graph.value(l).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at step {step}; {}", norm_summary(store))));
        }
        grads = cx.graph.backward(l)?;
    }
    opt.step(store, &grads, lr);
    Ok(StepStats { loss })
}

/// Global L2 norm, largest per-array norm, and count of non-finite arrays.
pub fn norm_summary<T: Scalar>(store: &ParamStore<T>) -> String {
    let mut total = 0.0;
    let mut worst = (0.0f64, "");
    let mut bad = 0;
    for (_, name, t) in store.iter() {
        let n2: f64 = t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum();
        if !n2.is_finite() {
            bad += 1;
        }
        total += n2;
        if n2.sqrt() > worst.0 || !n2.is_finite() {
            worst = (n2.sqrt(), name);
        }
    }
    format!("param norm {:.4e}, largest {} = {:.4e}, non-finite arrays {}", total.sqrt(), worst.1, worst.0, bad)
}
