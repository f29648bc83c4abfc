use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// Classical momentum: `v' = m v + g`, `p' = p - lr v'`.
    Sgd,
    /// Adam with `beta1` set to the momentum, `beta2 = 0.999`.
    Adam,
}

pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moment buffers for one parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T> {
    pub kind: OptimizerKind,
    /// Velocity (SGD) or first moment (Adam).
    pub m: Vec<Tensor<T>>,
    /// Second moment; empty for SGD.
    pub v: Vec<Tensor<T>>,
    pub steps: u64,
}

impl<T: Scalar> OptState<T> {
    pub fn new(kind: OptimizerKind, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let v = if kind == OptimizerKind::Adam { zeros() } else { Vec::new() };
        Self { kind, m: zeros(), v, steps: 0 }
    }

    /// Applies one update in place.
    pub fn apply(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64, momentum: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => optimizer_step(params, grads, &mut self.m, lr, momentum)?,
            OptimizerKind::Adam => adam_step(params, grads, &mut self.m, &mut self.v, self.steps, lr, momentum)?,
        }
        self.steps += 1;
        Ok(())
    }
}

fn check<T: Scalar>(params: &[Tensor<T>], grads: &[Tensor<T>], moments: &[Tensor<T>]) -> Result<()> {
    if params.len() != grads.len() || params.len() != moments.len() {
        return Err(Error::Shape(format!(
            "{} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            moments.len()
        )));
    }
    for (i, ((p, g), m)) in params.iter().zip(grads).zip(moments).enumerate() {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::Shape(format!("parameter {i}: {:?} / {:?} / {:?}", p.shape(), g.shape(), m.shape())));
        }
    }
    Ok(())
}

/// Momentum SGD: `v' = momentum * v + g`, `p' = p - lr * v'`.
pub fn optimizer_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    moments: &mut [Tensor<T>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check(params, grads, moments)?;
    let (lr, mu) = (cst::<T>(lr), cst::<T>(momentum));
    for ((p, g), v) in params.iter_mut().zip(grads).zip(moments.iter_mut()) {
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = mu * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Adam with bias correction; `steps` counts updates already applied.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    m: &mut [Tensor<T>],
    v: &mut [Tensor<T>],
    steps: u64,
    lr: f64,
    beta1: f64,
    ) -> Result<()> {
    check(params, grads, m)?;
    check(params, grads, v)?;
    let k = (steps + 1) as i32;
    let step_size = cst::<T>(lr * (1.0 - ADAM_BETA2.powi(k)).sqrt() / (1.0 - beta1.powi(k)));
    let (b1, b2, eps) = (cst::<T>(beta1), cst::<T>(ADAM_BETA2), cst::<T>(ADAM_EPS));
    let one = T::one();
    for (((p, g), mi), vi) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(mi.data_mut()).zip(vi.data_mut()) {
            *mj = b1 * *mj + (one - b1) * gj;
            *vj = b2 * *vj + (one - b2) * gj * gj;
            *pj -= step_size * *mj / (vj.sqrt() + eps);
        }
    }
    Ok(())
}
