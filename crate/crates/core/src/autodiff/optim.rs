//! First- and second-order moment optimizers plus the cosine restart
//! learning-rate schedule used during sample generation.
//!
//! Both optimizers validate the incoming update for finiteness before
//! touching the parameter or their own state, so a poisoned step leaves
//! everything unchanged.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    lr: f64,
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl AdamState {
    pub fn new(shape: &[usize], lr: f64) -> Result<Self> {
        if lr <= 0.0 || !lr.is_finite() {
            return Err(Error::contract(format!("adam lr must be positive, got {lr}")));
        }
        Ok(AdamState { lr, m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One descent step. On a non-finite gradient or update the error is
    /// returned and neither the parameter nor the moments change.
    pub fn step(&mut self, param: &mut Tensor, grad: &Tensor) -> Result<()> {
        if param.shape() != self.m.shape() || grad.shape() != self.m.shape() {
            return Err(Error::shape(
                format!("{:?}", self.m.shape()),
                format!("param {:?} / grad {:?}", param.shape(), grad.shape()),
            ));
        }
        if !grad.all_finite() {
            return Err(Error::numerical("adam: non-finite gradient"));
        }
        let t = self.t + 1;
        let m = self.m.scale(BETA1).add(&grad.scale(1.0 - BETA1))?;
        let gsq = grad.mul(grad)?;
        let v = self.v.scale(BETA2).add(&gsq.scale(1.0 - BETA2))?;
        let mc = 1.0 - BETA1.powi(t as i32);
        let vc = 1.0 - BETA2.powi(t as i32);
        let mut next = param.clone();
        for i in 0..next.numel() {
            let mhat = m.data()[i] / mc;
            let vhat = v.data()[i] / vc;
            next.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + EPS);
        }
        if !next.all_finite() {
            return Err(Error::numerical("adam: non-finite update"));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        *param = next;
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaHessianState {
    m: Tensor,
    v: Tensor,
    t: u64,
}

impl AdaHessianState {
    pub fn new(shape: &[usize]) -> Self {
        AdaHessianState { m: Tensor::zeros(shape), v: Tensor::zeros(shape), t: 0 }
    }

    /// One curvature-scaled step along `direction * grad` (direction +1
    /// ascends, -1 descends) with learning rate `lr`. The second moment
    /// tracks the squared Hessian diagonal estimate.
    pub fn step(
        &mut self,
        param: &mut Tensor,
        grad: &Tensor,
        hess_diag: &Tensor,
        lr: f64,
        direction: f64,
    ) -> Result<()> {
        if param.shape() != self.m.shape()
            || grad.shape() != self.m.shape()
            || hess_diag.shape() != self.m.shape()
        {
            return Err(Error::shape(
                format!("{:?}", self.m.shape()),
                format!(
                    "param {:?} / grad {:?} / hess {:?}",
                    param.shape(),
                    grad.shape(),
                    hess_diag.shape()
                ),
            ));
        }
        if !grad.all_finite() || !hess_diag.all_finite() {
            return Err(Error::numerical("adahessian: non-finite grad or hessian"));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::contract(format!("adahessian lr must be >= 0, got {lr}")));
        }
        let t = self.t + 1;
        let m = self.m.scale(BETA1).add(&grad.scale(1.0 - BETA1))?;
        let hsq = hess_diag.mul(hess_diag)?;
        let v = self.v.scale(BETA2).add(&hsq.scale(1.0 - BETA2))?;
        let mc = 1.0 - BETA1.powi(t as i32);
        let vc = 1.0 - BETA2.powi(t as i32);
        let mut next = param.clone();
        for i in 0..next.numel() {
            let mhat = m.data()[i] / mc;
            let vhat = v.data()[i] / vc;
            next.data_mut()[i] += direction * lr * mhat / (vhat.sqrt() + EPS);
        }
        if !next.all_finite() {
            return Err(Error::numerical("adahessian: non-finite update"));
        }
        self.m = m;
        self.v = v;
        self.t = t;
        *param = next;
        Ok(())
    }
}

/// Cosine annealing with warm restarts and a floor of zero: the rate
/// starts at `base_lr`, decays to `lr_min` along a half cosine over
/// `period` steps, then snaps back.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CosineRestartSchedule {
    base_lr: f64,
    lr_min: f64,
    period: u64,
    t: u64,
}

impl CosineRestartSchedule {
    pub fn new(base_lr: f64, period: u64) -> Result<Self> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::contract(format!("base_lr must be positive, got {base_lr}")));
        }
        if period == 0 {
            return Err(Error::contract("schedule period must be >= 1"));
        }
        Ok(CosineRestartSchedule { base_lr, lr_min: 0.0, period, t: 0 })
    }

    pub fn lr_at(&self, t: u64) -> f64 {
        let phase = (t % self.period) as f64 / self.period as f64;
        self.lr_min
            + 0.5 * (self.base_lr - self.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
    }

    /// Rate for the current step, then advance.
    pub fn next(&mut self) -> f64 {
        let lr = self.lr_at(self.t);
        self.t += 1;
        lr
    }
}
