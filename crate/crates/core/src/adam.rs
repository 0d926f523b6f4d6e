//! Bias-corrected Adam.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for an ordered list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
    pub config: AdamConfig,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig, params: &[&Tensor<R>]) -> Self {
        Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            config,
        }
    }

    /// Applies one update in place and increments `step`.
    pub fn update(&mut self, params: &mut [&mut Tensor<R>], grads: &[&Tensor<R>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invalid(format!(
                "adam tracks {} parameters, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() {
                return Err(shape_err("adam parameter", format!("{:?}", self.m[i].shape()), p.shape()));
            }
            if g.shape() != p.shape() {
                return Err(shape_err("adam gradient", format!("{:?}", p.shape()), g.shape()));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step.min(i32::MAX as u64) as i32;
        let bc1 = R::from_f64(1.0 - c.beta1.powi_f64(t));
        let bc2 = R::from_f64(1.0 - c.beta2.powi_f64(t));
        let (b1, b2) = (R::from_f64(c.beta1), R::from_f64(c.beta2));
        let (lr, eps) = (R::from_f64(c.lr), R::from_f64(c.eps));
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pj, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mj = b1 * *mj + (R::ONE - b1) * gj;
                *vj = b2 * *vj + (R::ONE - b2) * gj * gj;
                let mhat = *mj / bc1;
                let vhat = *vj / bc2;
                *pj -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

trait PowiF64 {
    fn powi_f64(self, n: i32) -> f64;
}

impl PowiF64 for f64 {
    fn powi_f64(self, n: i32) -> f64 {
        Real::powi(self, n)
    }
}
