//! Trainable parameters, the AdamW optimizer and the plateau scheduler.

use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::Rng;

/// One trainable array with its gradient accumulator and AdamW state.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    moment1: Tensor,
    moment2: Tensor,
    step: u64,
    /// weight decay applies only where it makes sense (not on biases or
    /// normalization scales)
    pub decay: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, value: Tensor, decay: bool) -> usize {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            value,
            grad: Tensor::zeros(&shape),
            moment1: Tensor::zeros(&shape),
            moment2: Tensor::zeros(&shape),
            step: 0,
            decay,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: usize) -> &Tensor {
        &self.params[id].value
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor {
        &mut self.params[id].value
    }

    pub fn grad(&self, id: usize) -> &Tensor {
        &self.params[id].grad
    }

    pub fn accumulate_grad(&mut self, id: usize, delta: &Tensor) {
        let g = self.params[id].grad.data_mut();
        for (gv, dv) in g.iter_mut().zip(delta.data()) {
            *gv += dv;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    /// Flat concatenation of all parameter values in declaration order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    /// Restores values from a flat array in declaration order.
    pub fn load_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.params.iter().map(|p| p.value.numel()).sum();
        if flat.len() != total {
            return Err(Error::DimMismatch(format!(
                "checkpoint holds {} values, store expects {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.numel();
            p.value.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Result<Self> {
        let opt = AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay };
        opt.validate()?;
        Ok(opt)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "betas ({}, {}) outside [0,1) x (0,1)",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("eps must be > 0 and decay >= 0".into()));
        }
        Ok(())
    }

    /// One decoupled-weight-decay Adam step on every parameter; `lr`
    /// overrides the stored rate (scheduler hook).
    pub fn step(&self, store: &mut ParamStore, lr: f64) {
        for p in &mut store.params {
            p.step += 1;
            let bc1 = 1.0 - self.beta1.powi(p.step as i32);
            let bc2 = 1.0 - self.beta2.powi(p.step as i32);
            let decay = if p.decay { self.weight_decay } else { 0.0 };
            let n = p.value.numel();
            let (v, g) = (p.value.data_mut(), p.grad.data());
            let m1 = p.moment1.data_mut();
            let m2 = p.moment2.data_mut();
            for i in 0..n {
                m1[i] = self.beta1 * m1[i] + (1.0 - self.beta1) * g[i];
                m2[i] = self.beta2 * m2[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m1[i] / bc1;
                let vhat = m2[i] / bc2;
                v[i] -= lr * (mhat / (vhat.sqrt() + self.eps) + decay * v[i]);
            }
        }
    }
}

/// Reduce-on-plateau learning-rate schedule: halves (by `factor`) after
/// `patience` epochs without improvement, never below `min_lr`.
#[derive(Debug, Clone)]
pub struct LrSchedule {
    lr: f64,
    factor: f64,
    patience: usize,
    min_lr: f64,
    best: Option<f64>,
    stagnation: usize,
}

impl LrSchedule {
    pub fn new(initial_lr: f64, factor: f64, patience: usize, min_lr: f64) -> Self {
        LrSchedule { lr: initial_lr, factor, patience, min_lr, best: None, stagnation: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Feeds one epoch metric; returns true when the rate was reduced.
    pub fn plateau_step(&mut self, metric: f64) -> bool {
        assert!(metric.is_finite(), "plateau metric must be finite");
        let improved = self.best.map_or(true, |b| metric < b);
        if improved {
            self.best = Some(metric);
            self.stagnation = 0;
            return false;
        }
        self.stagnation += 1;
        if self.stagnation >= self.patience && self.lr > self.min_lr {
            self.lr = (self.lr * self.factor).max(self.min_lr);
            self.stagnation = 0;
            return true;
        }
        false
    }
}

/// Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
pub fn fan_in_init(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
}
