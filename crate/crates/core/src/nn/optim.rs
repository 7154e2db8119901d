use std::f64::consts::PI;

use super::ParamSet;
use crate::error::{Error, Result};

pub const DEFAULT_EMA_MOMENTUM: f64 = 0.999;

/// Half-cosine decay from `lr0` at `t = 0` to zero at `t = t_max`.
pub fn cosine_lr(t: u64, t_max: u64, lr0: f64) -> Result<f64> {
    if t > t_max || t_max == 0 {
        return Err(Error::ScheduleExhausted { t, t_max });
    }
    Ok(lr0 * 0.5 * (1.0 + (PI * t as f64 / t_max as f64).cos()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub t_max: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            lr0: 0.03,
            momentum: 0.9,
            weight_decay: 5e-4,
            t_max: 5000,
        }
    }
}

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// momentum buffer: `v <- m v + g + wd * theta`, `theta <- theta - lr(t) v`.
#[derive(Debug, Clone)]
pub struct OptimizerState<P> {
    pub config: SgdConfig,
    velocity: P,
    t: u64,
}

impl<P: ParamSet + Clone> OptimizerState<P> {
    pub fn new(params: &P, config: SgdConfig) -> Self {
        OptimizerState {
            config,
            velocity: params.zeros_like(),
            t: 0,
        }
    }

    pub fn iteration(&self) -> u64 {
        self.t
    }

    pub fn velocity(&self) -> &P {
        &self.velocity
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.t, self.config.t_max, self.config.lr0)
    }

    /// One scheduled step. Returns the learning rate that was applied.
    pub fn step(&mut self, params: &mut P, grads: &P) -> Result<f64> {
        if self.t >= self.config.t_max {
            return Err(Error::ScheduleExhausted {
                t: self.t,
                t_max: self.config.t_max,
            });
        }
        let lr = self.current_lr()?;
        self.step_with_lr(params, grads, lr)?;
        Ok(lr)
    }

    /// One step at an explicit learning rate; still advances the iteration.
    pub fn step_with_lr(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        if !params.same_shapes(grads) || !params.same_shapes(&self.velocity) {
            return Err(Error::InvalidParameter("sgd: parameter/gradient shapes differ".into()));
        }
        if !grads.all_finite() {
            return Err(Error::NonFinite("sgd gradient"));
        }
        let (m, wd) = (self.config.momentum, self.config.weight_decay);
        for ((v, g), p) in self
            .velocity
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(params.tensors_mut())
        {
            for ((v, g), p) in v.iter_mut().zip(g.iter()).zip(p.iter_mut()) {
                *v = m * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        self.t += 1;
        Ok(())
    }
}

/// Exponential moving average of a parameter set:
/// `shadow <- m * shadow + (1 - m) * live`.
#[derive(Debug, Clone)]
pub struct EmaShadow<P> {
    shadow: P,
    momentum: f64,
}

impl<P: ParamSet + Clone> EmaShadow<P> {
    pub fn new(live: &P, momentum: f64) -> Self {
        EmaShadow {
            shadow: live.clone(),
            momentum,
        }
    }

    pub fn from_shadow(shadow: P, momentum: f64) -> Self {
        EmaShadow { shadow, momentum }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn shadow(&self) -> &P {
        &self.shadow
    }

    pub fn into_inner(self) -> P {
        self.shadow
    }

    pub fn update(&mut self, live: &P) -> Result<()> {
        if !self.shadow.same_shapes(live) {
            return Err(Error::InvalidParameter("ema: shadow/live shapes differ".into()));
        }
        let m = self.momentum;
        for (s, l) in self.shadow.tensors_mut().into_iter().zip(live.tensors()) {
            s.zip_apply(l, |s, l| *s = m * *s + (1.0 - m) * l);
        }
        Ok(())
    }
}
