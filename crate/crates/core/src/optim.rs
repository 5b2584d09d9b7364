//! SGD with classical momentum, time-based learning-rate decay, and
//! early stopping on validation loss.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{Layer, Slot};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
    /// Time-based decay: `lr = lr0 / (1 + decay · step)`.
    pub decay: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.0002,
            momentum: 0.5,
            decay: 1e-7,
            weight_decay: 0.0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr0 = 0 is allowed: it freezes the weights, which the trainer's
        // sanity checks rely on.
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return Err(Error::Config(format!("lr must be non-negative, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1), got {}", self.momentum)));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(Error::Config(format!("decay must be non-negative, got {}", self.decay)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

pub fn lr_at(step: u64, cfg: &SgdConfig) -> f64 {
    cfg.lr0 / (1.0 + cfg.decay * step as f64)
}

/// Optimizer state: one velocity per named parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd<T = f32> {
    pub config: SgdConfig,
    pub step: u64,
    velocities: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            velocities: BTreeMap::new(),
        })
    }

    pub fn lr(&self) -> f64 {
        lr_at(self.step, &self.config)
    }

    pub fn velocities(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.velocities
    }

    pub fn set_velocity(&mut self, name: impl Into<String>, v: Tensor<T>) {
        self.velocities.insert(name.into(), v);
    }

    /// One update over every parameter of `model`, using the gradients from
    /// its last backward pass. Nothing is modified if any gradient is
    /// non-finite or any stored velocity has the wrong shape.
    pub fn step(&mut self, model: &mut impl Layer<T>) -> Result<()> {
        let mut problem = None;
        model.visit("", &mut |name, slot| {
            if problem.is_some() {
                return;
            }
            if let Slot::Param(p) = slot {
                if !p.grad.all_finite() {
                    problem = Some(Error::NonFiniteGradient(name.to_string()));
                } else if let Some(v) = self.velocities.get(name) {
                    if v.dims() != p.value.dims() {
                        problem = Some(Error::Shape(format!(
                            "velocity for `{name}` is {:?}, parameter is {:?}",
                            v.dims(),
                            p.value.dims()
                        )));
                    }
                }
            }
        });
        if let Some(e) = problem {
            return Err(e);
        }

        let lr = T::of(self.lr());
        let momentum = T::of(self.config.momentum);
        let wd = T::of(self.config.weight_decay);
        let velocities = &mut self.velocities;
        model.visit("", &mut |name, slot| {
            let Slot::Param(p) = slot else { return };
            let v = velocities
                .entry(name.to_string())
                .or_insert_with(|| p.value.zeros_like());
            for ((v, w), &g) in v
                .data_mut()
                .iter_mut()
                .zip(p.value.data_mut())
                .zip(p.grad.data())
            {
                *v = momentum * *v + g + wd * *w;
                *w -= lr * *v;
            }
            debug_assert!(v.all_finite() && p.value.all_finite(), "non-finite state in `{name}`");
        });
        self.step += 1;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    /// Validation loss improved; this epoch is the new best.
    Improved,
    Continue,
    Stop,
}

/// Stops once validation loss has failed to improve by more than
/// `min_delta` for more than `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    pub best_metric: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stale_count: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 1e-6,
            best_metric: None,
            best_epoch: None,
            stale_count: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_loss: f64) -> Result<Decision> {
        if val_loss.is_nan() {
            return Err(Error::InvalidMetric(format!("validation loss is NaN at epoch {epoch}")));
        }
        let improved = match self.best_metric {
            None => true,
            Some(best) => val_loss < best - self.min_delta,
        };
        if improved {
            self.best_metric = Some(val_loss);
            self.best_epoch = Some(epoch);
            self.stale_count = 0;
            return Ok(Decision::Improved);
        }
        self.stale_count += 1;
        Ok(if self.stale_count > self.patience {
            Decision::Stop
        } else {
            Decision::Continue
        })
    }
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self::new(10)
    }
}
