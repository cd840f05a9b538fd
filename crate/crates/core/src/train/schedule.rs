use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};

use super::config::TrainConfig;
use crate::error::Result;

/// Tracks the best value of a maximized quantity and epochs since it improved.
#[derive(Clone, Debug)]
struct Monitor {
    best: f64,
    wait: usize,
    min_delta: f64,
}

impl Monitor {
    fn new(min_delta: f64) -> Self {
        Self {
            best: f64::NEG_INFINITY,
            wait: 0,
            min_delta,
        }
    }

    /// Returns whether `value` beats the best by more than `min_delta`.
    fn observe(&mut self, value: f64) -> bool {
        if value - self.min_delta > self.best {
            self.best = value;
            self.wait = 0;
            true
        } else {
            self.wait += 1;
            false
        }
    }
}

/// Outcome of one epoch-end update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochDecision {
    pub improved: bool,
    /// Learning rate for the next epoch.
    pub next_lr: f64,
    pub lr_reduced: bool,
    pub stop: bool,
}

/// Reduce-on-plateau and early stopping, both watching validation dice.
#[derive(Clone, Debug)]
pub struct Schedule {
    lr: f64,
    factor: f64,
    plateau_patience: usize,
    early_patience: usize,
    plateau: Monitor,
    early: Monitor,
    epochs: usize,
}

impl Schedule {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            lr: config.initial_lr,
            factor: config.plateau_factor,
            plateau_patience: config.plateau_patience,
            early_patience: config.early_stop_patience,
            plateau: Monitor::new(config.min_delta),
            early: Monitor::new(config.min_delta),
            epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.early.best
    }

    pub fn end_epoch(&mut self, val_dice: f64) -> EpochDecision {
        self.epochs += 1;
        let improved = self.early.observe(val_dice);
        self.plateau.observe(val_dice);
        let mut lr_reduced = false;
        if self.plateau.wait >= self.plateau_patience {
            self.lr *= self.factor;
            self.plateau.wait = 0;
            lr_reduced = true;
        }
        let stop = self.epochs > 1 && self.early.wait >= self.early_patience;
        EpochDecision {
            improved,
            next_lr: self.lr,
            lr_reduced,
            stop,
        }
    }
}

/// SGD with classical momentum: `v ← m·v − lr·g`, `w ← w + v`.
pub struct Sgd {
    vars: Vec<Var>,
    velocity: Vec<Option<Tensor>>,
    momentum: f64,
    lr: f64,
}

impl Sgd {
    pub fn new(vars: Vec<Var>, lr: f64, momentum: f64) -> Self {
        let velocity = vec![None; vars.len()];
        Self {
            vars,
            velocity,
            momentum,
            lr,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        for (var, vel) in self.vars.iter().zip(self.velocity.iter_mut()) {
            let Some(g) = grads.get(var) else { continue };
            let g = (g.detach() * self.lr)?;
            let v = match vel.take() {
                Some(v) => ((v * self.momentum)? - g)?,
                None => g.neg()?,
            };
            var.set(&(var.as_tensor().detach() + &v)?)?;
            *vel = Some(v);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }
}
