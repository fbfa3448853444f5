use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// `lr * (1 - step / total_steps) ^ power`, reaching zero at `total_steps`.
    Poly { total_steps: usize, power: f64 },
}

/// SGD with classical momentum: `v <- mu * v + g`, `p <- p - lr * v`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    momentum: f64,
    lr: f64,
    schedule: LrSchedule,
    velocity: Vec<Vec<f64>>,
    step: usize,
}

impl MomentumSgd {
    pub fn new(store: &ParamStore, lr: f64, momentum: f64, schedule: LrSchedule) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1)")));
        }
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate {lr} must be positive")));
        }
        Ok(MomentumSgd {
            momentum,
            lr,
            schedule,
            velocity: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Poly { total_steps, power } => {
                let frac = (step as f64 / total_steps.max(1) as f64).min(1.0);
                self.lr * (1.0 - frac).powf(power)
            }
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update. The gradients are consumed.
    pub fn step(&mut self, store: &mut ParamStore, grads: Gradients) -> Result<()> {
        if grads.0.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.0.len(),
                store.len()
            )));
        }
        let lr = self.lr_at(self.step);
        let ids: Vec<_> = store.ids().collect();
        for ((id, g), v) in ids.into_iter().zip(grads.0).zip(&mut self.velocity) {
            if g.len() != v.len() {
                return Err(Error::MissingGrad(store.name(id).to_string()));
            }
            let p = store.get_mut(id).data_mut();
            for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(&g) {
                *v = self.momentum * *v + g;
                *p -= lr * *v;
            }
        }
        self.step += 1;
        Ok(())
    }
}
