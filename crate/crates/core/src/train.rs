//! Mini-batch training loop shared by the saliency and segmentation networks.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive, seeded, Rng};
use crate::tensor::{Gradients, LrSchedule, MomentumSgd, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples whose gradients are averaged per update.
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Exponent of the polynomial decay; `None` keeps the rate constant.
    pub lr_power: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 2,
            lr: 0.01,
            momentum: 0.9,
            lr_power: Some(0.9),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "need lr > 0 and momentum in [0, 1), got lr {} momentum {}",
                self.lr, self.momentum
            )));
        }
        if matches!(self.lr_power, Some(p) if !(p > 0.0)) {
            return Err(Error::Config("lr_power must be positive".into()));
        }
        Ok(())
    }

    fn schedule(&self, items: usize) -> LrSchedule {
        match self.lr_power {
            None => LrSchedule::Constant,
            Some(power) => LrSchedule::Poly {
                total_steps: self.epochs * items.div_ceil(self.batch_size),
                power,
            },
        }
    }
}

/// Mean training loss and wall time of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub wall_s: f64,
}

/// Runs `cfg.epochs` shuffled passes over `items` samples.
///
/// `sample` returns the loss and parameter gradients of one sample; `after`
/// sees the parameters at the end of every epoch.
pub(crate) fn run(
    store: &mut ParamStore,
    items: usize,
    cfg: &TrainConfig,
    mut sample: impl FnMut(&ParamStore, usize, &mut Rng) -> Result<(f64, Gradients)>,
    mut after: impl FnMut(&EpochStats, &ParamStore) -> Result<()>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if items == 0 {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = MomentumSgd::new(store, cfg.lr, cfg.momentum, cfg.schedule(items))?;
    let mut order: Vec<usize> = (0..items).collect();
    let mut shuffle = seeded(derive(cfg.seed, 1));
    let mut noise = seeded(derive(cfg.seed, 2));
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = opt.steps_taken();
            let mut acc: Option<Gradients> = None;
            for &i in batch {
                let (loss, grads) = sample(store, i, &mut noise).map_err(|e| match e {
                    Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::Diverged { step, loss });
                }
                total += loss;
                match acc.as_mut() {
                    Some(a) => a.accumulate(&grads),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("batches are non-empty");
            grads.scale(1.0 / batch.len() as f64);
            opt.step(store, grads)?;
        }
        let stats = EpochStats {
            epoch,
            loss: total / items as f64,
            wall_s: start.elapsed().as_secs_f64(),
        };
        after(&stats, store)?;
        curve.push(stats);
    }
    Ok(curve)
}
