use serde::{Deserialize, Serialize};

use super::{Loss, ModelParams, ModelSpec};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::world::LabeledSet;

/// SGD with momentum and cosine step-size decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 8, batch_size: 32, lr: 0.05, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::config("lr must be positive, momentum in [0, 1), weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: usize,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

/// Trains a fresh model on `train` with cross-entropy. The returned parameters
/// are frozen. Single-threaded, so the result depends only on the inputs.
pub fn train_reference(
    train: &LabeledSet,
    test: Option<&LabeledSet>,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::pre("empty training set"));
    }
    let mut params = ModelParams::init(spec)?;
    let n = train.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let total = (cfg.epochs * per_epoch).max(1);
    let mut velocity = params.zero_grads();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let order = rng.permutation(n);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = train.select(chunk);
            let (loss, grads) = params.loss_and_grad(&batch.images, &batch.labels, Loss::CE)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step });
            }
            sum += loss * chunk.len() as f64;
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            for ((v, g), p) in velocity.iter_mut().zip(&grads).zip(&params.layers) {
                for ((vv, gv), pv) in v.weight.data_mut().iter_mut().zip(g.weight.data()).zip(p.weight.data()) {
                    *vv = cfg.momentum * *vv + gv + cfg.weight_decay * pv;
                }
                for (vv, gv) in v.bias.data_mut().iter_mut().zip(g.bias.data()) {
                    *vv = cfg.momentum * *vv + gv;
                }
            }
            params.axpy(-lr, &velocity)?;
            if !params.all_finite() {
                return Err(Error::Diverged { step });
            }
            step += 1;
        }
        epoch_loss.push(sum / n as f64);
    }
    params.frozen = true;
    let train_accuracy = params.accuracy(train)?;
    let test_accuracy = test.map(|t| params.accuracy(t)).transpose()?;
    Ok((params, TrainLog { epoch_loss, steps: step, train_accuracy, test_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::Vocabulary;
    use crate::world::{sample_real_balanced, World, WorldConfig, WorldSpec};

    fn tiny_task() -> (LabeledSet, ModelSpec) {
        let cfg = WorldConfig { image_size: 8, noise: 0.2, ..WorldConfig::default() };
        let world = World::new(WorldSpec::from_vocab(&Vocabulary::default_ten(), &cfg).unwrap()).unwrap();
        let set = sample_real_balanced(&world, 12, &mut RngStream::new(0, 0)).unwrap();
        let spec = ModelSpec { input: [1, 8, 8], conv_channels: vec![4], d_feat: 8, num_classes: 10, init_seed: 1 };
        (set, spec)
    }

    #[test]
    fn zero_epochs_returns_initialisation() {
        let (set, spec) = tiny_task();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (p, log) = train_reference(&set, None, &spec, &cfg, &mut RngStream::new(1, 0)).unwrap();
        let init = ModelParams::init(&spec).unwrap();
        assert_eq!(p.layers, init.layers);
        assert!(p.frozen);
        assert_eq!(log.steps, 0);
    }

    #[test]
    fn learns_tiny_task_deterministically() {
        let (set, spec) = tiny_task();
        let cfg = TrainConfig { epochs: 60, batch_size: 8, ..TrainConfig::default() };
        let (a, log) = train_reference(&set, Some(&set), &spec, &cfg, &mut RngStream::new(2, 0)).unwrap();
        let (b, _) = train_reference(&set, None, &spec, &cfg, &mut RngStream::new(2, 0)).unwrap();
        assert_eq!(a.layers, b.layers);
        assert!(log.test_accuracy.unwrap() > 0.9, "{log:?}");
        assert!(log.epoch_loss.last().unwrap() < &log.epoch_loss[0]);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let (set, spec) = tiny_task();
        let cfg = TrainConfig { epochs: 5, lr: 1e6, momentum: 0.0, ..TrainConfig::default() };
        match train_reference(&set, None, &spec, &cfg, &mut RngStream::new(3, 0)) {
            Err(Error::Diverged { step }) => assert!(step < 10),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
