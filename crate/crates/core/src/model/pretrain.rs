//! Backbone pre-training: plain cross-entropy (the natural baseline) and
//! PGD adversarial training (the robust baseline). Both share one loop; the
//! natural regime is the no-attack case, so an ε=0 attack reproduces the
//! natural trajectory bit for bit.

use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::data::Dataset;
use crate::error::{PapError, Result};
use crate::model::cnn::{Mode, ParamTensors, ReferenceCnn};
use crate::model::layers::softmax_cross_entropy;
use crate::model::Classifier;
use crate::seeds;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Fraction of the epoch budget after which the learning rate divides by
    /// 10; `None` keeps it constant.
    pub lr_drop_at: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 100,
            lr: 0.05,
            momentum: 0.9,
            seed: 0,
            lr_drop_at: Some(0.75),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PapError::Validation("batch_size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(PapError::Validation(format!(
                "learning rate {} must be nonnegative and finite",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(PapError::Validation(format!(
                "momentum {} must lie in [0,1)",
                self.momentum
            )));
        }
        if let Some(frac) = self.lr_drop_at {
            if !(0.0..=1.0).contains(&frac) {
                return Err(PapError::Validation(format!(
                    "lr_drop_at {frac} must lie in [0,1]"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub epoch_mean_losses: Vec<f64>,
    pub final_train_accuracy: f64,
}

/// Mean accuracy of the model over a labeled set, evaluated in batches.
pub fn accuracy_in_batches(
    model: &dyn Classifier<f32>,
    images: &Array4<f32>,
    labels: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let n = images.dim().0;
    if n == 0 {
        return Err(PapError::Validation("empty evaluation set".into()));
    }
    let mut correct = 0usize;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let batch = images.slice(s![start..end, .., .., ..]).to_owned();
        let preds = model.predict(&batch)?;
        correct += preds
            .iter()
            .zip(&labels[start..end])
            .filter(|(p, y)| p == y)
            .count();
        start = end;
    }
    Ok(correct as f64 / n as f64)
}

/// Cross-entropy training on clean images.
pub fn pretrain_natural(
    model: &mut ReferenceCnn<f32>,
    data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    train_loop(model, data, cfg, None)
}

/// Madry-style adversarial training: every batch is replaced by PGD examples
/// crafted against the current parameters before the update.
pub fn pretrain_adversarial(
    model: &mut ReferenceCnn<f32>,
    data: &Dataset,
    attack: &AttackConfig,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    attack.validate()?;
    train_loop(model, data, cfg, Some(attack))
}

fn train_loop(
    model: &mut ReferenceCnn<f32>,
    data: &Dataset,
    cfg: &PretrainConfig,
    attack: Option<&AttackConfig>,
) -> Result<PretrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(PapError::Data("training set is empty".into()));
    }
    let n = data.len();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, 0, 0));
    let mut velocity = ParamTensors::zeros_like(model);
    let drop_epoch = cfg
        .lr_drop_at
        .map(|frac| (frac * cfg.epochs as f64).ceil() as usize);
    let mut epoch_mean_losses = Vec::with_capacity(cfg.epochs);

    model.set_mode(Mode::Train);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut shuffle_rng);
        let lr = match drop_epoch {
            Some(d) if epoch >= d => cfg.lr / 10.0,
            _ => cfg.lr,
        };
        let mut loss_sum = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let images = gather_images(&data.images, chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let images = match attack {
                Some(base) => {
                    let mut per_batch = base.clone();
                    per_batch.seed = seeds::derive(cfg.seed, epoch as u64 + 1, batch_idx as u64);
                    pgd(model, &images, &labels, &per_batch)?
                }
                None => images,
            };
            let (logits, cache) = model.forward_cached(&images)?;
            let (loss, dlogits) = softmax_cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                model.set_mode(Mode::Eval);
                return Err(PapError::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_idx}"
                )));
            }
            let (_, grads) = model.backward_full(&cache, &dlogits, true);
            model.sgd_step(
                &grads.expect("parameter gradients requested"),
                &mut velocity,
                lr as f32,
                cfg.momentum as f32,
            );
            loss_sum += loss;
            batches += 1;
        }
        epoch_mean_losses.push(loss_sum / batches as f64);
    }
    model.set_mode(Mode::Eval);

    let final_train_accuracy =
        accuracy_in_batches(model, &data.images, &data.labels, cfg.batch_size.max(1))?;
    Ok(PretrainReport {
        epochs_run: cfg.epochs,
        epoch_mean_losses,
        final_train_accuracy,
    })
}

/// Copy the rows at `indices` into a fresh batch.
pub fn gather_images(images: &Array4<f32>, indices: &[usize]) -> Array4<f32> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (row, &i) in indices.iter().enumerate() {
        out.slice_mut(s![row, .., .., ..])
            .assign(&images.slice(s![i, .., .., ..]));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split};

    fn small_data(len: usize) -> Dataset {
        generate(Split::Train, 900, len).unwrap()
    }

    fn small_cfg(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            epochs,
            batch_size: 40,
            lr: 0.05,
            momentum: 0.9,
            seed: 5,
            lr_drop_at: Some(0.75),
        }
    }

    #[test]
    fn zero_epochs_leaves_parameters_untouched() {
        let mut model = ReferenceCnn::build((1, 28, 28), 10, 1).unwrap();
        let before = model.param_digest();
        let data = small_data(40);
        let report = pretrain_natural(&mut model, &data, &small_cfg(0)).unwrap();
        assert_eq!(report.epochs_run, 0);
        assert_eq!(model.param_digest(), before);
    }

    #[test]
    fn accuracy_does_not_degrade_under_training() {
        let mut model = ReferenceCnn::build((1, 28, 28), 10, 2).unwrap();
        let data = small_data(200);
        let before = accuracy_in_batches(&model, &data.images, &data.labels, 50).unwrap();
        let report = pretrain_natural(&mut model, &data, &small_cfg(3)).unwrap();
        assert!(
            report.final_train_accuracy >= before,
            "accuracy fell from {before} to {}",
            report.final_train_accuracy
        );
    }

    #[test]
    fn zero_epsilon_attack_reproduces_the_natural_trajectory() {
        let data = small_data(80);
        let mut natural = ReferenceCnn::build((1, 28, 28), 10, 3).unwrap();
        pretrain_natural(&mut natural, &data, &small_cfg(1)).unwrap();

        let mut adversarial = ReferenceCnn::build((1, 28, 28), 10, 3).unwrap();
        let attack = AttackConfig {
            norm: crate::attack::Norm::Linf,
            epsilon: 0.0,
            steps: 3,
            step_size: 0.01,
            random_start: true,
            seed: 0,
        };
        pretrain_adversarial(&mut adversarial, &data, &attack, &small_cfg(1)).unwrap();
        assert_eq!(natural.param_digest(), adversarial.param_digest());
    }

    #[test]
    fn poisoned_parameters_fail_with_a_numeric_error() {
        let mut model = ReferenceCnn::build((1, 28, 28), 10, 4).unwrap();
        model.fc2.bias[0] = f32::NAN;
        let data = small_data(80);
        let err = pretrain_natural(&mut model, &data, &small_cfg(1)).unwrap_err();
        assert!(matches!(err, PapError::Numeric(_)), "got: {err}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut model = ReferenceCnn::build((1, 28, 28), 10, 5).unwrap();
        let data = small_data(20);
        let mut cfg = small_cfg(1);
        cfg.batch_size = 0;
        assert!(pretrain_natural(&mut model, &data, &cfg).is_err());
        let mut cfg = small_cfg(1);
        cfg.momentum = 1.5;
        assert!(pretrain_natural(&mut model, &data, &cfg).is_err());
    }
}
