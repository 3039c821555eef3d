//! Prompt training against a frozen backbone.
//!
//! Each epoch walks the shuffled training set in mini-batches. For every
//! batch the loop crafts fresh adversarial examples at the configured
//! budget, evaluates the combined objective on prompted adversarial and
//! prompted natural images, and applies one SGD-with-momentum step to the
//! prompt arrays only — the backbone never changes, which is verified by
//! parameter digest before and after. Every `weight_update_period` epochs
//! the amplitude-prompt weight is rescaled from that epoch's accumulated
//! robust-accuracy counts.
//!
//! Gradient bookkeeping per batch (all terms flow only into the prompts):
//!
//! * adversarial cross-entropy and the similarity penalty share one
//!   prompted tensor, so their image-space gradients are summed and pulled
//!   back through a single prompting backward pass;
//! * the natural cross-entropy term gets its own prompting backward pass;
//! * the mismatch term prompts with mismatched labels and contributes
//!   through its own backward pass.

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{adaptive_pgd, pgd, AttackConfig};
use crate::error::{PapError, Result};
use crate::model::layers::softmax_cross_entropy;
use crate::model::Classifier;
use crate::num::Real;
use crate::objective::{
    loss_all, loss_mis_with_grads, loss_sim_with_grad, LossBreakdown, ObjectiveConfig,
};
use crate::prompt::{clamp01, PromptBank, PromptGrads};
use crate::seeds;
use crate::weighting::{schedule_should_update, WeightUpdateAccumulator, WeightUpdateRecord};

/// Everything the prompt-training loop needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Loss weights and the mismatch threshold.
    pub objective: ObjectiveConfig,
    /// Number of epochs (1-based throughout).
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate for the prompt arrays. Zero is allowed and
    /// leaves the prompts untouched.
    pub lr: f64,
    pub momentum: f64,
    /// Epoch at which the learning rate is divided by `lr_drop_factor`
    /// (inclusive; set beyond `epochs` to disable).
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    /// Epoch period of the amplitude-weight update.
    pub weight_update_period: usize,
    /// Attack used to craft per-batch adversarial examples.
    pub attack: AttackConfig,
    /// When true, adversarial examples are crafted through the current
    /// prompting transform (attacker sees the prompts); when false the
    /// attack targets the raw backbone.
    pub adaptive_attack: bool,
    /// When true, training losses see box-clamped prompted images with a
    /// straight-through gradient mask at the saturated pixels. The mismatch
    /// term always uses the unclamped in-graph output.
    pub clamp_in_graph: bool,
    pub seed: u64,
}

impl TrainConfig {
    fn defaults(objective: ObjectiveConfig, attack: AttackConfig, epochs: usize, seed: u64) -> Self {
        TrainConfig {
            objective,
            epochs,
            batch_size: 100,
            lr: 0.1,
            momentum: 0.9,
            // Divide the learning rate at 75% of the run, matching the
            // 100-epoch/75th-epoch schedule proportionally.
            lr_drop_epoch: (3 * epochs).div_ceil(4).max(1),
            lr_drop_factor: 10.0,
            weight_update_period: crate::weighting::DEFAULT_UPDATE_PERIOD,
            attack,
            adaptive_attack: false,
            clamp_in_graph: false,
            seed,
        }
    }

    /// Defaults for prompting a naturally trained backbone.
    pub fn natural_defaults(attack: AttackConfig, epochs: usize, seed: u64) -> Self {
        Self::defaults(ObjectiveConfig::natural_defaults(), attack, epochs, seed)
    }

    /// Defaults for prompting an adversarially trained backbone.
    pub fn adversarial_defaults(attack: AttackConfig, epochs: usize, seed: u64) -> Self {
        Self::defaults(ObjectiveConfig::adversarial_defaults(), attack, epochs, seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        self.attack.validate()?;
        if self.epochs == 0 {
            return Err(PapError::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(PapError::Config("batch_size must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(PapError::Config(format!(
                "lr must be finite and non-negative, got {}",
                self.lr
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(PapError::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if self.lr_drop_epoch == 0 {
            return Err(PapError::Config(
                "lr_drop_epoch is 1-based; set it beyond epochs to disable".into(),
            ));
        }
        if !self.lr_drop_factor.is_finite() || self.lr_drop_factor <= 0.0 {
            return Err(PapError::Config(format!(
                "lr_drop_factor must be finite and positive, got {}",
                self.lr_drop_factor
            )));
        }
        if self.weight_update_period == 0 {
            return Err(PapError::Config(
                "weight_update_period must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Digest of the serialized config, stored in the bank's provenance.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        crate::bytes::sha256_hex(json.as_bytes())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based epoch index.
    pub epoch: usize,
    /// Batch-mean loss components; `total` recomposed from the means.
    pub mean_loss: LossBreakdown,
    /// Fraction of this epoch's adversarial examples classified correctly
    /// after prompting with the true label.
    pub robust_accuracy: f64,
    /// Present on epochs where the amplitude-weight update fired.
    pub weight_update: Option<WeightUpdateRecord>,
    /// Learning rate in effect this epoch.
    pub lr: f64,
    pub wall_time_s: f64,
}

/// Train a fresh prompt bank (initialized from one example per class) on
/// the given images. Returns the bank with full provenance plus one log
/// entry per epoch.
pub fn train_prompts<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
    config: &TrainConfig,
) -> Result<(PromptBank<F>, Vec<EpochLog>)> {
    config.validate()?;
    let bank = PromptBank::init_from_examples(
        images,
        labels,
        model.num_classes(),
        seeds::derive(config.seed, 0, 1),
    )?;
    train_prompts_with_init(model, images, labels, config, bank)
}

/// Train starting from an existing bank (used for retraining an
/// already-trained bank under a different attack).
pub fn train_prompts_with_init<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
    config: &TrainConfig,
    mut bank: PromptBank<F>,
) -> Result<(PromptBank<F>, Vec<EpochLog>)> {
    config.validate()?;
    let n = images.dim().0;
    if labels.len() != n {
        return Err(PapError::Validation(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(PapError::Data("training set is empty".into()));
    }
    let digest_before = model.param_digest();

    let mut velocity = PromptGrads {
        phase: Array4::zeros(bank.phase.dim()),
        amplitude: Array4::zeros(bank.amplitude.dim()),
        images: None,
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(seeds::derive(config.seed, 0, 0));
    let mut order: Vec<usize> = (0..n).collect();
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let start = std::time::Instant::now();
        let lr = if epoch >= config.lr_drop_epoch {
            config.lr / config.lr_drop_factor
        } else {
            config.lr
        };
        order.shuffle(&mut shuffle_rng);

        let updating = schedule_should_update(epoch, config.weight_update_period);
        let mut weight_acc = updating.then(|| WeightUpdateAccumulator::new(&bank));

        let mut sums = LossBreakdown { adv: 0.0, nat: 0.0, sim: 0.0, mis: 0.0, total: 0.0 };
        let mut batches = 0usize;
        let mut robust_correct = 0usize;

        for (batch_idx, chunk) in order.chunks(config.batch_size).enumerate() {
            let x = gather(images, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();

            // Fresh adversarial examples for this batch.
            let mut attack_cfg = config.attack.clone();
            attack_cfg.seed = seeds::derive(config.seed, epoch as u64, 2 * batch_idx as u64);
            let x_adv = if config.adaptive_attack {
                adaptive_pgd(model, &bank, &x, &y, &attack_cfg)?
            } else {
                pgd(model, &x, &y, &attack_cfg)?
            };

            let step = batch_step(
                model,
                &bank,
                &x,
                &x_adv,
                &y,
                config,
                seeds::derive(config.seed, epoch as u64, 2 * batch_idx as u64 + 1),
            )?;
            if !step.breakdown.total.is_finite() {
                return Err(PapError::Numeric(format!(
                    "non-finite loss {} at epoch {epoch}, batch {batch_idx}",
                    step.breakdown.total
                )));
            }

            // SGD with momentum on the prompt arrays only.
            let lr_f = F::of(lr);
            let mom = F::of(config.momentum);
            azip_step(&mut velocity.phase, &step.grads.phase, &mut bank.phase, mom, lr_f);
            azip_step(
                &mut velocity.amplitude,
                &step.grads.amplitude,
                &mut bank.amplitude,
                mom,
                lr_f,
            );

            sums.adv += step.breakdown.adv;
            sums.nat += step.breakdown.nat;
            sums.sim += step.breakdown.sim;
            sums.mis += step.breakdown.mis;
            batches += 1;

            // Prompted robust accuracy on this batch's adversarial images.
            let prompted = bank.apply(&x_adv, &y)?;
            let pred = model.predict(&prompted)?;
            robust_correct += pred.iter().zip(&y).filter(|(p, y)| p == y).count();

            if let Some(acc) = weight_acc.as_mut() {
                acc.observe(model, &x_adv, &y)?;
            }
        }

        let weight_update = match weight_acc {
            Some(acc) => Some(acc.finalize(epoch, &mut bank)?),
            None => None,
        };

        let b = batches as f64;
        let mean_loss = loss_all(
            sums.adv / b,
            sums.nat / b,
            sums.sim / b,
            sums.mis / b,
            &config.objective,
        )?;
        logs.push(EpochLog {
            epoch,
            mean_loss,
            robust_accuracy: robust_correct as f64 / n as f64,
            weight_update,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        });
    }

    if model.param_digest() != digest_before {
        return Err(PapError::Validation(
            "backbone parameters changed during prompt training".into(),
        ));
    }

    bank.provenance.seed = config.seed;
    bank.provenance.config_digest = config.digest();
    bank.provenance.epochs = config.epochs;
    Ok((bank, logs))
}

struct BatchStep<F: Real> {
    breakdown: LossBreakdown,
    grads: PromptGrads<F>,
}

/// Evaluate all four loss terms on one batch and accumulate their gradients
/// into a single pair of prompt-array gradients.
fn batch_step<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    x_nat: &Array4<F>,
    x_adv: &Array4<F>,
    labels: &[usize],
    config: &TrainConfig,
    mis_seed: u64,
) -> Result<BatchStep<F>> {
    let lam = &config.objective;

    // Adversarial path: cross-entropy + similarity share one prompting.
    let cache_adv = bank.apply_forward(x_adv, labels)?;
    let (net_input_adv, clamp_mask) = if config.clamp_in_graph {
        let clamped = clamp01(&cache_adv.output);
        (clamped, Some(saturation_mask(&cache_adv.output)))
    } else {
        (cache_adv.output.clone(), None)
    };
    let labels_owned = labels.to_vec();
    let (logits_adv, mut dimg_adv) = model.input_gradient(&net_input_adv, &|logits| {
        softmax_cross_entropy(logits, &labels_owned)
            .map(|(_, g)| g)
            .unwrap_or_else(|_| Array2::zeros(logits.dim()))
    })?;
    let (adv, _) = softmax_cross_entropy(&logits_adv, labels)?;

    let (sim, dsim) = loss_sim_with_grad(&net_input_adv, x_nat)?;
    let lam2 = F::of(lam.lambda2);
    ndarray::Zip::from(&mut dimg_adv)
        .and(&dsim)
        .for_each(|g, &s| *g = *g + lam2 * s);
    if let Some(mask) = &clamp_mask {
        dimg_adv.zip_mut_with(mask, |g, &m| *g = *g * m);
    }
    let grads_adv = bank.apply_backward(&cache_adv, &dimg_adv, false)?;

    // Natural path.
    let cache_nat = bank.apply_forward(x_nat, labels)?;
    let (net_input_nat, nat_mask) = if config.clamp_in_graph {
        let clamped = clamp01(&cache_nat.output);
        (clamped, Some(saturation_mask(&cache_nat.output)))
    } else {
        (cache_nat.output.clone(), None)
    };
    let (logits_nat, mut dimg_nat) = model.input_gradient(&net_input_nat, &|logits| {
        softmax_cross_entropy(logits, &labels_owned)
            .map(|(_, g)| g)
            .unwrap_or_else(|_| Array2::zeros(logits.dim()))
    })?;
    let (nat, _) = softmax_cross_entropy(&logits_nat, labels)?;
    if let Some(mask) = &nat_mask {
        dimg_nat.zip_mut_with(mask, |g, &m| *g = *g * m);
    }
    let grads_nat = bank.apply_backward(&cache_nat, &dimg_nat, false)?;

    // Mismatch path (always unclamped in-graph).
    let mis_outcome =
        loss_mis_with_grads(model, bank, x_adv, labels, lam.tau, mis_seed)?;
    let grads_mis = mis_outcome.prompt_grads.expect("gradients requested");

    // Combine: adv-path gradient already contains the lambda2-weighted
    // similarity term; scale the other two by their lambdas.
    let lam1 = F::of(lam.lambda1);
    let lam3 = F::of(lam.lambda3);
    let mut phase = grads_adv.phase;
    ndarray::Zip::from(&mut phase)
        .and(&grads_nat.phase)
        .and(&grads_mis.phase)
        .for_each(|g, &n, &m| *g = *g + lam1 * n + lam3 * m);
    let mut amplitude = grads_adv.amplitude;
    ndarray::Zip::from(&mut amplitude)
        .and(&grads_nat.amplitude)
        .and(&grads_mis.amplitude)
        .for_each(|g, &n, &m| *g = *g + lam1 * n + lam3 * m);

    let breakdown = loss_all(adv, nat, sim, mis_outcome.loss, lam)?;
    Ok(BatchStep {
        breakdown,
        grads: PromptGrads { phase, amplitude, images: None },
    })
}

/// 1 where the unclamped value is strictly inside (0, 1), else 0 — the
/// straight-through gradient of the box clamp.
fn saturation_mask<F: Real>(unclamped: &Array4<F>) -> Array4<F> {
    unclamped.mapv(|v| {
        if v > F::zero() && v < F::one() {
            F::one()
        } else {
            F::zero()
        }
    })
}

fn azip_step<F: Real>(
    velocity: &mut Array4<F>,
    grad: &Array4<F>,
    param: &mut Array4<F>,
    momentum: F,
    lr: F,
) {
    ndarray::Zip::from(velocity)
        .and(grad)
        .and(param)
        .for_each(|v, &g, p| {
            *v = momentum * *v + g;
            *p = *p - lr * *v;
        });
}

fn gather<F: Real>(images: &Array4<F>, indices: &[usize]) -> Array4<F> {
    let (_, c, h, w) = images.dim();
    let mut out = Array4::zeros((indices.len(), c, h, w));
    for (k, &i) in indices.iter().enumerate() {
        out.index_axis_mut(ndarray::Axis(0), k)
            .assign(&images.index_axis(ndarray::Axis(0), i));
    }
    out
}
