//! Training objective for prompt optimization.
//!
//! Four scalar terms and their composition:
//!
//! * `loss_adv` — mean cross-entropy of the model on prompted adversarial
//!   images against the true labels.
//! * `loss_nat` — the same functional applied to prompted natural images.
//! * `loss_sim` — a pixel-similarity penalty `mean(exp(|prompted − natural|))`
//!   tying prompted adversarial images back to their clean originals. Its
//!   minimum value is 1, attained only when the two tensors are identical.
//! * `loss_mis` — a mismatch hinge: prompting an adversarial image with a
//!   *wrong* class prompt should not make the model prefer that wrong class.
//!   For each example a mismatched label `y' != y` is drawn uniformly, the
//!   image is prompted with `y'`, and the term is
//!   `mean(max(h_{y'} − h_y, −tau))` on the model's logits.
//!
//! The combined objective is
//! `L = L_adv + lambda1·L_nat + lambda2·L_sim + lambda3·L_mis`,
//! and [`loss_all`] guarantees the reported total equals that expression
//! exactly (same accumulation order, f64 arithmetic).
//!
//! All scalar losses are accumulated in f64 regardless of the working
//! element type.

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PapError, Result};
use crate::model::layers::softmax_cross_entropy;
use crate::model::Classifier;
use crate::num::Real;
use crate::prompt::{PromptBank, PromptGrads};

/// Scalar values of every objective term for one batch.
///
/// Invariants (enforced by construction in [`loss_all`]):
/// * `total == adv + lambda1*nat + lambda2*sim + lambda3*mis` exactly,
///   evaluated in f64 in that order;
/// * `sim >= 1` whenever it was produced by [`loss_sim`];
/// * `mis >= -tau` whenever it was produced by [`loss_mis`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub adv: f64,
    pub nat: f64,
    pub sim: f64,
    pub mis: f64,
    pub total: f64,
}

/// Loss weights and the mismatch clip threshold.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the natural cross-entropy term.
    pub lambda1: f64,
    /// Weight of the pixel-similarity term.
    pub lambda2: f64,
    /// Weight of the mismatch hinge term.
    pub lambda3: f64,
    /// Hinge clip threshold for the mismatch term.
    pub tau: f64,
}

impl ObjectiveConfig {
    /// Defaults used when prompting a naturally trained backbone.
    pub fn natural_defaults() -> Self {
        ObjectiveConfig { lambda1: 3.0, lambda2: 400.0, lambda3: 4.0, tau: 0.1 }
    }

    /// Defaults used when prompting an adversarially trained backbone.
    pub fn adversarial_defaults() -> Self {
        ObjectiveConfig { lambda1: 1.0, lambda2: 5000.0, lambda3: 4.0, tau: 0.1 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda3", self.lambda3),
            ("tau", self.tau),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(PapError::Config(format!(
                    "objective parameter {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean cross-entropy of `model` on `images` against `labels`.
///
/// `images` are expected to already carry whatever prompting the caller
/// intends; this function just runs the classifier.
pub fn loss_adv<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
) -> Result<f64> {
    let logits = model.forward(images)?;
    let (loss, _) = softmax_cross_entropy(&logits, labels)?;
    Ok(loss)
}

/// Mean cross-entropy on prompted natural images. Identical functional to
/// [`loss_adv`]; both names exist because the two terms play different roles
/// in the combined objective and are weighted differently.
pub fn loss_nat<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
) -> Result<f64> {
    loss_adv(model, images, labels)
}

/// Pixel-similarity penalty `mean(exp(|prompted − natural|))` over all
/// `N*C*H*W` elements. Returns a value `>= 1`, with equality exactly when
/// the tensors are identical.
pub fn loss_sim<F: Real>(prompted: &Array4<F>, natural: &Array4<F>) -> Result<f64> {
    Ok(sim_forward(prompted, natural)?.0)
}

/// [`loss_sim`] together with its gradient with respect to `prompted`:
/// `d/dm_i = sign(m_i − n_i) * exp(|m_i − n_i|) / (N*C*H*W)`.
pub fn loss_sim_with_grad<F: Real>(
    prompted: &Array4<F>,
    natural: &Array4<F>,
) -> Result<(f64, Array4<F>)> {
    let (loss, mut grad) = sim_forward(prompted, natural)?;
    let count = F::of(prompted.len() as f64);
    grad.mapv_inplace(|g| g / count);
    Ok((loss, grad))
}

fn sim_forward<F: Real>(prompted: &Array4<F>, natural: &Array4<F>) -> Result<(f64, Array4<F>)> {
    if prompted.dim() != natural.dim() {
        return Err(PapError::Validation(format!(
            "similarity loss needs matching shapes, got {:?} vs {:?}",
            prompted.dim(),
            natural.dim()
        )));
    }
    if prompted.is_empty() {
        return Err(PapError::Validation(
            "similarity loss needs at least one element".into(),
        ));
    }
    let mut sum = 0.0f64;
    let mut grad = Array4::<F>::zeros(prompted.dim());
    ndarray::Zip::from(&mut grad)
        .and(prompted)
        .and(natural)
        .for_each(|g, &m, &n| {
            let d = m - n;
            let e = d.abs().exp();
            sum += e.f64();
            // Unscaled element gradient; sign(0) contributes 0 which matches
            // the symmetric subgradient of |.| at the minimum.
            *g = if d > F::zero() {
                e
            } else if d < F::zero() {
                -e
            } else {
                F::zero()
            };
        });
    Ok((sum / prompted.len() as f64, grad))
}

/// Everything produced by one evaluation of the mismatch term.
pub struct MismatchOutcome<F: Real> {
    /// Scalar hinge value, `>= -tau`.
    pub loss: f64,
    /// The mismatched labels `y'` drawn for this batch.
    pub mismatch_labels: Vec<usize>,
    /// Gradients with respect to the prompt arrays (and nothing else), when
    /// requested. The amplitude gradient already includes the bank weight
    /// factor.
    pub prompt_grads: Option<PromptGrads<F>>,
}

/// Mismatch hinge `mean(max(h_{y'} − h_y, −tau))` on logits, with `y'` drawn
/// uniformly from the labels other than `y` using a stream seeded by `seed`.
///
/// The adversarial images are prompted with the *mismatched* labels before
/// the forward pass. Requires at least two classes: with a single class no
/// mismatched label exists.
pub fn loss_mis<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    adv_images: &Array4<F>,
    labels: &[usize],
    tau: f64,
    seed: u64,
) -> Result<f64> {
    Ok(mismatch_inner(model, bank, adv_images, labels, tau, seed, false)?.loss)
}

/// [`loss_mis`] plus gradients with respect to the bank's prompt arrays.
/// Consumes the seed identically to `loss_mis`, so both produce the same
/// mismatched labels.
pub fn loss_mis_with_grads<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    adv_images: &Array4<F>,
    labels: &[usize],
    tau: f64,
    seed: u64,
) -> Result<MismatchOutcome<F>> {
    mismatch_inner(model, bank, adv_images, labels, tau, seed, true)
}

/// Draw, for each true label, a label distinct from it, uniformly over the
/// remaining `c − 1` classes.
pub fn draw_mismatch_labels(
    labels: &[usize],
    num_classes: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(PapError::Config(format!(
            "mismatch loss needs at least 2 classes, got {num_classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels
        .iter()
        .map(|&y| {
            if y >= num_classes {
                return Err(PapError::Validation(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            let k = rng.gen_range(0..num_classes - 1);
            Ok(if k >= y { k + 1 } else { k })
        })
        .collect()
}

fn mismatch_inner<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    adv_images: &Array4<F>,
    labels: &[usize],
    tau: f64,
    seed: u64,
    want_grads: bool,
) -> Result<MismatchOutcome<F>> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(PapError::Config(format!(
            "tau must be finite and non-negative, got {tau}"
        )));
    }
    let n = adv_images.dim().0;
    if labels.len() != n {
        return Err(PapError::Validation(format!(
            "mismatch loss got {} labels for {n} images",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(PapError::Validation(
            "mismatch loss needs at least one example".into(),
        ));
    }
    let mismatch_labels = draw_mismatch_labels(labels, bank.num_classes, seed)?;

    // Prompt with the mismatched labels; keep the unclamped in-graph output.
    let cache = bank.apply_forward(adv_images, &mismatch_labels)?;

    let hinge_and_grad = |logits: &Array2<F>| -> Result<(f64, Array2<F>)> {
        let mut sum = 0.0f64;
        let mut dlogits = Array2::<F>::zeros(logits.dim());
        let inv_n = F::of(1.0 / n as f64);
        for i in 0..n {
            let y = labels[i];
            let yp = mismatch_labels[i];
            if y >= logits.dim().1 {
                return Err(PapError::Validation(format!(
                    "label {y} out of range for {} logits",
                    logits.dim().1
                )));
            }
            let margin = (logits[[i, yp]] - logits[[i, y]]).f64();
            if margin > -tau {
                sum += margin;
                dlogits[[i, yp]] = dlogits[[i, yp]] + inv_n;
                dlogits[[i, y]] = dlogits[[i, y]] - inv_n;
            } else {
                // Clipped region (and boundary): value −tau, zero gradient.
                sum += -tau;
            }
        }
        Ok((sum / n as f64, dlogits))
    };

    if !want_grads {
        let logits = model.forward(&cache.output)?;
        let (loss, _) = hinge_and_grad(&logits)?;
        return Ok(MismatchOutcome { loss, mismatch_labels, prompt_grads: None });
    }

    // Gradient path: logit gradient -> image gradient -> prompt arrays.
    let loss_slot = std::cell::Cell::new(f64::NAN);
    let (logits, dimages) = model.input_gradient(&cache.output, &|logits| {
        match hinge_and_grad(logits) {
            Ok((loss, dlogits)) => {
                loss_slot.set(loss);
                dlogits
            }
            // Label bounds were checked above against the bank; a failure
            // here means the model disagrees with the bank on class count.
            Err(_) => Array2::zeros(logits.dim()),
        }
    })?;
    if logits.dim().1 != bank.num_classes {
        return Err(PapError::Validation(format!(
            "model produced {} logits but the bank has {} classes",
            logits.dim().1,
            bank.num_classes
        )));
    }
    let grads = bank.apply_backward(&cache, &dimages, false)?;
    Ok(MismatchOutcome {
        loss: loss_slot.get(),
        mismatch_labels,
        prompt_grads: Some(grads),
    })
}

/// Compose the four already-computed terms into the combined objective.
///
/// The returned `total` is exactly `adv + lambda1*nat + lambda2*sim +
/// lambda3*mis` in f64, in that order — callers can re-derive it bit for bit
/// from the breakdown.
pub fn loss_all(adv: f64, nat: f64, sim: f64, mis: f64, cfg: &ObjectiveConfig) -> Result<LossBreakdown> {
    cfg.validate()?;
    let total = adv + cfg.lambda1 * nat + cfg.lambda2 * sim + cfg.lambda3 * mis;
    Ok(LossBreakdown { adv, nat, sim, mis, total })
}
