//! Gradient-based attacks: L∞ and L₂ projected gradient descent against the
//! raw classifier, the adaptive variant that differentiates through the
//! prompting pipeline, and a plug-in registry for the evaluator.

use std::collections::BTreeMap;

use ndarray::{Array2, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PapError, Result};
use crate::model::layers::softmax_cross_entropy;
use crate::model::Classifier;
use crate::num::Real;
use crate::prompt::{clamp01, PromptBank};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    Linf,
    L2,
}

/// Threat-model parameters shared by all PGD variants. Epsilon and step size
/// are in pixel units (e.g. 8/255).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub norm: Norm,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    /// The standard robustness-benchmark budget: L∞, ε=8/255, 10 steps of 2/255.
    pub fn linf_default(seed: u64) -> Self {
        AttackConfig {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 10,
            step_size: 2.0 / 255.0,
            random_start: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(PapError::Validation(format!(
                "attack epsilon {} must be a nonnegative finite value",
                self.epsilon
            )));
        }
        if self.steps > 0 && !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(PapError::Validation(format!(
                "attack step size {} must be positive when steps > 0",
                self.step_size
            )));
        }
        Ok(())
    }
}

fn validate_inputs<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<()> {
    cfg.validate()?;
    let (n, c, h, w) = images.dim();
    if (c, h, w) != model.input_shape() {
        return Err(PapError::Validation(format!(
            "image shape ({c},{h},{w}) does not match model shape {:?}",
            model.input_shape()
        )));
    }
    if labels.len() != n {
        return Err(PapError::Validation(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(PapError::Validation(format!(
            "label {bad} out of range for {} classes",
            model.num_classes()
        )));
    }
    if images.iter().any(|v| *v < F::zero() || *v > F::one()) {
        return Err(PapError::Validation(
            "attack inputs must lie in [0,1]".into(),
        ));
    }
    Ok(())
}

/// Project `adv` onto the ε-ball around `orig` in the configured norm, then
/// onto the [0,1] pixel box. Box clamping never moves a pixel further from
/// the (in-box) original, so both constraints hold exactly afterwards.
fn project<F: Real>(adv: &mut Array4<F>, orig: &Array4<F>, cfg: &AttackConfig) {
    let eps = F::of(cfg.epsilon);
    match cfg.norm {
        Norm::Linf => {
            adv.zip_mut_with(orig, |a, &o| {
                let delta = (*a - o).max(-eps).min(eps);
                *a = (o + delta).max(F::zero()).min(F::one());
            });
        }
        Norm::L2 => {
            for (mut a_s, o_s) in adv.axis_iter_mut(Axis(0)).zip(orig.axis_iter(Axis(0))) {
                let norm_sq: f64 = a_s
                    .iter()
                    .zip(o_s.iter())
                    .map(|(a, o)| {
                        let d = (*a - *o).f64();
                        d * d
                    })
                    .sum();
                let norm = norm_sq.sqrt();
                let scale = if norm > cfg.epsilon && norm > 0.0 {
                    F::of(cfg.epsilon / norm)
                } else {
                    F::one()
                };
                a_s.zip_mut_with(&o_s, |a, &o| {
                    *a = (o + (*a - o) * scale).max(F::zero()).min(F::one());
                });
            }
        }
    }
}

/// Draw a uniform start inside the ε-ball: per-coordinate uniform for L∞, a
/// Gaussian direction with a d-th-root radius for L₂.
fn random_start<F: Real>(adv: &mut Array4<F>, rng: &mut ChaCha8Rng, cfg: &AttackConfig) {
    match cfg.norm {
        Norm::Linf => {
            for v in adv.iter_mut() {
                *v = *v + F::of(rng.gen_range(-cfg.epsilon..=cfg.epsilon));
            }
        }
        Norm::L2 => {
            let d = adv.len() / adv.dim().0;
            for mut sample in adv.axis_iter_mut(Axis(0)) {
                let mut direction: Vec<f64> = Vec::with_capacity(d);
                while direction.len() < d {
                    // Box-Muller pair from two uniforms.
                    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                    let u2: f64 = rng.gen();
                    let r = (-2.0 * u1.ln()).sqrt();
                    let angle = 2.0 * std::f64::consts::PI * u2;
                    direction.push(r * angle.cos());
                    if direction.len() < d {
                        direction.push(r * angle.sin());
                    }
                }
                let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                let radius = cfg.epsilon * rng.gen::<f64>().powf(1.0 / d as f64);
                for (v, dir) in sample.iter_mut().zip(&direction) {
                    *v = *v + F::of(radius * dir / norm);
                }
            }
        }
    }
}

/// One ascent step in the configured norm geometry: signed for L∞,
/// gradient-normalized for L₂.
fn ascend<F: Real>(adv: &mut Array4<F>, grad: &Array4<F>, cfg: &AttackConfig) {
    let alpha = F::of(cfg.step_size);
    match cfg.norm {
        Norm::Linf => {
            adv.zip_mut_with(grad, |a, &g| {
                let s = if g > F::zero() {
                    F::one()
                } else if g < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                };
                *a = *a + alpha * s;
            });
        }
        Norm::L2 => {
            for (mut a_s, g_s) in adv.axis_iter_mut(Axis(0)).zip(grad.axis_iter(Axis(0))) {
                let norm: f64 = g_s.iter().map(|g| g.f64() * g.f64()).sum::<f64>().sqrt();
                if norm <= 1e-30 {
                    continue;
                }
                let scale = alpha * F::of(1.0 / norm);
                a_s.zip_mut_with(&g_s, |a, &g| *a = *a + g * scale);
            }
        }
    }
}

fn ce_grad<F: Real>(logits: &Array2<F>, labels: &[usize]) -> Array2<F> {
    softmax_cross_entropy(logits, labels)
        .expect("labels validated before the attack loop")
        .1
}

/// Projected gradient ascent on the cross-entropy of the raw model. The
/// output satisfies the norm budget exactly and lies in [0,1].
pub fn pgd<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<F>> {
    validate_inputs(model, images, labels, cfg)?;
    let mut adv = images.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.random_start {
        random_start(&mut adv, &mut rng, cfg);
        project(&mut adv, images, cfg);
    }
    for _ in 0..cfg.steps {
        let (_, grad) = model.input_gradient(&adv, &|logits| ce_grad(logits, labels))?;
        ascend(&mut adv, &grad, cfg);
        project(&mut adv, images, cfg);
    }
    Ok(adv)
}

/// The prompting-aware attack: ascent on the cross-entropy of the model
/// applied to the prompted perturbed image, with ground-truth-label prompts.
/// Gradients flow through decompose → prompt addition → recompose and the
/// evaluation clamp. An all-zero bank makes prompting the identity, so the
/// attack delegates to `pgd` and the trajectories coincide exactly.
pub fn adaptive_pgd<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    images: &Array4<F>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<Array4<F>> {
    validate_inputs(model, images, labels, cfg)?;
    if bank.is_zero() {
        return pgd(model, images, labels, cfg);
    }
    let (_, c, h, w) = images.dim();
    if (c, h, w) != bank.image_shape {
        return Err(PapError::Validation(format!(
            "image shape ({c},{h},{w}) does not match bank shape {:?}",
            bank.image_shape
        )));
    }
    let mut adv = images.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if cfg.random_start {
        random_start(&mut adv, &mut rng, cfg);
        project(&mut adv, images, cfg);
    }
    for _ in 0..cfg.steps {
        let cache = bank.apply_forward(&adv, labels)?;
        let prompted = clamp01(&cache.output);
        let (_, dprompted) = model.input_gradient(&prompted, &|logits| ce_grad(logits, labels))?;
        // The clamp passes gradient only where it was inactive.
        let mut dout = dprompted;
        dout.zip_mut_with(&cache.output, |g, &v| {
            if v <= F::zero() || v >= F::one() {
                *g = F::zero();
            }
        });
        let grads = bank.apply_backward(&cache, &dout, true)?;
        let grad = grads.images.expect("image gradient requested");
        ascend(&mut adv, &grad, cfg);
        project(&mut adv, images, cfg);
    }
    Ok(adv)
}

/// Named attack functions the evaluator can be pointed at; external
/// implementations slot in through `register`.
pub type AttackFn<F> =
    Box<dyn Fn(&dyn Classifier<F>, &Array4<F>, &[usize]) -> Result<Array4<F>>>;

pub struct AttackRegistry<F: Real = f32> {
    entries: BTreeMap<String, AttackFn<F>>,
}

impl<F: Real> Default for AttackRegistry<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> AttackRegistry<F> {
    pub fn new() -> Self {
        AttackRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn register(&mut self, name: &str, attack: AttackFn<F>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(PapError::Validation(format!(
                "attack {name:?} is already registered"
            )));
        }
        self.entries.insert(name.to_string(), attack);
        Ok(())
    }

    pub fn run(
        &self,
        name: &str,
        model: &dyn Classifier<F>,
        images: &Array4<F>,
        labels: &[usize],
    ) -> Result<Array4<F>> {
        let attack = self.entries.get(name).ok_or_else(|| {
            PapError::Config(format!(
                "unknown attack {name:?}; registered: {:?}",
                self.names()
            ))
        })?;
        attack(model, images, labels)
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}
