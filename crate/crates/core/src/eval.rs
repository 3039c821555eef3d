//! Robustness evaluation: prompt-selection strategies, attack sweeps, the
//! spectrum-swap diagnostic, and report/plot emission.
//!
//! Four ways of choosing which class's prompts to apply at test time:
//!
//! * `predicted_label` — classify the raw image, prompt with that
//!   prediction, classify again (exactly two model calls per image);
//! * `traversal` — apply every class's prompts in turn and keep the class
//!   whose own logit on its own prompted image is largest (exactly `c`
//!   model calls per image);
//! * `oracle_label` — prompt with the ground-truth label (control; upper
//!   bound on selection quality);
//! * `random_label` — prompt with a uniformly drawn label (control; lower
//!   bound).

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig, AttackRegistry};
use crate::data::digest_parts;
use crate::error::{PapError, Result};
use crate::model::layers::argmax_row;
use crate::model::Classifier;
use crate::num::Real;
use crate::prompt::{clamp01, PromptBank};
use crate::spectral::{swap_spectra, SwapComponent};

/// How test-time prompts are selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    PredictedLabel,
    Traversal,
    OracleLabel,
    RandomLabel,
}

impl SelectionStrategy {
    /// Model forward passes each image participates in under this strategy.
    pub fn model_calls_per_image(self, num_classes: usize) -> usize {
        match self {
            SelectionStrategy::PredictedLabel => 2,
            SelectionStrategy::Traversal => num_classes,
            SelectionStrategy::OracleLabel | SelectionStrategy::RandomLabel => 1,
        }
    }
}

/// Evaluation outcome for one model/bank/strategy combination.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// Accuracy on prompted clean images.
    pub natural_accuracy: f64,
    /// Accuracy on prompted adversarial images, per attack name.
    pub robust_accuracy: BTreeMap<String, f64>,
    pub selection_strategy: SelectionStrategy,
    pub model_calls_per_image: usize,
    /// Amplitude-prompt weight in effect during evaluation.
    pub weight_used: f64,
    pub timing_s: f64,
    pub dataset_digest: String,
    pub examples: usize,
}

/// Predict labels for `images` under the given selection strategy.
/// `true_labels` is required by `oracle_label`; `seed` drives
/// `random_label`.
pub fn predict_with_strategy<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    images: &Array4<F>,
    true_labels: Option<&[usize]>,
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<Vec<usize>> {
    match strategy {
        SelectionStrategy::PredictedLabel => {
            let test = bank.apply_test(images, model)?;
            Ok(test
                .logits
                .axis_iter(Axis(0))
                .map(argmax_row)
                .collect())
        }
        SelectionStrategy::Traversal => Ok(traversal_select(model, bank, images)?.0),
        SelectionStrategy::OracleLabel => {
            let labels = true_labels.ok_or_else(|| {
                PapError::Validation(
                    "oracle_label selection needs ground-truth labels".into(),
                )
            })?;
            let prompted = bank.apply(images, labels)?;
            model.predict(&prompted)
        }
        SelectionStrategy::RandomLabel => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..images.dim().0)
                .map(|_| rng.gen_range(0..bank.num_classes))
                .collect();
            let prompted = bank.apply(images, &labels)?;
            model.predict(&prompted)
        }
    }
}

/// Traverse all classes' prompts: for class `i`, prompt every image with
/// class `i` and record the model's class-`i` logit on it; predict the
/// class with the largest such diagonal score (ties go to the lowest
/// index). Returns the predictions and, for each image, the prompted
/// version under its winning class. Exactly `c` model calls.
pub fn traversal_select<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    images: &Array4<F>,
) -> Result<(Vec<usize>, Array4<F>)> {
    let n = images.dim().0;
    let c = bank.num_classes;
    if n == 0 {
        return Err(PapError::Validation("traversal over zero images".into()));
    }
    let mut best_score: Vec<f64> = vec![f64::NEG_INFINITY; n];
    let mut best_class: Vec<usize> = vec![0; n];
    let mut best_images = Array4::<F>::zeros(images.dim());
    for class in 0..c {
        let labels = vec![class; n];
        let prompted = bank.apply(images, &labels)?;
        let logits = model.forward(&prompted)?;
        if logits.dim().1 != c {
            return Err(PapError::Validation(format!(
                "model produced {} logits but the bank has {c} classes",
                logits.dim().1
            )));
        }
        for i in 0..n {
            let score = logits[[i, class]].f64();
            // Strict inequality keeps ties at the lowest class index.
            if score > best_score[i] {
                best_score[i] = score;
                best_class[i] = class;
                best_images
                    .index_axis_mut(Axis(0), i)
                    .assign(&prompted.index_axis(Axis(0), i));
            }
        }
    }
    Ok((best_class, best_images))
}

fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    correct as f64 / labels.len() as f64
}

/// Evaluate natural and per-attack robust accuracy under one selection
/// strategy. Attack names are resolved through the registry; an unknown
/// name is a configuration error.
#[allow(clippy::too_many_arguments)]
pub fn evaluate<F: Real>(
    model: &dyn Classifier<F>,
    bank: &PromptBank<F>,
    images: &Array4<F>,
    labels: &[usize],
    registry: &AttackRegistry<F>,
    attack_names: &[String],
    strategy: SelectionStrategy,
    seed: u64,
) -> Result<EvalReport> {
    let start = std::time::Instant::now();
    let n = images.dim().0;
    if labels.len() != n {
        return Err(PapError::Validation(format!(
            "{} labels for {n} images",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(PapError::Data("evaluation set is empty".into()));
    }

    let natural_pred =
        predict_with_strategy(model, bank, images, Some(labels), strategy, seed)?;
    let natural_accuracy = accuracy(&natural_pred, labels);

    let mut robust_accuracy = BTreeMap::new();
    for name in attack_names {
        let adv = registry.run(name, model, images, labels)?;
        let pred = predict_with_strategy(model, bank, &adv, Some(labels), strategy, seed)?;
        robust_accuracy.insert(name.clone(), accuracy(&pred, labels));
    }

    Ok(EvalReport {
        natural_accuracy,
        robust_accuracy,
        selection_strategy: strategy,
        model_calls_per_image: strategy.model_calls_per_image(bank.num_classes),
        weight_used: bank.weight.f64(),
        timing_s: start.elapsed().as_secs_f64(),
        dataset_digest: digest_parts(images, labels),
        examples: n,
    })
}

/// Accuracies of the raw (unprompted) model on the four spectrum-swap
/// conditions. `adv_all` feeds the adversarial images through unchanged;
/// the other three rebuild them with the natural image's phase, amplitude,
/// or both swapped in before classification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwapTable {
    pub adv_all: f64,
    pub nat_phase: f64,
    pub nat_amplitude: f64,
    pub nat_both: f64,
}

/// Craft adversarial examples with `attack` (against the raw model) and
/// measure accuracy under each spectrum-swap condition.
pub fn spectrum_swap_diagnostic<F: Real>(
    model: &dyn Classifier<F>,
    images: &Array4<F>,
    labels: &[usize],
    attack: &AttackConfig,
) -> Result<SwapTable> {
    let adv = pgd(model, images, labels, attack)?;

    let mut acc = [0.0f64; 4];
    let conditions = [
        SwapComponent::None,
        SwapComponent::Phase,
        SwapComponent::Amplitude,
        SwapComponent::Both,
    ];
    for (k, &cond) in conditions.iter().enumerate() {
        // Swapping nothing is the identity; skip the spectral round trip so
        // the Adv.All column is computed on the exact attack output.
        let rebuilt = match cond {
            SwapComponent::None => adv.clone(),
            _ => clamp01(&swap_spectra(&adv, images, cond)?),
        };
        let pred = model.predict(&rebuilt)?;
        acc[k] = accuracy(&pred, labels);
    }
    Ok(SwapTable {
        adv_all: acc[0],
        nat_phase: acc[1],
        nat_amplitude: acc[2],
        nat_both: acc[3],
    })
}

/// Classifier wrapper that counts forward passes (including the forward
/// implied by a gradient computation). Used to pin down per-image model
/// call counts.
pub struct CallCountingClassifier<'a, F: Real> {
    inner: &'a dyn Classifier<F>,
    forwards: Cell<usize>,
}

impl<'a, F: Real> CallCountingClassifier<'a, F> {
    pub fn new(inner: &'a dyn Classifier<F>) -> Self {
        CallCountingClassifier {
            inner,
            forwards: Cell::new(0),
        }
    }

    /// Number of batch-level forward passes since construction or reset.
    pub fn forward_count(&self) -> usize {
        self.forwards.get()
    }

    pub fn reset(&self) {
        self.forwards.set(0);
    }
}

impl<'a, F: Real> Classifier<F> for CallCountingClassifier<'a, F> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn input_shape(&self) -> (usize, usize, usize) {
        self.inner.input_shape()
    }
    fn forward(&self, images: &Array4<F>) -> Result<Array2<F>> {
        self.forwards.set(self.forwards.get() + 1);
        self.inner.forward(images)
    }
    fn input_gradient(
        &self,
        images: &Array4<F>,
        grad_logits: &dyn Fn(&Array2<F>) -> Array2<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        self.forwards.set(self.forwards.get() + 1);
        self.inner.input_gradient(images, grad_logits)
    }
    fn param_digest(&self) -> String {
        self.inner.param_digest()
    }
}

// ---- report artifacts ----

/// Render a horizontal bar chart of labeled fractions (0 to 1) as a
/// self-contained SVG document.
pub fn render_accuracy_bars(title: &str, entries: &[(String, f64)]) -> String {
    let bar_h = 28;
    let gap = 12;
    let left = 170;
    let scale = 420.0;
    let top = 46;
    let height = top + entries.len() * (bar_h + gap) + 20;
    let width = left + scale as usize + 90;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(&format!(
        "  <text x=\"12\" y=\"24\" font-size=\"16\" font-weight=\"bold\">{}</text>\n",
        xml_escape(title)
    ));
    for (k, (label, value)) in entries.iter().enumerate() {
        let v = value.clamp(0.0, 1.0);
        let y = top + k * (bar_h + gap);
        let w = (v * scale).round() as usize;
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"end\">{}</text>\n",
            left - 8,
            y + bar_h / 2 + 4,
            xml_escape(label)
        ));
        svg.push_str(&format!(
            "  <rect x=\"{left}\" y=\"{y}\" width=\"{}\" height=\"{bar_h}\" fill=\"#4878a8\"/>\n",
            scale as usize
        ));
        svg.push_str(&format!(
            "  <rect x=\"{left}\" y=\"{y}\" width=\"{w}\" height=\"{bar_h}\" fill=\"#e8a33d\"/>\n"
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"13\">{:.1}%</text>\n",
            left + scale as usize + 8,
            y + bar_h / 2 + 4,
            v * 100.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Render the amplitude-weight trajectory as an SVG line chart.
pub fn render_weight_trajectory(trajectory: &[f64]) -> String {
    let width = 640usize;
    let height = 320usize;
    let margin = 48.0;
    let plot_w = width as f64 - 2.0 * margin;
    let plot_h = height as f64 - 2.0 * margin;
    let max_w = trajectory
        .iter()
        .copied()
        .fold(1e-9f64, f64::max)
        .max(1e-9);
    let n = trajectory.len().max(2);
    let mut points = String::new();
    for (k, &w) in trajectory.iter().enumerate() {
        let x = margin + plot_w * k as f64 / (n - 1) as f64;
        let y = height as f64 - margin - plot_h * (w / max_w).clamp(0.0, 1.0);
        if k > 0 {
            points.push(' ');
        }
        points.push_str(&format!("{x:.1},{y:.1}"));
    }
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    ));
    svg.push_str(
        "  <text x=\"12\" y=\"24\" font-size=\"16\" font-weight=\"bold\">Amplitude-prompt weight over updates</text>\n",
    );
    svg.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#444\"/>\n  <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#444\"/>\n",
        m = margin,
        b = height as f64 - margin,
        r = width as f64 - margin,
        t = margin
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{max_w:.3}</text>\n",
        margin - 6.0,
        margin + 4.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">0</text>\n",
        margin - 6.0,
        height as f64 - margin + 4.0
    ));
    if trajectory.len() == 1 {
        // A single point: draw it as a dot.
        let y = height as f64 - margin - plot_h * (trajectory[0] / max_w).clamp(0.0, 1.0);
        svg.push_str(&format!(
            "  <circle cx=\"{margin}\" cy=\"{y:.1}\" r=\"4\" fill=\"#4878a8\"/>\n"
        ));
    } else {
        svg.push_str(&format!(
            "  <polyline points=\"{points}\" fill=\"none\" stroke=\"#4878a8\" stroke-width=\"2\"/>\n"
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Write the report as JSON plus the two SVG charts into `dir`.
pub fn write_report_artifacts<F: Real>(
    report: &EvalReport,
    bank: &PromptBank<F>,
    dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report)?;
    std::fs::write(dir.join("report.json"), json)?;

    let mut entries = vec![("natural".to_string(), report.natural_accuracy)];
    for (name, acc) in &report.robust_accuracy {
        entries.push((name.clone(), *acc));
    }
    std::fs::write(
        dir.join("accuracy.svg"),
        render_accuracy_bars("Accuracy by condition", &entries),
    )?;
    std::fs::write(
        dir.join("weight_trajectory.svg"),
        render_weight_trajectory(&bank.provenance.weight_trajectory),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Norm;
    use crate::model::cnn::ReferenceCnn;
    use rand_chacha::rand_core::SeedableRng;

    fn stub_images(n: usize, seed: u64) -> (Array4<f32>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_fn((n, 1, 8, 8), |_| rng.gen_range(0.1..0.9f32));
        let labels = (0..n).map(|i| i % 3).collect();
        (images, labels)
    }

    fn eps0_attack() -> AttackConfig {
        AttackConfig {
            norm: Norm::Linf,
            epsilon: 0.0,
            steps: 0,
            step_size: 0.0,
            random_start: false,
            seed: 0,
        }
    }

    fn registry_with(name: &str, cfg: AttackConfig) -> AttackRegistry<f32> {
        let mut reg = AttackRegistry::new();
        reg.register(name, Box::new(move |m, x, y| pgd(m, x, y, &cfg)))
            .unwrap();
        reg
    }

    #[test]
    fn zero_bank_natural_accuracy_equals_raw_model_accuracy_exactly() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 31).unwrap();
        let (images, labels) = stub_images(24, 32);
        let bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        let raw_pred = model.predict(&images).unwrap();
        let raw_acc = accuracy(&raw_pred, &labels);
        for strategy in [
            SelectionStrategy::PredictedLabel,
            SelectionStrategy::OracleLabel,
            SelectionStrategy::RandomLabel,
        ] {
            let report = evaluate(
                &model,
                &bank,
                &images,
                &labels,
                &AttackRegistry::new(),
                &[],
                strategy,
                5,
            )
            .unwrap();
            assert_eq!(report.natural_accuracy, raw_acc, "{strategy:?}");
            assert!(report.robust_accuracy.is_empty());
        }
    }

    #[test]
    fn correct_single_example_with_zero_epsilon_attack_scores_one() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 33).unwrap();
        let (images, _) = stub_images(1, 34);
        // Use the model's own prediction as the label so it is correct.
        let labels = model.predict(&images).unwrap();
        let bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        let reg = registry_with("pgd-eps0", eps0_attack());
        let report = evaluate(
            &model,
            &bank,
            &images,
            &labels,
            &reg,
            &["pgd-eps0".to_string()],
            SelectionStrategy::PredictedLabel,
            5,
        )
        .unwrap();
        assert_eq!(report.natural_accuracy, 1.0);
        assert_eq!(report.robust_accuracy["pgd-eps0"], 1.0);
    }

    #[test]
    fn unknown_attack_name_is_a_config_error() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 35).unwrap();
        let (images, labels) = stub_images(4, 36);
        let bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        let err = evaluate(
            &model,
            &bank,
            &images,
            &labels,
            &AttackRegistry::new(),
            &["autoattack".to_string()],
            SelectionStrategy::PredictedLabel,
            5,
        );
        match err {
            Err(PapError::Config(msg)) => assert!(msg.contains("autoattack")),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    /// Stub whose logits depend only on whether the image is saturated to
    /// all-ones at evaluation time — used to force traversal outcomes.
    struct MarkerModel {
        saturated_logits: Vec<f32>,
        plain_logits: Vec<f32>,
    }

    impl Classifier<f32> for MarkerModel {
        fn num_classes(&self) -> usize {
            self.plain_logits.len()
        }
        fn input_shape(&self) -> (usize, usize, usize) {
            (1, 8, 8)
        }
        fn forward(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
            let n = images.dim().0;
            let c = self.plain_logits.len();
            let mut logits = Array2::zeros((n, c));
            for i in 0..n {
                let mean = images
                    .index_axis(Axis(0), i)
                    .iter()
                    .copied()
                    .sum::<f32>()
                    / 64.0;
                let row = if mean > 0.99 {
                    &self.saturated_logits
                } else {
                    &self.plain_logits
                };
                for (j, &v) in row.iter().enumerate() {
                    logits[[i, j]] = v;
                }
            }
            Ok(logits)
        }
        fn input_gradient(
            &self,
            _images: &Array4<f32>,
            _grad_logits: &dyn Fn(&Array2<f32>) -> Array2<f32>,
        ) -> Result<(Array2<f32>, Array4<f32>)> {
            unreachable!("traversal never differentiates")
        }
        fn param_digest(&self) -> String {
            "marker".into()
        }
    }

    /// A bank whose class-`j` amplitude prompt drives every pixel to the
    /// clamp ceiling (huge DC boost); other classes' prompts are zero.
    fn saturating_bank(c: usize, j: usize) -> PromptBank<f32> {
        let mut bank = PromptBank::<f32>::zeros(c, (1, 8, 8));
        bank.amplitude[[j, 0, 0, 0]] = 1e9;
        bank
    }

    #[test]
    fn traversal_with_single_class_always_predicts_zero() {
        let model = MarkerModel {
            saturated_logits: vec![0.5],
            plain_logits: vec![0.5],
        };
        let bank = PromptBank::<f32>::zeros(1, (1, 8, 8));
        let (images, _) = stub_images(5, 37);
        let (pred, _) = traversal_select(&model, &bank, &images).unwrap();
        assert_eq!(pred, vec![0; 5]);
    }

    #[test]
    fn traversal_follows_a_forced_winner() {
        // Class 1's prompt saturates the image; the model gives saturated
        // inputs a huge class-1 logit. Traversal must pick 1 everywhere.
        let model = MarkerModel {
            saturated_logits: vec![0.0, 100.0, 0.0],
            plain_logits: vec![1.0, 1.0, 1.0],
        };
        let bank = saturating_bank(3, 1);
        let (images, _) = stub_images(6, 38);
        let (pred, prompted) = traversal_select(&model, &bank, &images).unwrap();
        assert_eq!(pred, vec![1; 6]);
        // The returned prompted images are the winning (saturated) ones.
        assert!(prompted.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn traversal_matches_hand_evaluated_two_class_table() {
        // Class 0's prompt saturates; class 1's leaves the image alone.
        // Diagonal scores are h0(saturated) and h1(plain):
        //   case A: h0(sat)=2, h1(plain)=3  -> predict 1
        //   case B: h0(sat)=5, h1(plain)=3  -> predict 0
        //   case C: h0(sat)=3, h1(plain)=3  -> tie, lowest index -> 0
        let bank = saturating_bank(2, 0);
        let (images, _) = stub_images(4, 39);
        for (sat0, plain1, expect) in [(2.0, 3.0, 1usize), (5.0, 3.0, 0), (3.0, 3.0, 0)] {
            let model = MarkerModel {
                saturated_logits: vec![sat0, -9.0],
                plain_logits: vec![-9.0, plain1],
            };
            let (pred, _) = traversal_select(&model, &bank, &images).unwrap();
            assert_eq!(pred, vec![expect; 4], "sat0={sat0} plain1={plain1}");
        }
    }

    #[test]
    fn call_counts_are_two_for_predicted_and_c_for_traversal() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 4, 40).unwrap();
        let counting = CallCountingClassifier::new(&model);
        let bank = PromptBank::<f32>::zeros(4, (1, 8, 8));
        let (images, labels) = stub_images(6, 41);

        predict_with_strategy(
            &counting,
            &bank,
            &images,
            Some(&labels),
            SelectionStrategy::PredictedLabel,
            5,
        )
        .unwrap();
        assert_eq!(counting.forward_count(), 2);

        counting.reset();
        predict_with_strategy(
            &counting,
            &bank,
            &images,
            Some(&labels),
            SelectionStrategy::Traversal,
            5,
        )
        .unwrap();
        assert_eq!(counting.forward_count(), 4);

        counting.reset();
        predict_with_strategy(
            &counting,
            &bank,
            &images,
            Some(&labels),
            SelectionStrategy::OracleLabel,
            5,
        )
        .unwrap();
        assert_eq!(counting.forward_count(), 1);

        assert_eq!(
            SelectionStrategy::PredictedLabel.model_calls_per_image(4),
            2
        );
        assert_eq!(SelectionStrategy::Traversal.model_calls_per_image(4), 4);
    }

    #[test]
    fn oracle_needs_labels() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 42).unwrap();
        let bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        let (images, _) = stub_images(2, 43);
        assert!(matches!(
            predict_with_strategy(
                &model,
                &bank,
                &images,
                None,
                SelectionStrategy::OracleLabel,
                5
            ),
            Err(PapError::Validation(_))
        ));
    }

    #[test]
    fn swap_table_endpoints_match_plain_accuracies() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 44).unwrap();
        let (images, labels) = stub_images(16, 45);
        let attack = AttackConfig {
            norm: Norm::Linf,
            epsilon: 8.0 / 255.0,
            steps: 4,
            step_size: 2.0 / 255.0,
            random_start: true,
            seed: 9,
        };
        let table = spectrum_swap_diagnostic(&model, &images, &labels, &attack).unwrap();

        // Adv.All equals plain robust accuracy (same attack, same seed).
        let adv = pgd(&model, &images, &labels, &attack).unwrap();
        let robust = accuracy(&model.predict(&adv).unwrap(), &labels);
        assert_eq!(table.adv_all, robust);

        // Nat.Both reconstructs the natural image: clean accuracy within
        // 0.1 percentage point.
        let clean = accuracy(&model.predict(&images).unwrap(), &labels);
        assert!(
            (table.nat_both - clean).abs() <= 0.001,
            "nat_both {} vs clean {clean}",
            table.nat_both
        );
        for v in [table.adv_all, table.nat_phase, table.nat_amplitude, table.nat_both] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn reports_are_deterministic_and_serializable() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 46).unwrap();
        let (images, labels) = stub_images(10, 47);
        let mut bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        let mut rng = ChaCha8Rng::seed_from_u64(48);
        bank.phase.mapv_inplace(|_| rng.gen_range(-0.2..0.2));
        let cfg = AttackConfig {
            norm: Norm::L2,
            epsilon: 0.5,
            steps: 3,
            step_size: 0.25,
            random_start: true,
            seed: 10,
        };
        let run = || {
            let reg = registry_with("pgd-l2", cfg.clone());
            evaluate(
                &model,
                &bank,
                &images,
                &labels,
                &reg,
                &["pgd-l2".to_string()],
                SelectionStrategy::Traversal,
                5,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.natural_accuracy, b.natural_accuracy);
        assert_eq!(a.robust_accuracy, b.robust_accuracy);
        assert_eq!(a.dataset_digest, b.dataset_digest);
        assert_eq!(a.model_calls_per_image, 3);
        let json = serde_json::to_string(&a).unwrap();
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.robust_accuracy, a.robust_accuracy);
        assert_eq!(back.selection_strategy, SelectionStrategy::Traversal);
    }

    #[test]
    fn report_artifacts_are_written_and_well_formed() {
        let model = ReferenceCnn::<f32>::build((1, 8, 8), 3, 49).unwrap();
        let (images, labels) = stub_images(6, 50);
        let mut bank = PromptBank::<f32>::zeros(3, (1, 8, 8));
        bank.provenance.weight_trajectory = vec![1.0, 0.8, 0.4, 0.55];
        let report = evaluate(
            &model,
            &bank,
            &images,
            &labels,
            &AttackRegistry::new(),
            &[],
            SelectionStrategy::PredictedLabel,
            5,
        )
        .unwrap();
        let dir = std::env::temp_dir().join(format!("pap-eval-{}", std::process::id()));
        write_report_artifacts(&report, &bank, &dir).unwrap();
        let json = std::fs::read_to_string(dir.join("report.json")).unwrap();
        assert!(json.contains("natural_accuracy"));
        for name in ["accuracy.svg", "weight_trajectory.svg"] {
            let svg = std::fs::read_to_string(dir.join(name)).unwrap();
            assert!(svg.starts_with("<svg "), "{name} is not an svg");
            assert!(svg.trim_end().ends_with("</svg>"), "{name} unterminated");
        }
        std::fs::remove_dir_all(&dir).ok();
        // Chart renderers tolerate edge inputs.
        let one = render_weight_trajectory(&[1.0]);
        assert!(one.contains("circle"));
        let esc = render_accuracy_bars("a<b&c", &[("x\"y".into(), 0.5)]);
        assert!(esc.contains("a&lt;b&amp;c") && esc.contains("x&quot;y"));
    }
}
