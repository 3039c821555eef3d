//! Adaptive weighting of the amplitude prompts.
//!
//! The amplitude-prompt weight `w` is not learned by gradient descent.
//! Instead it is rescaled periodically by the ratio of two robust-accuracy
//! counts measured on the epoch's adversarial batches:
//!
//! * `amp_correct` — correct predictions on images rebuilt with only the
//!   amplitude prompt added (`F⁻¹(phase, amplitude + w·p_amp[y])`);
//! * `phase_correct` — correct predictions on images rebuilt with only the
//!   phase prompt added (`F⁻¹(phase + p_phase[y], amplitude)`).
//!
//! The update is `w ← w · amp_correct / phase_correct`, clamped below at
//! [`WEIGHT_FLOOR`]; a zero denominator skips the update and flags the
//! record. Updates fire on a fixed epoch period (every 5 epochs by
//! default), and every applied or skipped update appends a
//! [`WeightUpdateRecord`] so the whole trajectory can be replayed from the
//! recorded counts.

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::error::{PapError, Result};
use crate::model::Classifier;
use crate::num::Real;
use crate::prompt::PromptBank;

/// Multiplicative updates can never reach zero; this floor keeps `w`
/// strictly positive and finite.
pub const WEIGHT_FLOOR: f64 = 1e-6;

/// Weights below this are reported as exactly 0 in human-facing summaries.
pub const WEIGHT_REPORT_ZERO_BELOW: f64 = 1e-3;

/// Round a weight for display: values that have collapsed below
/// [`WEIGHT_REPORT_ZERO_BELOW`] read as 0.
pub fn display_weight(w: f64) -> f64 {
    if w < WEIGHT_REPORT_ZERO_BELOW {
        0.0
    } else {
        w
    }
}

/// How many epochs between weight updates.
pub const DEFAULT_UPDATE_PERIOD: usize = 5;

/// True iff a weight update fires at the end of `epoch` (1-based) under the
/// given period.
pub fn schedule_should_update(epoch: usize, period: usize) -> bool {
    assert!(epoch >= 1 && period >= 1, "epoch and period are 1-based");
    epoch % period == 0
}

/// One applied (or skipped) weight update. Append-only history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdateRecord {
    /// 1-based epoch after which the update fired.
    pub epoch: usize,
    /// Correct predictions on amplitude-only prompted adversarial images.
    pub amp_correct: u64,
    /// Correct predictions on phase-only prompted adversarial images.
    pub phase_correct: u64,
    /// Total examples counted.
    pub examples: u64,
    /// `amp_correct / phase_correct`; 1.0 by convention when skipped.
    pub ratio: f64,
    pub w_before: f64,
    pub w_after: f64,
    /// True when `phase_correct == 0` forced the update to be skipped.
    pub skipped_degenerate: bool,
}

/// Pure update arithmetic: from the counts, produce the new weight.
/// Kept separate from the counting so the trajectory can be replayed
/// exactly from recorded counts.
pub fn apply_ratio(w_before: f64, amp_correct: u64, phase_correct: u64) -> (f64, f64, bool) {
    if phase_correct == 0 {
        return (1.0, w_before, true);
    }
    let ratio = amp_correct as f64 / phase_correct as f64;
    let w_after = (w_before * ratio).max(WEIGHT_FLOOR);
    (ratio, w_after, false)
}

/// Recompute the final weight from an initial weight and the recorded
/// counts alone. Bit-for-bit equal to the live updates.
pub fn replay_trajectory(w0: f64, records: &[WeightUpdateRecord]) -> f64 {
    let mut w = w0;
    for r in records {
        let (_, w_after, _) = apply_ratio(w, r.amp_correct, r.phase_correct);
        w = w_after;
    }
    w
}

/// Accumulates the two robust-accuracy counts over an epoch's adversarial
/// batches, then applies the ratio update to the bank.
///
/// The single-component variants are built by cloning the bank and zeroing
/// the other prompt array, so "amplitude-only" and "phase-only" mean exactly
/// what the bank's own `apply` would do with the other component absent —
/// including the clamp to [0, 1] that precedes every model evaluation.
pub struct WeightUpdateAccumulator<F: Real> {
    phase_only: PromptBank<F>,
    amp_only: PromptBank<F>,
    amp_correct: u64,
    phase_correct: u64,
    examples: u64,
}

impl<F: Real> WeightUpdateAccumulator<F> {
    /// Snapshot the bank's current prompts and weight. Counts observed after
    /// this see the weight as it was here (`w_{t-1}` in the update rule),
    /// even if the bank changes later.
    pub fn new(bank: &PromptBank<F>) -> Self {
        let mut phase_only = bank.clone();
        phase_only.amplitude.fill(F::zero());
        let mut amp_only = bank.clone();
        amp_only.phase.fill(F::zero());
        WeightUpdateAccumulator {
            phase_only,
            amp_only,
            amp_correct: 0,
            phase_correct: 0,
            examples: 0,
        }
    }

    /// Count correct predictions on both single-component variants of one
    /// adversarial batch. Amplitude-only is evaluated first, then
    /// phase-only.
    pub fn observe(
        &mut self,
        model: &dyn Classifier<F>,
        adv_images: &Array4<F>,
        labels: &[usize],
    ) -> Result<()> {
        if adv_images.dim().0 == 0 {
            return Err(PapError::Validation(
                "weight update batch has no examples".into(),
            ));
        }
        let amp_images = self.amp_only.apply(adv_images, labels)?;
        let amp_pred = model.predict(&amp_images)?;
        let phase_images = self.phase_only.apply(adv_images, labels)?;
        let phase_pred = model.predict(&phase_images)?;
        for (i, &y) in labels.iter().enumerate() {
            if amp_pred[i] == y {
                self.amp_correct += 1;
            }
            if phase_pred[i] == y {
                self.phase_correct += 1;
            }
        }
        self.examples += labels.len() as u64;
        Ok(())
    }

    pub fn counts(&self) -> (u64, u64, u64) {
        (self.amp_correct, self.phase_correct, self.examples)
    }

    /// Apply the ratio update to `bank` and append the new weight to its
    /// provenance trajectory. The multiplicative chain is carried in f64
    /// through the trajectory; the bank's working weight is that value
    /// narrowed to the bank's element type.
    pub fn finalize(self, epoch: usize, bank: &mut PromptBank<F>) -> Result<WeightUpdateRecord> {
        if self.examples == 0 {
            return Err(PapError::Validation(
                "weight update saw no examples".into(),
            ));
        }
        let w_before = bank
            .provenance
            .weight_trajectory
            .last()
            .copied()
            .unwrap_or_else(|| bank.weight.f64());
        let (ratio, w_after, skipped_degenerate) =
            apply_ratio(w_before, self.amp_correct, self.phase_correct);
        if !skipped_degenerate {
            bank.weight = F::of(w_after);
            bank.provenance.weight_trajectory.push(w_after);
        }
        Ok(WeightUpdateRecord {
            epoch,
            amp_correct: self.amp_correct,
            phase_correct: self.phase_correct,
            examples: self.examples,
            ratio,
            w_before,
            w_after,
            skipped_degenerate,
        })
    }
}

/// One-shot update over a stream of adversarial batches: count both
/// single-component accuracies, then rescale the bank's weight.
pub fn update_weight<'a, F, I>(
    model: &dyn Classifier<F>,
    bank: &mut PromptBank<F>,
    epoch: usize,
    batches: I,
) -> Result<(f64, WeightUpdateRecord)>
where
    F: Real,
    I: IntoIterator<Item = (&'a Array4<F>, &'a [usize])>,
{
    let mut acc = WeightUpdateAccumulator::new(bank);
    for (images, labels) in batches {
        acc.observe(model, images, labels)?;
    }
    let record = acc.finalize(epoch, bank)?;
    Ok((record.w_after, record))
}
