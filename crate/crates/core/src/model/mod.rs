//! The classifier contract consumed by attacks, the prompt trainer, and the
//! evaluator, together with the reference CNN, checkpointing, and backbone
//! pre-training.

pub mod checkpoint;
pub mod cnn;
pub mod layers;
pub mod pretrain;

use ndarray::{Array2, Array4};

use crate::error::Result;
use crate::num::Real;

/// A differentiable image classifier. `forward` must be deterministic in
/// eval mode, and input gradients must be exposed so attacks and prompt
/// training can differentiate through the model.
pub trait Classifier<F: Real = f32> {
    fn num_classes(&self) -> usize;

    /// (channels, height, width) of one input image.
    fn input_shape(&self) -> (usize, usize, usize);

    /// Logits, N × num_classes.
    fn forward(&self, images: &Array4<F>) -> Result<Array2<F>>;

    /// Run forward, obtain dL/dlogits from the callback, and back-propagate
    /// it to the input. Returns (logits, dL/dimages).
    fn input_gradient(
        &self,
        images: &Array4<F>,
        grad_logits: &dyn Fn(&Array2<F>) -> Array2<F>,
    ) -> Result<(Array2<F>, Array4<F>)>;

    /// Stable checksum of all parameters; unchanged digest ⇒ frozen model.
    fn param_digest(&self) -> String;

    /// Predicted class per image (argmax of logits, ties to lowest index).
    fn predict(&self, images: &Array4<F>) -> Result<Vec<usize>> {
        let logits = self.forward(images)?;
        Ok(logits
            .outer_iter()
            .map(|row| layers::argmax_row(row))
            .collect())
    }
}
