//! Core library of the phase/amplitude visual-prompting defense: spectral
//! transforms, the prompt bank, training objective, amplitude-weight
//! scheduler, attacks, trainer, evaluator, reference model, and the
//! deterministic shape dataset.

pub mod attack;
pub mod bytes;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod num;
pub mod objective;
pub mod prompt;
pub mod seeds;
pub mod spectral;
pub mod train;
pub mod weighting;

pub use error::{PapError, Result};
pub use num::Real;
