//! The trained artifact of the defense: per-class phase and amplitude
//! prompts with a scalar amplitude weight, plus initialization from natural
//! examples, differentiable application, test-time application, and lossless
//! persistence.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bytes::{array4_from_le_bytes, array_to_le_bytes, sha256_hex};
use crate::error::{PapError, Result};
use crate::model::Classifier;
use crate::num::Real;
use crate::spectral::{
    decompose, decompose_backward, recompose, recompose_backward, Spectrum, DFT_CONVENTION,
};

pub const BANK_FORMAT_VERSION: u32 = 1;
const PHASE_FILE: &str = "phase.bin";
const AMPLITUDE_FILE: &str = "amplitude.bin";
const MANIFEST_FILE: &str = "manifest.json";

/// Training provenance carried inside the bank.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub seed: u64,
    pub config_digest: String,
    pub epochs: usize,
    /// Value of the amplitude weight after initialization and after every
    /// scheduled update; the last entry always equals the bank's weight.
    pub weight_trajectory: Vec<f64>,
}

/// Per-class spectral prompts. `phase` and `amplitude` are c×C×H×W; class y's
/// prompts are the slices at index y.
#[derive(Debug, Clone)]
pub struct PromptBank<F: Real = f32> {
    pub phase: Array4<F>,
    pub amplitude: Array4<F>,
    pub weight: F,
    pub num_classes: usize,
    pub image_shape: (usize, usize, usize),
    pub provenance: Provenance,
}

/// Intermediates of one differentiable application, consumed by
/// `apply_backward`.
pub struct ApplyCache<F: Real> {
    pub input_spectrum: Spectrum<F>,
    pub prompted_spectrum: Spectrum<F>,
    pub labels: Vec<usize>,
    /// Unclamped recomposition — the in-graph training output.
    pub output: Array4<F>,
}

/// Gradients produced by `apply_backward`.
pub struct PromptGrads<F: Real> {
    /// dL/d(phase prompts), c×C×H×W, accumulated over the batch.
    pub phase: Array4<F>,
    /// dL/d(amplitude prompts), c×C×H×W (includes the factor w).
    pub amplitude: Array4<F>,
    /// dL/d(images), present when requested.
    pub images: Option<Array4<F>>,
}

/// Result of test-time application: exactly two model calls happen inside.
pub struct TestApplication<F: Real> {
    pub prompted: Array4<F>,
    /// Label used to select prompts for each image (Eq.-9-style selection).
    pub selected: Vec<usize>,
    /// Model logits on the prompted images — the final prediction basis.
    pub logits: Array2<F>,
}

impl<F: Real> PromptBank<F> {
    /// All-zero prompts with weight 1 (prompting is then the identity).
    pub fn zeros(num_classes: usize, image_shape: (usize, usize, usize)) -> Self {
        let (c, h, w) = image_shape;
        PromptBank {
            phase: Array4::zeros((num_classes, c, h, w)),
            amplitude: Array4::zeros((num_classes, c, h, w)),
            weight: F::one(),
            num_classes,
            image_shape,
            provenance: Provenance {
                seed: 0,
                config_digest: String::new(),
                epochs: 0,
                weight_trajectory: vec![1.0],
            },
        }
    }

    /// Initialize prompts from one uniformly sampled natural example per
    /// class: its decomposed spectra become that class's initial prompts.
    pub fn init_from_examples(
        images: &Array4<F>,
        labels: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let (n, c, h, w) = images.dim();
        if labels.len() != n {
            return Err(PapError::Validation(format!(
                "{} labels for {n} images",
                labels.len()
            )));
        }
        if num_classes == 0 {
            return Err(PapError::Validation("num_classes must be positive".into()));
        }
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            if y >= num_classes {
                return Err(PapError::Validation(format!(
                    "label {y} out of range for {num_classes} classes"
                )));
            }
            by_class[y].push(i);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut phase = Array4::zeros((num_classes, c, h, w));
        let mut amplitude = Array4::zeros((num_classes, c, h, w));
        for (y, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                return Err(PapError::Data(format!(
                    "class {y} has no examples to initialize from"
                )));
            }
            let pick = members[rng.gen_range(0..members.len())];
            let one = images
                .slice(s![pick..pick + 1, .., .., ..])
                .to_owned();
            let spec = decompose(&one)?;
            phase.slice_mut(s![y, .., .., ..]).assign(&spec.phase.slice(s![0, .., .., ..]));
            amplitude
                .slice_mut(s![y, .., .., ..])
                .assign(&spec.amplitude.slice(s![0, .., .., ..]));
        }
        Ok(PromptBank {
            phase,
            amplitude,
            weight: F::one(),
            num_classes,
            image_shape: (c, h, w),
            provenance: Provenance {
                seed,
                config_digest: String::new(),
                epochs: 0,
                weight_trajectory: vec![1.0],
            },
        })
    }

    pub fn is_zero(&self) -> bool {
        self.phase.iter().all(|v| *v == F::zero())
            && self.amplitude.iter().all(|v| *v == F::zero())
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return Err(PapError::Validation(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(PapError::Validation(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        Ok(())
    }

    fn check_images(&self, images: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if (c, h, w) != self.image_shape {
            return Err(PapError::Validation(format!(
                "image shape ({c},{h},{w}) does not match bank shape {:?}",
                self.image_shape
            )));
        }
        Ok(())
    }

    /// Differentiable application: decompose, add the label's prompts
    /// (amplitude offsets scaled by the bank weight), recompose. The cached
    /// output is unclamped; evaluation paths clamp it afterwards.
    pub fn apply_forward(&self, images: &Array4<F>, labels: &[usize]) -> Result<ApplyCache<F>> {
        self.check_images(images)?;
        let n = images.dim().0;
        self.check_labels(n, labels)?;

        let input_spectrum = decompose(images)?;
        let mut phase = input_spectrum.phase.clone();
        let mut amplitude = input_spectrum.amplitude.clone();
        for (i, &y) in labels.iter().enumerate() {
            let mut ph = phase.slice_mut(s![i, .., .., ..]);
            ph.zip_mut_with(&self.phase.slice(s![y, .., .., ..]), |a, &p| *a = *a + p);
            let mut am = amplitude.slice_mut(s![i, .., .., ..]);
            am.zip_mut_with(&self.amplitude.slice(s![y, .., .., ..]), |a, &p| {
                *a = *a + self.weight * p
            });
        }
        let prompted_spectrum = Spectrum { phase, amplitude };
        let output = recompose(&prompted_spectrum)?;
        Ok(ApplyCache {
            input_spectrum,
            prompted_spectrum,
            labels: labels.to_vec(),
            output,
        })
    }

    /// Prompted images clamped to the valid pixel box — the evaluation-time
    /// output.
    pub fn apply(&self, images: &Array4<F>, labels: &[usize]) -> Result<Array4<F>> {
        // Adding all-zero prompts leaves every spectrum unchanged, so the
        // transform is the identity; taking the shortcut avoids the tiny
        // round-trip noise of an actual decompose/recompose cycle.
        if self.is_zero() {
            self.check_images(images)?;
            self.check_labels(images.dim().0, labels)?;
            return Ok(clamp01(images));
        }
        let cache = self.apply_forward(images, labels)?;
        Ok(clamp01(&cache.output))
    }

    /// Back-propagate dL/d(unclamped output) to the prompts and, when
    /// requested, to the input images.
    pub fn apply_backward(
        &self,
        cache: &ApplyCache<F>,
        grad_output: &Array4<F>,
        want_images: bool,
    ) -> Result<PromptGrads<F>> {
        let (dphase_spec, damp_spec) = recompose_backward(&cache.prompted_spectrum, grad_output)?;
        let (c, h, w) = self.image_shape;
        let mut dphase = Array4::zeros((self.num_classes, c, h, w));
        let mut damplitude = Array4::zeros((self.num_classes, c, h, w));
        for (i, &y) in cache.labels.iter().enumerate() {
            let mut dp = dphase.slice_mut(s![y, .., .., ..]);
            dp.zip_mut_with(&dphase_spec.slice(s![i, .., .., ..]), |a, &g| *a = *a + g);
            let mut da = damplitude.slice_mut(s![y, .., .., ..]);
            da.zip_mut_with(&damp_spec.slice(s![i, .., .., ..]), |acc, &g| {
                *acc = *acc + self.weight * g
            });
        }
        let images = if want_images {
            Some(decompose_backward(
                &cache.input_spectrum,
                &dphase_spec,
                &damp_spec,
            )?)
        } else {
            None
        };
        Ok(PromptGrads {
            phase: dphase,
            amplitude: damplitude,
            images,
        })
    }

    /// Test-time application: select prompts by the model's own prediction on
    /// the raw images, then re-classify the prompted images. Exactly two
    /// model calls.
    pub fn apply_test(
        &self,
        images: &Array4<F>,
        model: &dyn Classifier<F>,
    ) -> Result<TestApplication<F>> {
        self.check_images(images)?;
        let selected = model.predict(images)?;
        let prompted = self.apply(images, &selected)?;
        let logits = model.forward(&prompted)?;
        Ok(TestApplication {
            prompted,
            selected,
            logits,
        })
    }

    /// Write the bank as a directory: JSON manifest plus raw spectra blobs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if !self.weight.is_finite() || self.weight < F::zero() {
            return Err(PapError::Validation(format!(
                "bank weight {} is not a nonnegative finite value",
                self.weight
            )));
        }
        fs::create_dir_all(dir)?;
        let phase_bytes = array_to_le_bytes(&self.phase);
        let amp_bytes = array_to_le_bytes(&self.amplitude);
        let manifest = BankManifest {
            format_version: BANK_FORMAT_VERSION,
            num_classes: self.num_classes,
            image_shape: self.image_shape,
            weight: self.weight.f64(),
            dft_convention: DFT_CONVENTION.to_string(),
            seed: self.provenance.seed,
            config_digest: self.provenance.config_digest.clone(),
            epochs: self.provenance.epochs,
            weight_trajectory: self.provenance.weight_trajectory.clone(),
            checksums: Checksums {
                phase: sha256_hex(&phase_bytes),
                amplitude: sha256_hex(&amp_bytes),
            },
        };
        fs::write(dir.join(PHASE_FILE), &phase_bytes)?;
        fs::write(dir.join(AMPLITUDE_FILE), &amp_bytes)?;
        fs::write(
            dir.join(MANIFEST_FILE),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(())
    }
}

/// Load a bank saved by `save`; format version, shapes, and per-array
/// checksums are all verified before the arrays are accepted.
pub fn load_bank(dir: &Path) -> Result<PromptBank<f32>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| {
        PapError::Data(format!(
            "cannot read bank manifest {}: {e}",
            manifest_path.display()
        ))
    })?;
    let manifest: BankManifest = serde_json::from_str(&text)?;
    if manifest.format_version != BANK_FORMAT_VERSION {
        return Err(PapError::Format(format!(
            "unsupported bank format version {}",
            manifest.format_version
        )));
    }
    if manifest.dft_convention != DFT_CONVENTION {
        return Err(PapError::Format(format!(
            "bank uses transform convention {:?}, this build expects {:?}",
            manifest.dft_convention, DFT_CONVENTION
        )));
    }
    if !(manifest.weight.is_finite() && manifest.weight >= 0.0) {
        return Err(PapError::Format(format!(
            "bank weight {} is not a nonnegative finite value",
            manifest.weight
        )));
    }
    let (c, h, w) = manifest.image_shape;
    let shape = (manifest.num_classes, c, h, w);

    let phase_bytes = fs::read(dir.join(PHASE_FILE))
        .map_err(|e| PapError::Data(format!("cannot read {PHASE_FILE} in {}: {e}", dir.display())))?;
    let amp_bytes = fs::read(dir.join(AMPLITUDE_FILE)).map_err(|e| {
        PapError::Data(format!(
            "cannot read {AMPLITUDE_FILE} in {}: {e}",
            dir.display()
        ))
    })?;
    if sha256_hex(&phase_bytes) != manifest.checksums.phase {
        return Err(PapError::Format(format!(
            "{PHASE_FILE} does not match its manifest checksum"
        )));
    }
    if sha256_hex(&amp_bytes) != manifest.checksums.amplitude {
        return Err(PapError::Format(format!(
            "{AMPLITUDE_FILE} does not match its manifest checksum"
        )));
    }
    let phase = array4_from_le_bytes(&phase_bytes, shape)?;
    let amplitude = array4_from_le_bytes(&amp_bytes, shape)?;
    if let Some(last) = manifest.weight_trajectory.last() {
        // The weight is stored at f32 precision; compare there.
        if (*last as f32).to_bits() != (manifest.weight as f32).to_bits() {
            return Err(PapError::Format(
                "weight trajectory does not end at the bank weight".into(),
            ));
        }
    }
    Ok(PromptBank {
        phase,
        amplitude,
        weight: manifest.weight as f32,
        num_classes: manifest.num_classes,
        image_shape: manifest.image_shape,
        provenance: Provenance {
            seed: manifest.seed,
            config_digest: manifest.config_digest,
            epochs: manifest.epochs,
            weight_trajectory: manifest.weight_trajectory,
        },
    })
}

/// Clamp every pixel into [0,1].
pub fn clamp01<F: Real>(images: &Array4<F>) -> Array4<F> {
    images.mapv(|v| v.max(F::zero()).min(F::one()))
}

#[derive(Debug, Serialize, Deserialize)]
struct Checksums {
    phase: String,
    amplitude: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct BankManifest {
    format_version: u32,
    num_classes: usize,
    image_shape: (usize, usize, usize),
    weight: f64,
    dft_convention: String,
    seed: u64,
    config_digest: String,
    #[serde(default)]
    epochs: usize,
    weight_trajectory: Vec<f64>,
    checksums: Checksums,
}
