//! 2-D Fourier decomposition of image batches into phase and amplitude
//! spectra, recomposition back to images, the spectrum-swap diagnostic, and
//! the adjoints that carry gradients through both directions.
//!
//! Convention: unnormalized forward DFT, 1/(H·W)-normalized inverse, applied
//! per channel, no frequency centering. Recomposition keeps the real part and
//! discards any imaginary residue left by prompt addition.

use std::sync::Arc;

use ndarray::Array4;
use num_complex::Complex;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::error::{PapError, Result};
use crate::num::Real;

/// Identifier of the transform convention, recorded in artifact manifests so
/// results are comparable across implementations.
pub const DFT_CONVENTION: &str = "forward-unnormalized/inverse-1-over-hw/no-shift";

/// Amplitude bins below this are treated as zero when inverting the polar
/// parametrization (the phase gradient is undefined there).
const AMP_EPS: f64 = 1e-24;

/// Paired phase and amplitude spectra of an image batch, shape N×C×H×W each.
///
/// `decompose` produces amplitudes ≥ 0 and phases in (−π, π]; after prompt
/// addition both arrays may hold arbitrary real values.
#[derive(Debug, Clone)]
pub struct Spectrum<F: Real = f32> {
    pub phase: Array4<F>,
    pub amplitude: Array4<F>,
}

impl<F: Real> Spectrum<F> {
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.phase.dim()
    }

    fn check_consistent(&self) -> Result<()> {
        if self.phase.dim() != self.amplitude.dim() {
            return Err(PapError::Validation(format!(
                "phase shape {:?} does not match amplitude shape {:?}",
                self.phase.dim(),
                self.amplitude.dim()
            )));
        }
        Ok(())
    }
}

/// Planned 2-D FFT over row-major H×W complex buffers.
struct Fft2d<F: Real> {
    h: usize,
    w: usize,
    row_fft: Arc<dyn Fft<F>>,
    col_fft: Arc<dyn Fft<F>>,
    scratch: Vec<Complex<F>>,
    transposed: Vec<Complex<F>>,
}

impl<F: Real> Fft2d<F> {
    fn new(h: usize, w: usize, direction: FftDirection) -> Self {
        let mut planner = FftPlanner::new();
        let row_fft = planner.plan_fft(w, direction);
        let col_fft = planner.plan_fft(h, direction);
        let scratch_len = row_fft
            .get_inplace_scratch_len()
            .max(col_fft.get_inplace_scratch_len());
        Fft2d {
            h,
            w,
            row_fft,
            col_fft,
            scratch: vec![Complex::new(F::zero(), F::zero()); scratch_len],
            transposed: vec![Complex::new(F::zero(), F::zero()); h * w],
        }
    }

    /// In-place 2-D transform: FFT over rows, then over columns.
    fn process(&mut self, buf: &mut [Complex<F>]) {
        debug_assert_eq!(buf.len(), self.h * self.w);
        for row in buf.chunks_exact_mut(self.w) {
            self.row_fft.process_with_scratch(row, &mut self.scratch);
        }
        transpose(buf, &mut self.transposed, self.h, self.w);
        for col in self.transposed.chunks_exact_mut(self.h) {
            self.col_fft.process_with_scratch(col, &mut self.scratch);
        }
        transpose(&self.transposed, buf, self.w, self.h);
    }
}

/// Transpose an h×w row-major matrix into a w×h one.
fn transpose<T: Copy>(src: &[T], dst: &mut [T], h: usize, w: usize) {
    for i in 0..h {
        for j in 0..w {
            dst[j * h + i] = src[i * w + j];
        }
    }
}

fn contiguous<F: Real>(array: &Array4<F>) -> Vec<F> {
    array.iter().copied().collect()
}

/// Forward transform: split each channel of each image into phase and
/// amplitude spectra. Rejects non-finite inputs.
pub fn decompose<F: Real>(images: &Array4<F>) -> Result<Spectrum<F>> {
    let (n, c, h, w) = images.dim();
    if h == 0 || w == 0 {
        return Err(PapError::Validation(
            "image height and width must be at least 1".into(),
        ));
    }
    if images.iter().any(|v| !v.is_finite()) {
        return Err(PapError::Validation(
            "non-finite value in input images".into(),
        ));
    }

    let src = contiguous(images);
    let plane = h * w;
    let mut fft = Fft2d::new(h, w, FftDirection::Forward);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); plane];
    let mut phase = Vec::with_capacity(n * c * plane);
    let mut amplitude = Vec::with_capacity(n * c * plane);
    let pi = F::of(std::f64::consts::PI);

    for block in src.chunks_exact(plane) {
        for (dst, &v) in buf.iter_mut().zip(block) {
            *dst = Complex::new(v, F::zero());
        }
        fft.process(&mut buf);
        for z in &buf {
            let mut p = z.im.atan2(z.re);
            // atan2 ranges over [-pi, pi]; fold -pi onto pi so phases live in (-pi, pi].
            if p == -pi {
                p = pi;
            }
            phase.push(p);
            amplitude.push((z.re * z.re + z.im * z.im).sqrt());
        }
    }

    Ok(Spectrum {
        phase: Array4::from_shape_vec((n, c, h, w), phase).expect("shape matches fill order"),
        amplitude: Array4::from_shape_vec((n, c, h, w), amplitude)
            .expect("shape matches fill order"),
    })
}

/// Inverse transform: rebuild images from amplitude·e^{i·phase} per channel
/// and return the real part. Output is not clamped.
pub fn recompose<F: Real>(spectrum: &Spectrum<F>) -> Result<Array4<F>> {
    spectrum.check_consistent()?;
    let (n, c, h, w) = spectrum.shape();
    let plane = h * w;
    let norm = F::one() / F::of((h * w) as f64);

    let phase = contiguous(&spectrum.phase);
    let amplitude = contiguous(&spectrum.amplitude);
    let mut fft = Fft2d::new(h, w, FftDirection::Inverse);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); plane];
    let mut out = Vec::with_capacity(n * c * plane);

    for block in 0..n * c {
        let base = block * plane;
        for k in 0..plane {
            let (s, cos) = (phase[base + k].sin(), phase[base + k].cos());
            let a = amplitude[base + k];
            buf[k] = Complex::new(a * cos, a * s);
        }
        fft.process(&mut buf);
        out.extend(buf.iter().map(|z| z.re * norm));
    }

    Ok(Array4::from_shape_vec((n, c, h, w), out).expect("shape matches fill order"))
}

/// Which spectra of the adversarial batch to replace with the natural ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SwapComponent {
    None,
    Phase,
    Amplitude,
    Both,
}

/// Rebuild the adversarial batch with phase and/or amplitude spectra taken
/// from the aligned natural batch. `None` reproduces the adversarial images
/// and `Both` the natural ones, each within round-trip tolerance.
pub fn swap_spectra<F: Real>(
    adv: &Array4<F>,
    nat: &Array4<F>,
    which: SwapComponent,
) -> Result<Array4<F>> {
    if adv.dim() != nat.dim() {
        return Err(PapError::Validation(format!(
            "adversarial shape {:?} does not match natural shape {:?}",
            adv.dim(),
            nat.dim()
        )));
    }
    let s_adv = decompose(adv)?;
    let s_nat = decompose(nat)?;
    let hybrid = Spectrum {
        phase: match which {
            SwapComponent::Phase | SwapComponent::Both => s_nat.phase,
            _ => s_adv.phase,
        },
        amplitude: match which {
            SwapComponent::Amplitude | SwapComponent::Both => s_nat.amplitude,
            _ => s_adv.amplitude,
        },
    };
    recompose(&hybrid)
}

/// Adjoint of `recompose`: given dL/d(output image), return
/// (dL/d(phase), dL/d(amplitude)) evaluated at `spectrum`.
pub fn recompose_backward<F: Real>(
    spectrum: &Spectrum<F>,
    grad_output: &Array4<F>,
) -> Result<(Array4<F>, Array4<F>)> {
    spectrum.check_consistent()?;
    if grad_output.dim() != spectrum.shape() {
        return Err(PapError::Validation(format!(
            "gradient shape {:?} does not match spectrum shape {:?}",
            grad_output.dim(),
            spectrum.shape()
        )));
    }
    let (n, c, h, w) = spectrum.shape();
    let plane = h * w;
    let norm = F::one() / F::of((h * w) as f64);

    let phase = contiguous(&spectrum.phase);
    let amplitude = contiguous(&spectrum.amplitude);
    let grad = contiguous(grad_output);
    // The derivative of the inverse transform w.r.t. the complex spectrum is
    // the forward transform of the output gradient, scaled by the inverse
    // normalization.
    let mut fft = Fft2d::new(h, w, FftDirection::Forward);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); plane];
    let mut dphase = Vec::with_capacity(n * c * plane);
    let mut damp = Vec::with_capacity(n * c * plane);

    for block in 0..n * c {
        let base = block * plane;
        for k in 0..plane {
            buf[k] = Complex::new(grad[base + k], F::zero());
        }
        fft.process(&mut buf);
        for k in 0..plane {
            let gr = buf[k].re * norm;
            let gi = buf[k].im * norm;
            let (s, cos) = (phase[base + k].sin(), phase[base + k].cos());
            let a = amplitude[base + k];
            damp.push(gr * cos + gi * s);
            dphase.push(a * (gi * cos - gr * s));
        }
    }

    Ok((
        Array4::from_shape_vec((n, c, h, w), dphase).expect("shape matches fill order"),
        Array4::from_shape_vec((n, c, h, w), damp).expect("shape matches fill order"),
    ))
}

/// Adjoint of `decompose`: given gradients w.r.t. the phase and amplitude
/// spectra of some images, return dL/d(images). `input_spectrum` must be the
/// spectrum produced by `decompose` for those images.
pub fn decompose_backward<F: Real>(
    input_spectrum: &Spectrum<F>,
    grad_phase: &Array4<F>,
    grad_amplitude: &Array4<F>,
) -> Result<Array4<F>> {
    input_spectrum.check_consistent()?;
    if grad_phase.dim() != input_spectrum.shape() || grad_amplitude.dim() != input_spectrum.shape()
    {
        return Err(PapError::Validation(
            "spectrum gradient shapes do not match the input spectrum".into(),
        ));
    }
    let (n, c, h, w) = input_spectrum.shape();
    let plane = h * w;
    let eps = F::of(AMP_EPS);

    let phase = contiguous(&input_spectrum.phase);
    let amplitude = contiguous(&input_spectrum.amplitude);
    let gphase = contiguous(grad_phase);
    let gamp = contiguous(grad_amplitude);
    // The adjoint of the unnormalized forward transform is the unnormalized
    // inverse transform; the polar parametrization is inverted pointwise.
    let mut fft = Fft2d::new(h, w, FftDirection::Inverse);
    let mut buf = vec![Complex::new(F::zero(), F::zero()); plane];
    let mut out = Vec::with_capacity(n * c * plane);

    for block in 0..n * c {
        let base = block * plane;
        for k in 0..plane {
            let i = base + k;
            let (s, cos) = (phase[i].sin(), phase[i].cos());
            let a = amplitude[i];
            let inv_a = if a > eps { F::one() / a } else { F::zero() };
            let dre = gamp[i] * cos - gphase[i] * s * inv_a;
            let dim = gamp[i] * s + gphase[i] * cos * inv_a;
            buf[k] = Complex::new(dre, dim);
        }
        fft.process(&mut buf);
        out.extend(buf.iter().map(|z| z.re));
    }

    Ok(Array4::from_shape_vec((n, c, h, w), out).expect("shape matches fill order"))
}
