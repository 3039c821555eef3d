//! Shared helpers for integration tests: a naive reference DFT written
//! directly from the transform definition (independent of the library's FFT
//! path) and small comparison utilities.

#![allow(dead_code)]

/// Naive O((HW)^2) forward 2-D DFT of a real row-major plane:
/// X[k1,k2] = sum_{m,n} x[m,n] * exp(-2*pi*i*(k1*m/H + k2*n/W)),
/// returned as (re, im) pairs in row-major order. Unnormalized.
pub fn naive_dft2(plane: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    assert_eq!(plane.len(), h * w);
    let tau = 2.0 * std::f64::consts::PI;
    let mut out = Vec::with_capacity(h * w);
    for k1 in 0..h {
        for k2 in 0..w {
            let mut re = 0.0;
            let mut im = 0.0;
            for m in 0..h {
                for n in 0..w {
                    let angle = -tau * (k1 * m) as f64 / h as f64 - tau * (k2 * n) as f64 / w as f64;
                    let v = plane[m * w + n];
                    re += v * angle.cos();
                    im += v * angle.sin();
                }
            }
            out.push((re, im));
        }
    }
    out
}

/// Naive inverse 2-D DFT with 1/(H*W) normalization; returns the real part.
pub fn naive_idft2_real(spectrum: &[(f64, f64)], h: usize, w: usize) -> Vec<f64> {
    assert_eq!(spectrum.len(), h * w);
    let tau = 2.0 * std::f64::consts::PI;
    let norm = 1.0 / (h * w) as f64;
    let mut out = Vec::with_capacity(h * w);
    for m in 0..h {
        for n in 0..w {
            let mut acc = 0.0;
            for k1 in 0..h {
                for k2 in 0..w {
                    let angle = tau * (k1 * m) as f64 / h as f64 + tau * (k2 * n) as f64 / w as f64;
                    let (re, im) = spectrum[k1 * w + k2];
                    acc += re * angle.cos() - im * angle.sin();
                }
            }
            out.push(acc * norm);
        }
    }
    out
}

/// Wrap an angle difference into (-pi, pi].
pub fn wrap_angle(d: f64) -> f64 {
    let tau = 2.0 * std::f64::consts::PI;
    let mut x = d % tau;
    if x <= -std::f64::consts::PI {
        x += tau;
    } else if x > std::f64::consts::PI {
        x -= tau;
    }
    x
}
