//! Cross-checks the library's FFT-based decomposition and recomposition
//! against a naive reference DFT computed straight from the definition.

mod common;

use common::{naive_dft2, naive_idft2_real, wrap_angle};
use ndarray::Array4;
use pap_core::spectral::{decompose, recompose, Spectrum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_plane(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(-1.0..1.5)).collect()
}

#[test]
fn decompose_matches_naive_dft_on_small_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for &(h, w) in &[(1usize, 1usize), (2, 2), (3, 5), (4, 4), (5, 3), (7, 7), (8, 8), (8, 6)] {
        let plane = random_plane(&mut rng, h * w);
        let image_f32 =
            Array4::from_shape_vec((1, 1, h, w), plane.iter().map(|&v| v as f32).collect())
                .unwrap();
        let spec = decompose(&image_f32).unwrap();
        let oracle = naive_dft2(&plane, h, w);
        let max_amp = oracle
            .iter()
            .map(|(re, im)| re.hypot(*im))
            .fold(0.0, f64::max)
            .max(1.0);
        for (k, &(re, im)) in oracle.iter().enumerate() {
            let (i, j) = (k / w, k % w);
            let amp = re.hypot(im);
            let got_amp = spec.amplitude[[0, 0, i, j]] as f64;
            assert!(
                (got_amp - amp).abs() <= 1e-4 * max_amp,
                "amplitude mismatch at {h}x{w} bin ({i},{j}): {got_amp} vs {amp}"
            );
            // Phase is only well-conditioned away from zero amplitude.
            if amp > 1e-3 * max_amp {
                let phase = im.atan2(re);
                let got_phase = spec.phase[[0, 0, i, j]] as f64;
                assert!(
                    wrap_angle(got_phase - phase).abs() <= 1e-3,
                    "phase mismatch at {h}x{w} bin ({i},{j}): {got_phase} vs {phase}"
                );
            }
        }
    }
}

#[test]
fn recompose_matches_naive_inverse_on_small_planes() {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    for &(h, w) in &[(2usize, 3usize), (4, 4), (6, 5), (8, 8)] {
        // Build an arbitrary (not conjugate-symmetric) spectrum so the naive
        // inverse exercises the same real-part projection.
        let phase: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let amplitude: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..4.0)).collect();
        let spec = Spectrum {
            phase: Array4::from_shape_vec((1, 1, h, w), phase.iter().map(|&v| v as f32).collect())
                .unwrap(),
            amplitude: Array4::from_shape_vec(
                (1, 1, h, w),
                amplitude.iter().map(|&v| v as f32).collect(),
            )
            .unwrap(),
        };
        let got = recompose(&spec).unwrap();
        let complex: Vec<(f64, f64)> = phase
            .iter()
            .zip(&amplitude)
            .map(|(&p, &a)| (a * p.cos(), a * p.sin()))
            .collect();
        let oracle = naive_idft2_real(&complex, h, w);
        let scale = oracle.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
        for (k, &v) in oracle.iter().enumerate() {
            let (i, j) = (k / w, k % w);
            let g = got[[0, 0, i, j]] as f64;
            assert!(
                (g - v).abs() <= 1e-4 * scale,
                "inverse mismatch at {h}x{w} pixel ({i},{j}): {g} vs {v}"
            );
        }
    }
}

#[test]
fn f64_decompose_matches_naive_dft_tightly() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let (h, w) = (8, 8);
    let plane = random_plane(&mut rng, h * w);
    let image = Array4::from_shape_vec((1, 1, h, w), plane.clone()).unwrap();
    let spec = decompose(&image).unwrap();
    let oracle = naive_dft2(&plane, h, w);
    for (k, &(re, im)) in oracle.iter().enumerate() {
        let (i, j) = (k / w, k % w);
        let amp = re.hypot(im);
        assert!((spec.amplitude[[0, 0, i, j]] - amp).abs() < 1e-9);
    }
}
