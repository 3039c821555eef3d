//! Differentiable building blocks of the reference network: im2col
//! convolution, 2×2 max pooling, dense layers, ReLU, and fused
//! softmax/cross-entropy. Each forward returns the cache its backward needs;
//! backwards return gradients w.r.t. inputs and (where applicable) parameters.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, Array4, ArrayView2};

use crate::error::{PapError, Result};
use crate::num::Real;

/// Unfold an N×C×H×W batch into a (C·k·k) × (N·OH·OW) matrix with zero
/// padding, so convolution becomes one matrix product per sample.
fn im2col<F: Real>(x: &Array4<F>, k: usize, pad: usize) -> Array2<F> {
    let (n, c, h, w) = x.dim();
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut cols = Array2::zeros((c * k * k, n * oh * ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oi in 0..oh {
                        let ii = (oi + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[[row, ni * oh * ow + oi * ow + oj]] =
                                plane[[ii as usize, jj as usize]];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add column gradients back onto the image.
fn col2im<F: Real>(
    cols: &Array2<F>,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
) -> Array4<F> {
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let mut x = Array4::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = x.slice_mut(s![ni, ci, .., ..]);
            for ki in 0..k {
                for kj in 0..k {
                    let row = ci * k * k + ki * k + kj;
                    for oi in 0..oh {
                        let ii = (oi + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..ow {
                            let jj = (oj + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            plane[[ii as usize, jj as usize]] = plane
                                [[ii as usize, jj as usize]]
                                + cols[[row, ni * oh * ow + oi * ow + oj]];
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution, stride 1, square kernel, zero padding.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    /// Weight matrix, out_channels × (in_channels · k · k).
    pub weight: Array2<F>,
    pub bias: Array1<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub pad: usize,
}

pub struct ConvCache<F: Real> {
    cols: Array2<F>,
    input_dim: (usize, usize, usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn new<R: rand::Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((out_channels, fan_in), |_| {
            F::of(rng.gen_range(-bound..bound))
        });
        Conv2d {
            weight,
            bias: Array1::zeros(out_channels),
            in_channels,
            out_channels,
            kernel,
            pad,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + 2 * self.pad - self.kernel + 1,
            w + 2 * self.pad - self.kernel + 1,
        )
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, ConvCache<F>)> {
        let (n, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(PapError::Validation(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels
            )));
        }
        let (oh, ow) = self.output_hw(h, w);
        let cols = im2col(x, self.kernel, self.pad);
        let mut y = Array4::zeros((n, self.out_channels, oh, ow));
        for ni in 0..n {
            let col_n = cols.slice(s![.., ni * oh * ow..(ni + 1) * oh * ow]);
            let mut y_n = y
                .slice_mut(s![ni, .., .., ..])
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous output slice");
            general_mat_mul(F::one(), &self.weight, &col_n, F::zero(), &mut y_n);
        }
        for (mut channel, &b) in y
            .axis_iter_mut(ndarray::Axis(1))
            .zip(self.bias.iter())
        {
            channel.mapv_inplace(|v| v + b);
        }
        Ok((
            y,
            ConvCache {
                cols,
                input_dim: (n, c, h, w),
            },
        ))
    }

    /// Returns dL/dx and, when `want_params` is set, (dL/dweight, dL/dbias).
    pub fn backward(
        &self,
        cache: &ConvCache<F>,
        grad_out: &Array4<F>,
        want_params: bool,
    ) -> (Array4<F>, Option<(Array2<F>, Array1<F>)>) {
        let (n, c, h, w) = cache.input_dim;
        let (oh, ow) = self.output_hw(h, w);
        let mut dcols = Array2::zeros((c * self.kernel * self.kernel, n * oh * ow));
        let mut dweight = Array2::zeros(self.weight.dim());
        let mut dbias = Array1::zeros(self.out_channels);

        for ni in 0..n {
            let dy_n: ArrayView2<F> = grad_out
                .slice(s![ni, .., .., ..])
                .into_shape_with_order((self.out_channels, oh * ow))
                .expect("contiguous gradient slice");
            let col_n = cache.cols.slice(s![.., ni * oh * ow..(ni + 1) * oh * ow]);
            let mut dcol_n = dcols.slice_mut(s![.., ni * oh * ow..(ni + 1) * oh * ow]);
            general_mat_mul(F::one(), &self.weight.t(), &dy_n, F::zero(), &mut dcol_n);
            if want_params {
                general_mat_mul(F::one(), &dy_n, &col_n.t(), F::one(), &mut dweight);
            }
        }
        if want_params {
            for (oc, db) in dbias.iter_mut().enumerate() {
                *db = grad_out.slice(s![.., oc, .., ..]).iter().copied().sum();
            }
        }
        let dx = col2im(&dcols, n, c, h, w, self.kernel, self.pad);
        let params = want_params.then_some((dweight, dbias));
        (dx, params)
    }
}

/// 2×2 max pooling with stride 2; trailing odd rows/columns are dropped.
pub struct PoolCache {
    input_dim: (usize, usize, usize, usize),
    /// Flat (h·w) index of the winning element per output cell.
    argmax: Vec<usize>,
}

pub fn maxpool2_forward<F: Real>(x: &Array4<F>) -> (Array4<F>, PoolCache) {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::zeros((n, c, oh, ow));
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.slice(s![ni, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let (i0, j0) = (oi * 2, oj * 2);
                    let mut best = plane[[i0, j0]];
                    let mut best_idx = i0 * w + j0;
                    for (di, dj) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let v = plane[[i0 + di, j0 + dj]];
                        if v > best {
                            best = v;
                            best_idx = (i0 + di) * w + (j0 + dj);
                        }
                    }
                    y[[ni, ci, oi, oj]] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    (
        y,
        PoolCache {
            input_dim: (n, c, h, w),
            argmax,
        },
    )
}

pub fn maxpool2_backward<F: Real>(cache: &PoolCache, grad_out: &Array4<F>) -> Array4<F> {
    let (n, c, h, w) = cache.input_dim;
    let (oh, ow) = (h / 2, w / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let mut k = 0usize;
    for ni in 0..n {
        for ci in 0..c {
            let mut plane = dx.slice_mut(s![ni, ci, .., ..]);
            for oi in 0..oh {
                for oj in 0..ow {
                    let idx = cache.argmax[k];
                    let (ii, jj) = (idx / w, idx % w);
                    plane[[ii, jj]] = plane[[ii, jj]] + grad_out[[ni, ci, oi, oj]];
                    k += 1;
                }
            }
        }
    }
    dx
}

/// Fully connected layer, y = x·Wᵀ + b.
#[derive(Debug, Clone)]
pub struct Dense<F: Real> {
    /// out_features × in_features.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Dense<F> {
    pub fn new<R: rand::Rng>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_features as f64).sqrt();
        let weight = Array2::from_shape_fn((out_features, in_features), |_| {
            F::of(rng.gen_range(-bound..bound))
        });
        Dense {
            weight,
            bias: Array1::zeros(out_features),
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let (n, _) = x.dim();
        let out = self.weight.dim().0;
        let mut y = Array2::zeros((n, out));
        general_mat_mul(F::one(), x, &self.weight.t(), F::zero(), &mut y);
        y + &self.bias
    }

    /// Returns dL/dx and optionally (dL/dweight, dL/dbias).
    pub fn backward(
        &self,
        x: &Array2<F>,
        grad_out: &Array2<F>,
        want_params: bool,
    ) -> (Array2<F>, Option<(Array2<F>, Array1<F>)>) {
        let mut dx = Array2::zeros(x.dim());
        general_mat_mul(F::one(), grad_out, &self.weight, F::zero(), &mut dx);
        let params = want_params.then(|| {
            let mut dw = Array2::zeros(self.weight.dim());
            general_mat_mul(F::one(), &grad_out.t(), x, F::zero(), &mut dw);
            let db = grad_out.sum_axis(ndarray::Axis(0));
            (dw, db)
        });
        (dx, params)
    }
}

pub fn relu_forward<F: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

pub fn relu_backward<F: Real, D: ndarray::Dimension>(
    x: &ndarray::Array<F, D>,
    grad_out: &ndarray::Array<F, D>,
) -> ndarray::Array<F, D> {
    let mut dx = grad_out.clone();
    dx.zip_mut_with(x, |g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    dx
}

/// Mean cross-entropy over the batch with a numerically stable softmax.
/// Returns the loss (accumulated in f64) and dL/dlogits.
pub fn softmax_cross_entropy<F: Real>(
    logits: &Array2<F>,
    labels: &[usize],
) -> Result<(f64, Array2<F>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(PapError::Validation(format!(
            "{} labels for a batch of {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(PapError::Validation(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut dlogits = Array2::zeros((n, c));
    let mut loss = 0.0f64;
    let inv_n = F::of(1.0 / n as f64);
    for (i, row) in logits.outer_iter().enumerate() {
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut denom = 0.0f64;
        for &v in row.iter() {
            denom += (v - max).f64().exp();
        }
        let log_denom = denom.ln();
        loss -= (row[labels[i]] - max).f64() - log_denom;
        for (j, &v) in row.iter().enumerate() {
            let p = ((v - max).f64().exp() / denom).min(1.0);
            let indicator = if j == labels[i] { 1.0 } else { 0.0 };
            dlogits[[i, j]] = F::of(p - indicator) * inv_n;
        }
    }
    Ok((loss / n as f64, dlogits))
}

/// Index of the row maximum; ties resolve to the lowest index.
pub fn argmax_row<F: Real>(row: ndarray::ArrayView1<F>) -> usize {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
