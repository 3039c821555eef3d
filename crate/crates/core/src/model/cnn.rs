//! The reference convolutional classifier: three conv/pool stages and a
//! two-layer dense head, with explicit forward caches and hand-written
//! backward passes to both parameters and inputs.

use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::{array_to_le_bytes, sha256_hex};
use crate::error::{PapError, Result};
use crate::model::layers::{
    maxpool2_backward, maxpool2_forward, relu_backward, relu_forward, Conv2d, ConvCache, Dense,
    PoolCache,
};
use crate::model::Classifier;
use crate::num::Real;

/// Architecture identifier recorded in checkpoints.
pub const ARCH_ID: &str = "refcnn-v1";

/// Channel widths of the three conv stages and the hidden dense layer.
const WIDTHS: [usize; 3] = [8, 16, 32];
const HIDDEN: usize = 256;

/// Fixed input standardization applied inside the network: pixels arrive in
/// [0,1] (the box attacks and prompts operate in) and are mapped to
/// (x − MEAN) × SCALE before the first convolution. Baked-in constants, not
/// parameters, so the checkpoint format is unaffected.
const INPUT_MEAN: f64 = 0.5;
const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Small CNN: [conv3x3(pad 1) → ReLU → maxpool2] ×3, flatten,
/// dense → ReLU → dense. For 1×28×28 inputs and 10 classes this is
/// 82,442 parameters. There is no normalization or dropout, so train and
/// eval modes compute identically; the flag exists to honor the classifier
/// contract and is recorded with checkpoints.
#[derive(Debug, Clone)]
pub struct ReferenceCnn<F: Real = f32> {
    pub conv1: Conv2d<F>,
    pub conv2: Conv2d<F>,
    pub conv3: Conv2d<F>,
    pub fc1: Dense<F>,
    pub fc2: Dense<F>,
    input_shape: (usize, usize, usize),
    num_classes: usize,
    flat_dim: usize,
    mode: Mode,
}

/// Per-layer activations and caches of one forward pass.
pub struct ForwardCache<F: Real> {
    c1: ConvCache<F>,
    a1: Array4<F>,
    p1: PoolCache,
    c2: ConvCache<F>,
    a2: Array4<F>,
    p2: PoolCache,
    c3: ConvCache<F>,
    a3: Array4<F>,
    p3: PoolCache,
    flat: Array2<F>,
    h1: Array2<F>,
    h1_relu: Array2<F>,
}

/// Gradients (or momentum buffers) mirroring every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamTensors<F: Real> {
    pub conv_w: [Array2<F>; 3],
    pub conv_b: [Array1<F>; 3],
    pub fc_w: [Array2<F>; 2],
    pub fc_b: [Array1<F>; 2],
}

impl<F: Real> ParamTensors<F> {
    pub fn zeros_like(model: &ReferenceCnn<F>) -> Self {
        ParamTensors {
            conv_w: [
                Array2::zeros(model.conv1.weight.dim()),
                Array2::zeros(model.conv2.weight.dim()),
                Array2::zeros(model.conv3.weight.dim()),
            ],
            conv_b: [
                Array1::zeros(model.conv1.bias.dim()),
                Array1::zeros(model.conv2.bias.dim()),
                Array1::zeros(model.conv3.bias.dim()),
            ],
            fc_w: [
                Array2::zeros(model.fc1.weight.dim()),
                Array2::zeros(model.fc2.weight.dim()),
            ],
            fc_b: [
                Array1::zeros(model.fc1.bias.dim()),
                Array1::zeros(model.fc2.bias.dim()),
            ],
        }
    }
}

impl<F: Real> ReferenceCnn<F> {
    /// Deterministically initialized network for the given geometry.
    pub fn build(input_shape: (usize, usize, usize), num_classes: usize, seed: u64) -> Result<Self> {
        let (c, h, w) = input_shape;
        if c == 0 || h < 8 || w < 8 {
            return Err(PapError::Validation(format!(
                "input shape {input_shape:?} too small for three pooling stages"
            )));
        }
        if num_classes < 2 {
            return Err(PapError::Validation(
                "a classifier needs at least two classes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv1 = Conv2d::new(c, WIDTHS[0], 3, 1, &mut rng);
        let conv2 = Conv2d::new(WIDTHS[0], WIDTHS[1], 3, 1, &mut rng);
        let conv3 = Conv2d::new(WIDTHS[1], WIDTHS[2], 3, 1, &mut rng);
        let (h1, w1) = (h / 2, w / 2);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let (h3, w3) = (h2 / 2, w2 / 2);
        if h3 == 0 || w3 == 0 {
            return Err(PapError::Validation(format!(
                "input shape {input_shape:?} collapses to zero after pooling"
            )));
        }
        let flat_dim = WIDTHS[2] * h3 * w3;
        let fc1 = Dense::new(flat_dim, HIDDEN, &mut rng);
        let fc2 = Dense::new(HIDDEN, num_classes, &mut rng);
        Ok(ReferenceCnn {
            conv1,
            conv2,
            conv3,
            fc1,
            fc2,
            input_shape,
            num_classes,
            flat_dim,
            mode: Mode::Eval,
        })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param_count(&self) -> usize {
        self.conv1.weight.len()
            + self.conv1.bias.len()
            + self.conv2.weight.len()
            + self.conv2.bias.len()
            + self.conv3.weight.len()
            + self.conv3.bias.len()
            + self.fc1.weight.len()
            + self.fc1.bias.len()
            + self.fc2.weight.len()
            + self.fc2.bias.len()
    }

    fn check_input(&self, images: &Array4<F>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        if (c, h, w) != self.input_shape {
            return Err(PapError::Validation(format!(
                "input shape ({c},{h},{w}) does not match model shape {:?}",
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Forward pass keeping every intermediate needed by `backward_full`.
    pub fn forward_cached(&self, images: &Array4<F>) -> Result<(Array2<F>, ForwardCache<F>)> {
        self.check_input(images)?;
        let n = images.dim().0;

        let mean = F::of(INPUT_MEAN);
        let scale = F::of(INPUT_SCALE);
        let standardized = images.mapv(|v| (v - mean) * scale);

        let (y1, c1) = self.conv1.forward(&standardized)?;
        let a1 = relu_forward(&y1);
        let (x2, p1) = maxpool2_forward(&a1);
        let (y2, c2) = self.conv2.forward(&x2)?;
        let a2 = relu_forward(&y2);
        let (x3, p2) = maxpool2_forward(&a2);
        let (y3, c3) = self.conv3.forward(&x3)?;
        let a3 = relu_forward(&y3);
        let (x4, p3) = maxpool2_forward(&a3);

        let flat = x4
            .into_shape_with_order((n, self.flat_dim))
            .expect("pooled activations are contiguous");
        let h1 = self.fc1.forward(&flat);
        let h1_relu = relu_forward(&h1);
        let logits = self.fc2.forward(&h1_relu);

        Ok((
            logits,
            ForwardCache {
                c1,
                a1: y1,
                p1,
                c2,
                a2: y2,
                p2,
                c3,
                a3: y3,
                p3,
                flat,
                h1,
                h1_relu,
            },
        ))
    }

    /// Backward pass from dL/dlogits. Returns dL/dinput and, when asked,
    /// gradients for every parameter tensor.
    pub fn backward_full(
        &self,
        cache: &ForwardCache<F>,
        grad_logits: &Array2<F>,
        want_params: bool,
    ) -> (Array4<F>, Option<ParamTensors<F>>) {
        let (dh1_relu, fc2_grads) = self.fc2.backward(&cache.h1_relu, grad_logits, want_params);
        let dh1 = relu_backward(&cache.h1, &dh1_relu);
        let (dflat, fc1_grads) = self.fc1.backward(&cache.flat, &dh1, want_params);

        let n = dflat.dim().0;
        let (_, _, h3, w3) = cache.a3.dim();
        let dx4 = dflat
            .into_shape_with_order((n, WIDTHS[2], h3 / 2, w3 / 2))
            .expect("dense gradient is contiguous");

        let da3 = maxpool2_backward(&cache.p3, &dx4);
        let dy3 = relu_backward(&cache.a3, &da3);
        let (dx3, conv3_grads) = self.conv3.backward(&cache.c3, &dy3, want_params);

        let da2 = maxpool2_backward(&cache.p2, &dx3);
        let dy2 = relu_backward(&cache.a2, &da2);
        let (dx2, conv2_grads) = self.conv2.backward(&cache.c2, &dy2, want_params);

        let da1 = maxpool2_backward(&cache.p1, &dx2);
        let dy1 = relu_backward(&cache.a1, &da1);
        let (mut dx, conv1_grads) = self.conv1.backward(&cache.c1, &dy1, want_params);
        // Chain through the input standardization: d(x−m)·s/dx = s.
        let scale = F::of(INPUT_SCALE);
        dx.mapv_inplace(|v| v * scale);

        let params = want_params.then(|| {
            let (c1w, c1b) = conv1_grads.unwrap();
            let (c2w, c2b) = conv2_grads.unwrap();
            let (c3w, c3b) = conv3_grads.unwrap();
            let (f1w, f1b) = fc1_grads.unwrap();
            let (f2w, f2b) = fc2_grads.unwrap();
            ParamTensors {
                conv_w: [c1w, c2w, c3w],
                conv_b: [c1b, c2b, c3b],
                fc_w: [f1w, f2w],
                fc_b: [f1b, f2b],
            }
        });
        (dx, params)
    }

    /// One SGD-with-momentum step: v ← m·v + g, p ← p − lr·v.
    pub fn sgd_step(&mut self, grads: &ParamTensors<F>, velocity: &mut ParamTensors<F>, lr: F, momentum: F) {
        fn upd2<F: Real>(p: &mut Array2<F>, g: &Array2<F>, v: &mut Array2<F>, lr: F, m: F) {
            v.zip_mut_with(g, |v, &g| *v = *v * m + g);
            p.zip_mut_with(v, |p, &v| *p = *p - lr * v);
        }
        fn upd1<F: Real>(p: &mut Array1<F>, g: &Array1<F>, v: &mut Array1<F>, lr: F, m: F) {
            v.zip_mut_with(g, |v, &g| *v = *v * m + g);
            p.zip_mut_with(v, |p, &v| *p = *p - lr * v);
        }
        upd2(&mut self.conv1.weight, &grads.conv_w[0], &mut velocity.conv_w[0], lr, momentum);
        upd1(&mut self.conv1.bias, &grads.conv_b[0], &mut velocity.conv_b[0], lr, momentum);
        upd2(&mut self.conv2.weight, &grads.conv_w[1], &mut velocity.conv_w[1], lr, momentum);
        upd1(&mut self.conv2.bias, &grads.conv_b[1], &mut velocity.conv_b[1], lr, momentum);
        upd2(&mut self.conv3.weight, &grads.conv_w[2], &mut velocity.conv_w[2], lr, momentum);
        upd1(&mut self.conv3.bias, &grads.conv_b[2], &mut velocity.conv_b[2], lr, momentum);
        upd2(&mut self.fc1.weight, &grads.fc_w[0], &mut velocity.fc_w[0], lr, momentum);
        upd1(&mut self.fc1.bias, &grads.fc_b[0], &mut velocity.fc_b[0], lr, momentum);
        upd2(&mut self.fc2.weight, &grads.fc_w[1], &mut velocity.fc_w[1], lr, momentum);
        upd1(&mut self.fc2.bias, &grads.fc_b[1], &mut velocity.fc_b[1], lr, momentum);
    }

    /// Parameters serialized as little-endian f32 in a fixed order; the
    /// digest and on-disk blob both use this encoding.
    pub fn param_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(self.param_count() * 4);
        bytes.extend(array_to_le_bytes(&self.conv1.weight));
        bytes.extend(array_to_le_bytes(&self.conv1.bias));
        bytes.extend(array_to_le_bytes(&self.conv2.weight));
        bytes.extend(array_to_le_bytes(&self.conv2.bias));
        bytes.extend(array_to_le_bytes(&self.conv3.weight));
        bytes.extend(array_to_le_bytes(&self.conv3.bias));
        bytes.extend(array_to_le_bytes(&self.fc1.weight));
        bytes.extend(array_to_le_bytes(&self.fc1.bias));
        bytes.extend(array_to_le_bytes(&self.fc2.weight));
        bytes.extend(array_to_le_bytes(&self.fc2.bias));
        bytes
    }

    /// Replace all parameters from the `param_bytes` encoding.
    pub fn load_param_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let expected = self.param_count() * 4;
        if bytes.len() != expected {
            return Err(PapError::Format(format!(
                "parameter blob holds {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let values = crate::bytes::vec_from_le_bytes(bytes)?;
        fn fill<'a, F: Real>(dst: impl Iterator<Item = &'a mut F>, src: &[f32], off: &mut usize)
        where
            F: 'a,
        {
            for v in dst {
                *v = F::of(src[*off] as f64);
                *off += 1;
            }
        }
        let mut off = 0usize;
        fill(self.conv1.weight.iter_mut(), &values, &mut off);
        fill(self.conv1.bias.iter_mut(), &values, &mut off);
        fill(self.conv2.weight.iter_mut(), &values, &mut off);
        fill(self.conv2.bias.iter_mut(), &values, &mut off);
        fill(self.conv3.weight.iter_mut(), &values, &mut off);
        fill(self.conv3.bias.iter_mut(), &values, &mut off);
        fill(self.fc1.weight.iter_mut(), &values, &mut off);
        fill(self.fc1.bias.iter_mut(), &values, &mut off);
        fill(self.fc2.weight.iter_mut(), &values, &mut off);
        fill(self.fc2.bias.iter_mut(), &values, &mut off);
        debug_assert_eq!(off, values.len());
        Ok(())
    }
}

impl<F: Real> Classifier<F> for ReferenceCnn<F> {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    fn forward(&self, images: &Array4<F>) -> Result<Array2<F>> {
        Ok(self.forward_cached(images)?.0)
    }

    fn input_gradient(
        &self,
        images: &Array4<F>,
        grad_logits: &dyn Fn(&Array2<F>) -> Array2<F>,
    ) -> Result<(Array2<F>, Array4<F>)> {
        let (logits, cache) = self.forward_cached(images)?;
        let dlogits = grad_logits(&logits);
        if dlogits.dim() != logits.dim() {
            return Err(PapError::Validation(format!(
                "logit gradient shape {:?} does not match logits {:?}",
                dlogits.dim(),
                logits.dim()
            )));
        }
        let (dinput, _) = self.backward_full(&cache, &dlogits, false);
        Ok((logits, dinput))
    }

    fn param_digest(&self) -> String {
        sha256_hex(&self.param_bytes())
    }
}
