//! Minimal dense/convolutional building blocks, f64 throughout.
//!
//! Tensor conventions: dense activations are `[rows, features]`
//! (`Array2<f64>`); 3D feature maps are position-major `[n * side^3, channels]`
//! with position index `x*side^2 + y*side + z`, so convolution GEMMs, batch
//! norm column statistics, and the latent flattening all operate on the same
//! layout without permutes.

pub mod conv;
pub mod linear;
pub mod norm;

use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A named parameter tensor with its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![0.0; len],
            grad: vec![0.0; len],
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Uniform(-bound, bound) initialization with `bound = 1/sqrt(fan_in)`.
    pub fn uniform(
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut p = Self::zeros(name, shape);
        let bound = 1.0 / (fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = rng.gen_range(-bound..bound);
        }
        p
    }

    pub fn filled(name: impl Into<String>, shape: &[usize], value: f64) -> Self {
        let mut p = Self::zeros(name, shape);
        p.data.fill(value);
        p
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// 2D view of the data; `r * c` must equal the element count.
    pub fn view2(&self, r: usize, c: usize) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((r, c), &self.data).expect("param view shape")
    }
}

/// Adam optimizer; one instance per trained component so the shared step
/// counter matches the component's update schedule.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
        }
    }

    /// Applies one update to every parameter from its accumulated gradient,
    /// then clears the gradients.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for p in params {
            for i in 0..p.data.len() {
                let g = p.grad[i];
                p.m[i] = self.beta1 * p.m[i] + (1.0 - self.beta1) * g;
                p.v[i] = self.beta2 * p.v[i] + (1.0 - self.beta2) * g * g;
                let mhat = p.m[i] / bc1;
                let vhat = p.v[i] / bc2;
                p.data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
            p.grad.fill(0.0);
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a base seed and a tag path, so
/// unrelated random consumers (init, batch sampling, dropout, per-subject
/// noise) never share a stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix64(base);
    for &t in tags {
        s = splitmix64(s ^ t.wrapping_mul(0xD6E8_FEB8_6659_FD93));
    }
    s
}

pub fn seeded_rng(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

pub fn view2(data: &[f64], r: usize, c: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((r, c), data).expect("view2 shape")
}

pub fn view2_mut(data: &mut [f64], r: usize, c: usize) -> ArrayViewMut2<'_, f64> {
    ArrayViewMut2::from_shape((r, c), data).expect("view2_mut shape")
}

/// Leaky ReLU forward; `slope` scales negative inputs.
pub fn leaky_relu(x: &Array2<f64>, slope: f64) -> Array2<f64> {
    x.mapv(|v| if v > 0.0 { v } else { slope * v })
}

/// Leaky ReLU backward given the pre-activation input.
pub fn leaky_relu_backward(dout: &Array2<f64>, x: &Array2<f64>, slope: f64) -> Array2<f64> {
    let mut dx = dout.clone();
    dx.zip_mut_with(x, |d, &v| {
        if v <= 0.0 {
            *d *= slope;
        }
    });
    dx
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean squared error over all elements; returns the loss and the gradient
/// with respect to `pred`.
pub fn mse_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    assert_eq!(pred.dim(), target.dim(), "mse shape mismatch");
    let n = pred.len() as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    let grad = diff.mapv(|d| 2.0 * d / n);
    (loss, grad)
}

/// Target distribution for a softmax cross-entropy.
#[derive(Debug, Clone, Copy)]
pub enum CeTarget<'a> {
    /// One-hot rows given by class labels.
    Labels(&'a [usize]),
    /// The uniform distribution over all classes.
    Uniform,
}

/// Softmax cross-entropy, mean over rows. Returns the loss, the gradient with
/// respect to the logits, and the row-wise softmax probabilities.
pub fn softmax_cross_entropy(
    logits: &Array2<f64>,
    target: CeTarget<'_>,
) -> (f64, Array2<f64>, Array2<f64>) {
    let (n, c) = logits.dim();
    assert!(n > 0 && c > 0);
    let mut probs = logits.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    let mut loss = 0.0;
    let mut grad = probs.clone();
    match target {
        CeTarget::Labels(labels) => {
            assert_eq!(labels.len(), n, "label count mismatch");
            for (i, &y) in labels.iter().enumerate() {
                assert!(y < c, "label out of range");
                loss -= probs[[i, y]].max(1e-300).ln();
                grad[[i, y]] -= 1.0;
            }
        }
        CeTarget::Uniform => {
            let u = 1.0 / c as f64;
            for i in 0..n {
                for j in 0..c {
                    loss -= u * probs[[i, j]].max(1e-300).ln();
                    grad[[i, j]] -= u;
                }
            }
        }
    }
    loss /= n as f64;
    grad.mapv_inplace(|g| g / n as f64);
    (loss, grad, probs)
}

/// Numerically stable binary cross-entropy on logits, mean over samples.
/// Returns the loss and per-sample logit gradients.
pub fn bce_with_logits(logits: &[f64], labels: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(logits.len(), labels.len());
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; logits.len()];
    for i in 0..logits.len() {
        let z = logits[i];
        let y = labels[i];
        loss += z.max(0.0) - z * y + (1.0 + (-z.abs()).exp()).ln();
        grad[i] = (sigmoid(z) - y) / n;
    }
    (loss / n, grad)
}
