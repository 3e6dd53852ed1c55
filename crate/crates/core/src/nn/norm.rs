//! Batch normalization and dropout.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::Param;

/// Batch normalization over the column (feature/channel) axis.
///
/// On position-major conv maps `[n * side^3, c]` the column statistics run
/// over batch and spatial positions together, which is exactly per-channel
/// 3D batch norm. Training mode uses batch statistics and updates the
/// running estimates; evaluation mode uses the running estimates.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(format!("{name}.gamma"), &[channels], 1.0),
            beta: Param::zeros(format!("{name}.beta"), &[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward: batch statistics, with running-stat update
    /// when `update_running` is set.
    pub fn forward_train(&mut self, x: &Array2<f64>, update_running: bool) -> (Array2<f64>, BnCache) {
        let c = self.channels();
        assert_eq!(x.ncols(), c, "batch norm channel mismatch");
        let m = x.nrows() as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for (j, col) in x.columns().into_iter().enumerate() {
            mean[j] = col.sum() / m;
            var[j] = col.iter().map(|&v| (v - mean[j]) * (v - mean[j])).sum::<f64>() / m;
        }
        if update_running {
            for j in 0..c {
                self.running_mean[j] =
                    (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                self.running_var[j] =
                    (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = x.clone();
        for (j, mut col) in xhat.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - mean[j]) * inv_std[j]);
        }
        let mut y = xhat.clone();
        for (j, mut col) in y.columns_mut().into_iter().enumerate() {
            let g = self.gamma.data[j];
            let b = self.beta.data[j];
            col.mapv_inplace(|v| g * v + b);
        }
        (y, BnCache { xhat, inv_std })
    }

    /// Inference-mode forward using running statistics; row-wise independent.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        let c = self.channels();
        assert_eq!(x.ncols(), c, "batch norm channel mismatch");
        let mut y = x.clone();
        for (j, mut col) in y.columns_mut().into_iter().enumerate() {
            let inv = 1.0 / (self.running_var[j] + self.eps).sqrt();
            let g = self.gamma.data[j];
            let b = self.beta.data[j];
            let mu = self.running_mean[j];
            col.mapv_inplace(|v| g * (v - mu) * inv + b);
        }
        y
    }

    /// Backward through the training-mode forward; accumulates gamma/beta
    /// gradients and returns the input gradient.
    pub fn backward(&mut self, dout: &Array2<f64>, cache: &BnCache) -> Array2<f64> {
        for j in 0..self.channels() {
            let dcol = dout.column(j);
            let xhat = cache.xhat.column(j);
            self.gamma.grad[j] += dcol.iter().zip(xhat.iter()).map(|(a, b)| a * b).sum::<f64>();
            self.beta.grad[j] += dcol.sum();
        }
        self.backward_data(dout, cache)
    }

    /// Input gradient only; the layer is treated as a frozen function.
    pub fn backward_data(&self, dout: &Array2<f64>, cache: &BnCache) -> Array2<f64> {
        let c = self.channels();
        let m = dout.nrows() as f64;
        let mut dx = Array2::<f64>::zeros(dout.raw_dim());
        for j in 0..c {
            let dcol = dout.column(j);
            let xhat = cache.xhat.column(j);
            let g = self.gamma.data[j];
            let inv = cache.inv_std[j];
            // dxhat = dout * gamma; dx via the standard batched formula.
            let sum_dxhat: f64 = dcol.iter().map(|&d| d * g).sum();
            let sum_dxhat_xhat: f64 = dcol
                .iter()
                .zip(xhat.iter())
                .map(|(&d, &h)| d * g * h)
                .sum();
            let mut out = dx.column_mut(j);
            for (i, o) in out.iter_mut().enumerate() {
                let dxhat = dcol[i] * g;
                *o = inv / m * (m * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
            }
        }
        dx
    }
}

/// Inverted dropout; masks hold `0` or `1/(1-p)` so evaluation needs no
/// rescale.
#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub p: f64,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout p must be in [0,1)");
        Dropout { p }
    }

    pub fn sample_mask(&self, len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let keep = 1.0 - self.p;
        (0..len)
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub fn apply(&self, x: &Array2<f64>, mask: &[f64]) -> Array2<f64> {
        assert_eq!(x.len(), mask.len());
        let mut y = x.clone();
        for (v, &m) in y.iter_mut().zip(mask.iter()) {
            *v *= m;
        }
        y
    }

    pub fn backward(&self, dout: &Array2<f64>, mask: &[f64]) -> Array2<f64> {
        self.apply(dout, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn train_forward_standardizes_columns() {
        let mut bn = BatchNorm::new("bn", 2);
        let x = array![[1.0, 10.0], [3.0, 30.0], [5.0, 20.0], [7.0, 40.0]];
        let (y, _) = bn.forward_train(&x, true);
        for j in 0..2 {
            let col = y.column(j);
            let mean: f64 = col.sum() / 4.0;
            let var: f64 = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
            assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
            assert_abs_diff_eq!(var, 1.0, epsilon = 1e-3);
        }
    }

    #[test]
    fn eval_forward_is_rowwise_independent() {
        let mut bn = BatchNorm::new("bn", 2);
        let x = array![[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]];
        let _ = bn.forward_train(&x, true);
        let full = bn.forward_eval(&x);
        for i in 0..3 {
            let row = x.row(i).insert_axis(ndarray::Axis(0)).to_owned();
            let single = bn.forward_eval(&row);
            for j in 0..2 {
                assert_abs_diff_eq!(single[[0, j]], full[[i, j]], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let d = Dropout::new(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mask = d.sample_mask(10_000, &mut rng);
        let kept = mask.iter().filter(|&&m| m > 0.0).count() as f64;
        assert!((kept / 10_000.0 - 0.7).abs() < 0.02);
        assert!(mask
            .iter()
            .all(|&m| m == 0.0 || (m - 1.0 / 0.7).abs() < 1e-12));
    }
}
