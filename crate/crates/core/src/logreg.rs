//! Deterministic L2-regularized logistic regression (binary and
//! multinomial), full-batch Adam on standardized features. Used by the
//! site-information probe and by connectivity feature selection.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::linalg::{column_stats, standardize_with};
use crate::nn::{sigmoid, Adam};

#[derive(Debug, Clone, Copy)]
pub struct LogRegConfig {
    /// L2 penalty weight on `0.5 * ||w||^2` added to the summed
    /// cross-entropy (the bias is unpenalized).
    pub l2: f64,
    pub iters: usize,
    pub lr: f64,
}

impl Default for LogRegConfig {
    fn default() -> Self {
        LogRegConfig {
            l2: 1.0,
            iters: 500,
            lr: 0.1,
        }
    }
}

/// Binary logistic regression model; weights refer to standardized inputs.
#[derive(Debug, Clone)]
pub struct BinaryLogReg {
    pub weights: Array1<f64>,
    pub bias: f64,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl BinaryLogReg {
    pub fn fit(x: &Array2<f64>, y: &[u8], cfg: &LogRegConfig) -> Result<Self> {
        let n = x.nrows();
        if n != y.len() {
            return Err(Error::Shape(format!("{n} rows vs {} labels", y.len())));
        }
        if !(y.iter().any(|&v| v == 0) && y.iter().any(|&v| v == 1)) {
            return Err(Error::Domain("labels must contain both classes".into()));
        }
        let d = x.ncols();
        let (means, stds) = column_stats(x);
        let mut xs = x.clone();
        standardize_with(&mut xs, &means, &stds);

        let mut w = crate::nn::Param::zeros("logreg.w", &[d]);
        let mut b = crate::nn::Param::zeros("logreg.b", &[1]);
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
        for _ in 0..cfg.iters {
            for i in 0..n {
                let row = xs.row(i);
                let z: f64 =
                    row.iter().zip(w.data.iter()).map(|(a, b)| a * b).sum::<f64>() + b.data[0];
                let p = sigmoid(z);
                let g = p - y[i] as f64;
                for (gw, &xv) in w.grad.iter_mut().zip(row.iter()) {
                    *gw += g * xv;
                }
                b.grad[0] += g;
            }
            for (gw, &wv) in w.grad.iter_mut().zip(w.data.iter()) {
                *gw += cfg.l2 * wv;
            }
            opt.step([&mut w, &mut b]);
        }
        Ok(BinaryLogReg {
            weights: Array1::from_vec(w.data),
            bias: b.data[0],
            means,
            stds,
        })
    }

    pub fn decision(&self, x: &Array2<f64>) -> Vec<f64> {
        let mut xs = x.clone();
        standardize_with(&mut xs, &self.means, &self.stds);
        xs.rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .zip(self.weights.iter())
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    + self.bias
            })
            .collect()
    }

    pub fn predict_proba(&self, x: &Array2<f64>) -> Vec<f64> {
        self.decision(x).into_iter().map(sigmoid).collect()
    }
}

/// Multinomial (softmax) logistic regression.
#[derive(Debug, Clone)]
pub struct MultinomialLogReg {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    n_classes: usize,
    means: Vec<f64>,
    stds: Vec<f64>,
}

impl MultinomialLogReg {
    pub fn fit(x: &Array2<f64>, y: &[usize], n_classes: usize, cfg: &LogRegConfig) -> Result<Self> {
        let n = x.nrows();
        if n != y.len() {
            return Err(Error::Shape(format!("{n} rows vs {} labels", y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::Domain(format!(
                "class {bad} out of range 0..{n_classes}"
            )));
        }
        let d = x.ncols();
        let (means, stds) = column_stats(x);
        let mut xs = x.clone();
        standardize_with(&mut xs, &means, &stds);

        let mut w = crate::nn::Param::zeros("mlogreg.w", &[n_classes, d]);
        let mut b = crate::nn::Param::zeros("mlogreg.b", &[n_classes]);
        let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
        let mut logits = Array2::<f64>::zeros((n, n_classes));
        for _ in 0..cfg.iters {
            {
                let wv = w.view2(n_classes, d);
                ndarray::linalg::general_mat_mul(1.0, &xs, &wv.t(), 0.0, &mut logits);
            }
            for mut row in logits.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += b.data[c];
                }
            }
            let (_, dlogits, _) = crate::nn::softmax_cross_entropy(
                &logits,
                crate::nn::CeTarget::Labels(y),
            );
            // softmax_cross_entropy averages over rows; rescale to a sum.
            let scale = n as f64;
            {
                let mut gw = crate::nn::view2_mut(&mut w.grad, n_classes, d);
                ndarray::linalg::general_mat_mul(scale, &dlogits.t(), &xs, 0.0, &mut gw);
            }
            for c in 0..n_classes {
                b.grad[c] = dlogits.column(c).sum() * scale;
            }
            for (gw, &wv) in w.grad.iter_mut().zip(w.data.iter()) {
                *gw += cfg.l2 * wv;
            }
            opt.step([&mut w, &mut b]);
        }
        let weights =
            Array2::from_shape_vec((n_classes, d), w.data).expect("weight shape");
        Ok(MultinomialLogReg {
            weights,
            bias: Array1::from_vec(b.data),
            n_classes,
            means,
            stds,
        })
    }

    pub fn predict(&self, x: &Array2<f64>) -> Vec<usize> {
        let mut xs = x.clone();
        standardize_with(&mut xs, &self.means, &self.stds);
        xs.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for c in 0..self.n_classes {
                    let z: f64 = row
                        .iter()
                        .zip(self.weights.row(c).iter())
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        + self.bias[c];
                    if z > best_v {
                        best_v = z;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binary_separable_recovers_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 40;
        let mut x = Array2::<f64>::zeros((n, 3));
        let mut y = vec![0u8; n];
        for i in 0..n {
            y[i] = (i % 2) as u8;
            x[[i, 0]] = y[i] as f64 * 2.0 - 1.0 + rng.gen_range(-0.1..0.1);
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
            x[[i, 2]] = rng.gen_range(-1.0..1.0);
        }
        let model = BinaryLogReg::fit(&x, &y, &LogRegConfig::default()).unwrap();
        let probs = model.predict_proba(&x);
        let correct = probs
            .iter()
            .zip(y.iter())
            .filter(|(p, &l)| (**p > 0.5) == (l == 1))
            .count();
        assert!(correct as f64 / n as f64 > 0.95);
        assert!(model.weights[0].abs() > model.weights[1].abs());
    }

    #[test]
    fn binary_rejects_single_class() {
        let x = Array2::<f64>::zeros((4, 2));
        assert!(BinaryLogReg::fit(&x, &[1, 1, 1, 1], &LogRegConfig::default()).is_err());
    }

    #[test]
    fn multinomial_separable_three_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = vec![0usize; n];
        for i in 0..n {
            let c = i % 3;
            y[i] = c;
            let (cx, cy) = [(0.0, 0.0), (4.0, 0.0), (0.0, 4.0)][c];
            x[[i, 0]] = cx + rng.gen_range(-0.5..0.5);
            x[[i, 1]] = cy + rng.gen_range(-0.5..0.5);
        }
        let model = MultinomialLogReg::fit(&x, &y, 3, &LogRegConfig::default()).unwrap();
        let pred = model.predict(&x);
        let correct = pred.iter().zip(y.iter()).filter(|(a, b)| a == b).count();
        assert!(correct as f64 / n as f64 > 0.95);
    }

    #[test]
    fn deterministic_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((20, 4), |_| rng.gen_range(-1.0..1.0));
        let y: Vec<u8> = (0..20).map(|i| (i % 2) as u8).collect();
        let a = BinaryLogReg::fit(&x, &y, &LogRegConfig::default()).unwrap();
        let b = BinaryLogReg::fit(&x, &y, &LogRegConfig::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }
}
