use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::{view2_mut, Param};

/// Fully connected layer `y = x . W^T + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    pub in_features: usize,
    pub out_features: usize,
}

pub struct LinearCache {
    x: Array2<f64>,
}

impl Linear {
    pub fn new(name: &str, in_features: usize, out_features: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            w: Param::uniform(
                format!("{name}.w"),
                &[out_features, in_features],
                in_features,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), &[out_features]),
            in_features,
            out_features,
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        assert_eq!(x.ncols(), self.in_features, "linear input width mismatch");
        let w = self.w.view2(self.out_features, self.in_features);
        let mut y = Array2::<f64>::zeros((x.nrows(), self.out_features));
        general_mat_mul(1.0, x, &w.t(), 0.0, &mut y);
        for mut row in y.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += self.b.data[j];
            }
        }
        (y, LinearCache { x: x.clone() })
    }

    /// Inference-only forward without caching.
    pub fn forward_eval(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    pub fn backward(&mut self, dout: &Array2<f64>, cache: &LinearCache) -> Array2<f64> {
        {
            let mut dw = view2_mut(&mut self.w.grad, self.out_features, self.in_features);
            general_mat_mul(1.0, &dout.t(), &cache.x, 1.0, &mut dw);
        }
        for (j, g) in self.b.grad.iter_mut().enumerate() {
            *g += dout.column(j).sum();
        }
        self.backward_data(dout)
    }

    /// Input gradient only; parameters stay untouched.
    pub fn backward_data(&self, dout: &Array2<f64>) -> Array2<f64> {
        let w = self.w.view2(self.out_features, self.in_features);
        let mut dx = Array2::<f64>::zeros((dout.nrows(), self.in_features));
        general_mat_mul(1.0, dout, &w, 0.0, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;

    #[test]
    fn forward_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::new("l", 2, 3, &mut rng);
        lin.w.data.copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        lin.b.data.copy_from_slice(&[0.5, -0.5, 0.0]);
        let (y, _) = lin.forward(&array![[1.0, 1.0]]);
        assert_abs_diff_eq!(y[[0, 0]], 3.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[0, 1]], 6.5, epsilon = 1e-12);
        assert_abs_diff_eq!(y[[0, 2]], 11.0, epsilon = 1e-12);
    }
}
