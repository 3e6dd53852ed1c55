//! Soft-margin RBF-kernel SVM trained by sequential minimal optimization.
//! Deterministic: pair selection uses the max-|E_i - E_j| heuristic with
//! index order as the tie-breaker, no randomness.

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct SvmModel {
    /// Dual coefficients `alpha_i * y_i` for support vectors.
    pub dual_coef: Vec<f64>,
    /// Support vector rows.
    pub support: Array2<f64>,
    pub bias: f64,
    pub gamma: f64,
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    let mut d2 = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        let d = x - y;
        d2 += d * d;
    }
    (-gamma * d2).exp()
}

/// Trains a C-SVM with an RBF kernel on labels in {0, 1}.
pub fn train_svm_rbf(x: &Array2<f64>, y01: &[u8], c: f64, gamma: f64) -> Result<SvmModel> {
    let n = x.nrows();
    if n != y01.len() {
        return Err(Error::Shape(format!("{n} rows vs {} labels", y01.len())));
    }
    if !(y01.iter().any(|&v| v == 0) && y01.iter().any(|&v| v == 1)) {
        return Err(Error::Domain("SVM needs both classes".into()));
    }
    if c <= 0.0 || gamma <= 0.0 {
        return Err(Error::Config("C and gamma must be positive".into()));
    }
    let y: Vec<f64> = y01.iter().map(|&v| if v == 1 { 1.0 } else { -1.0 }).collect();

    // Full kernel matrix; training sets here are at most a few hundred rows.
    let mut k = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        let xi = x.row(i);
        let xi = xi.as_slice().expect("contiguous");
        for j in i..n {
            let xj = x.row(j);
            let v = rbf(xi, xj.as_slice().expect("contiguous"), gamma);
            k[[i, j]] = v;
            k[[j, i]] = v;
        }
    }

    let mut alpha = vec![0.0f64; n];
    let mut b = 0.0f64;
    // Error cache E_k = f(x_k) - y_k, maintained incrementally.
    let mut err: Vec<f64> = (0..n).map(|i| -y[i]).collect();

    let tol = 1e-3;
    let eps = 1e-12;
    let mut quiet_passes = 0;
    let mut guard = 0usize;
    while quiet_passes < 3 && guard < 500 {
        guard += 1;
        let mut changed = 0usize;
        for i in 0..n {
            let ei = err[i];
            let violates = (y[i] * ei < -tol && alpha[i] < c) || (y[i] * ei > tol && alpha[i] > 0.0);
            if !violates {
                continue;
            }
            // Second choice: maximize |E_i - E_j|, lowest index on ties.
            let mut j_best = usize::MAX;
            let mut gap_best = -1.0;
            for (j, &ej) in err.iter().enumerate() {
                if j == i {
                    continue;
                }
                let gap = (ei - ej).abs();
                if gap > gap_best + 1e-15 {
                    gap_best = gap;
                    j_best = j;
                }
            }
            let j = j_best;
            let ej = err[j];

            let (lo, hi) = if y[i] != y[j] {
                ((alpha[j] - alpha[i]).max(0.0), (c + alpha[j] - alpha[i]).min(c))
            } else {
                ((alpha[i] + alpha[j] - c).max(0.0), (alpha[i] + alpha[j]).min(c))
            };
            if (hi - lo).abs() < eps {
                continue;
            }
            let eta = 2.0 * k[[i, j]] - k[[i, i]] - k[[j, j]];
            if eta >= 0.0 {
                continue;
            }
            let mut aj_new = alpha[j] - y[j] * (ei - ej) / eta;
            aj_new = aj_new.clamp(lo, hi);
            if (aj_new - alpha[j]).abs() < eps {
                continue;
            }
            let ai_new = alpha[i] + y[i] * y[j] * (alpha[j] - aj_new);
            let b1 = b - ei
                - y[i] * (ai_new - alpha[i]) * k[[i, i]]
                - y[j] * (aj_new - alpha[j]) * k[[i, j]];
            let b2 = b - ej
                - y[i] * (ai_new - alpha[i]) * k[[i, j]]
                - y[j] * (aj_new - alpha[j]) * k[[j, j]];
            let b_new = if ai_new > 0.0 && ai_new < c {
                b1
            } else if aj_new > 0.0 && aj_new < c {
                b2
            } else {
                (b1 + b2) / 2.0
            };
            let di = (ai_new - alpha[i]) * y[i];
            let dj = (aj_new - alpha[j]) * y[j];
            let db = b_new - b;
            for kk in 0..n {
                err[kk] += di * k[[i, kk]] + dj * k[[j, kk]] + db;
            }
            alpha[i] = ai_new;
            alpha[j] = aj_new;
            b = b_new;
            changed += 1;
        }
        if changed == 0 {
            quiet_passes += 1;
        } else {
            quiet_passes = 0;
        }
    }

    let sv_idx: Vec<usize> = (0..n).filter(|&i| alpha[i] > eps).collect();
    let mut support = Array2::<f64>::zeros((sv_idx.len(), x.ncols()));
    let mut dual_coef = Vec::with_capacity(sv_idx.len());
    for (row, &i) in sv_idx.iter().enumerate() {
        support.row_mut(row).assign(&x.row(i));
        dual_coef.push(alpha[i] * y[i]);
    }
    Ok(SvmModel {
        dual_coef,
        support,
        bias: b,
        gamma,
    })
}

impl SvmModel {
    /// Signed decision values; positive leans toward class 1.
    pub fn decision(&self, x: &Array2<f64>) -> Vec<f64> {
        x.rows()
            .into_iter()
            .map(|row| {
                let r = row.as_slice().expect("contiguous");
                let mut f = self.bias;
                for (sv, &coef) in self.support.rows().into_iter().zip(self.dual_coef.iter()) {
                    f += coef * rbf(sv.as_slice().expect("contiguous"), r, self.gamma);
                }
                f
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separates_linear_blobs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let n = 40;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = vec![0u8; n];
        for i in 0..n {
            let c = (i % 2) as u8;
            y[i] = c;
            let center = if c == 1 { 2.0 } else { -2.0 };
            x[[i, 0]] = center + rng.gen_range(-0.5..0.5);
            x[[i, 1]] = rng.gen_range(-0.5..0.5);
        }
        let model = train_svm_rbf(&x, &y, 1.0, 0.5).unwrap();
        let scores = model.decision(&x);
        let correct = scores
            .iter()
            .zip(y.iter())
            .filter(|(s, &l)| (**s > 0.0) == (l == 1))
            .count();
        assert_eq!(correct, n);
    }

    #[test]
    fn separates_ring_from_center_nonlinearly() {
        // Radially separable data defeats a linear rule but not an RBF SVM.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 60;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = vec![0u8; n];
        for i in 0..n {
            let inner = i % 2 == 0;
            y[i] = u8::from(inner);
            let radius = if inner {
                rng.gen_range(0.0..0.5)
            } else {
                rng.gen_range(1.5..2.0)
            };
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            x[[i, 0]] = radius * angle.cos();
            x[[i, 1]] = radius * angle.sin();
        }
        let model = train_svm_rbf(&x, &y, 10.0, 1.0).unwrap();
        let scores = model.decision(&x);
        let correct = scores
            .iter()
            .zip(y.iter())
            .filter(|(s, &l)| (**s > 0.0) == (l == 1))
            .count();
        assert!(correct as f64 / n as f64 >= 0.95);
    }

    #[test]
    fn kkt_conditions_hold_within_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 30;
        let c = 1.0;
        let mut x = Array2::<f64>::zeros((n, 3));
        let mut y = vec![0u8; n];
        for i in 0..n {
            y[i] = (i % 2) as u8;
            for j in 0..3 {
                x[[i, j]] = rng.gen_range(-1.0..1.0) + y[i] as f64 * 0.8;
            }
        }
        let model = train_svm_rbf(&x, &y, c, 0.7).unwrap();
        let scores = model.decision(&x);
        for i in 0..n {
            let yi = if y[i] == 1 { 1.0 } else { -1.0 };
            let margin = yi * scores[i];
            // Non-support vectors must satisfy margin >= 1 - tol; any point
            // at most violates by the soft-margin slack rules.
            let is_sv = model
                .support
                .rows()
                .into_iter()
                .any(|sv| sv.iter().zip(x.row(i).iter()).all(|(a, b)| a == b));
            if !is_sv {
                assert!(margin >= 1.0 - 1e-2, "non-SV margin {margin}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 24;
        let mut x = Array2::<f64>::zeros((n, 2));
        let mut y = vec![0u8; n];
        for i in 0..n {
            y[i] = (i % 2) as u8;
            x[[i, 0]] = rng.gen_range(-1.0..1.0) + y[i] as f64;
            x[[i, 1]] = rng.gen_range(-1.0..1.0);
        }
        let a = train_svm_rbf(&x, &y, 1.0, 1.0).unwrap();
        let b = train_svm_rbf(&x, &y, 1.0, 1.0).unwrap();
        assert_eq!(a.dual_coef, b.dual_coef);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn rejects_single_class() {
        let x = Array2::<f64>::zeros((4, 2));
        assert!(train_svm_rbf(&x, &[0, 0, 0, 0], 1.0, 1.0).is_err());
    }
}
