//! 3D convolution and transposed convolution on cubic grids, implemented as
//! im2col/col2im plus GEMM.
//!
//! Feature maps are position-major `[n * side^3, channels]` (see module docs
//! in [`crate::nn`]). Column matrices are `[n * out^3, channels * k^3]` with
//! the kernel offset minor-ordered `[c][kd][kh][kw]`, matching the weight
//! layout `[out_ch, in_ch * k^3]`.

use ndarray::linalg::general_mat_mul;
use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::Param;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side + 2 * self.pad - self.kernel) / self.stride + 1
    }
}

/// Gathers sliding-window neighborhoods of `x` (`[n * in^3, c]`) into a
/// column matrix `[n * out^3, c * k^3]`, zero-padding outside the grid.
pub fn im2col(x: &Array2<f64>, in_side: usize, channels: usize, spec: ConvSpec) -> Array2<f64> {
    let is3 = in_side * in_side * in_side;
    let n = x.nrows() / is3;
    assert_eq!(x.nrows(), n * is3, "input rows not a multiple of side^3");
    assert_eq!(x.ncols(), channels);
    let out = spec.out_side(in_side);
    let k = spec.kernel;
    let kk = k * k * k;
    let mut col = Array2::<f64>::zeros((n * out * out * out, channels * kk));
    let col_slice = col.as_slice_mut().expect("contiguous col");
    let x_slice = x.as_slice().expect("contiguous x");
    let row_w = channels * kk;

    for sample in 0..n {
        let x_base = sample * is3;
        for ox in 0..out {
            let ix0 = (ox * spec.stride) as isize - spec.pad as isize;
            for oy in 0..out {
                let iy0 = (oy * spec.stride) as isize - spec.pad as isize;
                for oz in 0..out {
                    let iz0 = (oz * spec.stride) as isize - spec.pad as isize;
                    let col_row = ((sample * out + ox) * out + oy) * out + oz;
                    let dst_base = col_row * row_w;
                    for kd in 0..k {
                        let ix = ix0 + kd as isize;
                        if ix < 0 || ix >= in_side as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let iy = iy0 + kh as isize;
                            if iy < 0 || iy >= in_side as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iz = iz0 + kw as isize;
                                if iz < 0 || iz >= in_side as isize {
                                    continue;
                                }
                                let pos = (ix as usize * in_side + iy as usize) * in_side
                                    + iz as usize;
                                let src = (x_base + pos) * channels;
                                let koff = (kd * k + kh) * k + kw;
                                for c in 0..channels {
                                    col_slice[dst_base + c * kk + koff] =
                                        x_slice[src + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a column matrix back onto the input grid; the adjoint of
/// [`im2col`].
pub fn col2im(
    col: &Array2<f64>,
    in_side: usize,
    channels: usize,
    spec: ConvSpec,
    n: usize,
) -> Array2<f64> {
    let is3 = in_side * in_side * in_side;
    let out = spec.out_side(in_side);
    let k = spec.kernel;
    let kk = k * k * k;
    assert_eq!(col.nrows(), n * out * out * out);
    assert_eq!(col.ncols(), channels * kk);
    let mut x = Array2::<f64>::zeros((n * is3, channels));
    let x_slice = x.as_slice_mut().expect("contiguous x");
    let col_slice = col.as_slice().expect("contiguous col");
    let row_w = channels * kk;

    for sample in 0..n {
        let x_base = sample * is3;
        for ox in 0..out {
            let ix0 = (ox * spec.stride) as isize - spec.pad as isize;
            for oy in 0..out {
                let iy0 = (oy * spec.stride) as isize - spec.pad as isize;
                for oz in 0..out {
                    let iz0 = (oz * spec.stride) as isize - spec.pad as isize;
                    let col_row = ((sample * out + ox) * out + oy) * out + oz;
                    let src_base = col_row * row_w;
                    for kd in 0..k {
                        let ix = ix0 + kd as isize;
                        if ix < 0 || ix >= in_side as isize {
                            continue;
                        }
                        for kh in 0..k {
                            let iy = iy0 + kh as isize;
                            if iy < 0 || iy >= in_side as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let iz = iz0 + kw as isize;
                                if iz < 0 || iz >= in_side as isize {
                                    continue;
                                }
                                let pos = (ix as usize * in_side + iy as usize) * in_side
                                    + iz as usize;
                                let dst = (x_base + pos) * channels;
                                let koff = (kd * k + kh) * k + kw;
                                for c in 0..channels {
                                    x_slice[dst + c] +=
                                        col_slice[src_base + c * kk + koff];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Strided 3D convolution.
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
}

/// Saved forward context needed for the backward pass.
pub struct ConvCache {
    col: Array2<f64>,
    in_side: usize,
    n: usize,
}

impl Conv3d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kk = spec.kernel.pow(3);
        let fan_in = in_channels * kk;
        Conv3d {
            w: Param::uniform(
                format!("{name}.w"),
                &[out_channels, in_channels, spec.kernel, spec.kernel, spec.kernel],
                fan_in,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), &[out_channels]),
            in_channels,
            out_channels,
            spec,
        }
    }

    /// `x`: `[n * in^3, in_channels]` -> `[n * out^3, out_channels]`.
    pub fn forward(&self, x: &Array2<f64>, in_side: usize) -> (Array2<f64>, ConvCache) {
        let n = x.nrows() / (in_side * in_side * in_side);
        let col = im2col(x, in_side, self.in_channels, self.spec);
        let kk = self.spec.kernel.pow(3);
        let w = self.w.view2(self.out_channels, self.in_channels * kk);
        let mut out = Array2::<f64>::zeros((col.nrows(), self.out_channels));
        general_mat_mul(1.0, &col, &w.t(), 0.0, &mut out);
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b.data[c];
            }
        }
        (out, ConvCache { col, in_side, n })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, dout: &Array2<f64>, cache: &ConvCache) -> Array2<f64> {
        let kk = self.spec.kernel.pow(3);
        let cols = self.in_channels * kk;
        // dW += dout^T . col
        {
            let mut dw = super::view2_mut(&mut self.w.grad, self.out_channels, cols);
            general_mat_mul(1.0, &dout.t(), &cache.col, 1.0, &mut dw);
        }
        for (c, g) in self.b.grad.iter_mut().enumerate() {
            *g += dout.column(c).sum();
        }
        // dcol = dout . W, then scatter back to the input grid.
        let w = self.w.view2(self.out_channels, cols);
        let mut dcol = Array2::<f64>::zeros((dout.nrows(), cols));
        general_mat_mul(1.0, dout, &w, 0.0, &mut dcol);
        col2im(&dcol, cache.in_side, self.in_channels, self.spec, cache.n)
    }
}

/// Transposed 3D convolution (fractionally strided); the exact adjoint of a
/// [`Conv3d`] with the same spec mapping the large grid to the small one.
#[derive(Debug, Clone)]
pub struct ConvTranspose3d {
    pub w: Param,
    pub b: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub spec: ConvSpec,
}

pub struct ConvTCache {
    x: Array2<f64>,
    out_side: usize,
    n: usize,
}

impl ConvTranspose3d {
    pub fn new(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        spec: ConvSpec,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let kk = spec.kernel.pow(3);
        let fan_in = in_channels * kk;
        ConvTranspose3d {
            w: Param::uniform(
                format!("{name}.w"),
                &[in_channels, out_channels, spec.kernel, spec.kernel, spec.kernel],
                fan_in,
                rng,
            ),
            b: Param::zeros(format!("{name}.b"), &[out_channels]),
            in_channels,
            out_channels,
            spec,
        }
    }

    pub fn out_side(&self, in_side: usize) -> usize {
        (in_side - 1) * self.spec.stride + self.spec.kernel - 2 * self.spec.pad
    }

    /// `x`: `[n * in^3, in_channels]` -> `[n * out^3, out_channels]` with
    /// `out = (in-1)*stride + kernel - 2*pad`.
    pub fn forward(&self, x: &Array2<f64>, in_side: usize) -> (Array2<f64>, ConvTCache) {
        let n = x.nrows() / (in_side * in_side * in_side);
        let out_side = self.out_side(in_side);
        let kk = self.spec.kernel.pow(3);
        let w = self.w.view2(self.in_channels, self.out_channels * kk);
        // Columns over the large grid, produced from the small-grid input.
        let mut col = Array2::<f64>::zeros((x.nrows(), self.out_channels * kk));
        general_mat_mul(1.0, x, &w, 0.0, &mut col);
        let mut out = col2im(&col, out_side, self.out_channels, self.spec, n);
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b.data[c];
            }
        }
        (
            out,
            ConvTCache {
                x: x.clone(),
                out_side,
                n,
            },
        )
    }

    pub fn backward(&mut self, dout: &Array2<f64>, cache: &ConvTCache) -> Array2<f64> {
        let kk = self.spec.kernel.pow(3);
        let dcol = im2col(dout, cache.out_side, self.out_channels, self.spec);
        debug_assert_eq!(dcol.nrows(), cache.x.nrows());
        // dW += x^T . dcol
        {
            let mut dw =
                super::view2_mut(&mut self.w.grad, self.in_channels, self.out_channels * kk);
            general_mat_mul(1.0, &cache.x.t(), &dcol, 1.0, &mut dw);
        }
        for (c, g) in self.b.grad.iter_mut().enumerate() {
            *g += dout.column(c).sum();
        }
        let w = self.w.view2(self.in_channels, self.out_channels * kk);
        let mut dx = Array2::<f64>::zeros((cache.x.nrows(), self.in_channels));
        general_mat_mul(1.0, &dcol, &w.t(), 0.0, &mut dx);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Direct 7-loop convolution used as an independent oracle.
    fn conv_oracle(
        x: &Array2<f64>,
        w: &[f64],
        b: &[f64],
        in_side: usize,
        ic: usize,
        oc: usize,
        spec: ConvSpec,
    ) -> Array2<f64> {
        let n = x.nrows() / in_side.pow(3);
        let out = spec.out_side(in_side);
        let k = spec.kernel;
        let mut y = Array2::<f64>::zeros((n * out * out * out, oc));
        for s in 0..n {
            for o in 0..oc {
                for ox in 0..out {
                    for oy in 0..out {
                        for oz in 0..out {
                            let mut acc = b[o];
                            for c in 0..ic {
                                for kd in 0..k {
                                    for kh in 0..k {
                                        for kw in 0..k {
                                            let ix = (ox * spec.stride + kd) as isize
                                                - spec.pad as isize;
                                            let iy = (oy * spec.stride + kh) as isize
                                                - spec.pad as isize;
                                            let iz = (oz * spec.stride + kw) as isize
                                                - spec.pad as isize;
                                            if ix < 0
                                                || iy < 0
                                                || iz < 0
                                                || ix >= in_side as isize
                                                || iy >= in_side as isize
                                                || iz >= in_side as isize
                                            {
                                                continue;
                                            }
                                            let pos = (ix as usize * in_side + iy as usize)
                                                * in_side
                                                + iz as usize;
                                            let wv = w[((o * ic + c) * k * k * k)
                                                + (kd * k + kh) * k
                                                + kw];
                                            acc += wv * x[[s * in_side.pow(3) + pos, c]];
                                        }
                                    }
                                }
                            }
                            y[[((s * out + ox) * out + oy) * out + oz, o]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_forward_matches_direct_loop() {
        let mut r = rng(3);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let conv = Conv3d::new("c", 2, 3, spec, &mut r);
        let x = Array2::from_shape_fn((2 * 8 * 8 * 8, 2), |_| r.gen_range(-1.0..1.0));
        let (y, _) = conv.forward(&x, 8);
        let oracle = conv_oracle(&x, &conv.w.data, &conv.b.data, 8, 2, 3, spec);
        assert_eq!(y.dim(), (2 * 4 * 4 * 4, 3));
        for (a, b) in y.iter().zip(oracle.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn halving_geometry() {
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        assert_eq!(spec.out_side(64), 32);
        assert_eq!(spec.out_side(8), 4);
        assert_eq!(spec.out_side(2), 1);
    }

    #[test]
    fn transposed_conv_doubles_side() {
        let mut r = rng(5);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let convt = ConvTranspose3d::new("d", 3, 2, spec, &mut r);
        assert_eq!(convt.out_side(4), 8);
        let x = Array2::from_shape_fn((4 * 4 * 4, 3), |_| r.gen_range(-1.0..1.0));
        let (y, _) = convt.forward(&x, 4);
        assert_eq!(y.dim(), (8 * 8 * 8, 2));
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_T(y)> when they share weights and no bias.
        let mut r = rng(9);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let conv = Conv3d::new("c", 2, 3, spec, &mut r);
        let mut convt = ConvTranspose3d::new("d", 3, 2, spec, &mut r);
        // Share weights: conv w is [oc=3, ic=2, k3]; convt w is [ic=3, oc=2, k3]
        // with identical flat layout when roles are swapped.
        convt.w.data.copy_from_slice(&conv.w.data);
        convt.b.data.fill(0.0);
        let mut conv_nb = conv.clone();
        conv_nb.b.data.fill(0.0);

        let x = Array2::from_shape_fn((8 * 8 * 8, 2), |_| r.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((4 * 4 * 4, 3), |_| r.gen_range(-1.0..1.0));
        let (cx, _) = conv_nb.forward(&x, 8);
        let (cty, _) = convt.forward(&y, 4);
        let lhs: f64 = cx.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(cty.iter()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut r = rng(11);
        let spec = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let x = Array2::from_shape_fn((8 * 8 * 8, 2), |_| r.gen_range(-1.0..1.0));
        let col = im2col(&x, 8, 2, spec);
        let g = Array2::from_shape_fn(col.raw_dim(), |_| r.gen_range(-1.0..1.0));
        let back = col2im(&g, 8, 2, spec, 1);
        let lhs: f64 = col.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-9);
    }
}
