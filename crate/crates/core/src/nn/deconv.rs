//! Kernel-2, stride-2 transposed convolution on a square token grid.
//!
//! With kernel equal to stride the output patches do not overlap, so the
//! layer is a per-token linear map to `2 x 2 x out` followed by a pixel
//! shuffle. Weight columns are ordered `(dy, dx, channel)`.

use rand::Rng;

use super::{fan_in_std, join, Params};
use crate::error::{invalid_arg, Result};
use crate::tensor::{acc_matmul_tn, matmul, matmul_nt, Mat, Real};

#[derive(Clone, Debug)]
pub struct Deconv2x<T> {
    pub weight: Mat<T>,
    pub bias: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct DeconvCache<T> {
    x: Mat<T>,
    side: usize,
}

impl<T: Real> Deconv2x<T> {
    /// Fan-in scaled init so that plane features start at unit scale.
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, rng: &mut R) -> Self {
        Self {
            weight: Mat::trunc_normal(in_ch, 4 * out_ch, fan_in_std(in_ch), rng),
            bias: Mat::zeros(1, out_ch),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.bias.cols()
    }

    #[inline]
    fn col(&self, dy: usize, dx: usize, c: usize) -> usize {
        (dy * 2 + dx) * self.out_channels() + c
    }

    /// `x` is a `side x side` grid in row-major order, one token per row.
    /// Returns a `2side x 2side` grid.
    pub fn forward(&self, x: &Mat<T>) -> Result<(Mat<T>, DeconvCache<T>)> {
        let side = (x.rows() as f64).sqrt().round() as usize;
        if side * side != x.rows() {
            return Err(invalid_arg!("deconv input of {} tokens is not a square grid", x.rows()));
        }
        if x.cols() != self.weight.rows() {
            return Err(invalid_arg!(
                "deconv input width {} != {}",
                x.cols(),
                self.weight.rows()
            ));
        }
        let c_out = self.out_channels();
        let y = matmul(x, &self.weight);
        let out_side = 2 * side;
        let mut out = Mat::zeros(out_side * out_side, c_out);
        for i in 0..side {
            for j in 0..side {
                let src = y.row(i * side + j);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let dst = out.row_mut((2 * i + dy) * out_side + 2 * j + dx);
                        for c in 0..c_out {
                            dst[c] = src[self.col(dy, dx, c)] + self.bias.data()[c];
                        }
                    }
                }
            }
        }
        Ok((out, DeconvCache { x: x.clone(), side }))
    }

    pub fn backward(&self, cache: &DeconvCache<T>, dout: &Mat<T>, grads: &mut Self) -> Mat<T> {
        let side = cache.side;
        let out_side = 2 * side;
        let c_out = self.out_channels();
        dout.col_sums_into(&mut grads.bias);
        let mut dy_mat = Mat::zeros(side * side, 4 * c_out);
        for i in 0..side {
            for j in 0..side {
                let dst = dy_mat.row_mut(i * side + j);
                for dy in 0..2 {
                    for dx in 0..2 {
                        let src = dout.row((2 * i + dy) * out_side + 2 * j + dx);
                        for c in 0..c_out {
                            dst[(dy * 2 + dx) * c_out + c] = src[c];
                        }
                    }
                }
            }
        }
        acc_matmul_tn(&mut grads.weight, &cache.x, &dy_mat);
        matmul_nt(&dy_mat, &self.weight)
    }
}

impl<T: Real> Params<T> for Deconv2x<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
