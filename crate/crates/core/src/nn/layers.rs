use rand::Rng;

use super::{join, Params, INIT_STD};
use crate::tensor::{acc_matmul_tn, matmul, matmul_nt, Mat, Real};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub gain: Mat<T>,
    pub bias: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct LayerNormCache<T> {
    xhat: Mat<T>,
    inv_std: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Mat::filled(1, width, T::ONE),
            bias: Mat::zeros(1, width),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, LayerNormCache<T>) {
        let d = x.cols();
        assert_eq!(d, self.gain.len(), "layer norm width mismatch");
        let inv_d = T::from_f64(1.0 / d as f64);
        let eps = T::from_f64(LN_EPS);
        let mut xhat = Mat::zeros(x.rows(), d);
        let mut inv_std = Vec::with_capacity(x.rows());
        let mut y = Mat::zeros(x.rows(), d);
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::ONE / (var + eps).sqrt();
            inv_std.push(is);
            let xh = xhat.row_mut(r);
            for (o, &v) in xh.iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            let affine = xhat.row(r).iter().zip(self.gain.data()).zip(self.bias.data());
            for (o, ((&xh, &g), &b)) in y.row_mut(r).iter_mut().zip(affine) {
                *o = xh * g + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Mat<T>, grads: &mut Self) -> Mat<T> {
        let d = dy.cols();
        let inv_d = T::from_f64(1.0 / d as f64);
        let mut dx = Mat::zeros(dy.rows(), d);
        let mut dxhat = vec![T::ZERO; d];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.xhat.row(r);
            let mut sum_dxh = T::ZERO;
            let mut sum_dxh_xh = T::ZERO;
            for c in 0..d {
                grads.gain.data_mut()[c] += dyr[c] * xh[c];
                grads.bias.data_mut()[c] += dyr[c];
                dxhat[c] = dyr[c] * self.gain.data()[c];
                sum_dxh += dxhat[c];
                sum_dxh_xh += dxhat[c] * xh[c];
            }
            let is = cache.inv_std[r];
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = is * (dxhat[c] - inv_d * sum_dxh - xh[c] * inv_d * sum_dxh_xh);
            }
        }
        dx
    }
}

impl<T: Real> Params<T> for LayerNorm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "gain"), &self.gain);
        f(join(prefix, "bias"), &self.bias);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        f(&mut self.gain);
        f(&mut self.bias);
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Mat<T>,
    pub bias: Option<Mat<T>>,
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        Self {
            weight: Mat::trunc_normal(input, output, INIT_STD, rng),
            bias: bias.then(|| Mat::zeros(1, output)),
        }
    }

    pub fn with_std<R: Rng + ?Sized>(input: usize, output: usize, bias: bool, std: f64, rng: &mut R) -> Self {
        Self {
            weight: Mat::trunc_normal(input, output, std, rng),
            bias: bias.then(|| Mat::zeros(1, output)),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = matmul(x, &self.weight);
        if let Some(b) = &self.bias {
            y.add_row_broadcast(b);
        }
        y
    }

    /// Accumulates parameter gradients; returns the input gradient.
    pub fn backward(&self, x: &Mat<T>, dy: &Mat<T>, grads: &mut Self) -> Mat<T> {
        self.backward_params(x, dy, grads);
        matmul_nt(dy, &self.weight)
    }

    pub fn backward_params(&self, x: &Mat<T>, dy: &Mat<T>, grads: &mut Self) {
        acc_matmul_tn(&mut grads.weight, x, dy);
        if let Some(gb) = grads.bias.as_mut() {
            dy.col_sums_into(gb);
        }
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        f(&mut self.weight);
        if let Some(b) = self.bias.as_mut() {
            f(b);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    gelu_with_grad(x).0
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    gelu_with_grad(x).1
}

/// `tanh` through one exponential; saturates cleanly at both ends.
#[inline]
fn fast_tanh<T: Real>(z: T) -> T {
    let two = T::from_f64(2.0);
    T::ONE - two / ((two * z).exp() + T::ONE)
}

/// GELU value and derivative sharing one transcendental.
#[inline]
pub fn gelu_with_grad<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let x2 = x * x;
    let t = fast_tanh(c * x * (T::ONE + a * x2));
    let y = half * x * (T::ONE + t);
    let dy = half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x2);
    (y, dy)
}

/// Elementwise GELU returning activations and derivatives.
pub fn gelu_mat<T: Real>(pre: &Mat<T>) -> (Mat<T>, Mat<T>) {
    let mut y = Mat::zeros(pre.rows(), pre.cols());
    let mut dy = Mat::zeros(pre.rows(), pre.cols());
    for ((o, d), &x) in y.data_mut().iter_mut().zip(dy.data_mut()).zip(pre.data()) {
        (*o, *d) = gelu_with_grad(x);
    }
    (y, dy)
}

/// Two-layer perceptron `gelu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    x: Mat<T>,
    dact: Mat<T>,
    hidden: Mat<T>,
}

impl<T: Real> Mlp<T> {
    pub fn new<R: Rng + ?Sized>(width: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            fc1: Linear::new(width, hidden, true, rng),
            fc2: Linear::new(hidden, width, true, rng),
        }
    }

    pub fn forward(&self, x: &Mat<T>) -> (Mat<T>, MlpCache<T>) {
        let (hidden, dact) = gelu_mat(&self.fc1.forward(x));
        let y = self.fc2.forward(&hidden);
        (
            y,
            MlpCache {
                x: x.clone(),
                dact,
                hidden,
            },
        )
    }

    pub fn backward(&self, cache: &MlpCache<T>, dy: &Mat<T>, grads: &mut Self) -> Mat<T> {
        let mut dh = self.fc2.backward(&cache.hidden, dy, &mut grads.fc2);
        for (g, &d) in dh.data_mut().iter_mut().zip(cache.dact.data()) {
            *g *= d;
        }
        self.fc1.backward(&cache.x, &dh, &mut grads.fc1)
    }
}

impl<T: Real> Params<T> for Mlp<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}
