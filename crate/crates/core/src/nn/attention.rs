//! Multi-head scaled dot-product attention.
//!
//! Queries come from the (normalized) query-side tokens, keys and values from
//! the key-side tokens; for self-attention both sides are the same tokens and
//! share one normalization. With `per_head_residual` each head's output gets
//! the matching feature slice of the raw query-side input added before the
//! heads are concatenated and mixed by the output matrix:
//!
//! `A_i = softmax(Q_i K_i^T / sqrt(d_k)) V_i + X_i`, `out = [A_1 .. A_k] W_o`.
//!
//! Without it the layer returns `[O_1 .. O_k] W_o` and the caller adds the
//! residual.

use rand::Rng;

use super::{join, LayerNorm, LayerNormCache, Params, INIT_STD};
use crate::error::{invalid_arg, Result};
use crate::tensor::{acc_matmul_tn, matmul, matmul_nt, matmul_tn, Mat, Real};

#[derive(Clone, Debug)]
pub struct Attention<T> {
    heads: usize,
    per_head_residual: bool,
    pub norm_q: LayerNorm<T>,
    /// Separate normalization of the key side; `None` for self-attention.
    pub norm_kv: Option<LayerNorm<T>>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    qn: Mat<T>,
    qn_cache: LayerNormCache<T>,
    kv: Option<(Mat<T>, LayerNormCache<T>)>,
    q: Mat<T>,
    k: Mat<T>,
    v: Mat<T>,
    probs: Vec<Mat<T>>,
    mixed: Mat<T>,
}

impl<T: Real> AttentionCache<T> {
    /// Softmax matrices, one per head.
    pub fn probabilities(&self) -> &[Mat<T>] {
        &self.probs
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows<T: Real>(s: &mut Mat<T>) {
    for r in 0..s.rows() {
        let row = s.row_mut(r);
        let mx = row.iter().copied().fold(row[0], T::max);
        let mut sum = T::ZERO;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = T::ONE / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

impl<T: Real> Attention<T> {
    /// `width` is the query-side (and output) width; `kv_width` the key-side
    /// width, `None` for self-attention.
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        kv_width: Option<usize>,
        heads: usize,
        per_head_residual: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(invalid_arg!("width {width} is not divisible by {heads} heads"));
        }
        let kvw = kv_width.unwrap_or(width);
        Ok(Self {
            heads,
            per_head_residual,
            norm_q: LayerNorm::new(width),
            norm_kv: kv_width.map(LayerNorm::new),
            wq: Mat::trunc_normal(width, width, INIT_STD, rng),
            wk: Mat::trunc_normal(kvw, width, INIT_STD, rng),
            wv: Mat::trunc_normal(kvw, width, INIT_STD, rng),
            wo: Mat::trunc_normal(width, width, INIT_STD, rng),
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn width(&self) -> usize {
        self.wq.cols()
    }

    pub fn per_head_residual(&self) -> bool {
        self.per_head_residual
    }

    fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// `kv` must be `Some` exactly when the layer was built for cross-attention.
    pub fn forward(&self, x: &Mat<T>, kv: Option<&Mat<T>>) -> Result<(Mat<T>, AttentionCache<T>)> {
        let d = self.width();
        if x.cols() != d {
            return Err(invalid_arg!("query tokens have width {}, expected {d}", x.cols()));
        }
        let (qn, qn_cache) = self.norm_q.forward(x);
        let kv_norm = match (&self.norm_kv, kv) {
            (Some(norm), Some(f)) => {
                if f.cols() != self.wk.rows() {
                    return Err(invalid_arg!(
                        "key tokens have width {}, expected {}",
                        f.cols(),
                        self.wk.rows()
                    ));
                }
                if f.rows() == 0 {
                    return Err(invalid_arg!("cross-attention needs at least one key token"));
                }
                Some(norm.forward(f))
            }
            (None, None) => None,
            _ => return Err(invalid_arg!("attention called with the wrong key source")),
        };
        let kv_in = kv_norm.as_ref().map_or(&qn, |(m, _)| m);
        let q = matmul(&qn, &self.wq);
        let k = matmul(kv_in, &self.wk);
        let v = matmul(kv_in, &self.wv);

        let dk = self.head_dim();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        let mut mixed = Mat::zeros(x.rows(), d);
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.col_slice(h * dk, dk);
            let kh = k.col_slice(h * dk, dk);
            let vh = v.col_slice(h * dk, dk);
            let mut s = matmul_nt(&qh, &kh);
            s.scale(scale);
            softmax_rows(&mut s);
            let oh = matmul(&s, &vh);
            mixed.add_col_slice(h * dk, &oh);
            probs.push(s);
        }
        if self.per_head_residual {
            mixed.add_assign(x);
        }
        let out = matmul(&mixed, &self.wo);
        Ok((
            out,
            AttentionCache {
                qn,
                qn_cache,
                kv: kv_norm,
                q,
                k,
                v,
                probs,
                mixed,
            },
        ))
    }

    /// Returns the query-side input gradient and, for cross-attention, the
    /// key-side input gradient.
    pub fn backward(
        &self,
        cache: &AttentionCache<T>,
        dout: &Mat<T>,
        grads: &mut Self,
    ) -> (Mat<T>, Option<Mat<T>>) {
        let d = self.width();
        let dk = self.head_dim();
        let scale = T::from_f64(1.0 / (dk as f64).sqrt());
        acc_matmul_tn(&mut grads.wo, &cache.mixed, dout);
        let dmixed = matmul_nt(dout, &self.wo);

        let nq = cache.q.rows();
        let nk = cache.k.rows();
        let mut dq = Mat::zeros(nq, d);
        let mut dkm = Mat::zeros(nk, d);
        let mut dv = Mat::zeros(nk, d);
        for h in 0..self.heads {
            let p = &cache.probs[h];
            let doh = dmixed.col_slice(h * dk, dk);
            let vh = cache.v.col_slice(h * dk, dk);
            let qh = cache.q.col_slice(h * dk, dk);
            let kh = cache.k.col_slice(h * dk, dk);
            dv.add_col_slice(h * dk, &matmul_tn(p, &doh));
            let mut ds = matmul_nt(&doh, &vh);
            for r in 0..nq {
                let pr = p.row(r);
                let dsr = ds.row_mut(r);
                let dot = pr.iter().zip(dsr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                for (g, &pv) in dsr.iter_mut().zip(pr) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            dq.add_col_slice(h * dk, &matmul(&ds, &kh));
            dkm.add_col_slice(h * dk, &matmul_tn(&ds, &qh));
        }

        acc_matmul_tn(&mut grads.wq, &cache.qn, &dq);
        let mut dqn = matmul_nt(&dq, &self.wq);
        let kv_in = cache.kv.as_ref().map_or(&cache.qn, |(m, _)| m);
        acc_matmul_tn(&mut grads.wk, kv_in, &dkm);
        acc_matmul_tn(&mut grads.wv, kv_in, &dv);
        let mut dkv_n = matmul_nt(&dkm, &self.wk);
        dkv_n.add_assign(&matmul_nt(&dv, &self.wv));

        let dkv = match (&cache.kv, &self.norm_kv, grads.norm_kv.as_mut()) {
            (Some((_, c)), Some(norm), Some(gnorm)) => Some(norm.backward(c, &dkv_n, gnorm)),
            _ => {
                dqn.add_assign(&dkv_n);
                None
            }
        };
        let mut dx = self.norm_q.backward(&cache.qn_cache, &dqn, &mut grads.norm_q);
        if self.per_head_residual {
            dx.add_assign(&dmixed);
        }
        (dx, dkv)
    }
}

impl<T: Real> Params<T> for Attention<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.norm_q.visit(&join(prefix, "norm_q"), f);
        if let Some(n) = &self.norm_kv {
            n.visit(&join(prefix, "norm_kv"), f);
        }
        f(join(prefix, "wq"), &self.wq);
        f(join(prefix, "wk"), &self.wk);
        f(join(prefix, "wv"), &self.wv);
        f(join(prefix, "wo"), &self.wo);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.norm_q.visit_mut(f);
        if let Some(n) = self.norm_kv.as_mut() {
            n.visit_mut(f);
        }
        f(&mut self.wq);
        f(&mut self.wk);
        f(&mut self.wv);
        f(&mut self.wo);
    }
}
