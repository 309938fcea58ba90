//! Differentiable layers with explicit forward caches and backward passes.
//!
//! Every layer exposes its tensors through [`Params`]; gradients live in a
//! zeroed clone of the layer so that parameters and gradients can be zipped
//! in visiting order.

mod attention;
mod block;
mod deconv;
mod layers;

pub use attention::{Attention, AttentionCache};
pub use block::{
    CrossAttentionBlock, CrossBlockCache, ResidualForm, SelfAttentionBlock, SelfBlockCache,
};
pub use deconv::{Deconv2x, DeconvCache};
pub use layers::{gelu, gelu_grad, gelu_mat, gelu_with_grad, LayerNorm, LayerNormCache, Linear, Mlp, MlpCache};

use crate::tensor::{Mat, Real};

/// Init std for projection matrices.
pub const INIT_STD: f64 = 0.02;

/// `1 / sqrt(fan_in)`, used outside the attention stacks.
pub fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

pub trait Params<T: Real> {
    /// Visits every tensor with a stable dotted name.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>));
    /// Visits every tensor mutably, in the same order as [`visit`](Params::visit).
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>));

    fn named_params(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, m| out.push((n, m)));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, m| n += m.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_mut(&mut |m| m.fill(T::ZERO));
    }

    /// A clone with every tensor zeroed, used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut g = self.clone();
        g.zero_grads();
        g
    }
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Real, P: Params<T>> Params<T> for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        for p in self.iter_mut() {
            p.visit_mut(f);
        }
    }
}
