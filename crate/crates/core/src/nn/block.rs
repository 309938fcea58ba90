//! Encoder self-attention block and decoder cross-attention block.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{join, Attention, AttentionCache, LayerNorm, LayerNormCache, Mlp, MlpCache, Params};
use crate::error::Result;
use crate::tensor::{Mat, Real};

/// How residual connections are wired around attention.
///
/// `Paper`: the residual enters each attention head before the output
/// projection, and the decoder block returns `MLP(SA(E) + E) + SA(E)`.
/// `Standard`: pre-norm transformer wiring, `x + f(LN(x))` around every
/// sub-layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualForm {
    #[default]
    Paper,
    Standard,
}

impl ResidualForm {
    fn per_head(self) -> bool {
        self == ResidualForm::Paper
    }
}

impl std::str::FromStr for ResidualForm {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "paper" => Ok(Self::Paper),
            "standard" => Ok(Self::Standard),
            _ => Err(format!("unknown residual form {s:?} (paper|standard)")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttentionBlock<T> {
    form: ResidualForm,
    pub attn: Attention<T>,
    pub norm_mlp: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct SelfBlockCache<T> {
    pub attn: AttentionCache<T>,
    norm: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> SelfAttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        heads: usize,
        form: ResidualForm,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            form,
            attn: Attention::new(width, None, heads, form.per_head(), rng)?,
            norm_mlp: LayerNorm::new(width),
            mlp: Mlp::new(width, 4 * width, rng),
        })
    }

    pub fn forward(&self, x: &Mat<T>) -> Result<(Mat<T>, SelfBlockCache<T>)> {
        let (mut mid, attn) = self.attn.forward(x, None)?;
        if self.form == ResidualForm::Standard {
            mid.add_assign(x);
        }
        let (normed, norm) = self.norm_mlp.forward(&mid);
        let (mut out, mlp) = self.mlp.forward(&normed);
        out.add_assign(&mid);
        Ok((out, SelfBlockCache { attn, norm, mlp }))
    }

    pub fn backward(&self, cache: &SelfBlockCache<T>, dout: &Mat<T>, grads: &mut Self) -> Mat<T> {
        let dnormed = self.mlp.backward(&cache.mlp, dout, &mut grads.mlp);
        let mut dmid = self.norm_mlp.backward(&cache.norm, &dnormed, &mut grads.norm_mlp);
        dmid.add_assign(dout);
        let (mut dx, _) = self.attn.backward(&cache.attn, &dmid, &mut grads.attn);
        if self.form == ResidualForm::Standard {
            dx.add_assign(&dmid);
        }
        dx
    }
}

impl<T: Real> Params<T> for SelfAttentionBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.norm_mlp.visit(&join(prefix, "norm_mlp"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.attn.visit_mut(f);
        self.norm_mlp.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}

/// Triplane tokens query image features, then attend to each other, then an
/// MLP.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock<T> {
    form: ResidualForm,
    pub cross: Attention<T>,
    pub self_attn: Attention<T>,
    pub norm_mlp: LayerNorm<T>,
    pub mlp: Mlp<T>,
}

#[derive(Clone, Debug)]
pub struct CrossBlockCache<T> {
    pub cross: AttentionCache<T>,
    self_attn: AttentionCache<T>,
    norm: LayerNormCache<T>,
    mlp: MlpCache<T>,
}

impl<T: Real> CrossAttentionBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        kv_width: usize,
        heads: usize,
        form: ResidualForm,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            form,
            cross: Attention::new(width, Some(kv_width), heads, form.per_head(), rng)?,
            self_attn: Attention::new(width, None, heads, form.per_head(), rng)?,
            norm_mlp: LayerNorm::new(width),
            mlp: Mlp::new(width, 4 * width, rng),
        })
    }

    pub fn forward(&self, e: &Mat<T>, f: &Mat<T>) -> Result<(Mat<T>, CrossBlockCache<T>)> {
        let (mut mid, cross) = self.cross.forward(e, Some(f))?;
        if self.form == ResidualForm::Standard {
            mid.add_assign(e);
        }
        let (sa, self_attn) = self.self_attn.forward(&mid, None)?;
        let (out, norm, mlp) = match self.form {
            ResidualForm::Paper => {
                // MLP(SA(E_mid) + E_mid) + SA(E_mid)
                let u = sa.add(&mid);
                let (normed, norm) = self.norm_mlp.forward(&u);
                let (mut out, mlp) = self.mlp.forward(&normed);
                out.add_assign(&sa);
                (out, norm, mlp)
            }
            ResidualForm::Standard => {
                let x = sa.add(&mid);
                let (normed, norm) = self.norm_mlp.forward(&x);
                let (mut out, mlp) = self.mlp.forward(&normed);
                out.add_assign(&x);
                (out, norm, mlp)
            }
        };
        Ok((
            out,
            CrossBlockCache {
                cross,
                self_attn,
                norm,
                mlp,
            },
        ))
    }

    /// Returns gradients for the triplane tokens and the image features.
    pub fn backward(
        &self,
        cache: &CrossBlockCache<T>,
        dout: &Mat<T>,
        grads: &mut Self,
    ) -> (Mat<T>, Mat<T>) {
        let dnormed = self.mlp.backward(&cache.mlp, dout, &mut grads.mlp);
        let du = self.norm_mlp.backward(&cache.norm, &dnormed, &mut grads.norm_mlp);
        // Both forms: d(sa) = dout + du (paper) or d(x) = dout + du (standard).
        let dsa = du.add(dout);
        let (dmid_sa, _) = self
            .self_attn
            .backward(&cache.self_attn, &dsa, &mut grads.self_attn);
        let mut dmid = dmid_sa;
        match self.form {
            ResidualForm::Paper => dmid.add_assign(&du),
            ResidualForm::Standard => dmid.add_assign(&dsa),
        }
        let (mut de, df) = self.cross.backward(&cache.cross, &dmid, &mut grads.cross);
        if self.form == ResidualForm::Standard {
            de.add_assign(&dmid);
        }
        (de, df.expect("cross-attention yields a key-side gradient"))
    }
}

impl<T: Real> Params<T> for CrossAttentionBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.cross.visit(&join(prefix, "cross"), f);
        self.self_attn.visit(&join(prefix, "self_attn"), f);
        self.norm_mlp.visit(&join(prefix, "norm_mlp"), f);
        self.mlp.visit(&join(prefix, "mlp"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.cross.visit_mut(f);
        self.self_attn.visit_mut(f);
        self.norm_mlp.visit_mut(f);
        self.mlp.visit_mut(f);
    }
}
