//! Variable-view encoder: per-pixel image + camera channels are cut into
//! patches, linearly embedded, concatenated across views and run through a
//! stack of self-attention blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::{join, LayerNorm, LayerNormCache, Linear, Params, ResidualForm, SelfAttentionBlock, SelfBlockCache};
use crate::projector::ProjectionSet;
use crate::tensor::{Mat, Real};

/// Image channel plus six camera channels.
pub const INPUT_CHANNELS: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    #[serde(default)]
    pub residual: ResidualForm,
}

impl EncoderConfig {
    /// 64² inputs, 8² patches, 4 blocks of width 64 with 4 heads.
    pub fn desk() -> Self {
        Self {
            patch_size: 8,
            width: 64,
            layers: 4,
            heads: 4,
            residual: ResidualForm::Paper,
        }
    }

    /// 256² inputs, 16² patches, 12 blocks of width 384.
    pub fn clinical() -> Self {
        Self {
            patch_size: 16,
            width: 384,
            layers: 12,
            heads: 6,
            residual: ResidualForm::Paper,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.width == 0 || self.heads == 0 {
            return Err(invalid_arg!("encoder sizes must be positive"));
        }
        if !self.width.is_multiple_of(self.heads) {
            return Err(invalid_arg!(
                "encoder width {} not divisible by {} heads",
                self.width,
                self.heads
            ));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * INPUT_CHANNELS
    }

    pub fn patches_per_view(&self, rows: usize, cols: usize) -> usize {
        (rows / self.patch_size) * (cols / self.patch_size)
    }
}

/// What fills the six non-image input channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraChannels {
    /// Reference-point Plücker coordinates of each pixel ray.
    Rppc,
    /// Normalized detector coordinates `(u, v)` only; no scanner pose.
    DetectorPlane,
}

/// Raw patches of every view, one row per token, flattened `(py, px, channel)`.
pub fn patchify<T: Real>(
    proj: &ProjectionSet,
    patch: usize,
    camera: CameraChannels,
) -> Result<Mat<T>> {
    let (rows, cols) = (proj.geom.det_rows, proj.geom.det_cols);
    if patch == 0 || rows % patch != 0 || cols % patch != 0 {
        return Err(invalid_arg!(
            "detector {rows}x{cols} is not divisible into {patch}x{patch} patches"
        ));
    }
    let (gr, gc) = (rows / patch, cols / patch);
    let per_view = gr * gc;
    let plen = patch * patch * INPUT_CHANNELS;
    let mut out = Mat::zeros(proj.n_views() * per_view, plen);
    for v in 0..proj.n_views() {
        let img = proj.view(v);
        let rppc = &proj.rppc[v];
        for pr in 0..gr {
            for pc in 0..gc {
                let token = out.row_mut(v * per_view + pr * gc + pc);
                for py in 0..patch {
                    for px in 0..patch {
                        let (r, c) = (pr * patch + py, pc * patch + px);
                        let base = (py * patch + px) * INPUT_CHANNELS;
                        token[base] = T::from_f64(img[r * cols + c] as f64);
                        match camera {
                            CameraChannels::Rppc => {
                                let cam = rppc.at(r, c);
                                for k in 0..6 {
                                    token[base + 1 + k] = T::from_f64(cam[k] as f64);
                                }
                            }
                            CameraChannels::DetectorPlane => {
                                token[base + 1] =
                                    T::from_f64(2.0 * c as f64 / (cols as f64 - 1.0) - 1.0);
                                token[base + 2] =
                                    T::from_f64(2.0 * r as f64 / (rows as f64 - 1.0) - 1.0);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shared affine patch embedding.
#[derive(Clone, Debug)]
pub struct Tokenizer<T> {
    pub proj: Linear<T>,
    patch_size: usize,
}

impl<T: Real> Tokenizer<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Self {
        Self {
            proj: Linear::new(cfg.patch_len(), cfg.width, true, rng),
            patch_size: cfg.patch_size,
        }
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    /// Returns the tokens and the raw patch matrix needed for backward.
    pub fn tokenize(&self, proj: &ProjectionSet, camera: CameraChannels) -> Result<(Mat<T>, Mat<T>)> {
        let patches = patchify(proj, self.patch_size, camera)?;
        Ok((self.proj.forward(&patches), patches))
    }

    pub fn backward(&self, patches: &Mat<T>, dtokens: &Mat<T>, grads: &mut Self) {
        self.proj.backward_params(patches, dtokens, &mut grads.proj);
    }
}

impl<T: Real> Params<T> for Tokenizer<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.proj.visit(prefix, f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.proj.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub blocks: Vec<SelfAttentionBlock<T>>,
    pub final_norm: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct EncoderCache<T> {
    segment: usize,
    /// Per segment, per block.
    blocks: Vec<Vec<SelfBlockCache<T>>>,
    norm: LayerNormCache<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|_| SelfAttentionBlock::new(cfg.width, cfg.heads, cfg.residual, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            blocks,
            final_norm: LayerNorm::new(cfg.width),
        })
    }

    pub fn forward(&self, tokens: &Mat<T>) -> Result<(Mat<T>, EncoderCache<T>)> {
        self.forward_segmented(tokens, tokens.rows())
    }

    /// Attention restricted to consecutive groups of `segment` tokens (for
    /// example one view each); `segment == n` is ordinary full attention.
    pub fn forward_segmented(&self, tokens: &Mat<T>, segment: usize) -> Result<(Mat<T>, EncoderCache<T>)> {
        if tokens.rows() == 0 || segment == 0 || !tokens.rows().is_multiple_of(segment) {
            return Err(invalid_arg!(
                "{} tokens cannot be split into segments of {segment}",
                tokens.rows()
            ));
        }
        let mut outs = Vec::new();
        let mut caches = Vec::new();
        for s in 0..tokens.rows() / segment {
            let mut h = tokens.row_block(s * segment, segment);
            let mut seg_caches = Vec::with_capacity(self.blocks.len());
            for b in &self.blocks {
                let (next, c) = b.forward(&h)?;
                seg_caches.push(c);
                h = next;
            }
            outs.push(h);
            caches.push(seg_caches);
        }
        let (out, norm) = self.final_norm.forward(&Mat::vstack(&outs));
        Ok((
            out,
            EncoderCache {
                segment,
                blocks: caches,
                norm,
            },
        ))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dout: &Mat<T>, grads: &mut Self) -> Mat<T> {
        let dh = self.final_norm.backward(&cache.norm, dout, &mut grads.final_norm);
        let mut parts = Vec::with_capacity(cache.blocks.len());
        for (s, seg_caches) in cache.blocks.iter().enumerate() {
            let mut d = dh.row_block(s * cache.segment, cache.segment);
            for (b, (c, g)) in self
                .blocks
                .iter()
                .zip(seg_caches.iter().zip(grads.blocks.iter_mut()))
                .rev()
            {
                d = b.backward(c, &d, g);
            }
            parts.push(d);
        }
        Mat::vstack(&parts)
    }
}

impl<T: Real> Params<T> for Encoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.blocks.visit_mut(f);
        self.final_norm.visit_mut(f);
    }
}
