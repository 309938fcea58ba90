//! Cross-attention triplane decoder, triplane upsampling and the implicit
//! radiodensity field.
//!
//! Plane layout: each plane is a `res x res` grid stored row-major with one
//! feature vector per row of the matrix. The first plane coordinate indexes
//! columns and the second indexes rows: `T_xy[y][x]`, `T_yz[z][y]`,
//! `T_xz[z][x]`. Coordinates use the align-corners convention
//! `u = (p + 1) / 2 * (res - 1)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::{fan_in_std, gelu_mat, join, CrossAttentionBlock, CrossBlockCache, Deconv2x, DeconvCache, LayerNorm, LayerNormCache, Linear, Params, ResidualForm, INIT_STD};
use crate::tensor::{Mat, Real};
use crate::volume::{voxel_centers, VolumeGrid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Tokens per plane side; planes are twice as large after upsampling.
    pub token_grid: usize,
    pub plane_channels: usize,
    pub inf_layers: usize,
    pub inf_hidden: usize,
    #[serde(default)]
    pub residual: ResidualForm,
}

impl DecoderConfig {
    pub fn clinical() -> Self {
        Self {
            width: 512,
            layers: 12,
            heads: 8,
            token_grid: 32,
            plane_channels: 32,
            inf_layers: 4,
            inf_hidden: 64,
            residual: ResidualForm::Paper,
        }
    }

    pub fn plane_res(&self) -> usize {
        2 * self.token_grid
    }

    pub fn n_tokens(&self) -> usize {
        3 * self.token_grid * self.token_grid
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(invalid_arg!(
                "decoder width {} not divisible by {} heads",
                self.width,
                self.heads
            ));
        }
        if self.token_grid == 0 || self.plane_channels == 0 {
            return Err(invalid_arg!("decoder token grid and plane channels must be positive"));
        }
        if self.inf_layers < 2 || self.inf_hidden == 0 {
            return Err(invalid_arg!("implicit field needs at least two layers"));
        }
        Ok(())
    }
}

/// Which coordinate pair each plane is indexed by, as (column axis, row axis).
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (1, 2), (0, 2)];

#[derive(Clone, Debug, PartialEq)]
pub struct Triplane<T> {
    res: usize,
    /// `xy`, `yz`, `xz`; each `res² x channels`.
    pub planes: [Mat<T>; 3],
}

impl<T: Real> Triplane<T> {
    pub fn new(res: usize, planes: [Mat<T>; 3]) -> Result<Self> {
        if res < 2 {
            return Err(invalid_arg!("plane resolution must be >= 2"));
        }
        let ch = planes[0].cols();
        for p in &planes {
            if p.rows() != res * res || p.cols() != ch {
                return Err(invalid_arg!("triplane planes disagree in shape"));
            }
        }
        Ok(Self { res, planes })
    }

    pub fn zeros(res: usize, channels: usize) -> Self {
        let z = Mat::zeros(res * res, channels);
        Self {
            res,
            planes: [z.clone(), z.clone(), z],
        }
    }

    pub fn res(&self) -> usize {
        self.res
    }

    pub fn channels(&self) -> usize {
        self.planes[0].cols()
    }
}

/// Bilinear stencil: four node indices and weights, ordered
/// `(x0,y0), (x1,y0), (x0,y1), (x1,y1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stencil {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Bilinear stencil at `p` on a `res x res` grid, clamped to the square.
pub fn plane_stencil(res: usize, p: [f64; 2]) -> Stencil {
    let to_grid = |c: f64| {
        let u = if c.is_finite() {
            ((c + 1.0) * 0.5 * (res as f64 - 1.0)).clamp(0.0, res as f64 - 1.0)
        } else {
            0.0
        };
        let i0 = (u.floor() as usize).min(res - 2);
        (i0, u - i0 as f64)
    };
    let (x0, alpha) = to_grid(p[0]);
    let (y0, beta) = to_grid(p[1]);
    let base = y0 * res + x0;
    Stencil {
        idx: [base, base + 1, base + res, base + res + 1],
        w: [
            (1.0 - alpha) * (1.0 - beta),
            alpha * (1.0 - beta),
            (1.0 - alpha) * beta,
            alpha * beta,
        ],
    }
}

/// Interpolated feature of `plane` (a `res² x C` grid) at `p`.
pub fn sample_plane<T: Real>(plane: &Mat<T>, res: usize, p: [f64; 2]) -> Vec<T> {
    let st = plane_stencil(res, p);
    let mut out = vec![T::ZERO; plane.cols()];
    for (&i, &w) in st.idx.iter().zip(&st.w) {
        let w = T::from_f64(w);
        for (o, &v) in out.iter_mut().zip(plane.row(i)) {
            *o += w * v;
        }
    }
    out
}

fn scatter_stencil<T: Real>(st: &Stencil, dfeat: &[T], dplane: &mut Mat<T>) {
    for (&n, &w) in st.idx.iter().zip(&st.w) {
        let w = T::from_f64(w);
        for (o, &g) in dplane.row_mut(n).iter_mut().zip(dfeat) {
            *o += w * g;
        }
    }
}

/// Accumulates the gradient of [`sample_plane`] with respect to the plane.
pub fn sample_plane_backward<T: Real>(res: usize, p: [f64; 2], dfeat: &[T], dplane: &mut Mat<T>) {
    scatter_stencil(&plane_stencil(res, p), dfeat, dplane);
}

/// Learnable triplane tokens refined by cross-attention to image features.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub embedding: Mat<T>,
    pub blocks: Vec<CrossAttentionBlock<T>>,
    pub final_norm: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct DecoderCache<T> {
    pub blocks: Vec<CrossBlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &DecoderConfig, feature_width: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.layers)
            .map(|_| CrossAttentionBlock::new(cfg.width, feature_width, cfg.heads, cfg.residual, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            embedding: Mat::trunc_normal(cfg.n_tokens(), cfg.width, INIT_STD, rng),
            blocks,
            final_norm: LayerNorm::new(cfg.width),
        })
    }

    /// Triplane tokens `Z`, always `3 * token_grid²` long.
    pub fn forward(&self, features: &Mat<T>) -> Result<(Mat<T>, DecoderCache<T>)> {
        let mut e = self.embedding.clone();
        let mut caches = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (next, c) = b.forward(&e, features)?;
            caches.push(c);
            e = next;
        }
        let (z, norm) = self.final_norm.forward(&e);
        Ok((z, DecoderCache { blocks: caches, norm }))
    }

    /// Accumulates parameter gradients; returns the feature gradient.
    pub fn backward(
        &self,
        cache: &DecoderCache<T>,
        dz: &Mat<T>,
        feature_shape: (usize, usize),
        grads: &mut Self,
    ) -> Mat<T> {
        let mut de = self.final_norm.backward(&cache.norm, dz, &mut grads.final_norm);
        let mut df = Mat::zeros(feature_shape.0, feature_shape.1);
        for ((b, c), g) in self
            .blocks
            .iter()
            .zip(&cache.blocks)
            .zip(grads.blocks.iter_mut())
            .rev()
        {
            let (de_in, df_b) = b.backward(c, &de, g);
            df.add_assign(&df_b);
            de = de_in;
        }
        grads.embedding.add_assign(&de);
        df
    }
}

impl<T: Real> Params<T> for Decoder<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        f(join(prefix, "embedding"), &self.embedding);
        self.blocks.visit(&join(prefix, "blocks"), f);
        self.final_norm.visit(&join(prefix, "final_norm"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        f(&mut self.embedding);
        self.blocks.visit_mut(f);
        self.final_norm.visit_mut(f);
    }
}

pub struct UpsampleCache<T> {
    planes: [DeconvCache<T>; 3],
}

/// Splits `Z` into the `xy`, `yz`, `xz` token grids (in that order) and
/// upsamples each with the shared transposed convolution.
pub fn to_triplane<T: Real>(
    z: &Mat<T>,
    token_grid: usize,
    deconv: &Deconv2x<T>,
) -> Result<(Triplane<T>, UpsampleCache<T>)> {
    let per = token_grid * token_grid;
    if z.rows() != 3 * per {
        return Err(invalid_arg!(
            "expected {} triplane tokens, got {}",
            3 * per,
            z.rows()
        ));
    }
    let mut planes = Vec::with_capacity(3);
    let mut caches = Vec::with_capacity(3);
    for k in 0..3 {
        let (p, c) = deconv.forward(&z.row_block(k * per, per))?;
        planes.push(p);
        caches.push(c);
    }
    let planes: [Mat<T>; 3] = planes.try_into().map_err(|_| invalid_arg!("plane count"))?;
    let caches: [DeconvCache<T>; 3] = caches.try_into().map_err(|_| invalid_arg!("plane count"))?;
    Ok((Triplane::new(2 * token_grid, planes)?, UpsampleCache { planes: caches }))
}

pub fn to_triplane_backward<T: Real>(
    cache: &UpsampleCache<T>,
    dplanes: &[Mat<T>; 3],
    deconv: &Deconv2x<T>,
    grads: &mut Deconv2x<T>,
) -> Mat<T> {
    let parts: Vec<Mat<T>> = (0..3)
        .map(|k| deconv.backward(&cache.planes[k], &dplanes[k], grads))
        .collect();
    Mat::vstack(&parts)
}

/// Point-feature MLP: GELU hidden layers and a sigmoid output.
#[derive(Clone, Debug)]
pub struct ImplicitField<T> {
    pub layers: Vec<Linear<T>>,
}

pub struct FieldCache<T> {
    stencils: Vec<[Stencil; 3]>,
    inputs: Vec<Mat<T>>,
    dact: Vec<Mat<T>>,
    out: Vec<T>,
}

impl<T: Real> ImplicitField<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &DecoderConfig, rng: &mut R) -> Self {
        let mut dims = vec![3 * cfg.plane_channels];
        dims.extend(std::iter::repeat_n(cfg.inf_hidden, cfg.inf_layers - 1));
        dims.push(1);
        let layers = dims
            .windows(2)
            .map(|w| Linear::with_std(w[0], w[1], true, fan_in_std(w[0]), rng))
            .collect();
        Self { layers }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].in_dim()
    }

    /// Sets the last layer to zero so every prediction starts at sigmoid(0).
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("non-empty field");
        last.weight.fill(T::ZERO);
        if let Some(b) = last.bias.as_mut() {
            b.fill(T::ZERO);
        }
    }

    /// `M x 3C` point features.
    pub fn gather(tri: &Triplane<T>, points: &[[f64; 3]]) -> (Mat<T>, Vec<[Stencil; 3]>) {
        let ch = tri.channels();
        let mut feats = Mat::zeros(points.len(), 3 * ch);
        let mut stencils = Vec::with_capacity(points.len());
        for (i, p) in points.iter().enumerate() {
            let row = feats.row_mut(i);
            let mut sts = [Stencil { idx: [0; 4], w: [0.0; 4] }; 3];
            for (k, &(a, b)) in PLANE_AXES.iter().enumerate() {
                let st = plane_stencil(tri.res, [p[a], p[b]]);
                let dst = &mut row[k * ch..(k + 1) * ch];
                for (&n, &w) in st.idx.iter().zip(&st.w) {
                    let w = T::from_f64(w);
                    for (o, &v) in dst.iter_mut().zip(tri.planes[k].row(n)) {
                        *o += w * v;
                    }
                }
                sts[k] = st;
            }
            stencils.push(sts);
        }
        (feats, stencils)
    }

    /// MLP on precomputed features; returns logits and cache parts.
    fn mlp_forward(&self, feats: Mat<T>) -> (Vec<T>, Vec<Mat<T>>, Vec<Mat<T>>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut dact_all = Vec::with_capacity(self.layers.len());
        let mut h = feats;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let a = l.forward(&h);
            inputs.push(h);
            if i < last {
                let (act, dact) = gelu_mat(&a);
                h = act;
                dact_all.push(dact);
            } else {
                h = a;
            }
        }
        (h.into_vec(), inputs, dact_all)
    }

    pub fn forward(&self, tri: &Triplane<T>, points: &[[f64; 3]]) -> Result<(Vec<T>, FieldCache<T>)> {
        if tri.channels() * 3 != self.input_width() {
            return Err(invalid_arg!(
                "triplane has {} channels, field expects {}",
                tri.channels(),
                self.input_width() / 3
            ));
        }
        let (feats, stencils) = Self::gather(tri, points);
        let (logits, inputs, dact) = self.mlp_forward(feats);
        let out: Vec<T> = logits.into_iter().map(sigmoid).collect();
        Ok((
            out.clone(),
            FieldCache {
                stencils,
                inputs,
                dact,
                out,
            },
        ))
    }

    /// Field values without keeping caches, evaluated in chunks.
    pub fn query(&self, tri: &Triplane<T>, points: &[[f64; 3]]) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(8192) {
            out.extend(self.forward(tri, chunk)?.0);
        }
        Ok(out)
    }

    /// Accumulates MLP gradients; returns plane gradients.
    pub fn backward(&self, cache: &FieldCache<T>, dout: &[T], res: usize, grads: &mut Self) -> [Mat<T>; 3] {
        let n = dout.len();
        let dlogit: Vec<T> = dout
            .iter()
            .zip(&cache.out)
            .map(|(&g, &s)| g * s * (T::ONE - s))
            .collect();
        let mut d = Mat::from_vec(n, 1, dlogit);
        for i in (0..self.layers.len()).rev() {
            let dx = self.layers[i].backward(&cache.inputs[i], &d, &mut grads.layers[i]);
            d = if i > 0 {
                let mut dx = dx;
                for (g, &p) in dx.data_mut().iter_mut().zip(cache.dact[i - 1].data()) {
                    *g *= p;
                }
                dx
            } else {
                dx
            };
        }
        let ch = self.input_width() / 3;
        let mut dplanes = [
            Mat::zeros(res * res, ch),
            Mat::zeros(res * res, ch),
            Mat::zeros(res * res, ch),
        ];
        for (i, sts) in cache.stencils.iter().enumerate() {
            let row = d.row(i);
            for (k, st) in sts.iter().enumerate() {
                scatter_stencil(st, &row[k * ch..(k + 1) * ch], &mut dplanes[k]);
            }
        }
        dplanes
    }
}

impl<T: Real> Params<T> for ImplicitField<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.layers.visit(&join(prefix, "layers"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.layers.visit_mut(f);
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    T::ONE / (T::ONE + (-x).exp())
}

/// Field sampled at all voxel centers of an `R³` align-corners grid.
pub fn reconstruct_volume<T: Real>(
    tri: &Triplane<T>,
    resolution: usize,
    field: &ImplicitField<T>,
) -> Result<VolumeGrid> {
    if resolution < 2 {
        return Err(invalid_arg!("volume resolution must be >= 2"));
    }
    let pts = voxel_centers(resolution);
    let vals = field.query(tri, &pts)?;
    VolumeGrid::from_values(resolution, vals.iter().map(|v| v.to_f64() as f32).collect())
}
