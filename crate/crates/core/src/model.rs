//! The full reconstruction model and its break-down ablations.
//!
//! * `Xformer`: RPPC camera channels, attention across all views, triplane
//!   decoder and implicit field.
//! * `Triplane`: the same decoder and field, but each view is encoded on its
//!   own and only sees detector-plane coordinates, not the scanner pose.
//! * `Base`: the per-view encoder, token features mean-pooled and fed to an
//!   MLP that predicts a coarse logit grid, trilinearly upsampled.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::nn::{gelu, gelu_grad, join, Deconv2x, Linear, Params};
use crate::projector::ProjectionSet;
use crate::tensor::{Mat, Real};
use crate::volume::{voxel_centers, VolumeGrid};
use crate::xformer::{CameraChannels, Encoder, EncoderCache, EncoderConfig, Tokenizer};
use crate::xtriplane::{
    reconstruct_volume, sigmoid, to_triplane, to_triplane_backward, Decoder, DecoderCache, DecoderConfig,
    FieldCache, ImplicitField, Triplane, UpsampleCache,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    Base,
    Triplane,
    #[default]
    Xformer,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Base, Ablation::Triplane, Ablation::Xformer];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Base => "base",
            Ablation::Triplane => "triplane",
            Ablation::Xformer => "xformer",
        }
    }

    pub fn camera(self) -> CameraChannels {
        match self {
            Ablation::Xformer => CameraChannels::Rppc,
            _ => CameraChannels::DetectorPlane,
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim_start_matches('+') {
            "base" => Ok(Self::Base),
            "triplane" => Ok(Self::Triplane),
            "xformer" | "full" => Ok(Self::Xformer),
            _ => Err(format!("unknown ablation {s:?} (base|triplane|xformer)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub ablation: Ablation,
    /// Side of the logit grid predicted by the `Base` head.
    pub grid_side: usize,
    pub grid_hidden: usize,
}

impl ModelConfig {
    /// Small CPU-trainable model for 64² projections and 32³ volumes.
    pub fn desk() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            decoder: DecoderConfig {
                width: 64,
                layers: 2,
                heads: 4,
                token_grid: 16,
                plane_channels: 16,
                inf_layers: 4,
                inf_hidden: 64,
                residual: Default::default(),
            },
            ablation: Ablation::Xformer,
            grid_side: 8,
            grid_hidden: 256,
        }
    }

    /// Reduced widths and depths of [`desk`](Self::desk) for fast overfit
    /// and ablation runs on one CPU core.
    pub fn toy() -> Self {
        let mut c = Self::desk();
        c.encoder.width = 32;
        c.encoder.layers = 2;
        c.encoder.heads = 2;
        c.decoder.width = 32;
        c.decoder.layers = 1;
        c.decoder.heads = 2;
        c
    }

    pub fn clinical() -> Self {
        Self {
            encoder: EncoderConfig::clinical(),
            decoder: DecoderConfig::clinical(),
            ablation: Ablation::Xformer,
            grid_side: 16,
            grid_hidden: 1024,
        }
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.grid_side < 2 || self.grid_hidden == 0 {
            return Err(invalid_arg!("grid head needs side >= 2 and a hidden layer"));
        }
        Ok(())
    }
}

/// Coarse logit grid regressed from pooled features.
#[derive(Clone, Debug)]
pub struct GridHead<T> {
    side: usize,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

impl<T: Real> GridHead<T> {
    fn new<R: Rng + ?Sized>(width: usize, hidden: usize, side: usize, rng: &mut R) -> Self {
        let mut fc2 = Linear::new(hidden, side * side * side, true, rng);
        fc2.weight.fill(T::ZERO);
        Self {
            side,
            fc1: Linear::new(width, hidden, true, rng),
            fc2,
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }
}

impl<T: Real> Params<T> for GridHead<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.fc1.visit(&join(prefix, "fc1"), f);
        self.fc2.visit(&join(prefix, "fc2"), f);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.fc1.visit_mut(f);
        self.fc2.visit_mut(f);
    }
}

/// Trilinear stencil on a `side³` align-corners grid (x fastest).
pub fn grid_stencil(side: usize, p: [f64; 3]) -> ([usize; 8], [f64; 8]) {
    let mut i0 = [0usize; 3];
    let mut f = [0f64; 3];
    for a in 0..3 {
        let u = if p[a].is_finite() {
            ((p[a] + 1.0) * 0.5 * (side as f64 - 1.0)).clamp(0.0, side as f64 - 1.0)
        } else {
            0.0
        };
        i0[a] = (u.floor() as usize).min(side - 2);
        f[a] = u - i0[a] as f64;
    }
    let mut idx = [0usize; 8];
    let mut w = [0f64; 8];
    for c in 0..8 {
        let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
        idx[c] = (i0[2] + dz) * side * side + (i0[1] + dy) * side + i0[0] + dx;
        let wx = if dx == 1 { f[0] } else { 1.0 - f[0] };
        let wy = if dy == 1 { f[1] } else { 1.0 - f[1] };
        let wz = if dz == 1 { f[2] } else { 1.0 - f[2] };
        w[c] = wx * wy * wz;
    }
    (idx, w)
}

#[derive(Clone, Debug)]
pub enum Head<T> {
    Triplane {
        decoder: Decoder<T>,
        deconv: Deconv2x<T>,
        field: ImplicitField<T>,
    },
    Grid(GridHead<T>),
}

#[derive(Clone, Debug)]
pub struct XLrm<T> {
    cfg: ModelConfig,
    pub tokenizer: Tokenizer<T>,
    pub encoder: Encoder<T>,
    pub head: Head<T>,
}

/// Encoder output for one projection set.
pub struct Features<T> {
    pub tokens: Mat<T>,
    patches: Mat<T>,
    cache: EncoderCache<T>,
}

/// Decoded representation from which the field is queried.
// One value per forward pass, so the size gap between variants is harmless.
#[allow(clippy::large_enum_variant)]
pub enum Latent<T> {
    Triplane {
        tri: Triplane<T>,
        dec: DecoderCache<T>,
        up: UpsampleCache<T>,
    },
    Grid {
        pooled: Mat<T>,
        hidden_pre: Mat<T>,
        logits: Vec<T>,
    },
}

pub struct ModelCache<T> {
    features: Features<T>,
    latent: Latent<T>,
    query: QueryCache<T>,
}

enum QueryCache<T> {
    Field(FieldCache<T>),
    Grid {
        stencils: Vec<([usize; 8], [f64; 8])>,
        out: Vec<T>,
    },
}

impl<T: Real> XLrm<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let tokenizer = Tokenizer::new(&cfg.encoder, rng);
        let encoder = Encoder::new(&cfg.encoder, rng)?;
        let head = match cfg.ablation {
            Ablation::Base => Head::Grid(GridHead::new(cfg.encoder.width, cfg.grid_hidden, cfg.grid_side, rng)),
            _ => {
                let decoder = Decoder::new(&cfg.decoder, cfg.encoder.width, rng)?;
                let deconv = Deconv2x::new(cfg.decoder.width, cfg.decoder.plane_channels, rng);
                let mut field = ImplicitField::new(&cfg.decoder, rng);
                field.zero_output_layer();
                Head::Triplane { decoder, deconv, field }
            }
        };
        Ok(Self {
            cfg: *cfg,
            tokenizer,
            encoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn ablation(&self) -> Ablation {
        self.cfg.ablation
    }

    /// Tokenize and encode. Views attend to each other only in the full model.
    pub fn encode(&self, proj: &ProjectionSet) -> Result<Features<T>> {
        let (tokens, patches) = self.tokenizer.tokenize(proj, self.cfg.ablation.camera())?;
        let segment = match self.cfg.ablation {
            Ablation::Xformer => tokens.rows(),
            _ => tokens.rows() / proj.n_views(),
        };
        let (tokens, cache) = self.encoder.forward_segmented(&tokens, segment)?;
        Ok(Features { tokens, patches, cache })
    }

    pub fn decode(&self, features: &Features<T>) -> Result<Latent<T>> {
        match &self.head {
            Head::Triplane { decoder, deconv, .. } => {
                let (z, dec) = decoder.forward(&features.tokens)?;
                let (tri, up) = to_triplane(&z, self.cfg.decoder.token_grid, deconv)?;
                Ok(Latent::Triplane { tri, dec, up })
            }
            Head::Grid(g) => {
                let f = &features.tokens;
                let mut pooled = Mat::zeros(1, f.cols());
                f.col_sums_into(&mut pooled);
                pooled.scale(T::from_f64(1.0 / f.rows() as f64));
                let hidden_pre = g.fc1.forward(&pooled);
                let logits = g.fc2.forward(&hidden_pre.map(gelu)).into_vec();
                Ok(Latent::Grid {
                    pooled,
                    hidden_pre,
                    logits,
                })
            }
        }
    }

    fn query_latent(&self, latent: &Latent<T>, points: &[[f64; 3]]) -> Result<(Vec<T>, QueryCache<T>)> {
        match (&self.head, latent) {
            (Head::Triplane { field, .. }, Latent::Triplane { tri, .. }) => {
                let (out, c) = field.forward(tri, points)?;
                Ok((out, QueryCache::Field(c)))
            }
            (Head::Grid(g), Latent::Grid { logits, .. }) => {
                let mut out = Vec::with_capacity(points.len());
                let mut stencils = Vec::with_capacity(points.len());
                for &p in points {
                    let (idx, w) = grid_stencil(g.side, p);
                    let mut acc = 0.0;
                    for (&i, &wi) in idx.iter().zip(&w) {
                        acc += wi * logits[i].to_f64();
                    }
                    out.push(sigmoid(T::from_f64(acc)));
                    stencils.push((idx, w));
                }
                Ok((out.clone(), QueryCache::Grid { stencils, out }))
            }
            _ => Err(Error::InvalidState("latent does not match model head".into())),
        }
    }

    /// Field values at `points`, keeping everything needed for backward.
    pub fn forward(&self, proj: &ProjectionSet, points: &[[f64; 3]]) -> Result<(Vec<T>, ModelCache<T>)> {
        let features = self.encode(proj)?;
        let latent = self.decode(&features)?;
        let (out, query) = self.query_latent(&latent, points)?;
        Ok((
            out,
            ModelCache {
                features,
                latent,
                query,
            },
        ))
    }

    /// Accumulates parameter gradients for upstream gradient `dout`.
    pub fn backward(&self, cache: &ModelCache<T>, dout: &[T], grads: &mut Self) -> Result<()> {
        let feats = &cache.features;
        let dfeat = match (&self.head, &mut grads.head, &cache.latent, &cache.query) {
            (
                Head::Triplane { decoder, deconv, field },
                Head::Triplane {
                    decoder: gdec,
                    deconv: gdeconv,
                    field: gfield,
                },
                Latent::Triplane { tri, dec, up },
                QueryCache::Field(fc),
            ) => {
                let dplanes = field.backward(fc, dout, tri.res(), gfield);
                let dz = to_triplane_backward(up, &dplanes, deconv, gdeconv);
                decoder.backward(dec, &dz, feats.tokens.shape(), gdec)
            }
            (
                Head::Grid(g),
                Head::Grid(gg),
                Latent::Grid {
                    pooled, hidden_pre, ..
                },
                QueryCache::Grid { stencils, out },
            ) => {
                let mut dlogits = vec![0.0f64; g.side.pow(3)];
                for ((idx, w), (&d, &s)) in stencils.iter().zip(dout.iter().zip(out)) {
                    let dl = (d * s * (T::ONE - s)).to_f64();
                    for (&i, &wi) in idx.iter().zip(w) {
                        dlogits[i] += wi * dl;
                    }
                }
                let dlogits = Mat::from_vec(1, dlogits.len(), dlogits.into_iter().map(T::from_f64).collect());
                let hidden = hidden_pre.map(gelu);
                let mut dh = g.fc2.backward(&hidden, &dlogits, &mut gg.fc2);
                for (d, &p) in dh.data_mut().iter_mut().zip(hidden_pre.data()) {
                    *d *= gelu_grad(p);
                }
                let dpooled = g.fc1.backward(pooled, &dh, &mut gg.fc1);
                let n = feats.tokens.rows();
                let scale = T::from_f64(1.0 / n as f64);
                Mat::from_fn(n, feats.tokens.cols(), |_, c| dpooled.at(0, c) * scale)
            }
            _ => return Err(Error::InvalidState("gradient buffer does not match model".into())),
        };
        let dtokens = self.encoder.backward(&feats.cache, &dfeat, &mut grads.encoder);
        self.tokenizer.backward(&feats.patches, &dtokens, &mut grads.tokenizer);
        Ok(())
    }

    /// Triplane for a projection set; fails for the grid-head ablation.
    pub fn triplane(&self, proj: &ProjectionSet) -> Result<Triplane<T>> {
        match self.decode(&self.encode(proj)?)? {
            Latent::Triplane { tri, .. } => Ok(tri),
            Latent::Grid { .. } => Err(invalid_arg!("the base ablation has no triplane")),
        }
    }

    /// Field values at arbitrary points without caches.
    pub fn query(&self, proj: &ProjectionSet, points: &[[f64; 3]]) -> Result<Vec<T>> {
        let latent = self.decode(&self.encode(proj)?)?;
        let mut out = Vec::with_capacity(points.len());
        for chunk in points.chunks(8192) {
            out.extend(self.query_latent(&latent, chunk)?.0);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, proj: &ProjectionSet, resolution: usize) -> Result<VolumeGrid> {
        if resolution < 2 {
            return Err(invalid_arg!("volume resolution must be >= 2"));
        }
        if let Head::Triplane { field, .. } = &self.head {
            return reconstruct_volume(&self.triplane(proj)?, resolution, field);
        }
        let vals = self.query(proj, &voxel_centers(resolution))?;
        VolumeGrid::from_values(resolution, vals.iter().map(|v| v.to_f64() as f32).collect())
    }

    pub fn cast<U: Real>(&self) -> XLrm<U> {
        // Initial values are overwritten below.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = XLrm::<U>::new(&self.cfg, &mut rng).expect("config already validated");
        let src: Vec<&Mat<T>> = self.named_params().into_iter().map(|(_, m)| m).collect();
        let mut i = 0;
        out.visit_mut(&mut |m| {
            *m = src[i].cast();
            i += 1;
        });
        out
    }
}

impl<T: Real> Params<T> for XLrm<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        self.tokenizer.visit(&join(prefix, "tokenizer"), f);
        self.encoder.visit(&join(prefix, "encoder"), f);
        match &self.head {
            Head::Triplane { decoder, deconv, field } => {
                decoder.visit(&join(prefix, "decoder"), f);
                deconv.visit(&join(prefix, "deconv"), f);
                field.visit(&join(prefix, "field"), f);
            }
            Head::Grid(g) => g.visit(&join(prefix, "grid_head"), f),
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<T>)) {
        self.tokenizer.visit_mut(f);
        self.encoder.visit_mut(f);
        match &mut self.head {
            Head::Triplane { decoder, deconv, field } => {
                decoder.visit_mut(f);
                deconv.visit_mut(f);
                field.visit_mut(f);
            }
            Head::Grid(g) => g.visit_mut(f),
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{make_circular_geometry, ScannerGeometry};
    use crate::nn::ResidualForm;
    use crate::projector::acquire;
    use crate::volume::VolumeGrid;

    fn tiny(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                patch_size: 4,
                width: 8,
                layers: 1,
                heads: 2,
                residual: ResidualForm::Paper,
            },
            decoder: DecoderConfig {
                width: 8,
                layers: 1,
                heads: 2,
                token_grid: 2,
                plane_channels: 4,
                inf_layers: 3,
                inf_hidden: 8,
                residual: ResidualForm::Paper,
            },
            ablation,
            grid_side: 3,
            grid_hidden: 8,
        }
    }

    fn tiny_proj(views: usize) -> ProjectionSet {
        let mut base = ScannerGeometry::desk();
        base.det_rows = 8;
        base.det_cols = 8;
        base.pixel_mm *= 8.0;
        let geom = make_circular_geometry(views, &base).unwrap();
        let vol = VolumeGrid::from_values(4, (0..64).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        acquire(&vol, &geom, None).unwrap()
    }

    #[test]
    fn every_ablation_yields_unit_interval_volumes() {
        for ab in Ablation::ALL {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let m = XLrm::<f32>::new(&tiny(ab), &mut rng).unwrap();
            for views in [1, 3] {
                let vol = m.reconstruct(&tiny_proj(views), 5).unwrap();
                assert!(vol.values().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn zero_output_layer_starts_at_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for ab in Ablation::ALL {
            let m = XLrm::<f64>::new(&tiny(ab), &mut rng).unwrap();
            let out = m.query(&tiny_proj(2), &[[0.1, 0.2, 0.3], [-1.0, 1.0, 0.0]]).unwrap();
            assert!(out.iter().all(|&v| v == 0.5), "{ab}: {out:?}");
        }
    }

    #[test]
    fn grid_stencil_partition_of_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let p = [rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2), rng.random_range(-1.2..1.2)];
            let (idx, w) = grid_stencil(4, p);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(idx.iter().all(|&i| i < 64));
        }
        let (idx, w) = grid_stencil(3, [1.0, -1.0, 0.0]);
        let hit: f64 = idx.iter().zip(&w).filter(|(&i, _)| i == 9 + 2).map(|(_, &w)| w).sum();
        assert!((hit - 1.0).abs() < 1e-12);
    }

    #[test]
    fn parameter_names_are_unique_and_cast_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = XLrm::<f32>::new(&tiny(Ablation::Xformer), &mut rng).unwrap();
        let names: Vec<String> = m.named_params().into_iter().map(|(n, _)| n).collect();
        let mut uniq = names.clone();
        uniq.sort();
        uniq.dedup();
        assert_eq!(uniq.len(), names.len());
        let back = m.cast::<f64>().cast::<f32>();
        for ((_, a), (_, b)) in m.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ablation_parses() {
        assert_eq!("+triplane".parse::<Ablation>().unwrap(), Ablation::Triplane);
        assert_eq!("base".parse::<Ablation>().unwrap(), Ablation::Base);
        assert!("nope".parse::<Ablation>().is_err());
    }
}
