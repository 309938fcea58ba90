//! Variable-view training: reconstruction loss over several view counts,
//! warmup + cosine schedule, AdamW with decoupled decay, gradient clipping
//! and bitwise-lossless checkpoints.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{make_circular_geometry, ScannerGeometry};
use crate::metrics::{psnr_3d, psnr_from_mse};
use crate::model::{ModelConfig, XLrm};
use crate::nn::Params;
use crate::projector::{acquire, NoiseModel, ProjectionSet};
use crate::tensor::{Mat, Real};
use crate::volume::{voxel_coord, VolumeGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub view_counts: Vec<usize>,
    pub lr_init: f64,
    pub warmup_iters: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub points_per_step: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            view_counts: vec![6, 8, 10],
            lr_init: 4e-4,
            warmup_iters: 3000,
            total_steps: 100_000,
            batch_size: 2,
            points_per_step: 32_768,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Short CPU runs on 32³ phantoms.
    pub fn desk() -> Self {
        Self {
            lr_init: 1e-3,
            warmup_iters: 100,
            total_steps: 2000,
            // A quarter of the full-scale point budget keeps a step under a
            // second on one core.
            points_per_step: 8192,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.view_counts.is_empty() || self.view_counts.contains(&0) {
            return Err(invalid_arg!("view_counts must be a non-empty list of positive counts"));
        }
        if !(self.lr_init > 0.0 && self.lr_init.is_finite()) {
            return Err(invalid_arg!("lr_init must be positive, got {}", self.lr_init));
        }
        if self.points_per_step == 0 || self.batch_size == 0 {
            return Err(invalid_arg!("points_per_step and batch_size must be >= 1"));
        }
        if self.total_steps <= self.warmup_iters {
            return Err(invalid_arg!(
                "total_steps ({}) must exceed warmup_iters ({})",
                self.total_steps,
                self.warmup_iters
            ));
        }
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || !(self.eps > 0.0) || self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(invalid_arg!("optimizer hyper-parameters out of range"));
        }
        Ok(())
    }

    pub fn max_views(&self) -> usize {
        self.view_counts.iter().copied().max().unwrap_or(0)
    }
}

/// Linear warmup to `lr_init`, then cosine decay to zero at `total_steps`.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        return cfg.lr_init * step as f64 / cfg.warmup_iters as f64;
    }
    let span = cfg.total_steps.saturating_sub(cfg.warmup_iters).max(1);
    let t = ((step - cfg.warmup_iters) as f64 / span as f64).min(1.0);
    cfg.lr_init * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Mean over view counts of the per-element squared error.
pub fn recon_loss(predictions: &[&[f64]], target: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid_arg!("no predictions"));
    }
    let mut total = 0.0;
    for p in predictions {
        if p.len() != target.len() || p.is_empty() {
            return Err(invalid_arg!(
                "prediction has {} elements, target {}",
                p.len(),
                target.len()
            ));
        }
        let se: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        total += se / target.len() as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Noise seed used when rendering `views` projections of one sample.
pub fn view_noise(nm: &NoiseModel, views: usize) -> NoiseModel {
    NoiseModel {
        seed: nm.seed.wrapping_add(views as u64),
        ..*nm
    }
}

/// One training instance: the target volume and its projections at every
/// configured view count.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub volume: VolumeGrid,
    views: Vec<ProjectionSet>,
}

impl TrainSample {
    /// Renders evenly spaced acquisitions for each view count.
    pub fn render(
        volume: VolumeGrid,
        base: &ScannerGeometry,
        noise: Option<&NoiseModel>,
        view_counts: &[usize],
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(view_counts.len());
        for &v in view_counts {
            let geom = make_circular_geometry(v, base)?;
            let nm = noise.map(|n| view_noise(n, v));
            views.push(acquire(&volume, &geom, nm.as_ref())?);
        }
        Ok(Self { volume, views })
    }

    pub fn from_parts(volume: VolumeGrid, views: Vec<ProjectionSet>) -> Self {
        Self { volume, views }
    }

    pub fn projections(&self, views: usize) -> Result<&ProjectionSet> {
        self.views
            .iter()
            .find(|p| p.n_views() == views)
            .ok_or_else(|| invalid_arg!("sample has no {views}-view acquisition"))
    }
}

/// Random voxel-center points with their target values.
#[derive(Clone, Debug, PartialEq)]
pub struct PointBatch {
    pub points: Vec<[f64; 3]>,
    pub targets: Vec<f64>,
}

pub fn sample_points<R: Rng + ?Sized>(vol: &VolumeGrid, m: usize, rng: &mut R) -> PointBatch {
    let r = vol.resolution();
    let mut points = Vec::with_capacity(m);
    let mut targets = Vec::with_capacity(m);
    for _ in 0..m {
        let (x, y, z) = (rng.random_range(0..r), rng.random_range(0..r), rng.random_range(0..r));
        points.push([voxel_coord(x, r), voxel_coord(y, r), voxel_coord(z, r)]);
        targets.push(vol.get(x, y, z) as f64);
    }
    PointBatch { points, targets }
}

/// Loss and parameter gradients over instances and view counts.
///
/// Each (instance, view count) pair is differentiated into its own buffer and
/// the buffers are summed in a fixed order, so the result does not depend on
/// the number of worker threads.
pub fn loss_and_grads<T: Real>(
    model: &XLrm<T>,
    items: &[(&TrainSample, &PointBatch)],
    view_counts: &[usize],
) -> Result<(f64, XLrm<T>)> {
    if items.is_empty() || view_counts.is_empty() {
        return Err(invalid_arg!("empty batch"));
    }
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| view_counts.iter().map(move |&v| (i, v)))
        .collect();
    let scale = 1.0 / jobs.len() as f64;
    let results: Vec<Result<(f64, XLrm<T>)>> = jobs
        .par_iter()
        .map(|&(i, v)| {
            let (sample, batch) = items[i];
            let proj = sample.projections(v)?;
            let (pred, cache) = model.forward(proj, &batch.points)?;
            let pred: Vec<f64> = pred.iter().map(|p| p.to_f64()).collect();
            let mse = recon_loss(&[&pred], &batch.targets)?;
            let k = 2.0 * scale / batch.points.len() as f64;
            let dout: Vec<T> = pred
                .iter()
                .zip(&batch.targets)
                .map(|(p, t)| T::from_f64(k * (p - t)))
                .collect();
            let mut g = model.zeros_like();
            model.backward(&cache, &dout, &mut g)?;
            Ok((mse, g))
        })
        .collect();
    let mut loss = 0.0;
    let mut total: Option<XLrm<T>> = None;
    for r in results {
        let (l, g) = r?;
        loss += l * scale;
        match total.as_mut() {
            None => total = Some(g),
            Some(acc) => {
                let src: Vec<&Mat<T>> = g.named_params().into_iter().map(|(_, m)| m).collect();
                let mut i = 0;
                acc.visit_mut(&mut |m| {
                    m.add_assign(src[i]);
                    i += 1;
                });
            }
        }
    }
    Ok((loss, total.expect("at least one job")))
}

pub fn grad_norm<T: Real, P: Params<T>>(grads: &P) -> f64 {
    let mut s = 0.0;
    grads.visit("", &mut |_, m| s += m.sum_sq());
    s.sqrt()
}

/// AdamW with bias correction; decay is skipped for 1-row tensors (biases,
/// norm gains).
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
}

impl AdamW {
    pub fn new<P: Params<f32>>(params: &P, cfg: &TrainConfig) -> Self {
        let mut m = Vec::new();
        params.visit("", &mut |_, p| m.push(Mat::zeros(p.rows(), p.cols())));
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn update<P: Params<f32>>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let gs: Vec<&Mat<f32>> = grads.named_params().into_iter().map(|(_, g)| g).collect();
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let mut k = 0;
        params.visit_mut(&mut |p| {
            let decay = if p.rows() > 1 { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(gs[k].data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = g as f64;
                let mn = b1 * *mi as f64 + (1.0 - b1) * g;
                let vn = b2 * *vi as f64 + (1.0 - b2) * g * g;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + eps) + decay * *w as f64;
                *w = (*w as f64 - lr * upd) as f32;
            }
            k += 1;
        });
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    /// PSNR of the sampled points, from the step's loss.
    pub psnr_train: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub fn log_line(&self) -> String {
        format!(
            "{}, {:.6e}, {:.6e}, {:.3}",
            self.step, self.lr, self.loss, self.psnr_train
        )
    }
}

pub struct Trainer {
    pub model: XLrm<f32>,
    pub opt: AdamW,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    /// Model parameters and the sampling stream both come from `cfg.seed`.
    pub fn new(model_cfg: &ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = XLrm::new(model_cfg, &mut rng)?;
        let opt = AdamW::new(&model, &cfg);
        Ok(Self {
            model,
            opt,
            cfg,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn check_data(&self, data: &[TrainSample]) -> Result<()> {
        if data.is_empty() {
            return Err(invalid_arg!("training set is empty"));
        }
        for (i, s) in data.iter().enumerate() {
            for &v in &self.cfg.view_counts {
                s.projections(v)
                    .map_err(|e| invalid_arg!("sample {i}: {e}"))?;
            }
        }
        Ok(())
    }

    /// One optimizer update over `batch_size` instances, cycling through
    /// `data` in order.
    pub fn train_step(&mut self, data: &[TrainSample]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(invalid_arg!("training set is empty"));
        }
        let bs = self.cfg.batch_size;
        let picks: Vec<usize> = (0..bs)
            .map(|b| ((self.step as usize).wrapping_mul(bs) + b) % data.len())
            .collect();
        let batches: Vec<PointBatch> = picks
            .iter()
            .map(|&i| sample_points(&data[i].volume, self.cfg.points_per_step, &mut self.rng))
            .collect();
        let items: Vec<(&TrainSample, &PointBatch)> =
            picks.iter().zip(&batches).map(|(&i, b)| (&data[i], b)).collect();
        let (loss, mut grads) = loss_and_grads(&self.model, &items, &self.cfg.view_counts)?;
        let gnorm = grad_norm(&grads);
        if !loss.is_finite() || !gnorm.is_finite() {
            return Err(Error::NonFinite {
                step: self.step + 1,
                detail: format!("loss {loss}, gradient norm {gnorm}"),
            });
        }
        if self.cfg.grad_clip > 0.0 && gnorm > self.cfg.grad_clip {
            let s = (self.cfg.grad_clip / gnorm) as f32;
            grads.visit_mut(&mut |m| m.scale(s));
        }
        let lr = lr_at(self.step + 1, &self.cfg);
        self.opt.update(&mut self.model, &grads, lr);
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            lr,
            loss,
            psnr_train: psnr_from_mse(loss),
            grad_norm: gnorm,
        })
    }

    /// Trains until `until` steps, appending one log line per step.
    pub fn run(
        &mut self,
        data: &[TrainSample],
        until: u64,
        mut log: Option<&mut dyn Write>,
    ) -> Result<Vec<StepStats>> {
        self.check_data(data)?;
        let mut out = Vec::new();
        while self.step < until {
            let s = self.train_step(data)?;
            if let Some(w) = log.as_deref_mut() {
                writeln!(w, "{}", s.log_line()).map_err(|e| Error::io("<training log>", e))?;
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let state = TrainState {
            step: self.step,
            adam_t: self.opt.t,
            rng_seed: hex(&self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
        };
        let mut tensors: Vec<(String, &Mat<f32>)> = self.model.named_params();
        let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
        for (n, m) in names.iter().zip(&self.opt.m) {
            tensors.push((format!("adam.m.{n}"), m));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            tensors.push((format!("adam.v.{n}"), v));
        }
        checkpoint::encode(self.model.config(), &self.cfg, &state, &tensors)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (manifest, payload) = checkpoint::decode(bytes, origin)?;
        let mut tr = Trainer::new(&manifest.model, manifest.train.clone())?;
        let mut by_name = std::collections::HashMap::new();
        for e in &manifest.tensors {
            by_name.insert(e.name.as_str(), e);
        }
        let mut load = |name: &str, dst: &mut Mat<f32>| -> Result<()> {
            let e = by_name.remove(name).ok_or_else(|| Error::Checkpoint {
                entry: name.to_string(),
                reason: "missing from manifest".into(),
            })?;
            if e.shape != [dst.rows(), dst.cols()] {
                return Err(Error::Checkpoint {
                    entry: name.to_string(),
                    reason: format!("shape {:?}, model expects {:?}", e.shape, [dst.rows(), dst.cols()]),
                });
            }
            checkpoint::read_f32(payload, e, dst.data_mut())
        };
        let names: Vec<String> = tr.model.named_params().into_iter().map(|(n, _)| n).collect();
        let mut k = 0;
        let mut first_err = None;
        tr.model.visit_mut(&mut |m| {
            if first_err.is_none() {
                if let Err(e) = load(&names[k], m) {
                    first_err = Some(e);
                }
            }
            k += 1;
        });
        if let Some(e) = first_err {
            return Err(e);
        }
        for (i, n) in names.iter().enumerate() {
            load(&format!("adam.m.{n}"), &mut tr.opt.m[i])?;
            load(&format!("adam.v.{n}"), &mut tr.opt.v[i])?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint {
                entry: extra.to_string(),
                reason: "not a parameter of this model".into(),
            });
        }
        let st = &manifest.train_state;
        let seed = unhex32(&st.rng_seed).ok_or_else(|| Error::Checkpoint {
            entry: "train_state.rng_seed".into(),
            reason: "expected 64 hex digits".into(),
        })?;
        let word_pos: u128 = st.rng_word_pos.parse().map_err(|_| Error::Checkpoint {
            entry: "train_state.rng_word_pos".into(),
            reason: format!("not an integer: {:?}", st.rng_word_pos),
        })?;
        tr.rng = ChaCha8Rng::from_seed(seed);
        tr.rng.set_stream(st.rng_stream);
        tr.rng.set_word_pos(word_pos);
        tr.step = st.step;
        tr.opt.t = st.adam_t;
        Ok(tr)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub adam_t: u64,
    pub rng_seed: String,
    pub rng_stream: u64,
    /// Decimal; the 128-bit position does not fit a JSON number.
    pub rng_word_pos: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex32(s: &str) -> Option<[u8; 32]> {
    if s.len() != 64 || !s.is_ascii() {
        return None;
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
    }
    Some(out)
}

/// Training-set PSNR of full reconstructions, one value per
/// (sample, view count), sample-major.
pub fn training_psnr(model: &XLrm<f32>, data: &[TrainSample], view_counts: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for s in data {
        for &v in view_counts {
            let rec = model.reconstruct(s.projections(v)?, s.volume.resolution())?;
            out.push(psnr_3d(&rec, &s.volume)?);
        }
    }
    Ok(out)
}

pub mod checkpoint {
    //! `XLRMCKPT`, u32 version, u64 manifest length, JSON manifest, then the
    //! little-endian f32 payload.

    use std::path::Path;

    use serde::{Deserialize, Serialize};

    use super::{TrainConfig, TrainState};
    use crate::error::{Error, Result};
    use crate::model::ModelConfig;
    use crate::tensor::Mat;

    pub const MAGIC: &[u8; 8] = b"XLRMCKPT";
    pub const VERSION: u32 = 1;

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct TensorEntry {
        pub name: String,
        pub shape: [usize; 2],
        /// Byte offset into the payload.
        pub offset: u64,
    }

    impl TensorEntry {
        pub fn byte_len(&self) -> u64 {
            (self.shape[0] * self.shape[1] * 4) as u64
        }
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct Manifest {
        pub model: ModelConfig,
        pub train: TrainConfig,
        pub train_state: TrainState,
        pub tensors: Vec<TensorEntry>,
    }

    pub fn encode(
        model: &ModelConfig,
        train: &TrainConfig,
        state: &TrainState,
        tensors: &[(String, &Mat<f32>)],
    ) -> Result<Vec<u8>> {
        let mut entries = Vec::with_capacity(tensors.len());
        let mut payload = Vec::new();
        for (name, m) in tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                offset: payload.len() as u64,
            });
            for v in m.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            model: *model,
            train: train.clone(),
            train_state: state.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::InvalidState(e.to_string()))?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    fn format_err(origin: &Path, reason: impl Into<String>) -> Error {
        Error::Format {
            path: origin.to_path_buf(),
            reason: reason.into(),
        }
    }

    /// Parses and validates the manifest; returns it with the payload.
    pub fn decode<'a>(bytes: &'a [u8], origin: &Path) -> Result<(Manifest, &'a [u8])> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(format_err(origin, "not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format_err(origin, format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
        let end = 20u64
            .checked_add(len)
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| format_err(origin, "manifest length exceeds file size"))? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..end]).map_err(|e| Error::Checkpoint {
            entry: "manifest".into(),
            reason: e.to_string(),
        })?;
        let payload = &bytes[end..];
        let mut spans: Vec<(u64, u64, &str)> = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let stop = e.offset.checked_add(e.byte_len());
            match stop {
                Some(s) if s <= payload.len() as u64 && e.offset % 4 == 0 => spans.push((e.offset, s, &e.name)),
                _ => {
                    return Err(Error::Checkpoint {
                        entry: e.name.clone(),
                        reason: format!(
                            "bytes {}..+{} fall outside the {}-byte payload",
                            e.offset,
                            e.byte_len(),
                            payload.len()
                        ),
                    })
                }
            }
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Checkpoint {
                    entry: w[1].2.to_string(),
                    reason: format!("overlaps `{}`", w[0].2),
                });
            }
        }
        Ok((manifest, payload))
    }

    pub fn read_f32(payload: &[u8], e: &TensorEntry, dst: &mut [f32]) -> Result<()> {
        let start = e.offset as usize;
        let src = &payload[start..start + e.byte_len() as usize];
        for (d, c) in dst.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }
}
