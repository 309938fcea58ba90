//! Built-in property suites: projector adjointness, finite-difference
//! gradient checks for every differentiable component, and interpolation
//! identities. Used by the `selftest` command and the test suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::geometry::{make_circular_geometry, ScannerGeometry};
use crate::model::{Ablation, Head, ModelConfig, XLrm};
use crate::nn::{
    fan_in_std, Attention, CrossAttentionBlock, Deconv2x, LayerNorm, Linear, Mlp, Params, ResidualForm,
    SelfAttentionBlock,
};
use crate::projector::{acquire, backward_raw, default_step, forward_raw};
use crate::tensor::Mat;
use crate::trainer::{loss_and_grads, sample_points, TrainSample};
use crate::volume::{voxel_centers, VolumeGrid};
use crate::xformer::{EncoderConfig, Tokenizer};
use crate::xtriplane::{
    plane_stencil, reconstruct_volume, sample_plane, sample_plane_backward, DecoderConfig, ImplicitField, Triplane,
};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Minimum number of coordinates per gradient check.
pub const FD_COORDS: usize = 24;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-8;
pub const BLOCK_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    /// Worst observed error (relative error, or residual for identities).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.worst.is_finite() && self.worst < self.tolerance
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<40} worst {:.3e} (tol {:.0e}) {}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

/// A block together with the inputs it is differentiated against.
#[derive(Clone, Debug)]
pub struct Probe<B> {
    pub block: B,
    pub inputs: Vec<Mat<f64>>,
}

impl<B: Params<f64>> Params<f64> for Probe<B> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Mat<f64>)) {
        self.block.visit(&crate::nn::join(prefix, "block"), f);
        for (i, x) in self.inputs.iter().enumerate() {
            f(crate::nn::join(prefix, &format!("input{i}")), x);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Mat<f64>)) {
        self.block.visit_mut(f);
        self.inputs.iter_mut().for_each(f);
    }
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

/// Moves every parameter off its initial value so that no coordinate sits
/// at a special point (unit gains, zero biases).
fn jitter<P: Params<f64>>(p: &mut P, std: f64, rng: &mut ChaCha8Rng) {
    p.visit_mut(&mut |m| {
        for v in m.data_mut() {
            *v += std * rng.sample::<f64, _>(StandardNormal);
        }
    });
}

fn nudge<P: Params<f64>>(p: &mut P, tensor: usize, index: usize, delta: f64) {
    let mut k = 0;
    p.visit_mut(&mut |m| {
        if k == tensor {
            m.data_mut()[index] += delta;
        }
        k += 1;
    });
}

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)` over random coordinates, every tensor visited
/// at least once. `f` returns the loss and its analytic gradient.
pub fn fd_check<P: Params<f64> + Clone>(
    name: &str,
    point: &P,
    f: &dyn Fn(&P) -> Result<(f64, P)>,
    coords: usize,
    tol: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CheckOutcome> {
    let (_, grads) = f(point)?;
    let sizes: Vec<usize> = point.named_params().iter().map(|(_, m)| m.len()).collect();
    let gdata: Vec<Vec<f64>> = grads.named_params().iter().map(|(_, m)| m.data().to_vec()).collect();
    let n = coords.max(sizes.len());
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let names: Vec<String> = point.named_params().into_iter().map(|(n, _)| n).collect();
    for c in 0..n {
        let t = c % sizes.len();
        if sizes[t] == 0 {
            continue;
        }
        let i = rng.random_range(0..sizes[t]);
        let mut plus = point.clone();
        nudge(&mut plus, t, i, FD_STEP);
        let mut minus = point.clone();
        nudge(&mut minus, t, i, -FD_STEP);
        let numeric = (f(&plus)?.0 - f(&minus)?.0) / (2.0 * FD_STEP);
        let analytic = gdata[t][i];
        // Below the floor a central difference is rounding noise.
        let scale = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        let rel = (analytic - numeric).abs() / scale;
        if rel > worst || rel.is_nan() {
            worst = if rel.is_nan() { f64::INFINITY } else { rel };
            worst_at = format!("{}[{i}]: analytic {analytic:.6e}, numeric {numeric:.6e}", names[t]);
        }
    }
    Ok(CheckOutcome {
        name: name.into(),
        worst,
        tolerance: tol,
        detail: format!("{n} coords; worst at {worst_at}"),
    })
}

fn weighted_sum(y: &Mat<f64>, r: &Mat<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

/// Every layer and block, input and parameter gradients.
pub fn block_gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let rng = &mut rng;

    {
        let mut p = Probe { block: LayerNorm::<f64>::new(6), inputs: vec![randn(4, 6, 1.0, rng)] };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(4, 6, 1.0, rng);
        let f = |p: &Probe<LayerNorm<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0]);
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&c, &r, &mut g.block);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("layer_norm", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        let mut p = Probe { block: Linear::<f64>::new(5, 3, true, rng), inputs: vec![randn(4, 5, 1.0, rng)] };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(4, 3, 1.0, rng);
        let f = |p: &Probe<Linear<f64>>| {
            let y = p.block.forward(&p.inputs[0]);
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&p.inputs[0], &r, &mut g.block);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("linear", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        let mut p = Probe { block: Mlp::<f64>::new(6, 24, rng), inputs: vec![randn(3, 6, 1.0, rng)] };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(3, 6, 1.0, rng);
        let f = |p: &Probe<Mlp<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0]);
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&c, &r, &mut g.block);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("mlp", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    for per_head in [true, false] {
        let mut p = Probe {
            block: Attention::<f64>::new(8, None, 2, per_head, rng)?,
            inputs: vec![randn(5, 8, 1.0, rng)],
        };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(5, 8, 1.0, rng);
        let f = |p: &Probe<Attention<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0], None)?;
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&c, &r, &mut g.block).0;
            Ok((weighted_sum(&y, &r), g))
        };
        let name = if per_head { "self_attention (per-head residual)" } else { "self_attention (no residual)" };
        out.push(fd_check(name, &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        let mut p = Probe {
            block: Attention::<f64>::new(8, Some(6), 2, true, rng)?,
            inputs: vec![randn(4, 8, 1.0, rng), randn(3, 6, 1.0, rng)],
        };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(4, 8, 1.0, rng);
        let f = |p: &Probe<Attention<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0], Some(&p.inputs[1]))?;
            let mut g = p.zeros_like();
            let (dx, dkv) = p.block.backward(&c, &r, &mut g.block);
            g.inputs[0] = dx;
            g.inputs[1] = dkv.expect("cross-attention returns a key gradient");
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("cross_attention", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    for form in [ResidualForm::Paper, ResidualForm::Standard] {
        let mut p = Probe {
            block: SelfAttentionBlock::<f64>::new(8, 2, form, rng)?,
            inputs: vec![randn(5, 8, 1.0, rng)],
        };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(5, 8, 1.0, rng);
        let f = |p: &Probe<SelfAttentionBlock<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0])?;
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&c, &r, &mut g.block);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check(&format!("self_attention_block ({form:?})"), &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    for form in [ResidualForm::Paper, ResidualForm::Standard] {
        let mut p = Probe {
            block: CrossAttentionBlock::<f64>::new(8, 6, 2, form, rng)?,
            inputs: vec![randn(4, 8, 1.0, rng), randn(3, 6, 1.0, rng)],
        };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(4, 8, 1.0, rng);
        let f = |p: &Probe<CrossAttentionBlock<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0], &p.inputs[1])?;
            let mut g = p.zeros_like();
            let (de, df) = p.block.backward(&c, &r, &mut g.block);
            g.inputs[0] = de;
            g.inputs[1] = df;
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check(&format!("cross_attention_block ({form:?})"), &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        let mut p = Probe { block: Deconv2x::<f64>::new(6, 3, rng), inputs: vec![randn(4, 6, 1.0, rng)] };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(16, 3, 1.0, rng);
        let f = |p: &Probe<Deconv2x<f64>>| {
            let (y, c) = p.block.forward(&p.inputs[0])?;
            let mut g = p.zeros_like();
            g.inputs[0] = p.block.backward(&c, &r, &mut g.block);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("deconv_upsample", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        // Two chained blocks: chain rule across block boundaries.
        let mut p = Probe {
            block: vec![
                SelfAttentionBlock::<f64>::new(8, 2, ResidualForm::Paper, rng)?,
                SelfAttentionBlock::<f64>::new(8, 2, ResidualForm::Paper, rng)?,
            ],
            inputs: vec![randn(4, 8, 1.0, rng)],
        };
        jitter(&mut p.block, 0.3, rng);
        let r = randn(4, 8, 1.0, rng);
        let f = |p: &Probe<Vec<SelfAttentionBlock<f64>>>| {
            let (h, c0) = p.block[0].forward(&p.inputs[0])?;
            let (y, c1) = p.block[1].forward(&h)?;
            let mut g = p.zeros_like();
            let (g0, g1) = g.block.split_at_mut(1);
            let dh = p.block[1].backward(&c1, &r, &mut g1[0]);
            g.inputs[0] = p.block[0].backward(&c0, &dh, &mut g0[0]);
            Ok((weighted_sum(&y, &r), g))
        };
        out.push(fd_check("two chained blocks", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    Ok(out)
}

fn toy_decoder() -> DecoderConfig {
    DecoderConfig {
        width: 8,
        layers: 1,
        heads: 2,
        token_grid: 2,
        plane_channels: 3,
        inf_layers: 4,
        inf_hidden: 8,
        residual: ResidualForm::Paper,
    }
}

/// Plane sampling and the implicit field.
pub fn field_gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();
    let res = 5;
    let pts: Vec<[f64; 3]> = (0..12)
        .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    {
        let p = Probe { block: Vec::<Linear<f64>>::new(), inputs: vec![randn(res * res, 3, 1.0, rng)] };
        let r = randn(pts.len(), 3, 1.0, rng);
        let f = |p: &Probe<Vec<Linear<f64>>>| {
            let mut loss = 0.0;
            let mut g = p.zeros_like();
            for (i, q) in pts.iter().enumerate() {
                let v = sample_plane(&p.inputs[0], res, [q[0], q[1]]);
                loss += v.iter().zip(r.row(i)).map(|(a, b)| a * b).sum::<f64>();
                sample_plane_backward(res, [q[0], q[1]], r.row(i), &mut g.inputs[0]);
            }
            Ok((loss, g))
        };
        out.push(fd_check("sample_plane", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    {
        let cfg = toy_decoder();
        let mut field = ImplicitField::<f64>::new(&cfg, rng);
        jitter(&mut field, 0.1, rng);
        let p = Probe {
            block: field,
            inputs: (0..3).map(|_| randn(res * res, cfg.plane_channels, 1.0, rng)).collect(),
        };
        let r: Vec<f64> = (0..pts.len()).map(|_| rng.sample(StandardNormal)).collect();
        let f = |p: &Probe<ImplicitField<f64>>| {
            let tri = Triplane::new(res, [p.inputs[0].clone(), p.inputs[1].clone(), p.inputs[2].clone()])?;
            let (y, c) = p.block.forward(&tri, &pts)?;
            let mut g = p.zeros_like();
            let dplanes = p.block.backward(&c, &r, res, &mut g.block);
            g.inputs = dplanes.to_vec();
            Ok((y.iter().zip(&r).map(|(a, b)| a * b).sum(), g))
        };
        out.push(fd_check("query_field", &p, &f, FD_COORDS, BLOCK_TOL, rng)?);
    }
    Ok(out)
}

/// Tiny model used by the end-to-end checks: 16² detector, 4² patches.
pub fn toy_model_config(ablation: Ablation) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            patch_size: 4,
            width: 8,
            layers: 2,
            heads: 2,
            residual: ResidualForm::Paper,
        },
        decoder: toy_decoder(),
        ablation,
        grid_side: 3,
        grid_hidden: 8,
    }
}

pub fn toy_geometry() -> ScannerGeometry {
    let mut g = ScannerGeometry::desk();
    g.det_rows = 16;
    g.det_cols = 16;
    g.pixel_mm *= 4.0;
    g
}

/// Full backprop through tokenizer, encoder, decoder, triplane and field
/// (or the grid head) against the training loss.
pub fn end_to_end_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let vol = VolumeGrid::from_values(6, (0..216).map(|_| rng.random::<f32>()).collect())?;
    let sample = TrainSample::render(vol, &toy_geometry(), None, &[2, 3])?;
    let batch = sample_points(&sample.volume, 32, rng);
    let mut out = Vec::new();
    for ab in Ablation::ALL {
        let mut model = XLrm::<f64>::new(&toy_model_config(ab), rng)?;
        // The output layers start at zero, which would hide every upstream
        // gradient; give them ordinary values.
        match &mut model.head {
            Head::Triplane { field, .. } => {
                let last = field.layers.last_mut().expect("field layers");
                last.weight = randn(last.weight.rows(), 1, fan_in_std(last.weight.rows()), rng);
            }
            Head::Grid(g) => g.fc2.weight = randn(g.fc2.weight.rows(), g.fc2.weight.cols(), 0.3, rng),
        }
        jitter(&mut model, 0.05, rng);
        let f = |m: &XLrm<f64>| loss_and_grads(m, &[(&sample, &batch)], &[2, 3]);
        out.push(fd_check(
            &format!("end_to_end ({ab})"),
            &model,
            &f,
            FD_COORDS,
            END_TO_END_TOL,
            rng,
        )?);
    }
    Ok(out)
}

/// Tokenizer gradient through the training path (patch projection only).
pub fn tokenizer_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let cfg = toy_model_config(Ablation::Xformer).encoder;
    let vol = VolumeGrid::from_values(6, (0..216).map(|_| rng.random::<f32>()).collect())?;
    let proj = acquire(&vol, &make_circular_geometry(2, &toy_geometry())?, None)?;
    let mut tok = Tokenizer::<f64>::new(&cfg, rng);
    jitter(&mut tok, 0.1, rng);
    let r = randn(2 * 16, cfg.width, 1.0, rng);
    let f = |t: &Tokenizer<f64>| {
        let (y, patches) = t.tokenize(&proj, crate::xformer::CameraChannels::Rppc)?;
        let mut g = t.zeros_like();
        t.backward(&patches, &r, &mut g);
        Ok((weighted_sum(&y, &r), g))
    };
    Ok(vec![fd_check("tokenizer", &tok, &f, FD_COORDS, BLOCK_TOL, rng)?])
}

pub fn gradient_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = block_gradient_suite(seed)?;
    out.extend(tokenizer_suite(seed + 1)?);
    out.extend(field_gradient_suite(seed + 2)?);
    out.extend(end_to_end_suite(seed + 3)?);
    Ok(out)
}

/// `|<Ax, y> - <x, A^T y>| / (|Ax| |y|)` over random pairs.
pub fn adjoint_check(geom: &ScannerGeometry, resolution: usize, pairs: usize, seed: u64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let step = default_step(resolution);
    let nv = resolution.pow(3);
    let np = geom.n_views() * geom.n_pixels();
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let x: Vec<f64> = (0..nv).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = (0..np).map(|_| rng.sample(StandardNormal)).collect();
        let ax = forward_raw(&x, resolution, geom, step)?;
        let aty = backward_raw(&y, resolution, geom, step)?;
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        let na = ax.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max((lhs - rhs).abs() / (na * ny));
    }
    Ok(CheckOutcome {
        name: format!("projector adjoint ({resolution}³, {} views)", geom.n_views()),
        worst,
        tolerance: 1e-4,
        detail: format!("{pairs} random pairs"),
    })
}

pub fn adjoint_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut g = ScannerGeometry::desk();
    g.det_rows = 8;
    g.det_cols = 8;
    g.pixel_mm *= 8.0;
    let geom = make_circular_geometry(2, &g)?;
    Ok(vec![adjoint_check(&geom, 16, 20, seed)?])
}

/// Identities of plane sampling and volume queries.
pub fn interpolation_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let res = 6;
    let plane = randn(res * res, 4, 1.0, rng);
    let coord = |k: usize| 2.0 * k as f64 / (res as f64 - 1.0) - 1.0;

    let mut node_err = 0.0f64;
    let mut center_err = 0.0f64;
    for y in 0..res - 1 {
        for x in 0..res - 1 {
            let v = sample_plane(&plane, res, [coord(x), coord(y)]);
            for (a, b) in v.iter().zip(plane.row(y * res + x)) {
                node_err = node_err.max((a - b).abs());
            }
            let c = sample_plane(&plane, res, [(coord(x) + coord(x + 1)) / 2.0, (coord(y) + coord(y + 1)) / 2.0]);
            for (ch, a) in c.iter().enumerate() {
                let m = (plane.at(y * res + x, ch)
                    + plane.at(y * res + x + 1, ch)
                    + plane.at((y + 1) * res + x, ch)
                    + plane.at((y + 1) * res + x + 1, ch))
                    / 4.0;
                center_err = center_err.max((a - m).abs());
            }
        }
    }
    let mut unity = 0.0f64;
    for _ in 0..100 {
        let st = plane_stencil(res, [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]);
        unity = unity.max((st.w.iter().sum::<f64>() - 1.0).abs());
    }

    let cfg = toy_decoder();
    let field = ImplicitField::<f64>::new(&cfg, rng);
    let tri = Triplane::new(4, [randn(16, 3, 1.0, rng), randn(16, 3, 1.0, rng), randn(16, 3, 1.0, rng)])?;
    let vol = reconstruct_volume(&tri, 5, &field)?;
    let pts = voxel_centers(5);
    let mut batch_err = 0.0f64;
    for (i, p) in pts.iter().enumerate() {
        let single = field.query(&tri, &[*p])?[0];
        batch_err = batch_err.max((single as f32 - vol.values()[i]).abs() as f64);
    }

    let mk = |name: &str, worst: f64, tolerance: f64, detail: &str| CheckOutcome {
        name: name.into(),
        worst,
        tolerance,
        detail: detail.into(),
    };
    Ok(vec![
        mk("sample_plane at grid nodes", node_err, 1e-12, "all nodes"),
        mk("sample_plane at cell centers", center_err, 1e-12, "all cells"),
        mk("bilinear weights sum to one", unity, 1e-12, "100 points"),
        mk("volume equals pointwise queries", batch_err, 1e-6, "5³ grid"),
    ])
}

pub fn run_all(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = adjoint_suite(seed)?;
    out.extend(gradient_suite(seed)?);
    out.extend(interpolation_suite(seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_all(results: &[CheckOutcome]) {
        for r in results {
            assert!(r.passed(), "{}", r.line());
        }
    }

    #[test]
    fn blocks() {
        assert_all(&block_gradient_suite(1).unwrap());
    }

    #[test]
    fn fields_and_tokenizer() {
        assert_all(&field_gradient_suite(2).unwrap());
        assert_all(&tokenizer_suite(3).unwrap());
    }

    #[test]
    fn end_to_end() {
        assert_all(&end_to_end_suite(4).unwrap());
    }

    #[test]
    fn adjoint_and_interpolation() {
        assert_all(&adjoint_suite(5).unwrap());
        assert_all(&interpolation_suite(6).unwrap());
    }

    #[test]
    fn checker_detects_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = Probe { block: Vec::<Linear<f64>>::new(), inputs: vec![randn(3, 3, 1.0, &mut rng)] };
        let f = |p: &Probe<Vec<Linear<f64>>>| {
            let loss = p.inputs[0].sum_sq();
            let mut g = p.zeros_like();
            // Missing the factor 2.
            g.inputs[0] = p.inputs[0].clone();
            Ok((loss, g))
        };
        let r = fd_check("bad", &p, &f, 5, BLOCK_TOL, &mut rng).unwrap();
        assert!(!r.passed());
    }
}
