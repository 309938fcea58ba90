//! Ray-marched cone-beam forward projection, its exact adjoint, the
//! transmission noise model and SART.
//!
//! Each ray is clipped to `[-1, 1]^3`, split into `n = ceil(len / step)` equal
//! segments, and sampled at segment midpoints with trilinear interpolation.
//! Backprojection scatters with the same weights, so the two operators are
//! exact transposes of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::geometry::{rppc_map, view_rays, Ray, RppcMap, ScannerGeometry};
use crate::volume::VolumeGrid;

/// Raw line integrals are divided by this before clamping into `[0, 1]`. The
/// longest chord through the unit-density cube is `2√3 ≈ 3.46`.
pub const PROJECTION_SCALE: f64 = 4.0;

/// Default ray-march step for a grid of resolution `r`: half a voxel.
pub fn default_step(resolution: usize) -> f64 {
    1.0 / resolution as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet {
    pub geom: ScannerGeometry,
    /// `n_views x rows x cols`, view-major, scaled into `[0, 1]`.
    pub images: Vec<f32>,
    pub rppc: Vec<RppcMap>,
}

impl ProjectionSet {
    /// Builds the set and its camera maps from `geom`.
    pub fn new(geom: ScannerGeometry, images: Vec<f32>) -> Result<Self> {
        if images.len() != geom.n_views() * geom.n_pixels() {
            return Err(invalid_arg!(
                "expected {} projection values, got {}",
                geom.n_views() * geom.n_pixels(),
                images.len()
            ));
        }
        let rppc = (0..geom.n_views())
            .map(|v| rppc_map(&geom, v))
            .collect::<Result<_>>()?;
        Ok(Self { geom, images, rppc })
    }

    pub fn n_views(&self) -> usize {
        self.geom.n_views()
    }

    pub fn view(&self, v: usize) -> &[f32] {
        let n = self.geom.n_pixels();
        &self.images[v * n..(v + 1) * n]
    }

    /// Line integrals recovered from the scaled images.
    pub fn raw(&self) -> Vec<f64> {
        self.images
            .iter()
            .map(|&x| x as f64 * PROJECTION_SCALE)
            .collect()
    }

    /// Same images, camera maps of another geometry. Used to feed a model
    /// projections acquired under a perturbed scanner as if nominal.
    pub fn with_camera_of(&self, nominal: &ScannerGeometry) -> Result<Self> {
        if nominal.n_views() != self.n_views() || nominal.n_pixels() != self.geom.n_pixels() {
            return Err(invalid_arg!("nominal geometry does not match the projection shape"));
        }
        Self::new(nominal.clone(), self.images.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Expected photons for an unattenuated ray.
    pub photon_count: f64,
    /// Additive Gaussian std on the log-domain line integral.
    pub gaussian_sigma: f64,
    pub seed: u64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            photon_count: 1e5,
            gaussian_sigma: 0.01,
            seed: 0,
        }
    }
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.photon_count > 0.0) || !(self.gaussian_sigma >= 0.0) {
            return Err(invalid_arg!(
                "noise needs photon_count > 0 and gaussian_sigma >= 0"
            ));
        }
        Ok(())
    }
}

/// Slab intersection with `[-1, 1]^3`; `None` when the ray misses.
pub fn clip_to_cube(ray: &Ray) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        let o = ray.origin[k];
        let d = ray.direction[k];
        if d.abs() < 1e-15 {
            if o.abs() > 1.0 {
                return None;
            }
            continue;
        }
        let a = (-1.0 - o) / d;
        let b = (1.0 - o) / d;
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Visits every sample of `ray` with its 8 voxel indices and weights
/// (trilinear weight times segment length).
#[inline]
fn march(ray: &Ray, resolution: usize, step: f64, mut f: impl FnMut(&[usize; 8], &[f64; 8])) {
    let Some((t0, t1)) = clip_to_cube(ray) else {
        return;
    };
    let len = t1 - t0;
    let n = (len / step).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let r = resolution;
    let scale = (r as f64 - 1.0) / 2.0;
    let max0 = r - 2;
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * h;
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let u = ((ray.origin[a] + t * ray.direction[a] + 1.0) * scale).clamp(0.0, r as f64 - 1.0);
            let i = (u.floor() as usize).min(max0);
            base[a] = i;
            frac[a] = u - i as f64;
        }
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let i000 = base[0] + r * (base[1] + r * base[2]);
        let (dx, dy, dz) = (1, r, r * r);
        let idx = [
            i000,
            i000 + dx,
            i000 + dy,
            i000 + dx + dy,
            i000 + dz,
            i000 + dx + dz,
            i000 + dy + dz,
            i000 + dx + dy + dz,
        ];
        let (gx, gy, gz) = (1.0 - fx, 1.0 - fy, 1.0 - fz);
        let w = [
            gx * gy * gz * h,
            fx * gy * gz * h,
            gx * fy * gz * h,
            fx * fy * gz * h,
            gx * gy * fz * h,
            fx * gy * fz * h,
            gx * fy * fz * h,
            fx * fy * fz * h,
        ];
        f(&idx, &w);
    }
}

fn check_field(field_len: usize, resolution: usize) -> Result<()> {
    if resolution < 2 || field_len != resolution.pow(3) {
        return Err(invalid_arg!(
            "field of {field_len} values does not match resolution {resolution}"
        ));
    }
    Ok(())
}

fn check_step(step: f64) -> Result<()> {
    if !(step > 0.0) || !step.is_finite() {
        return Err(invalid_arg!("ray-march step must be positive, got {step}"));
    }
    Ok(())
}

/// Raw line integrals of an arbitrary (unclamped) field for one view.
pub fn forward_view(
    field: &[f64],
    resolution: usize,
    geom: &ScannerGeometry,
    view: usize,
    step: f64,
) -> Result<Vec<f64>> {
    check_field(field.len(), resolution)?;
    check_step(step)?;
    let rays = view_rays(geom, view)?;
    Ok(rays
        .par_iter()
        .map(|ray| {
            let mut acc = 0.0;
            march(ray, resolution, step, |idx, w| {
                for j in 0..8 {
                    acc += w[j] * field[idx[j]];
                }
            });
            acc
        })
        .collect())
}

/// Raw line integrals of every view, view-major.
pub fn forward_raw(
    field: &[f64],
    resolution: usize,
    geom: &ScannerGeometry,
    step: f64,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(geom.n_views() * geom.n_pixels());
    for v in 0..geom.n_views() {
        out.extend(forward_view(field, resolution, geom, v, step)?);
    }
    Ok(out)
}

/// Adjoint of [`forward_view`], accumulated into `out`.
pub fn backward_view_into(
    values: &[f64],
    resolution: usize,
    geom: &ScannerGeometry,
    view: usize,
    step: f64,
    out: &mut [f64],
) -> Result<()> {
    check_field(out.len(), resolution)?;
    check_step(step)?;
    if values.len() != geom.n_pixels() {
        return Err(invalid_arg!(
            "view has {} pixels, got {} values",
            geom.n_pixels(),
            values.len()
        ));
    }
    let rays = view_rays(geom, view)?;
    for (ray, &y) in rays.iter().zip(values) {
        if y == 0.0 {
            continue;
        }
        march(ray, resolution, step, |idx, w| {
            for j in 0..8 {
                out[idx[j]] += w[j] * y;
            }
        });
    }
    Ok(())
}

/// Adjoint of [`forward_raw`]. Views are scattered into private fields in
/// parallel and reduced in view order, so the result is deterministic.
pub fn backward_raw(
    values: &[f64],
    resolution: usize,
    geom: &ScannerGeometry,
    step: f64,
) -> Result<Vec<f64>> {
    let np = geom.n_pixels();
    if values.len() != geom.n_views() * np {
        return Err(invalid_arg!(
            "expected {} projection values, got {}",
            geom.n_views() * np,
            values.len()
        ));
    }
    check_field(resolution.pow(3), resolution)?;
    let partials: Vec<Result<Vec<f64>>> = (0..geom.n_views())
        .into_par_iter()
        .map(|v| {
            let mut field = vec![0.0; resolution.pow(3)];
            backward_view_into(&values[v * np..(v + 1) * np], resolution, geom, v, step, &mut field)?;
            Ok(field)
        })
        .collect();
    let mut out = vec![0.0; resolution.pow(3)];
    for p in partials {
        for (o, x) in out.iter_mut().zip(p?) {
            *o += x;
        }
    }
    Ok(out)
}

/// Noiseless projections, scaled by [`PROJECTION_SCALE`] and clamped.
pub fn project(vol: &VolumeGrid, geom: &ScannerGeometry, step: f64) -> Result<ProjectionSet> {
    geom.validate()?;
    let field: Vec<f64> = vol.values().iter().map(|&x| x as f64).collect();
    let raw = forward_raw(&field, vol.resolution(), geom, step)?;
    let images = raw
        .iter()
        .map(|&p| (p / PROJECTION_SCALE).clamp(0.0, 1.0) as f32)
        .collect();
    ProjectionSet::new(geom.clone(), images)
}

/// Backprojection of the scaled images; unclamped.
pub fn backproject(proj: &ProjectionSet, resolution: usize, step: f64) -> Result<Vec<f64>> {
    let values: Vec<f64> = proj.images.iter().map(|&x| x as f64).collect();
    backward_raw(&values, resolution, &proj.geom, step)
}

/// One noisy realization of a raw line integral `p`.
pub fn noisy_line_integral<R: rand::Rng + ?Sized>(p: f64, nm: &NoiseModel, rng: &mut R) -> f64 {
    let lambda = nm.photon_count * (-p).exp();
    let k = if lambda > 0.0 {
        Poisson::new(lambda).map(|d| d.sample(rng)).unwrap_or(lambda)
    } else {
        0.0
    };
    let mut out = -(k.max(1.0) / nm.photon_count).ln();
    if nm.gaussian_sigma > 0.0 {
        out += Normal::new(0.0, nm.gaussian_sigma).unwrap().sample(rng);
    }
    out
}

/// Poisson transmission noise plus Gaussian log-domain noise.
pub fn apply_noise(proj: &ProjectionSet, nm: &NoiseModel) -> Result<ProjectionSet> {
    nm.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(nm.seed);
    let images = proj
        .images
        .iter()
        .map(|&x| {
            let p = x as f64 * PROJECTION_SCALE;
            (noisy_line_integral(p, nm, &mut rng) / PROJECTION_SCALE).clamp(0.0, 1.0) as f32
        })
        .collect();
    Ok(ProjectionSet {
        geom: proj.geom.clone(),
        images,
        rppc: proj.rppc.clone(),
    })
}

/// Renders noisy projections of `vol` under `geom`.
pub fn acquire(
    vol: &VolumeGrid,
    geom: &ScannerGeometry,
    noise: Option<&NoiseModel>,
) -> Result<ProjectionSet> {
    let clean = project(vol, geom, default_step(vol.resolution()))?;
    match noise {
        Some(nm) => apply_noise(&clean, nm),
        None => Ok(clean),
    }
}

const DEGENERATE: f64 = 1e-9;

/// Per-iteration observer for [`sart_reconstruct_with`].
pub type SartObserver<'a> = &'a mut dyn FnMut(usize, &VolumeGrid);

pub fn sart_reconstruct(
    proj: &ProjectionSet,
    resolution: usize,
    iters: usize,
    relax: f64,
) -> Result<VolumeGrid> {
    sart_reconstruct_with(proj, resolution, iters, relax, &mut |_, _| {})
}

/// View-sequential SART with box constraint `[0, 1]`. Rays with zero length
/// through the cube and voxels no ray of the view touches are skipped.
pub fn sart_reconstruct_with(
    proj: &ProjectionSet,
    resolution: usize,
    iters: usize,
    relax: f64,
    observe: SartObserver<'_>,
) -> Result<VolumeGrid> {
    if iters == 0 {
        return Err(invalid_arg!("SART needs at least one iteration"));
    }
    if !(relax > 0.0 && relax <= 1.0) {
        return Err(invalid_arg!("SART relaxation must lie in (0, 1], got {relax}"));
    }
    let geom = &proj.geom;
    let step = default_step(resolution);
    let np = geom.n_pixels();
    let nv = geom.n_views();
    let n_vox = resolution.pow(3);
    let b = proj.raw();

    let ones_field = vec![1.0; n_vox];
    let ones_view = vec![1.0; np];
    let mut row_sums = Vec::with_capacity(nv);
    let mut col_sums = Vec::with_capacity(nv);
    for v in 0..nv {
        row_sums.push(forward_view(&ones_field, resolution, geom, v, step)?);
        let mut c = vec![0.0; n_vox];
        backward_view_into(&ones_view, resolution, geom, v, step, &mut c)?;
        col_sums.push(c);
    }

    let mut x = vec![0.0f64; n_vox];
    let mut residual = vec![0.0; np];
    let mut update = vec![0.0; n_vox];
    for it in 0..iters {
        for v in 0..nv {
            let ax = forward_view(&x, resolution, geom, v, step)?;
            for p in 0..np {
                let rs = row_sums[v][p];
                residual[p] = if rs > DEGENERATE {
                    (b[v * np + p] - ax[p]) / rs
                } else {
                    0.0
                };
            }
            update.iter_mut().for_each(|u| *u = 0.0);
            backward_view_into(&residual, resolution, geom, v, step, &mut update)?;
            for ((xi, &u), &cs) in x.iter_mut().zip(&update).zip(&col_sums[v]) {
                if cs > DEGENERATE {
                    *xi = (*xi + relax * u / cs).clamp(0.0, 1.0);
                }
            }
        }
        let snapshot = VolumeGrid::from_values(resolution, x.iter().map(|&v| v as f32).collect())?;
        observe(it, &snapshot);
    }
    VolumeGrid::from_values(resolution, x.iter().map(|&v| v as f32).collect())
}
