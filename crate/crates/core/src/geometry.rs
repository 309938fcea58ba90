//! Circular cone-beam scanner geometry, per-pixel rays and reference-point
//! Plücker camera maps.
//!
//! All ray math is in normalized units: the reconstructed cube of side
//! `volume_extent_mm` maps to `[-1, 1]^3`. Views rotate about the world z axis.
//! The detector u axis lies in the rotation plane and its v axis is parallel
//! to z; row 0 is the top (+z) edge.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn axpy(s: f64, x: Vec3, y: Vec3) -> Vec3 {
    [s * x[0] + y[0], s * x[1] + y[1], s * x[2] + y[2]]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScannerGeometry {
    pub dso_mm: f64,
    pub dsd_mm: f64,
    pub det_rows: usize,
    pub det_cols: usize,
    pub pixel_mm: f64,
    pub angles_deg: Vec<f64>,
    pub volume_extent_mm: f64,
}

impl ScannerGeometry {
    /// Scanner of the reference acquisition: 256² detector at 3.9 mm pitch,
    /// 600 mm source-origin and 1118 mm source-detector distance, 500 mm cube.
    pub fn clinical() -> Self {
        Self {
            dso_mm: 600.0,
            dsd_mm: 1118.0,
            det_rows: 256,
            det_cols: 256,
            pixel_mm: 3.9,
            angles_deg: vec![0.0],
            volume_extent_mm: 500.0,
        }
    }

    /// Same field of view as [`clinical`](Self::clinical) on a 64² detector.
    pub fn desk() -> Self {
        Self {
            det_rows: 64,
            det_cols: 64,
            pixel_mm: 3.9 * 4.0,
            ..Self::clinical()
        }
    }

    pub fn n_views(&self) -> usize {
        self.angles_deg.len()
    }

    pub fn n_pixels(&self) -> usize {
        self.det_rows * self.det_cols
    }

    pub fn validate(&self) -> Result<()> {
        let half_diag = self.volume_extent_mm * 3f64.sqrt() / 2.0;
        let all_finite = [self.dso_mm, self.dsd_mm, self.pixel_mm, self.volume_extent_mm]
            .iter()
            .all(|v| v.is_finite());
        if !all_finite || !(self.volume_extent_mm > 0.0) {
            return Err(Error::InvalidState("non-finite or non-positive geometry".into()));
        }
        if !(self.dsd_mm > self.dso_mm && self.dso_mm > half_diag) {
            return Err(Error::InvalidState(format!(
                "need dsd ({}) > dso ({}) > {half_diag:.3} mm",
                self.dsd_mm, self.dso_mm
            )));
        }
        if self.det_rows < 2 || self.det_cols < 2 || !(self.pixel_mm > 0.0) {
            return Err(Error::InvalidState(format!(
                "detector {}x{} at pitch {} mm",
                self.det_rows, self.det_cols, self.pixel_mm
            )));
        }
        if let Some(a) = self
            .angles_deg
            .iter()
            .find(|a| !(0.0..360.0).contains(*a))
        {
            return Err(Error::InvalidState(format!("view angle {a} outside [0, 360)")));
        }
        Ok(())
    }

    fn mm_to_unit(&self) -> f64 {
        2.0 / self.volume_extent_mm
    }

    /// Flat `key=value` block, one per line.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "dso_mm={}", self.dso_mm);
        let _ = writeln!(s, "dsd_mm={}", self.dsd_mm);
        let _ = writeln!(s, "det_rows={}", self.det_rows);
        let _ = writeln!(s, "det_cols={}", self.det_cols);
        let _ = writeln!(s, "pixel_mm={}", self.pixel_mm);
        let _ = writeln!(s, "volume_extent_mm={}", self.volume_extent_mm);
        let angles: Vec<String> = self.angles_deg.iter().map(|a| a.to_string()).collect();
        let _ = writeln!(s, "angles_deg={}", angles.join(","));
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut g = Self::clinical();
        g.angles_deg.clear();
        let mut seen = 0u8;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg!("geometry line without '=': {line}"))?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<f64> {
                v.parse::<f64>()
                    .map_err(|_| invalid_arg!("geometry key {k}: bad number {v:?}"))
            };
            let int = |v: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| invalid_arg!("geometry key {k}: bad integer {v:?}"))
            };
            match k {
                "dso_mm" => g.dso_mm = num(v)?,
                "dsd_mm" => g.dsd_mm = num(v)?,
                "det_rows" => g.det_rows = int(v)?,
                "det_cols" => g.det_cols = int(v)?,
                "pixel_mm" => g.pixel_mm = num(v)?,
                "volume_extent_mm" => g.volume_extent_mm = num(v)?,
                "angles_deg" => {
                    g.angles_deg = v
                        .split(',')
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| num(s.trim()))
                        .collect::<Result<_>>()?
                }
                other => return Err(invalid_arg!("unknown geometry key {other}")),
            }
            seen += 1;
        }
        if seen < 7 {
            return Err(invalid_arg!("geometry block is missing keys"));
        }
        g.validate()?;
        Ok(g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

/// Six-channel per-pixel camera condition, `rows x cols x 6`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RppcMap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl RppcMap {
    pub fn at(&self, row: usize, col: usize) -> [f32; 6] {
        let i = (row * self.cols + col) * 6;
        self.values[i..i + 6].try_into().unwrap()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeometryPerturbation {
    pub angle_eps_deg: f64,
    pub dso_eps_mm: f64,
    pub dsd_eps_mm: f64,
    pub seed: u64,
}

impl GeometryPerturbation {
    pub fn is_zero(&self) -> bool {
        self.angle_eps_deg == 0.0 && self.dso_eps_mm == 0.0 && self.dsd_eps_mm == 0.0
    }

    pub fn describe(&self) -> String {
        if self.is_zero() {
            return "clean".into();
        }
        let mut parts = Vec::new();
        if self.angle_eps_deg != 0.0 {
            parts.push(format!("angles ±{}°", self.angle_eps_deg));
        }
        if self.dso_eps_mm != 0.0 {
            parts.push(format!("DSO ±{}mm", self.dso_eps_mm));
        }
        if self.dsd_eps_mm != 0.0 {
            parts.push(format!("DSD ±{}mm", self.dsd_eps_mm));
        }
        parts.join(", ")
    }
}

/// Evenly spaced angles over the full circle, starting at 0°.
pub fn make_circular_geometry(n_views: usize, base: &ScannerGeometry) -> Result<ScannerGeometry> {
    if n_views == 0 {
        return Err(invalid_arg!("n_views must be at least 1"));
    }
    let angles_deg = (0..n_views)
        .map(|i| 360.0 * i as f64 / n_views as f64)
        .collect();
    Ok(ScannerGeometry {
        angles_deg,
        ..base.clone()
    })
}

/// Per-view constants of the source/detector frame.
#[derive(Clone, Copy, Debug)]
struct ViewFrame {
    source: Vec3,
    det_center: Vec3,
    u_axis: Vec3,
    v_axis: Vec3,
    pitch: f64,
    row_mid: f64,
    col_mid: f64,
}

impl ViewFrame {
    fn new(geom: &ScannerGeometry, view_idx: usize) -> Self {
        let scale = geom.mm_to_unit();
        let theta = geom.angles_deg[view_idx].to_radians();
        let (s, c) = theta.sin_cos();
        let dso = geom.dso_mm * scale;
        let dsd = geom.dsd_mm * scale;
        Self {
            source: [dso * c, dso * s, 0.0],
            det_center: [(dso - dsd) * c, (dso - dsd) * s, 0.0],
            u_axis: [-s, c, 0.0],
            v_axis: [0.0, 0.0, 1.0],
            pitch: geom.pixel_mm * scale,
            row_mid: (geom.det_rows as f64 - 1.0) / 2.0,
            col_mid: (geom.det_cols as f64 - 1.0) / 2.0,
        }
    }

    #[inline]
    fn ray(&self, row: usize, col: usize) -> Ray {
        let u = (col as f64 - self.col_mid) * self.pitch;
        let v = (self.row_mid - row as f64) * self.pitch;
        let pixel = axpy(v, self.v_axis, axpy(u, self.u_axis, self.det_center));
        let d = sub(pixel, self.source);
        let n = norm(d);
        Ray {
            origin: self.source,
            direction: [d[0] / n, d[1] / n, d[2] / n],
        }
    }
}

pub fn pixel_ray(geom: &ScannerGeometry, view_idx: usize, row: usize, col: usize) -> Result<Ray> {
    if view_idx >= geom.n_views() || row >= geom.det_rows || col >= geom.det_cols {
        return Err(invalid_arg!(
            "pixel ({view_idx}, {row}, {col}) outside {}x{}x{}",
            geom.n_views(),
            geom.det_rows,
            geom.det_cols
        ));
    }
    Ok(ViewFrame::new(geom, view_idx).ray(row, col))
}

/// All rays of one view in row-major pixel order.
pub fn view_rays(geom: &ScannerGeometry, view_idx: usize) -> Result<Vec<Ray>> {
    if view_idx >= geom.n_views() {
        return Err(invalid_arg!("view {view_idx} outside {}", geom.n_views()));
    }
    let frame = ViewFrame::new(geom, view_idx);
    let mut rays = Vec::with_capacity(geom.n_pixels());
    for r in 0..geom.det_rows {
        for c in 0..geom.det_cols {
            rays.push(frame.ray(r, c));
        }
    }
    Ok(rays)
}

/// `(o - (o·d) d, d)`: the ray point closest to the origin, then the direction.
pub fn rppc(ray: &Ray) -> Result<[f64; 6]> {
    let d = ray.direction;
    if (norm(d) - 1.0).abs() > 1e-6 {
        return Err(invalid_arg!("ray direction is not unit length: {d:?}"));
    }
    let o = ray.origin;
    let m = axpy(-dot(o, d), d, o);
    Ok([m[0], m[1], m[2], d[0], d[1], d[2]])
}

pub fn rppc_map(geom: &ScannerGeometry, view_idx: usize) -> Result<RppcMap> {
    let rays = view_rays(geom, view_idx)?;
    let mut values = Vec::with_capacity(rays.len() * 6);
    for ray in &rays {
        values.extend(rppc(ray)?.iter().map(|&v| v as f32));
    }
    Ok(RppcMap {
        rows: geom.det_rows,
        cols: geom.det_cols,
        values,
    })
}

/// Uniform scanner-parameter noise: one independent draw per angle, one for
/// DSO and one for DSD. The same seed yields draws proportional to the
/// half-widths, so larger settings strictly dominate smaller ones.
pub fn perturb(geom: &ScannerGeometry, p: &GeometryPerturbation) -> Result<ScannerGeometry> {
    if p.angle_eps_deg < 0.0 || p.dso_eps_mm < 0.0 || p.dsd_eps_mm < 0.0 {
        return Err(invalid_arg!("perturbation half-widths must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut unit = || rng.random_range(-1.0..=1.0f64);
    let mut out = geom.clone();
    for a in out.angles_deg.iter_mut() {
        let shifted = *a + p.angle_eps_deg * unit();
        *a = shifted.rem_euclid(360.0);
        if *a >= 360.0 {
            *a = 0.0;
        }
    }
    out.dso_mm += p.dso_eps_mm * unit();
    out.dsd_mm += p.dsd_eps_mm * unit();
    out.validate()?;
    Ok(out)
}

/// Smallest absolute angular difference in degrees.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}
