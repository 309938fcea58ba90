//! Evaluation over datasets, the scanner-noise robustness sweep and the
//! metric report (JSON plus a text table).

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LoadedSample;
use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{make_circular_geometry, perturb, GeometryPerturbation};
use crate::metrics::{psnr_3d, ssim_slices};
use crate::model::XLrm;
use crate::projector::{acquire, sart_reconstruct, ProjectionSet};
use crate::trainer::view_noise;
use crate::volume::VolumeGrid;

/// Anything that turns projections into a volume.
pub trait Reconstructor: Sync {
    fn name(&self) -> String;
    /// `gt` provides the target resolution; only the oracle reads its values.
    fn reconstruct(&self, proj: &ProjectionSet, gt: &VolumeGrid) -> Result<VolumeGrid>;
}

impl Reconstructor for XLrm<f32> {
    fn name(&self) -> String {
        format!("model ({})", self.ablation())
    }
    fn reconstruct(&self, proj: &ProjectionSet, gt: &VolumeGrid) -> Result<VolumeGrid> {
        XLrm::reconstruct(self, proj, gt.resolution())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Sart {
    pub iterations: usize,
    pub relax: f64,
}

impl Default for Sart {
    fn default() -> Self {
        Self {
            iterations: 20,
            relax: 0.25,
        }
    }
}

impl Reconstructor for Sart {
    fn name(&self) -> String {
        format!("SART ({} iterations)", self.iterations)
    }
    fn reconstruct(&self, proj: &ProjectionSet, gt: &VolumeGrid) -> Result<VolumeGrid> {
        sart_reconstruct(proj, gt.resolution(), self.iterations, self.relax)
    }
}

/// Returns the ground truth; used to check the evaluation plumbing.
#[derive(Clone, Copy, Debug, Default)]
pub struct Oracle;

impl Reconstructor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }
    fn reconstruct(&self, _proj: &ProjectionSet, gt: &VolumeGrid) -> Result<VolumeGrid> {
        Ok(gt.clone())
    }
}

/// JSON has no infinity, so `+inf` PSNR travels as `null`.
mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: String,
    pub views: usize,
    #[serde(with = "inf_as_null")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub views: usize,
    pub samples: usize,
    #[serde(with = "inf_as_null")]
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub perturbation: String,
    pub setting: GeometryPerturbation,
    #[serde(with = "inf_as_null")]
    pub psnr_db: f64,
    pub ssim: f64,
    pub delta_psnr_db: f64,
    pub delta_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub samples: Vec<SampleMetrics>,
    pub aggregate: Vec<AggregateMetrics>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub robustness: Vec<RobustnessRow>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn fmt_db(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.2}")
    } else {
        "inf".into()
    }
}

/// `a - b`, with equal values (including infinities) giving exactly 0.
fn delta(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        a - b
    }
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidState(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| invalid_arg!("metric report: {e}"))
    }

    pub fn aggregate_for(&self, views: usize) -> Option<&AggregateMetrics> {
        self.aggregate.iter().find(|a| a.views == views)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method: {}", self.method);
        if !self.aggregate.is_empty() {
            let _ = writeln!(s, "{:>6}  {:>8}  {:>10}  {:>7}", "views", "samples", "PSNR (dB)", "SSIM");
            for a in &self.aggregate {
                let _ = writeln!(
                    s,
                    "{:>6}  {:>8}  {:>10}  {:>7.4}",
                    a.views,
                    a.samples,
                    fmt_db(a.psnr_db),
                    a.ssim
                );
            }
        }
        if !self.robustness.is_empty() {
            let _ = writeln!(s, "{:<22}  {:>10}  {:>8}  {:>7}  {:>8}", "perturbation", "PSNR (dB)", "dPSNR", "SSIM", "dSSIM");
            for r in &self.robustness {
                let _ = writeln!(
                    s,
                    "{:<22}  {:>10}  {:>+8.3}  {:>7.4}  {:>+8.4}",
                    r.perturbation,
                    fmt_db(r.psnr_db),
                    r.delta_psnr_db,
                    r.ssim,
                    r.delta_ssim
                );
            }
        }
        s
    }
}

fn score(rec: &dyn Reconstructor, proj: &ProjectionSet, gt: &VolumeGrid) -> Result<(f64, f64)> {
    let vol = rec.reconstruct(proj, gt)?;
    Ok((psnr_3d(&vol, gt)?, ssim_slices(&vol, gt)?))
}

/// Metrics for every sample at every view count, plus per-count means.
pub fn evaluate(rec: &dyn Reconstructor, samples: &[LoadedSample], view_counts: &[usize]) -> Result<MetricReport> {
    if samples.is_empty() || view_counts.is_empty() {
        return Err(invalid_arg!("nothing to evaluate"));
    }
    let jobs: Vec<(usize, usize)> = view_counts
        .iter()
        .flat_map(|&v| (0..samples.len()).map(move |i| (v, i)))
        .collect();
    let rows: Vec<SampleMetrics> = jobs
        .par_iter()
        .map(|&(v, i)| {
            let s = &samples[i];
            let (psnr_db, ssim) = score(rec, &s.projections_for(v)?, &s.volume)?;
            Ok(SampleMetrics {
                id: s.id.clone(),
                views: v,
                psnr_db,
                ssim,
            })
        })
        .collect::<Result<_>>()?;
    let aggregate = view_counts
        .iter()
        .map(|&v| {
            let of = || rows.iter().filter(move |r| r.views == v);
            AggregateMetrics {
                views: v,
                samples: of().count(),
                psnr_db: mean(of().map(|r| r.psnr_db)),
                ssim: mean(of().map(|r| r.ssim)),
            }
        })
        .collect();
    Ok(MetricReport {
        method: rec.name(),
        samples: rows,
        aggregate,
        robustness: Vec::new(),
    })
}

/// Angle ±0.5°, ±1°, DSO ±2mm, ±3mm, DSD ±2mm, ±3mm, all drawn from `seed`.
pub fn standard_sweep(seed: u64) -> Vec<GeometryPerturbation> {
    let p = |a, o, d| GeometryPerturbation {
        angle_eps_deg: a,
        dso_eps_mm: o,
        dsd_eps_mm: d,
        seed,
    };
    vec![
        p(0.5, 0.0, 0.0),
        p(1.0, 0.0, 0.0),
        p(0.0, 2.0, 0.0),
        p(0.0, 3.0, 0.0),
        p(0.0, 0.0, 2.0),
        p(0.0, 0.0, 3.0),
    ]
}

/// Re-acquires every sample under each perturbed scanner and reconstructs
/// with the nominal camera maps. The clean row always comes first.
///
/// Each setting is averaged over `trials` perturbation draws (seeds
/// `seed, seed + 1, ...`); acquisition noise is the same for every row.
pub fn robustness_sweep(
    rec: &dyn Reconstructor,
    samples: &[LoadedSample],
    views: usize,
    sweep: &[GeometryPerturbation],
    trials: usize,
) -> Result<MetricReport> {
    if sweep.is_empty() || samples.is_empty() || trials == 0 {
        return Err(invalid_arg!("robustness sweep needs settings, samples and trials"));
    }
    let clean = GeometryPerturbation::default();
    let mut settings = vec![clean];
    settings.extend(sweep.iter().copied());

    let jobs: Vec<(usize, usize, usize)> = (0..settings.len())
        .flat_map(|k| (0..samples.len()).flat_map(move |i| (0..trials).map(move |t| (k, i, t))))
        .collect();
    let scores: Vec<(f64, f64)> = jobs
        .par_iter()
        .map(|&(k, i, t)| {
            let s = &samples[i];
            let nominal = make_circular_geometry(views, &s.projections.geom)?;
            let p = GeometryPerturbation {
                seed: settings[k].seed.wrapping_add(t as u64),
                ..settings[k]
            };
            let proj = if p.is_zero() {
                s.projections_for(views)?
            } else {
                let actual = perturb(&nominal, &p)?;
                acquire(&s.volume, &actual, s.noise.map(|n| view_noise(&n, views)).as_ref())?.with_camera_of(&nominal)?
            };
            score(rec, &proj, &s.volume)
        })
        .collect::<Result<_>>()?;

    let per = samples.len() * trials;
    let mut rows: Vec<RobustnessRow> = settings
        .iter()
        .enumerate()
        .map(|(k, set)| {
            let chunk = &scores[k * per..(k + 1) * per];
            RobustnessRow {
                perturbation: set.describe(),
                setting: *set,
                psnr_db: mean(chunk.iter().map(|s| s.0)),
                ssim: mean(chunk.iter().map(|s| s.1)),
                delta_psnr_db: 0.0,
                delta_ssim: 0.0,
            }
        })
        .collect();
    let (cp, cs) = (rows[0].psnr_db, rows[0].ssim);
    for r in &mut rows {
        r.delta_psnr_db = delta(r.psnr_db, cp);
        r.delta_ssim = delta(r.ssim, cs);
    }
    let per_sample = (0..samples.len())
        .map(|i| {
            let chunk = &scores[i * trials..(i + 1) * trials];
            SampleMetrics {
                id: samples[i].id.clone(),
                views,
                psnr_db: mean(chunk.iter().map(|s| s.0)),
                ssim: mean(chunk.iter().map(|s| s.1)),
            }
        })
        .collect::<Vec<_>>();
    Ok(MetricReport {
        method: rec.name(),
        aggregate: vec![AggregateMetrics {
            views,
            samples: samples.len(),
            psnr_db: mean(per_sample.iter().map(|r| r.psnr_db)),
            ssim: mean(per_sample.iter().map(|r| r.ssim)),
        }],
        samples: per_sample,
        robustness: rows,
    })
}
