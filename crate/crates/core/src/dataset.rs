//! Synthetic dataset generation and the on-disk manifest.
//!
//! Layout: `manifest.json` plus `<id>_volume.bin` and `<id>_proj.bin` per
//! sample. Projections are stored at the largest view count; smaller counts
//! are re-rendered on load with their own evenly spaced angles.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::{make_circular_geometry, ScannerGeometry};
use crate::io::{self, FORMAT_VERSION};
use crate::phantom::{rasterize_phantom, PhantomSpec};
use crate::projector::{acquire, NoiseModel, ProjectionSet};
use crate::trainer::{view_noise, TrainSample};
use crate::volume::VolumeGrid;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    /// Paths relative to the manifest directory.
    pub volume: String,
    pub projections: String,
    pub geometry: ScannerGeometry,
    /// Absent for noiseless samples.
    pub noise: Option<NoiseModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub resolution: usize,
    pub det_rows: usize,
    pub det_cols: usize,
    pub views: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenOptions {
    pub n_samples: usize,
    pub resolution: usize,
    pub geometry: ScannerGeometry,
    pub views: usize,
    pub noise: Option<NoiseModel>,
    pub seed: u64,
}

impl GenOptions {
    pub fn desk(n_samples: usize, seed: u64) -> Self {
        Self {
            n_samples,
            resolution: 32,
            geometry: ScannerGeometry::desk(),
            views: 10,
            noise: Some(NoiseModel::default()),
            seed,
        }
    }
}

/// One phantom: volume and stored acquisition, reproducible from `opts`.
pub fn make_sample(opts: &GenOptions, index: usize, rng: &mut ChaCha8Rng) -> Result<(VolumeGrid, ProjectionSet, SampleEntry)> {
    let spec = PhantomSpec::random(rng);
    let noise_seed: u64 = rng.random();
    let vol = rasterize_phantom(&spec, opts.resolution)?;
    let geom = make_circular_geometry(opts.views, &opts.geometry)?;
    let noise = opts.noise.map(|n| NoiseModel { seed: noise_seed, ..n });
    let proj = acquire(&vol, &geom, noise.map(|n| view_noise(&n, opts.views)).as_ref())?;
    let id = format!("s{index:04}");
    let entry = SampleEntry {
        volume: format!("{id}_volume.bin"),
        projections: format!("{id}_proj.bin"),
        id,
        geometry: geom,
        noise,
    };
    Ok((vol, proj, entry))
}

/// The samples [`gen_dataset`] would write, kept in memory.
pub fn generate_samples(opts: &GenOptions) -> Result<Vec<LoadedSample>> {
    if opts.n_samples == 0 || opts.views == 0 {
        return Err(invalid_arg!("need at least one sample and one view"));
    }
    opts.geometry.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    (0..opts.n_samples)
        .map(|i| {
            let (volume, projections, entry) = make_sample(opts, i, &mut rng)?;
            Ok(LoadedSample {
                id: entry.id,
                volume,
                projections,
                noise: entry.noise,
            })
        })
        .collect()
}

pub fn gen_dataset(opts: &GenOptions, out_dir: &Path) -> Result<DatasetManifest> {
    if opts.n_samples == 0 || opts.views == 0 {
        return Err(invalid_arg!("need at least one sample and one view"));
    }
    opts.geometry.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut samples = Vec::with_capacity(opts.n_samples);
    for i in 0..opts.n_samples {
        let (vol, proj, entry) = make_sample(opts, i, &mut rng)?;
        io::write_volume(&out_dir.join(&entry.volume), &vol)?;
        io::write_projections(&out_dir.join(&entry.projections), &proj)?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        resolution: opts.resolution,
        det_rows: opts.geometry.det_rows,
        det_cols: opts.geometry.det_cols,
        views: opts.views,
        samples,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidState(e.to_string()))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Accepts the manifest file or its directory.
pub fn load_manifest(path: &Path) -> Result<(DatasetManifest, PathBuf)> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: file.clone(),
        reason: e.to_string(),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format {
            path: file,
            reason: format!("unsupported manifest version {}", m.format_version),
        });
    }
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((m, root))
}

/// A sample read back from disk.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub id: String,
    pub volume: VolumeGrid,
    pub projections: ProjectionSet,
    pub noise: Option<NoiseModel>,
}

impl LoadedSample {
    /// Stored acquisition if the view count matches, otherwise a fresh one.
    pub fn projections_for(&self, views: usize) -> Result<ProjectionSet> {
        if views == self.projections.n_views() {
            return Ok(self.projections.clone());
        }
        let geom = make_circular_geometry(views, &self.projections.geom)?;
        acquire(&self.volume, &geom, self.noise.map(|n| view_noise(&n, views)).as_ref())
    }

    pub fn train_sample(&self, view_counts: &[usize]) -> Result<TrainSample> {
        let views = view_counts
            .iter()
            .map(|&v| self.projections_for(v))
            .collect::<Result<_>>()?;
        Ok(TrainSample::from_parts(self.volume.clone(), views))
    }
}

fn load_entry(m: &DatasetManifest, root: &Path, e: &SampleEntry) -> Result<LoadedSample> {
    let mismatch = |what: String| Error::Format {
        path: root.join(MANIFEST_FILE),
        reason: format!("sample {}: {what}", e.id),
    };
    e.geometry.validate().map_err(|err| mismatch(err.to_string()))?;
    if e.geometry.n_views() != m.views || e.geometry.det_rows != m.det_rows || e.geometry.det_cols != m.det_cols {
        return Err(mismatch("geometry disagrees with the manifest header".into()));
    }
    let volume = io::read_volume(&root.join(&e.volume))?;
    if volume.resolution() != m.resolution {
        return Err(mismatch(format!(
            "volume is {}³, manifest declares {}³",
            volume.resolution(),
            m.resolution
        )));
    }
    let projections = io::read_projections(&root.join(&e.projections), &e.geometry)?;
    Ok(LoadedSample {
        id: e.id.clone(),
        volume,
        projections,
        noise: e.noise,
    })
}

/// Checks that every referenced file exists and matches declared shapes.
pub fn validate(m: &DatasetManifest, root: &Path) -> Result<()> {
    let mut ids = std::collections::HashSet::new();
    for e in &m.samples {
        if !ids.insert(&e.id) {
            return Err(invalid_arg!("duplicate sample id {}", e.id));
        }
        load_entry(m, root, e)?;
    }
    Ok(())
}

pub fn load_samples(m: &DatasetManifest, root: &Path) -> Result<Vec<LoadedSample>> {
    m.samples.iter().map(|e| load_entry(m, root, e)).collect()
}
