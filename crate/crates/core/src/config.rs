//! Flat `key = value` configuration files with `#` comments.
//!
//! Keys are consumed as they are read; [`KvConfig::finish`] rejects whatever
//! is left, so typos surface as errors instead of being ignored.

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{invalid_arg, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::model::ModelConfig;
use crate::projector::NoiseModel;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvConfig {
    entries: BTreeMap<String, String>,
}

impl KvConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| invalid_arg!("line {}: expected `key = value`, got {raw:?}", n + 1))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(invalid_arg!("line {}: empty key", n + 1));
            }
            if entries.insert(k.to_string(), v.trim().to_string()).is_some() {
                return Err(invalid_arg!("line {}: duplicate key `{k}`", n + 1));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Sets or replaces a key (used for command-line overrides).
    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| invalid_arg!("`{key} = {v}`: {e}")),
        }
    }

    pub fn take_into<T: FromStr>(&mut self, key: &str, dst: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *dst = v;
        }
        Ok(())
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => v
                .split(',')
                .map(|s| s.trim().parse().map_err(|e| invalid_arg!("`{key} = {v}`: {e}")))
                .collect::<Result<Vec<T>>>()
                .map(Some),
        }
    }

    pub fn take_bool(&mut self, key: &str) -> Result<Option<bool>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(v) => match v.to_ascii_lowercase().as_str() {
                "1" | "true" | "yes" | "on" => Ok(Some(true)),
                "0" | "false" | "no" | "off" => Ok(Some(false)),
                _ => Err(invalid_arg!("`{key} = {v}`: expected a boolean")),
            },
        }
    }

    /// Errors if any key was not consumed.
    pub fn finish(self) -> Result<()> {
        if self.entries.is_empty() {
            Ok(())
        } else {
            let keys: Vec<&str> = self.entries.keys().map(String::as_str).collect();
            Err(invalid_arg!("unknown config keys: {}", keys.join(", ")))
        }
    }
}

/// Named model sizes: `desk`, `toy`, `clinical`.
pub fn model_preset(name: &str) -> Result<ModelConfig> {
    match name {
        "desk" => Ok(ModelConfig::desk()),
        "toy" => Ok(ModelConfig::toy()),
        "clinical" => Ok(ModelConfig::clinical()),
        _ => Err(invalid_arg!("unknown model preset {name:?} (desk|toy|clinical)")),
    }
}

pub fn geometry_preset(name: &str) -> Result<ScannerGeometry> {
    match name {
        "desk" => Ok(ScannerGeometry::desk()),
        "clinical" => Ok(ScannerGeometry::clinical()),
        _ => Err(invalid_arg!("unknown geometry preset {name:?} (desk|clinical)")),
    }
}

/// `model`, `ablation`, `residual`, `encoder.*`, `decoder.*`, `grid.*`.
pub fn model_config(kv: &mut KvConfig) -> Result<ModelConfig> {
    let mut m = match kv.take::<String>("model")? {
        Some(p) => model_preset(&p)?,
        None => ModelConfig::toy(),
    };
    kv.take_into("ablation", &mut m.ablation)?;
    if let Some(r) = kv.take("residual")? {
        m.encoder.residual = r;
        m.decoder.residual = r;
    }
    kv.take_into("encoder.patch_size", &mut m.encoder.patch_size)?;
    kv.take_into("encoder.width", &mut m.encoder.width)?;
    kv.take_into("encoder.layers", &mut m.encoder.layers)?;
    kv.take_into("encoder.heads", &mut m.encoder.heads)?;
    kv.take_into("decoder.width", &mut m.decoder.width)?;
    kv.take_into("decoder.layers", &mut m.decoder.layers)?;
    kv.take_into("decoder.heads", &mut m.decoder.heads)?;
    kv.take_into("decoder.token_grid", &mut m.decoder.token_grid)?;
    kv.take_into("decoder.plane_channels", &mut m.decoder.plane_channels)?;
    kv.take_into("decoder.inf_layers", &mut m.decoder.inf_layers)?;
    kv.take_into("decoder.inf_hidden", &mut m.decoder.inf_hidden)?;
    kv.take_into("grid.side", &mut m.grid_side)?;
    kv.take_into("grid.hidden", &mut m.grid_hidden)?;
    m.validate()?;
    Ok(m)
}

/// `view_counts`, `lr`, `warmup`, `steps`, `batch_size`, `points`, `beta1`,
/// `beta2`, `eps`, `weight_decay`, `grad_clip`, `seed`.
pub fn train_config(kv: &mut KvConfig) -> Result<TrainConfig> {
    let mut t = TrainConfig::desk();
    if let Some(v) = kv.take_list("view_counts")? {
        t.view_counts = v;
    }
    kv.take_into("lr", &mut t.lr_init)?;
    kv.take_into("warmup", &mut t.warmup_iters)?;
    kv.take_into("steps", &mut t.total_steps)?;
    kv.take_into("batch_size", &mut t.batch_size)?;
    kv.take_into("points", &mut t.points_per_step)?;
    kv.take_into("beta1", &mut t.beta1)?;
    kv.take_into("beta2", &mut t.beta2)?;
    kv.take_into("eps", &mut t.eps)?;
    kv.take_into("weight_decay", &mut t.weight_decay)?;
    kv.take_into("grad_clip", &mut t.grad_clip)?;
    kv.take_into("seed", &mut t.seed)?;
    t.validate()?;
    Ok(t)
}

/// `geometry` preset plus `dso_mm`, `dsd_mm`, `det_rows`, `det_cols`,
/// `pixel_mm`, `volume_extent_mm` overrides. Angles are set per view count.
pub fn geometry_config(kv: &mut KvConfig) -> Result<ScannerGeometry> {
    let mut g = match kv.take::<String>("geometry")? {
        Some(p) => geometry_preset(&p)?,
        None => ScannerGeometry::desk(),
    };
    kv.take_into("dso_mm", &mut g.dso_mm)?;
    kv.take_into("dsd_mm", &mut g.dsd_mm)?;
    kv.take_into("det_rows", &mut g.det_rows)?;
    kv.take_into("det_cols", &mut g.det_cols)?;
    kv.take_into("pixel_mm", &mut g.pixel_mm)?;
    kv.take_into("volume_extent_mm", &mut g.volume_extent_mm)?;
    g.validate()?;
    Ok(g)
}

/// `noise = on|off`, `photon_count`, `gaussian_sigma`. The seed is set per
/// sample by the caller.
pub fn noise_config(kv: &mut KvConfig) -> Result<Option<NoiseModel>> {
    let on = kv.take_bool("noise")?.unwrap_or(true);
    let mut nm = NoiseModel::default();
    kv.take_into("photon_count", &mut nm.photon_count)?;
    kv.take_into("gaussian_sigma", &mut nm.gaussian_sigma)?;
    nm.validate()?;
    Ok(on.then_some(nm))
}
