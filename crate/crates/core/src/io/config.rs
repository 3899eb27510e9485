//! Flat `section.key = value` run configuration.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown or repeated
//! keys are errors. Relative paths resolve against the config file's directory.
//!
//! Keys (defaults in parentheses):
//!
//! * `phantom.preset` (`default`): `default` or `compact` base geometry; the
//!   other `phantom.*` keys override it.
//! * `phantom.count` (10), `phantom.seed` (0)
//! * `phantom.dims`: `nx ny nz`; `phantom.spacing`: `sx sy sz`
//! * `phantom.tube_radius`, `phantom.ascending_axis` / `phantom.descending_axis`: `x y`,
//!   `phantom.arch_z`, `phantom.ascending_base_z`, `phantom.descending_base_z`
//! * `phantom.background_hu`, `phantom.aorta_hu`, `phantom.organ_hu`: `lo hi`,
//!   `phantom.noise_sigma`, `phantom.blob_count`
//! * `phantom.axis_jitter_mm`, `phantom.radius_jitter_mm`, `phantom.noise_jitter`
//! * `phantom.resample_spacing`: `sx sy sz`, samples every phantom on this grid
//! * `train.iterations` (10000), `train.batch_size` (16), `train.subimage_size` (281),
//!   `train.learning_rate` (0.001), `train.seed` (0), `train.validation_interval` (500),
//!   `train.class_count` (4), `train.validation_mode` (`full` or `axial`)
//! * `train.train_count` (6), `train.validation_count` (2): how many cases of the
//!   data directory, in name order, are used for training and then validation
//! * `paths.log`: training log file

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::phantom::{DatasetOptions, PhantomSpec};
use crate::train::{TrainConfig, ValidationMode};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub phantom: PhantomSpec,
    pub phantom_count: usize,
    pub phantom_seed: u64,
    pub dataset: DatasetOptions,
    pub train: TrainConfig,
    pub train_count: usize,
    pub validation_count: usize,
    pub log_path: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            phantom_count: 10,
            phantom_seed: 0,
            dataset: DatasetOptions::default(),
            train: TrainConfig::default(),
            train_count: 6,
            validation_count: 2,
            log_path: None,
        }
    }
}

fn value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::parse(key, format!("cannot parse `{v}`")))
}

fn values<T: FromStr, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let parts = v.split_whitespace().map(|p| value::<T>(key, p)).collect::<Result<Vec<_>>>()?;
    <[T; N]>::try_from(parts).map_err(|_| Error::parse(key, format!("expected {N} values")))
}

/// Reads and parses a config file.
pub fn read_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new("")))
}

/// Parses config text; `base` resolves relative paths.
pub fn parse_config(text: &str, base: &Path) -> Result<RunConfig> {
    let mut entries = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(format!("line {}", n + 1), "expected `key = value`"));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if !seen.insert(k.clone()) {
            return Err(Error::parse(k, "key given twice"));
        }
        entries.push((k, v));
    }

    let mut cfg = RunConfig::default();
    // The preset picks the base geometry before any override applies.
    if let Some((_, v)) = entries.iter().find(|(k, _)| k == "phantom.preset") {
        (cfg.phantom, cfg.dataset) = match v.as_str() {
            "default" => (PhantomSpec::default(), DatasetOptions::default()),
            "compact" => (PhantomSpec::compact(), DatasetOptions::compact()),
            _ => return Err(Error::parse("phantom.preset", format!("unknown preset `{v}`"))),
        };
    }
    for (k, v) in &entries {
        let (k, v) = (k.as_str(), v.as_str());
        let p = &mut cfg.phantom;
        let t = &mut cfg.train;
        match k {
            "phantom.preset" => {}
            "phantom.count" => cfg.phantom_count = value(k, v)?,
            "phantom.seed" => cfg.phantom_seed = value(k, v)?,
            "phantom.dims" => {
                let [x, y, z] = values::<usize, 3>(k, v)?;
                p.dims = [z, y, x];
            }
            "phantom.spacing" => {
                let [x, y, z] = values::<f64, 3>(k, v)?;
                p.spacing = [z, y, x];
            }
            "phantom.tube_radius" => p.tube_radius = value(k, v)?,
            "phantom.ascending_axis" => p.ascending_axis = values(k, v)?,
            "phantom.descending_axis" => p.descending_axis = values(k, v)?,
            "phantom.arch_z" => p.arch_z = value(k, v)?,
            "phantom.ascending_base_z" => p.ascending_base_z = value(k, v)?,
            "phantom.descending_base_z" => p.descending_base_z = value(k, v)?,
            "phantom.background_hu" => p.background_hu = value(k, v)?,
            "phantom.aorta_hu" => p.aorta_hu = value(k, v)?,
            "phantom.organ_hu" => {
                let [lo, hi] = values(k, v)?;
                p.organ_hu = (lo, hi);
            }
            "phantom.noise_sigma" => p.noise_sigma = value(k, v)?,
            "phantom.blob_count" => p.blob_count = value(k, v)?,
            "phantom.axis_jitter_mm" => cfg.dataset.axis_jitter_mm = value(k, v)?,
            "phantom.radius_jitter_mm" => cfg.dataset.radius_jitter_mm = value(k, v)?,
            "phantom.noise_jitter" => cfg.dataset.noise_jitter = value(k, v)?,
            "phantom.resample_spacing" => {
                let [x, y, z] = values::<f64, 3>(k, v)?;
                cfg.dataset.spacing = Some([z, y, x]);
            }
            "train.iterations" => t.iterations = value(k, v)?,
            "train.batch_size" => t.batch_size = value(k, v)?,
            "train.subimage_size" => t.subimage_size = value(k, v)?,
            "train.learning_rate" => t.learning_rate = value(k, v)?,
            "train.seed" => t.seed = value(k, v)?,
            "train.validation_interval" => t.validation_interval = value(k, v)?,
            "train.class_count" => t.class_count = value(k, v)?,
            "train.validation_mode" => {
                t.validation_mode = match v {
                    "full" => ValidationMode::Full,
                    "axial" => ValidationMode::AxialOnly,
                    _ => return Err(Error::parse(k, format!("expected `full` or `axial`, got `{v}`"))),
                }
            }
            "train.train_count" => cfg.train_count = value(k, v)?,
            "train.validation_count" => cfg.validation_count = value(k, v)?,
            "paths.log" => cfg.log_path = Some(base.join(v)),
            _ => return Err(Error::parse(k, "unknown key")),
        }
    }
    Ok(cfg)
}
