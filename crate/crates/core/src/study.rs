//! Phantom study: generate phantoms, train on some, validate on others,
//! segment and score the held-out rest.

use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricsReport};
use crate::net::Checkpoint;
use crate::phantom::{make_dataset, DatasetOptions, Phantom, PhantomSpec};
use crate::pipeline::segment;
use crate::train::{prepare_training_volume, train, LogRecord, TrainConfig};
use crate::volume::LabelVolume;

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub phantom: PhantomSpec,
    pub dataset: DatasetOptions,
    pub phantom_seed: u64,
    pub train_count: usize,
    pub validation_count: usize,
    pub test_count: usize,
    pub train: TrainConfig,
}

impl Default for StudyConfig {
    /// 6 training, 2 validation and 2 test phantoms at default geometry.
    fn default() -> Self {
        Self {
            phantom: PhantomSpec::default(),
            dataset: DatasetOptions::default(),
            phantom_seed: 0,
            train_count: 6,
            validation_count: 2,
            test_count: 2,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct StudyResult {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRecord>,
    pub reports: Vec<MetricsReport>,
}

impl StudyResult {
    /// Mean Dice of one report row over test cases; `None` if any is undefined.
    pub fn mean_dice(&self, name: &str) -> Option<f64> {
        self.mean(name, |r| r.dice)
    }

    /// Mean ASSD of one report row over test cases; `None` if any is undefined.
    pub fn mean_assd(&self, name: &str) -> Option<f64> {
        self.mean(name, |r| r.assd_mm)
    }

    fn mean(&self, name: &str, f: impl Fn(&crate::metrics::MetricRow) -> Option<f64>) -> Option<f64> {
        let vals = self
            .reports
            .iter()
            .map(|r| r.class(name).and_then(&f))
            .collect::<Option<Vec<f64>>>()?;
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Maps every foreground label to 1 for two-class training.
pub fn merge_labels(l: &LabelVolume) -> LabelVolume {
    LabelVolume {
        dims: l.dims,
        spacing: l.spacing,
        data: l.data.iter().map(|&v| (v != 0) as u8).collect(),
    }
}

/// Labels of a phantom in the label set of `class_count` classes.
pub fn labels_for(p: &Phantom, class_count: usize) -> LabelVolume {
    if class_count == 2 {
        merge_labels(&p.labels)
    } else {
        p.labels.clone()
    }
}

pub fn run_study(cfg: &StudyConfig, on_log: impl FnMut(&LogRecord)) -> Result<StudyResult> {
    if cfg.train_count == 0 || cfg.test_count == 0 {
        return Err(Error::invalid("study needs training and test phantoms"));
    }
    let total = cfg.train_count + cfg.validation_count + cfg.test_count;
    let phantoms = make_dataset(total, &cfg.phantom, cfg.phantom_seed, &cfg.dataset)?;
    let classes = cfg.train.class_count;
    let (training, rest) = phantoms.split_at(cfg.train_count);
    let (validation, test) = rest.split_at(cfg.validation_count);

    let prepared = training
        .iter()
        .map(|p| prepare_training_volume(&p.volume, &labels_for(p, classes)))
        .collect::<Result<Vec<_>>>()?;
    let val_set: Vec<_> = validation
        .iter()
        .map(|p| (p.volume.clone(), labels_for(p, classes)))
        .collect();
    let (checkpoint, log) = train(&prepared, &val_set, &cfg.train, on_log)?;

    let reports = test
        .iter()
        .map(|p| {
            let seg = segment(&checkpoint.network, &p.volume)?;
            evaluate(&seg.labels, &labels_for(p, classes), classes)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyResult {
        checkpoint,
        log,
        reports,
    })
}
