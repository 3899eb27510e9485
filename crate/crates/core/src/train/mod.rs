//! Training: soft Dice loss, Adam and the sample/step/validate loop.

mod adam;
mod loss;
mod sampling;

pub use adam::{adam_step, AdamState};
pub use loss::{soft_dice_loss, DICE_SMOOTHING};
pub use sampling::{prepare_training_volume, sample_minibatch, SamplePair, TrainingVolume};

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::metrics::{class_mask, dice_coefficient};
use crate::net::{Checkpoint, Network, NetworkSpec, TrainingMeta};
use crate::pipeline::segment_planes;
use crate::tensor::{Scalar, Tensor};
use crate::volume::{LabelVolume, Plane, Volume};

/// How validation segments a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationMode {
    /// Full tri-planar pipeline.
    Full,
    /// Axial slices only; for quick runs.
    AxialOnly,
}

impl ValidationMode {
    fn planes(self) -> &'static [Plane] {
        match self {
            ValidationMode::Full => &Plane::ALL,
            ValidationMode::AxialOnly => &[Plane::Axial],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub subimage_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Iterations between validation runs; 0 disables validation.
    pub validation_interval: u64,
    pub class_count: usize,
    pub validation_mode: ValidationMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            batch_size: 16,
            subimage_size: 281,
            learning_rate: 0.001,
            seed: 0,
            validation_interval: 500,
            class_count: 4,
            validation_mode: ValidationMode::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        let (rf, _) = spec.receptive_field();
        if self.subimage_size < rf {
            return Err(Error::invalid(format!(
                "subimage_size {} leaves no output for a {rf} receptive field",
                self.subimage_size
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::invalid("learning_rate must be finite and non-negative"));
        }
        if spec.num_classes != self.class_count {
            return Err(Error::invalid("class_count does not match the network"));
        }
        Ok(())
    }
}

/// One training log line.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub loss: f64,
    pub val_dice: Option<f64>,
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "iter={} loss={:.6}", self.iteration, self.loss)?;
        if let Some(v) = self.val_dice {
            write!(f, " val_dice={v:.6}")?;
        }
        Ok(())
    }
}

/// Mean Dice over volumes and foreground classes of the pipeline output.
///
/// Classes absent from both prediction and reference are skipped; if every
/// entry is skipped the score is 1.
pub fn validate<T: Scalar>(net: &Network<T>, set: &[(Volume, LabelVolume)], mode: ValidationMode) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("validation set is empty"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (image, reference) in set {
        let seg = segment_planes(net, image, mode.planes())?;
        for c in 1..net.num_classes() as u8 {
            if let Some(d) = dice_coefficient(&class_mask(&seg.labels, c), &class_mask(reference, c))? {
                sum += d;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 1.0 } else { sum / count as f64 })
}

/// Runs one optimisation step on a prepared batch and returns the loss.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    batch: &[SamplePair],
    state: &mut AdamState<T>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let Some(first) = batch.first() else {
        return Err(Error::invalid("empty batch"));
    };
    let (size, out) = (first.size, first.out);
    let n = batch.len();
    let pixels = batch.iter().flat_map(|s| s.image.iter().map(|&v| T::from_f64(v as f64))).collect();
    let input = Tensor::new(&[n, 1, size, size], pixels)?;
    let labels: Vec<u8> = batch.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let (probs, trace) = net.forward_train(&input, rng)?;
    if probs.shape()[2] != out {
        return Err(Error::invalid("sample geometry does not match the network"));
    }
    let (loss, grad) = soft_dice_loss(&probs, &labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss is {loss}")));
    }
    let grads = net.backward(&trace, &grad)?;
    let slices = grads.slices();
    adam_step(&mut net.parameters_mut(), &slices, state)?;
    Ok(loss.to_f64_lossy())
}

/// Trains a freshly initialised canonical network.
///
/// Everything is driven by one ChaCha8 stream seeded from `config.seed`:
/// initial weights, then per iteration the batch draw and dropout masks.
/// Returns the checkpoint with the best validation score (the final network
/// when validation never ran) and the log. `on_log` sees each record as it is
/// produced.
pub fn train(
    dataset: &[TrainingVolume],
    validation: &[(Volume, LabelVolume)],
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogRecord),
) -> Result<(Checkpoint, Vec<LogRecord>)> {
    let spec = NetworkSpec::canonical(config.class_count)?;
    config.validate(&spec)?;
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net: Network<f32> = Network::from_spec(spec, &mut rng)?;
    let sizes: Vec<usize> = net.parameters_mut().iter().map(|p| p.len()).collect();
    let mut state = AdamState::new(&sizes, config.learning_rate);
    let meta = |iteration, score| TrainingMeta {
        iteration,
        seed: config.seed,
        validation_score: score,
    };
    let mut best: Option<Checkpoint> = None;
    let mut log = Vec::new();

    for it in 1..=config.iterations {
        let batch = sample_minibatch(dataset, config.batch_size, config.subimage_size, net.spec(), &mut rng)?;
        let before = net.clone();
        let loss = match train_step(&mut net, &batch, &mut state, &mut rng) {
            Ok(l) => l,
            Err(Error::NonFinite(msg)) => {
                let last_good = best.unwrap_or_else(|| Checkpoint::new(before, meta(it - 1, f32::NAN)));
                return Err(Error::Diverged {
                    iteration: it,
                    message: msg,
                    last_good: Box::new(last_good),
                });
            }
            Err(e) => return Err(e),
        };
        let mut record = LogRecord {
            iteration: it,
            loss,
            val_dice: None,
        };
        if config.validation_interval > 0 && it % config.validation_interval == 0 && !validation.is_empty() {
            let score = validate(&net, validation, config.validation_mode)?;
            record.val_dice = Some(score);
            let improved = best
                .as_ref()
                .map_or(true, |b| score > b.meta.validation_score as f64);
            if improved {
                best = Some(Checkpoint::new(net.clone(), meta(it, score as f32)));
            }
        }
        on_log(&record);
        log.push(record);
    }
    let ckpt = best.unwrap_or_else(|| Checkpoint::new(net, meta(config.iterations, f32::NAN)));
    Ok((ckpt, log))
}
