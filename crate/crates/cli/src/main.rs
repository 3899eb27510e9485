//! `aortaseg`: phantom generation, training, inference, evaluation and
//! checkpoint inspection.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or parse error, 3 numerical
//! failure. `AORTASEG_THREADS` caps internal parallelism (0 or unset means one
//! thread).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aortaseg::io::{read_config, read_volume, write_labels, write_volume};
use aortaseg::metrics::{class_names, evaluate};
use aortaseg::net::{load_checkpoint, save_checkpoint, Activation, Checkpoint, LayerKind};
use aortaseg::phantom::make_dataset;
use aortaseg::pipeline::segment;
use aortaseg::study::merge_labels;
use aortaseg::threads::{configured_threads, with_threads};
use aortaseg::train::{prepare_training_volume, train};
use aortaseg::{Error, IntensityUnit, LabelVolume, Volume};
use clap::{Parser, Subcommand};

const IMAGE_SUFFIX: &str = "_image.mhd";
const LABELS_SUFFIX: &str = "_labels.mhd";

#[derive(Parser)]
#[command(name = "aortaseg", version, about = "Tri-planar dilated-CNN aorta segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset as case_NNN_image.mhd / case_NNN_labels.mhd pairs.
    Phantom {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on the image/label pairs of a data directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a Hounsfield volume.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Directory for the fused 1 mm class probability maps.
        #[arg(long)]
        probs: Option<PathBuf>,
    },
    /// Score a predicted label volume against a reference.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class count of the label set (4 or 2); inferred from the labels when omitted.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Describe a checkpoint.
    Info {
        #[arg(long)]
        model: PathBuf,
    },
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) | Error::Diverged { .. } => 3,
            _ => 2,
        };
        Failure { code, message: e.to_string() }
    }
}

fn data_error(message: impl Into<String>) -> Failure {
    Failure { code: 2, message: message.into() }
}

fn io_error(path: &Path, e: std::io::Error) -> Failure {
    Failure::from(Error::Io { path: path.to_path_buf(), source: e })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match with_threads(configured_threads(), || run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Phantom { config, out } => phantom(&config, &out),
        Command::Train { config, data, out } => train_cmd(&config, &data, &out),
        Command::Infer { model, input, out, probs } => infer(&model, &input, &out, probs.as_deref()),
        Command::Eval { pred, reference, out, classes } => eval(&pred, &reference, &out, classes),
        Command::Info { model } => info(&model),
    }
}

fn phantom(config: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = read_config(config)?;
    let phantoms = make_dataset(cfg.phantom_count, &cfg.phantom, cfg.phantom_seed, &cfg.dataset)?;
    fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
    for (i, p) in phantoms.iter().enumerate() {
        let stem = format!("case_{i:03}");
        write_volume(&p.volume, out.join(format!("{stem}{IMAGE_SUFFIX}")))?;
        write_labels(&p.labels, out.join(format!("{stem}{LABELS_SUFFIX}")))?;
        let [z, y, x] = p.volume.dims;
        println!("{stem} dims={x}x{y}x{z}");
    }
    Ok(())
}

/// Image/label path pairs of a data directory, sorted by name.
fn data_pairs(dir: &Path) -> Result<Vec<(PathBuf, PathBuf)>, Failure> {
    let entries = fs::read_dir(dir).map_err(|e| io_error(dir, e))?;
    let mut images = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| io_error(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix(IMAGE_SUFFIX) {
            let labels = dir.join(format!("{stem}{LABELS_SUFFIX}"));
            if !labels.exists() {
                return Err(data_error(format!("{}: no matching {LABELS_SUFFIX} file", path.display())));
            }
            images.push((path, labels));
        }
    }
    images.sort();
    Ok(images)
}

fn read_case(image: &Path, labels: &Path, class_count: usize) -> Result<(Volume, LabelVolume), Failure> {
    let v = read_volume(image)?.into_intensity(image)?;
    let l = read_volume(labels)?.into_labels(labels)?;
    if l.dims != v.dims || l.spacing != v.spacing {
        return Err(data_error(format!("{}: label grid differs from its image", labels.display())));
    }
    if l.max_label() > 3 {
        return Err(data_error(format!("{}: label {} out of range", labels.display(), l.max_label())));
    }
    let l = if class_count == 2 { merge_labels(&l) } else { l };
    Ok((v, l))
}

fn train_cmd(config: &Path, data: &Path, out: &Path) -> Result<(), Failure> {
    let cfg = read_config(config)?;
    let pairs = data_pairs(data)?;
    let needed = cfg.train_count + cfg.validation_count;
    if cfg.train_count == 0 || pairs.len() < needed {
        return Err(data_error(format!(
            "{}: {} cases found, {} training and {} validation cases needed",
            data.display(),
            pairs.len(),
            cfg.train_count,
            cfg.validation_count
        )));
    }
    let classes = cfg.train.class_count;
    let cases = pairs[..needed]
        .iter()
        .map(|(i, l)| read_case(i, l, classes))
        .collect::<Result<Vec<_>, _>>()?;
    let (training, validation) = cases.split_at(cfg.train_count);
    let prepared = training
        .iter()
        .map(|(v, l)| prepare_training_volume(v, l))
        .collect::<Result<Vec<_>, _>>()?;

    let mut log_file = match &cfg.log_path {
        Some(p) => {
            if let Some(dir) = p.parent() {
                fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
            }
            Some((fs::File::create(p).map_err(|e| io_error(p, e))?, p.clone()))
        }
        None => None,
    };
    let mut log_failure = None;
    let result = train(&prepared, validation, &cfg.train, |r| {
        println!("{r}");
        if let Some((f, p)) = &mut log_file {
            if let Err(e) = writeln!(f, "{r}") {
                log_failure.get_or_insert_with(|| io_error(p, e));
            }
        }
    });
    if let Some(f) = log_failure {
        return Err(f);
    }
    match result {
        Ok((ckpt, _)) => {
            save_checkpoint(&ckpt, out)?;
            Ok(())
        }
        Err(Error::Diverged { iteration, message, last_good }) => {
            save_checkpoint(&last_good, out)?;
            Err(Failure {
                code: 3,
                message: format!(
                    "training diverged at iteration {iteration}: {message}; wrote the last good checkpoint \
                     (iteration {}) to {}",
                    last_good.meta.iteration,
                    out.display()
                ),
            })
        }
        Err(e) => Err(e.into()),
    }
}

fn infer(model: &Path, input: &Path, out: &Path, probs: Option<&Path>) -> Result<(), Failure> {
    let ckpt = load_checkpoint(model)?;
    let v = read_volume(input)?.into_intensity(input)?;
    let seg = segment(&ckpt.network, &v)?;
    write_labels(&seg.labels, out)?;
    if let Some(dir) = probs {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let p = &seg.probabilities;
        for (c, name) in class_names(p.class_count).iter().enumerate() {
            let map = Volume::new(p.dims, p.spacing, p.class(c).to_vec(), IntensityUnit::Normalized)?;
            write_volume(&map, dir.join(format!("prob_{c}_{name}.mhd")))?;
        }
    }
    Ok(())
}

fn eval(pred: &Path, reference: &Path, out: &Path, classes: Option<usize>) -> Result<(), Failure> {
    let p = read_volume(pred)?.into_labels(pred)?;
    let r = read_volume(reference)?.into_labels(reference)?;
    let classes = classes.unwrap_or(if p.max_label().max(r.max_label()) >= 2 { 4 } else { 2 });
    let report = evaluate(&p, &r, classes)?;
    let text = report.to_string();
    fs::write(out, &text).map_err(|e| io_error(out, e))?;
    print!("{text}");
    Ok(())
}

fn describe(ckpt: &Checkpoint) -> String {
    let spec = ckpt.network.spec();
    let mut s = format!("classes={}\nlayers={}\n", spec.num_classes, spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let kind = match l.kind {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
        };
        let act = match l.activation {
            Activation::Relu => "relu",
            Activation::Softmax => "softmax",
            Activation::None => "none",
        };
        s += &format!(
            "layer {}: {kind} {}->{} dilation={} batch_norm={} dropout={} activation={act}\n",
            i + 1,
            l.in_channels,
            l.out_channels,
            l.dilation,
            l.batch_norm,
            l.dropout_before
        );
    }
    let (h, w) = spec.receptive_field();
    s += &format!("parameter_count={}\nreceptive_field={h}x{w}\n", spec.parameter_count());
    let m = &ckpt.meta;
    s += &format!("iteration={} seed={} validation_score={}\n", m.iteration, m.seed, m.validation_score);
    s
}

fn info(model: &Path) -> Result<(), Failure> {
    print!("{}", describe(&load_checkpoint(model)?));
    Ok(())
}
