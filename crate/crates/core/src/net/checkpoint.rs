//! Binary checkpoint format.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! "ADCN" | version u32 | num_classes u32 | layer_count u32
//! per layer: kind u8 | in u32 | out u32 | dilation u32 | flags u8 | weights f32* | bias f32*
//! per batch-norm layer: gamma f32* | beta f32* | running_mean f32* | running_var f32*
//! iteration u64 | seed u64 | validation_score f32
//! crc32 u32 (over every preceding byte)
//! ```
//!
//! Layer flags: bit 0 batch norm, bit 1 dropout (p = 0.5) before the layer,
//! bits 2-3 activation (0 ReLU, 1 softmax, 2 none).

use std::fs;
use std::path::Path;

use super::{Activation, Layer, LayerKind, LayerSpec, Network, NetworkSpec, CANONICAL_DROPOUT};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormParams, ConvParams, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ADCN";
pub const CHECKPOINT_VERSION: u32 = 1;

const FLAG_BATCH_NORM: u8 = 1;
const FLAG_DROPOUT: u8 = 1 << 1;
const ACTIVATION_SHIFT: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingMeta {
    pub iteration: u64,
    pub seed: u64,
    /// Best validation score, NaN when no validation ran.
    pub validation_score: f32,
}

impl Default for TrainingMeta {
    fn default() -> Self {
        Self {
            iteration: 0,
            seed: 0,
            validation_score: f32::NAN,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub network: Network<f32>,
    pub meta: TrainingMeta,
}

impl Checkpoint {
    pub fn new(network: Network<f32>, meta: TrainingMeta) -> Self {
        Self { network, meta }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit the checkpoint format")))
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let net = &ckpt.network;
    let spec = net.spec();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, to_u32(spec.num_classes, "class count")?);
    put_u32(&mut out, to_u32(spec.layers.len(), "layer count")?);

    for layer in net.layers() {
        let s = &layer.spec;
        let mut flags = 0u8;
        if s.batch_norm {
            flags |= FLAG_BATCH_NORM;
        }
        if s.dropout_before == CANONICAL_DROPOUT {
            flags |= FLAG_DROPOUT;
        } else if s.dropout_before != 0.0 {
            return Err(Error::invalid(format!(
                "dropout {} cannot be stored; the format supports 0 or {CANONICAL_DROPOUT}",
                s.dropout_before
            )));
        }
        let act = match s.activation {
            Activation::Relu => 0u8,
            Activation::Softmax => 1,
            Activation::None => 2,
        };
        flags |= act << ACTIVATION_SHIFT;
        out.push(match s.kind {
            LayerKind::Conv3x3 => 0,
            LayerKind::Conv1x1 => 1,
        });
        put_u32(&mut out, to_u32(s.in_channels, "input channels")?);
        put_u32(&mut out, to_u32(s.out_channels, "output channels")?);
        put_u32(&mut out, to_u32(s.dilation, "dilation")?);
        out.push(flags);
        put_f32s(&mut out, layer.conv.weights.data());
        put_f32s(&mut out, layer.conv.bias.data());
    }

    for norm in net.layers().iter().filter_map(|l| l.norm.as_ref()) {
        put_f32s(&mut out, norm.gamma.data());
        put_f32s(&mut out, norm.beta.data());
        put_f32s(&mut out, norm.running_mean.data());
        put_f32s(&mut out, norm.running_var.data());
    }

    out.extend_from_slice(&ckpt.meta.iteration.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.seed.to_le_bytes());
    out.extend_from_slice(&ckpt.meta.validation_score.to_le_bytes());
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let len: usize = shape.iter().product();
        let raw = self.take(len.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("tensor too large".into()))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(|e| Error::InvalidCheckpoint(e.to_string()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 4 {
        return Err(Error::CorruptCheckpoint("file too short".into()));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(Error::CorruptCheckpoint("CRC32 mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let num_classes = r.u32()? as usize;
    let layer_count = r.u32()? as usize;
    if layer_count == 0 || layer_count > 1024 {
        return Err(Error::InvalidCheckpoint(format!("implausible layer count {layer_count}")));
    }

    let mut specs = Vec::with_capacity(layer_count);
    let mut convs = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let kind = match r.u8()? {
            0 => LayerKind::Conv3x3,
            1 => LayerKind::Conv1x1,
            k => return Err(Error::InvalidCheckpoint(format!("layer {i}: unknown kind {k}"))),
        };
        let in_channels = r.u32()? as usize;
        let out_channels = r.u32()? as usize;
        let dilation = r.u32()? as usize;
        let flags = r.u8()?;
        let activation = match flags >> ACTIVATION_SHIFT {
            0 => Activation::Relu,
            1 => Activation::Softmax,
            2 => Activation::None,
            a => return Err(Error::InvalidCheckpoint(format!("layer {i}: unknown activation {a}"))),
        };
        let spec = LayerSpec {
            kind,
            in_channels,
            out_channels,
            dilation,
            batch_norm: flags & FLAG_BATCH_NORM != 0,
            dropout_before: if flags & FLAG_DROPOUT != 0 { CANONICAL_DROPOUT } else { 0.0 },
            activation,
        };
        let k = kind.kernel();
        if in_channels == 0 || out_channels == 0 || in_channels.saturating_mul(out_channels) > 1 << 24 {
            return Err(Error::InvalidCheckpoint(format!("layer {i}: implausible channel counts")));
        }
        let weights = r.tensor(&[out_channels, in_channels, k, k])?;
        let bias = r.tensor(&[out_channels])?;
        let conv = ConvParams::new(weights, bias, dilation).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
        specs.push(spec);
        convs.push(conv);
    }

    let mut layers = Vec::with_capacity(layer_count);
    for (spec, conv) in specs.iter().zip(convs) {
        let norm = if spec.batch_norm {
            let c = spec.out_channels;
            let mut n = BatchNormParams::new(c);
            n.gamma = r.tensor(&[c])?;
            n.beta = r.tensor(&[c])?;
            n.running_mean = r.tensor(&[c])?;
            n.running_var = r.tensor(&[c])?;
            Some(n)
        } else {
            None
        };
        layers.push(Layer {
            spec: spec.clone(),
            conv,
            norm,
        });
    }

    let meta = TrainingMeta {
        iteration: r.u64()?,
        seed: r.u64()?,
        validation_score: r.f32()?,
    };
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} unexpected trailing bytes",
            body.len() - r.pos
        )));
    }

    let spec = NetworkSpec {
        layers: specs,
        num_classes,
    };
    let network = Network::from_parts(spec, layers).map_err(|e| Error::InvalidCheckpoint(e.to_string()))?;
    Ok(Checkpoint { network, meta })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(ckpt)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint and rejects it unless it classifies `num_classes` classes.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, num_classes: usize) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    let found = ckpt.network.num_classes();
    if found != num_classes {
        return Err(Error::InvalidCheckpoint(format!(
            "checkpoint has {found} classes, expected {num_classes}"
        )));
    }
    Ok(ckpt)
}
