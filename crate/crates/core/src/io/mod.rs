//! MetaImage (`.mhd` header + `.raw` data) volume files and run configuration.
//!
//! Element types map to in-memory volumes as follows: `MET_SHORT` holds
//! Hounsfield intensities, `MET_UCHAR` holds labels and `MET_FLOAT` holds
//! normalized values such as class probabilities. Data is little-endian with
//! `x` varying fastest.

mod config;

pub use config::{parse_config, read_config, RunConfig};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::volume::{voxel_count, Dims, IntensityUnit, LabelVolume, Spacing, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementType {
    Int16,
    UInt8,
    Float32,
}

impl ElementType {
    pub fn size(self) -> usize {
        match self {
            ElementType::Int16 => 2,
            ElementType::UInt8 => 1,
            ElementType::Float32 => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ElementType::Int16 => "MET_SHORT",
            ElementType::UInt8 => "MET_UCHAR",
            ElementType::Float32 => "MET_FLOAT",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_SHORT" => Some(ElementType::Int16),
            "MET_UCHAR" => Some(ElementType::UInt8),
            "MET_FLOAT" => Some(ElementType::Float32),
            _ => None,
        }
    }
}

/// Parsed header of a `.mhd` file.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    /// `[nz, ny, nx]`.
    pub dims: Dims,
    /// `[sz, sy, sx]` in mm.
    pub spacing: Spacing,
    pub element_type: ElementType,
    /// Data file, resolved against the header's directory.
    pub data_file: PathBuf,
}

/// Contents of a volume file.
#[derive(Clone, Debug, PartialEq)]
pub enum VolumeFile {
    Intensity(Volume),
    Labels(LabelVolume),
    Float(Volume),
}

impl VolumeFile {
    pub fn into_intensity(self, path: &Path) -> Result<Volume> {
        match self {
            VolumeFile::Intensity(v) => Ok(v),
            _ => Err(Error::parse("ElementType", format!("{}: expected MET_SHORT intensities", path.display()))),
        }
    }

    pub fn into_labels(self, path: &Path) -> Result<LabelVolume> {
        match self {
            VolumeFile::Labels(l) => Ok(l),
            _ => Err(Error::parse("ElementType", format!("{}: expected MET_UCHAR labels", path.display()))),
        }
    }
}

fn required<'a>(fields: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    fields
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::parse(key, "missing required key"))
}

fn parse_triplet<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<T> = value
        .split_whitespace()
        .map(|p| p.parse::<T>().map_err(|_| Error::parse(key, format!("cannot parse `{p}`"))))
        .collect::<Result<_>>()?;
    <[T; 3]>::try_from(parts).map_err(|_| Error::parse(key, "expected three values"))
}

/// Parses header text. `dir` resolves a relative `ElementDataFile`.
pub fn parse_header(text: &str, dir: &Path) -> Result<VolumeHeader> {
    let mut fields = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::parse(line, "expected `key = value`"));
        };
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let ndims = required(&fields, "NDims")?;
    if ndims != "3" {
        return Err(Error::parse("NDims", format!("only 3-D volumes are supported, got {ndims}")));
    }
    let [nx, ny, nz] = parse_triplet::<usize>("DimSize", required(&fields, "DimSize")?)?;
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(Error::parse("DimSize", "dimensions must be positive"));
    }
    let [sx, sy, sz] = parse_triplet::<f64>("ElementSpacing", required(&fields, "ElementSpacing")?)?;
    if [sx, sy, sz].iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::parse("ElementSpacing", "spacing must be positive"));
    }
    let et = required(&fields, "ElementType")?;
    let element_type = ElementType::parse(et).ok_or_else(|| Error::parse("ElementType", format!("unsupported element type {et}")))?;
    for key in ["ElementByteOrderMSB", "BinaryDataByteOrderMSB"] {
        if let Some(v) = fields.get(key) {
            if !v.eq_ignore_ascii_case("false") {
                return Err(Error::parse(key, "only little-endian data is supported"));
            }
        }
    }
    if let Some(v) = fields.get("CompressedData") {
        if !v.eq_ignore_ascii_case("false") {
            return Err(Error::parse("CompressedData", "compressed data is not supported"));
        }
    }
    let file = required(&fields, "ElementDataFile")?;
    if file == "LOCAL" || file == "LIST" || file.contains('%') {
        return Err(Error::parse("ElementDataFile", format!("unsupported data file reference {file}")));
    }
    Ok(VolumeHeader {
        dims: [nz, ny, nx],
        spacing: [sz, sy, sx],
        element_type,
        data_file: dir.join(file),
    })
}

/// Reads a `.mhd` header and its data file.
pub fn read_volume(path: impl AsRef<Path>) -> Result<VolumeFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(""));
    let header = parse_header(&text, dir)?;
    let bytes = fs::read(&header.data_file).map_err(|e| Error::io(&header.data_file, e))?;
    let n = voxel_count(header.dims);
    let expected = n * header.element_type.size();
    if bytes.len() != expected {
        return Err(Error::parse(
            "DimSize",
            format!(
                "{} holds {} bytes but DimSize and ElementType require {expected}",
                header.data_file.display(),
                bytes.len()
            ),
        ));
    }
    let (dims, spacing) = (header.dims, header.spacing);
    Ok(match header.element_type {
        ElementType::Int16 => {
            let data = bytes
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
                .collect();
            VolumeFile::Intensity(Volume::new(dims, spacing, data, IntensityUnit::Hounsfield)?)
        }
        ElementType::UInt8 => VolumeFile::Labels(LabelVolume::new(dims, spacing, bytes)?),
        ElementType::Float32 => {
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            VolumeFile::Float(Volume::new(dims, spacing, data, IntensityUnit::Normalized)?)
        }
    })
}

/// Decimal text of `v` with at least 9 significant digits that parses back
/// to the same `f64`: the shortest round-trip form, zero-padded.
pub fn decimal_text(v: f64) -> String {
    let shortest = format!("{v:?}");
    let (mantissa, exponent) = match shortest.split_once('e') {
        Some((m, e)) => (m.to_string(), Some(e.to_string())),
        None => (shortest.clone(), None),
    };
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let significant = digits.trim_start_matches('0').len().max(1);
    let mut m = mantissa;
    if !m.contains('.') {
        m.push('.');
    }
    m.extend(std::iter::repeat_n('0', 9usize.saturating_sub(significant)));
    match exponent {
        Some(e) => format!("{m}e{e}"),
        None => m,
    }
}

/// Header text.
pub fn header_text(dims: Dims, spacing: Spacing, element_type: ElementType, data_file: &str) -> String {
    format!(
        "ObjectType = Image\n\
         NDims = 3\n\
         BinaryData = True\n\
         BinaryDataByteOrderMSB = False\n\
         CompressedData = False\n\
         DimSize = {} {} {}\n\
         ElementSpacing = {} {} {}\n\
         ElementType = {}\n\
         ElementDataFile = {}\n",
        dims[2],
        dims[1],
        dims[0],
        decimal_text(spacing[2]),
        decimal_text(spacing[1]),
        decimal_text(spacing[0]),
        element_type.name(),
        data_file
    )
}

fn raw_path(path: &Path) -> Result<(PathBuf, String)> {
    if path.extension().and_then(|e| e.to_str()) != Some("mhd") {
        return Err(Error::invalid(format!("{}: volume files must end in .mhd", path.display())));
    }
    let raw = path.with_extension("raw");
    let name = raw
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::invalid(format!("{}: file name is not valid UTF-8", path.display())))?
        .to_string();
    Ok((raw, name))
}

fn write_pair(path: &Path, dims: Dims, spacing: Spacing, et: ElementType, bytes: &[u8]) -> Result<()> {
    let (raw, name) = raw_path(path)?;
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    fs::write(path, header_text(dims, spacing, et, &name)).map_err(|e| Error::io(path, e))
}

/// Writes an intensity volume. Hounsfield volumes are stored as `MET_SHORT`
/// and must hold integers within the int16 range; normalized volumes are
/// stored as `MET_FLOAT`.
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    match v.unit {
        IntensityUnit::Hounsfield => {
            let mut bytes = Vec::with_capacity(v.data.len() * 2);
            for &x in &v.data {
                if x.fract() != 0.0 || x < i16::MIN as f32 || x > i16::MAX as f32 {
                    return Err(Error::invalid(format!("intensity {x} is not representable as int16")));
                }
                bytes.extend_from_slice(&(x as i16).to_le_bytes());
            }
            write_pair(path, v.dims, v.spacing, ElementType::Int16, &bytes)
        }
        IntensityUnit::Normalized => {
            let bytes: Vec<u8> = v.data.iter().flat_map(|x| x.to_le_bytes()).collect();
            write_pair(path, v.dims, v.spacing, ElementType::Float32, &bytes)
        }
    }
}

/// Writes a label volume as `MET_UCHAR`.
pub fn write_labels(l: &LabelVolume, path: impl AsRef<Path>) -> Result<()> {
    write_pair(path.as_ref(), l.dims, l.spacing, ElementType::UInt8, &l.data)
}
