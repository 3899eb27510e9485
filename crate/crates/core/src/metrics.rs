//! Overlap and surface-distance metrics.
//!
//! Surfaces are foreground voxels with at least one 6-neighbour that is
//! background or outside the grid. Distances are voxel-centre to voxel-centre
//! in millimetres. ASSD sums the distances of both surfaces and divides by the
//! total number of surface voxels.

use std::fmt;

use crate::error::{Error, Result};
use crate::volume::{voxel_count, voxel_index, Dims, LabelVolume, Spacing};

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<bool>) -> Result<Self> {
        if data.len() != voxel_count(dims) {
            return Err(Error::invalid("mask data length does not match dims"));
        }
        Ok(Self { dims, spacing, data })
    }

    pub fn empty(dims: Dims, spacing: Spacing) -> Self {
        Self {
            dims,
            spacing,
            data: vec![false; voxel_count(dims)],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[voxel_index(self.dims, z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = voxel_index(self.dims, z, y, x);
        self.data[i] = v;
    }
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::invalid(format!("mask dims {:?} and {:?} differ", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|A ∩ B| / (|A| + |B|)`; `None` when both masks are empty.
pub fn dice_coefficient(a: &BinaryMask, b: &BinaryMask) -> Result<Option<f64>> {
    check_pair(a, b)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.data.iter().zip(&b.data) {
        na += x as usize;
        nb += y as usize;
        both += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok(None);
    }
    Ok(Some(2.0 * both as f64 / (na + nb) as f64))
}

pub fn surface_voxels(m: &BinaryMask) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = m.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !m.get(z, y, x) {
                    continue;
                }
                let boundary = z == 0
                    || y == 0
                    || x == 0
                    || z + 1 == nz
                    || y + 1 == ny
                    || x + 1 == nx
                    || !m.get(z - 1, y, x)
                    || !m.get(z + 1, y, x)
                    || !m.get(z, y - 1, x)
                    || !m.get(z, y + 1, x)
                    || !m.get(z, y, x - 1)
                    || !m.get(z, y, x + 1);
                if boundary {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// One-dimensional squared-distance transform (lower envelope of parabolas)
/// with axis weight `w = spacing²`. `f` holds the input costs, `INFINITY` for
/// non-sites, and is overwritten with the result.
fn edt_1d(f: &mut [f64], w: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let (qf, pf) = (q as f64, p as f64);
                    let s = ((f[q] + w * qf * qf) - (f[p] + w * pf * pf)) / (2.0 * w * (qf - pf));
                    if s <= *z.last().unwrap() {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        return;
    }
    out.clear();
    let mut k = 0;
    for q in 0..n {
        let qf = q as f64;
        while k + 1 < v.len() && z[k + 1] < qf {
            k += 1;
        }
        let d = qf - v[k] as f64;
        out.push(w * d * d + f[v[k]]);
    }
    f.copy_from_slice(out);
}

/// Squared physical distance from every voxel to the nearest `true` voxel of `sites`.
pub fn squared_distance_transform(sites: &[bool], dims: Dims, spacing: Spacing) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut d: Vec<f64> = sites.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();

    for zz in 0..nz {
        for yy in 0..ny {
            let start = voxel_index(dims, zz, yy, 0);
            edt_1d(&mut d[start..start + nx], spacing[2] * spacing[2], &mut v, &mut z, &mut out);
        }
    }
    for zz in 0..nz {
        for xx in 0..nx {
            line.clear();
            line.extend((0..ny).map(|yy| d[voxel_index(dims, zz, yy, xx)]));
            edt_1d(&mut line, spacing[1] * spacing[1], &mut v, &mut z, &mut out);
            for (yy, &val) in line.iter().enumerate() {
                d[voxel_index(dims, zz, yy, xx)] = val;
            }
        }
    }
    for yy in 0..ny {
        for xx in 0..nx {
            line.clear();
            line.extend((0..nz).map(|zz| d[voxel_index(dims, zz, yy, xx)]));
            edt_1d(&mut line, spacing[0] * spacing[0], &mut v, &mut z, &mut out);
            for (zz, &val) in line.iter().enumerate() {
                d[voxel_index(dims, zz, yy, xx)] = val;
            }
        }
    }
    d
}

/// Average symmetric surface distance in millimetres.
pub fn assd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    check_pair(a, b)?;
    if a.spacing != b.spacing {
        return Err(Error::invalid("mask spacings differ"));
    }
    let sa = surface_voxels(a);
    let sb = surface_voxels(b);
    if sa.is_empty() || sb.is_empty() {
        return Err(Error::UndefinedMetric("ASSD needs two non-empty masks".into()));
    }
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| -> f64 {
        let mut sites = vec![false; voxel_count(a.dims)];
        for &[z, y, x] in to {
            sites[voxel_index(a.dims, z, y, x)] = true;
        }
        let dt = squared_distance_transform(&sites, a.dims, a.spacing);
        from.iter()
            .map(|&[z, y, x]| dt[voxel_index(a.dims, z, y, x)].sqrt())
            .sum()
    };
    let total = directed(&sa, &sb) + directed(&sb, &sa);
    Ok(total / (sa.len() + sb.len()) as f64)
}

pub fn class_mask(l: &LabelVolume, class: u8) -> BinaryMask {
    BinaryMask {
        dims: l.dims,
        spacing: l.spacing,
        data: l.data.iter().map(|&v| v == class).collect(),
    }
}

/// Union of every non-background class.
pub fn merge_foreground(l: &LabelVolume) -> BinaryMask {
    BinaryMask {
        dims: l.dims,
        spacing: l.spacing,
        data: l.data.iter().map(|&v| v != 0).collect(),
    }
}

pub const MERGED_NAME: &str = "thoracic_aorta";

/// Class names by id for a 4-class or 2-class labelling.
pub fn class_names(class_count: usize) -> Vec<&'static str> {
    match class_count {
        2 => vec!["background", MERGED_NAME],
        _ => vec!["background", "ascending_aorta", "aortic_arch", "descending_aorta"],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    /// `None` when both masks are empty.
    pub dice: Option<f64>,
    /// `None` when either mask is empty.
    pub assd_mm: Option<f64>,
    pub pred_voxels: usize,
    pub ref_voxels: usize,
}

impl MetricRow {
    fn compute(name: &str, pred: &BinaryMask, reference: &BinaryMask) -> Result<Self> {
        let dice = dice_coefficient(pred, reference)?;
        let assd_mm = match assd(pred, reference) {
            Ok(v) => Some(v),
            Err(Error::UndefinedMetric(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            name: name.to_string(),
            dice,
            assd_mm,
            pred_voxels: pred.count(),
            ref_voxels: reference.count(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub spacing: Spacing,
    pub classes: Vec<MetricRow>,
    pub merged: MetricRow,
}

impl MetricsReport {
    pub fn class(&self, name: &str) -> Option<&MetricRow> {
        self.classes.iter().find(|r| r.name == name)
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.6}"))
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [sz, sy, sx] = self.spacing;
        writeln!(f, "# evaluated at reference resolution, spacing_mm={sx} {sy} {sz}")?;
        for row in self.classes.iter().chain(std::iter::once(&self.merged)) {
            writeln!(f, "{} dice={} assd_mm={}", row.name, fmt_opt(row.dice), fmt_opt(row.assd_mm))?;
        }
        Ok(())
    }
}

/// Per-class and merged whole-aorta Dice and ASSD at the reference resolution.
pub fn evaluate(pred: &LabelVolume, reference: &LabelVolume, class_count: usize) -> Result<MetricsReport> {
    if pred.dims != reference.dims {
        return Err(Error::invalid(format!(
            "prediction dims {:?} differ from reference dims {:?}",
            pred.dims, reference.dims
        )));
    }
    if pred.spacing != reference.spacing {
        return Err(Error::invalid("prediction and reference spacings differ"));
    }
    if class_count < 2 {
        return Err(Error::invalid("need at least one foreground class"));
    }
    let names = class_names(class_count);
    let classes = (1..class_count)
        .map(|c| MetricRow::compute(names[c], &class_mask(pred, c as u8), &class_mask(reference, c as u8)))
        .collect::<Result<Vec<_>>>()?;
    let merged = MetricRow::compute(MERGED_NAME, &merge_foreground(pred), &merge_foreground(reference))?;
    Ok(MetricsReport {
        spacing: reference.spacing,
        classes,
        merged,
    })
}
