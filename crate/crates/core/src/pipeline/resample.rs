//! Trilinear resampling between voxel grids.
//!
//! Voxel `i` along an axis with spacing `s` is centred at `(i + 0.5) * s`
//! from the grid edge, so resampling preserves the physical extent. Sample
//! points falling outside the source voxel centres are clamped to the border.

use crate::volume::{voxel_count, Dims, LabelVolume, ProbabilityVolume, Spacing, Volume};

/// Output dims for a new spacing: `round(dim * spacing / target)`, at least 1.
pub fn target_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

/// Continuous source index of output voxel `j`, clamped to `[0, n - 1]`.
#[inline]
pub fn source_position(j: usize, src_spacing: f64, dst_spacing: f64, n: usize) -> f64 {
    let pos = (j as f64 + 0.5) * dst_spacing / src_spacing - 0.5;
    pos.clamp(0.0, (n - 1) as f64)
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

fn axis_taps(n_src: usize, s_src: f64, n_dst: usize, s_dst: f64) -> Vec<Tap> {
    (0..n_dst)
        .map(|j| {
            let p = source_position(j, s_src, s_dst, n_src);
            let lo = p.floor() as usize;
            let hi = (lo + 1).min(n_src - 1);
            Tap { lo, hi, frac: p - lo as f64 }
        })
        .collect()
}

/// Resamples `channels` stacked z-major grids onto a new grid.
pub fn resample_channels(
    data: &[f32],
    channels: usize,
    src_dims: Dims,
    src_spacing: Spacing,
    dst_dims: Dims,
    dst_spacing: Spacing,
) -> Vec<f32> {
    let src_n = voxel_count(src_dims);
    let dst_n = voxel_count(dst_dims);
    let tz = axis_taps(src_dims[0], src_spacing[0], dst_dims[0], dst_spacing[0]);
    let ty = axis_taps(src_dims[1], src_spacing[1], dst_dims[1], dst_spacing[1]);
    let tx = axis_taps(src_dims[2], src_spacing[2], dst_dims[2], dst_spacing[2]);
    let (sy, sx) = (src_dims[1], src_dims[2]);
    let mut out = vec![0.0f32; channels * dst_n];
    for c in 0..channels {
        let src = &data[c * src_n..(c + 1) * src_n];
        let dst = &mut out[c * dst_n..(c + 1) * dst_n];
        let at = |z: usize, y: usize, x: usize| src[(z * sy + y) * sx + x] as f64;
        let mut i = 0;
        for z in &tz {
            for y in &ty {
                for x in &tx {
                    let c00 = at(z.lo, y.lo, x.lo) * (1.0 - x.frac) + at(z.lo, y.lo, x.hi) * x.frac;
                    let c01 = at(z.lo, y.hi, x.lo) * (1.0 - x.frac) + at(z.lo, y.hi, x.hi) * x.frac;
                    let c10 = at(z.hi, y.lo, x.lo) * (1.0 - x.frac) + at(z.hi, y.lo, x.hi) * x.frac;
                    let c11 = at(z.hi, y.hi, x.lo) * (1.0 - x.frac) + at(z.hi, y.hi, x.hi) * x.frac;
                    let c0 = c00 * (1.0 - y.frac) + c01 * y.frac;
                    let c1 = c10 * (1.0 - y.frac) + c11 * y.frac;
                    dst[i] = (c0 * (1.0 - z.frac) + c1 * z.frac) as f32;
                    i += 1;
                }
            }
        }
    }
    out
}

/// Resamples an intensity volume to `target` spacing. Identity when the spacing already matches.
pub fn resample_trilinear(v: &Volume, target: Spacing) -> Volume {
    if v.spacing == target {
        return v.clone();
    }
    let dims = target_dims(v.dims, v.spacing, target);
    Volume {
        dims,
        spacing: target,
        data: resample_channels(&v.data, 1, v.dims, v.spacing, dims, target),
        unit: v.unit,
    }
}

pub fn resample_probabilities(p: &ProbabilityVolume, target: Spacing) -> ProbabilityVolume {
    let dims = target_dims(p.dims, p.spacing, target);
    resample_probabilities_to(p, dims, target)
}

/// Resamples class probabilities onto an explicit grid and renormalizes every
/// voxel to sum to 1. Identity when the grid already matches.
pub fn resample_probabilities_to(p: &ProbabilityVolume, dims: Dims, spacing: Spacing) -> ProbabilityVolume {
    if p.dims == dims && p.spacing == spacing {
        return p.clone();
    }
    let mut data = resample_channels(&p.data, p.class_count, p.dims, p.spacing, dims, spacing);
    let n = voxel_count(dims);
    for i in 0..n {
        let sum: f64 = (0..p.class_count).map(|c| data[c * n + i] as f64).sum();
        if sum > 0.0 {
            for c in 0..p.class_count {
                data[c * n + i] = (data[c * n + i] as f64 / sum) as f32;
            }
        }
    }
    ProbabilityVolume {
        class_count: p.class_count,
        dims,
        spacing,
        data,
    }
}

/// Nearest-neighbour resampling for label grids.
pub fn resample_labels_nearest(l: &LabelVolume, dims: Dims, spacing: Spacing) -> LabelVolume {
    if l.dims == dims && l.spacing == spacing {
        return l.clone();
    }
    let idx = |a: usize| -> Vec<usize> {
        (0..dims[a])
            .map(|j| source_position(j, l.spacing[a], spacing[a], l.dims[a]).round() as usize)
            .collect()
    };
    let (iz, iy, ix) = (idx(0), idx(1), idx(2));
    let mut data = Vec::with_capacity(voxel_count(dims));
    for &z in &iz {
        for &y in &iy {
            for &x in &ix {
                data.push(l.data[(z * l.dims[1] + y) * l.dims[2] + x]);
            }
        }
    }
    LabelVolume { dims, spacing, data }
}
