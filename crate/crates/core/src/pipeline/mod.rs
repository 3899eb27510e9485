//! Volumetric segmentation with a trained network.
//!
//! `segment` normalizes intensities, resamples to 1 mm isotropic, runs the
//! network over every axial, coronal and sagittal slice, averages the three
//! probability maps, resamples the average back onto the input grid, takes the
//! per-voxel argmax and keeps the largest connected component of each class.

mod components;
mod resample;

pub use components::{count_components, largest_component_filter};
pub use resample::{
    resample_channels, resample_labels_nearest, resample_probabilities, resample_probabilities_to,
    resample_trilinear, source_position, target_dims,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::net::Network;
use crate::tensor::{pad2d, Scalar, Tensor};
use crate::volume::{IntensityUnit, LabelVolume, Plane, ProbabilityVolume, Spacing, Volume};

pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 3071.0;
/// Network working resolution in millimetres.
pub const ISOTROPIC_SPACING: Spacing = [1.0, 1.0, 1.0];
/// Value used outside the field of view; equals normalized air.
pub const PAD_VALUE: f32 = 0.0;

/// Clamps HU to `[-1024, 3071]` and maps linearly onto `[0, 1]`.
pub fn normalize_intensities(v: &Volume) -> Result<Volume> {
    if v.unit != IntensityUnit::Hounsfield {
        return Err(Error::invalid("intensities are already normalized"));
    }
    let data = v.data.iter().map(|&hu| normalize_hu(hu)).collect();
    Ok(Volume {
        dims: v.dims,
        spacing: v.spacing,
        data,
        unit: IntensityUnit::Normalized,
    })
}

#[inline]
pub fn normalize_hu(hu: f32) -> f32 {
    ((hu.clamp(HU_MIN, HU_MAX) as f64 - HU_MIN as f64) / (HU_MAX as f64 - HU_MIN as f64)) as f32
}

/// Runs the network over every slice of one orientation.
///
/// Each slice is padded by the network margin with [`PAD_VALUE`] so the
/// output map has exactly the slice size. Slices run in parallel on the
/// current rayon pool; each slice's arithmetic is independent of the schedule.
pub fn infer_plane<T: Scalar>(net: &Network<T>, v: &Volume, plane: Plane) -> Result<ProbabilityVolume> {
    let classes = net.num_classes();
    let margin = net.spec().margin();
    let (count, rows, cols) = plane.layout(v.dims);
    let slices: Vec<Vec<f32>> = (0..count)
        .into_par_iter()
        .map(|s| -> Result<Vec<f32>> {
            let pixels: Vec<T> = plane
                .extract(&v.data, v.dims, s)
                .into_iter()
                .map(|p| T::from_f64(p as f64))
                .collect();
            let slice = Tensor::new(&[1, 1, rows, cols], pixels)?;
            let input = pad2d(&slice, margin, T::from_f64(PAD_VALUE as f64))?;
            let probs = net.forward(&input)?;
            Ok(probs.data().iter().map(|p| p.to_f64_lossy() as f32).collect())
        })
        .collect::<Result<_>>()?;

    let mut out = ProbabilityVolume::zeros(classes, v.dims, v.spacing)?;
    let n = out.voxels();
    let area = rows * cols;
    for (s, probs) in slices.iter().enumerate() {
        for c in 0..classes {
            for r in 0..rows {
                for col in 0..cols {
                    let i = plane.index(v.dims, s, r, col);
                    out.data[c * n + i] = probs[c * area + r * cols + col];
                }
            }
        }
    }
    Ok(out)
}

/// Per-voxel, per-class arithmetic mean of probability maps.
///
/// Values are summed in ascending order, so the result does not depend on the
/// order of `maps`.
pub fn fuse_probabilities(maps: &[ProbabilityVolume]) -> Result<ProbabilityVolume> {
    let Some(first) = maps.first() else {
        return Err(Error::invalid("nothing to fuse"));
    };
    for m in &maps[1..] {
        if m.dims != first.dims || m.spacing != first.spacing || m.class_count != first.class_count {
            return Err(Error::invalid("probability maps differ in dims, spacing or class count"));
        }
    }
    let k = maps.len() as f64;
    let mut vals = vec![0.0f32; maps.len()];
    let data = (0..first.data.len())
        .map(|i| {
            for (v, m) in vals.iter_mut().zip(maps) {
                *v = m.data[i];
            }
            vals.sort_by(f32::total_cmp);
            (vals.iter().map(|&v| v as f64).sum::<f64>() / k) as f32
        })
        .collect();
    Ok(ProbabilityVolume {
        class_count: first.class_count,
        dims: first.dims,
        spacing: first.spacing,
        data,
    })
}

/// Most probable class per voxel; exact ties go to the lowest class index.
pub fn argmax_labels(p: &ProbabilityVolume) -> LabelVolume {
    let n = p.voxels();
    let data = (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..p.class_count {
                if p.data[c * n + i] > p.data[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    LabelVolume {
        dims: p.dims,
        spacing: p.spacing,
        data,
    }
}

#[derive(Clone, Debug)]
pub struct Segmentation {
    /// Final labels on the input grid.
    pub labels: LabelVolume,
    /// Fused probabilities at 1 mm isotropic.
    pub probabilities: ProbabilityVolume,
}

/// Full tri-planar segmentation of a Hounsfield volume.
pub fn segment<T: Scalar>(net: &Network<T>, v: &Volume) -> Result<Segmentation> {
    segment_planes(net, v, &Plane::ALL)
}

/// [`segment`] restricted to a subset of orientations.
pub fn segment_planes<T: Scalar>(net: &Network<T>, v: &Volume, planes: &[Plane]) -> Result<Segmentation> {
    let normalized = normalize_intensities(v)?;
    let iso = resample_trilinear(&normalized, ISOTROPIC_SPACING);
    let maps = planes
        .iter()
        .map(|&p| infer_plane(net, &iso, p))
        .collect::<Result<Vec<_>>>()?;
    let fused = if maps.len() == 1 {
        maps.into_iter().next().unwrap()
    } else {
        fuse_probabilities(&maps)?
    };
    let native = resample_probabilities_to(&fused, v.dims, v.spacing);
    let labels = largest_component_filter(&argmax_labels(&native));
    Ok(Segmentation {
        labels,
        probabilities: fused,
    })
}
