use rand::Rng;

use crate::error::{Error, Result};
use crate::net::NetworkSpec;
use crate::pipeline::{normalize_intensities, resample_labels_nearest, resample_trilinear, ISOTROPIC_SPACING, PAD_VALUE};
use crate::volume::{IntensityUnit, LabelVolume, Plane, Volume};

/// A normalized 1 mm volume with labels on the same grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingVolume {
    pub image: Volume,
    pub labels: LabelVolume,
}

/// Normalizes a Hounsfield volume and resamples it and its labels to 1 mm.
/// Labels use nearest-neighbour interpolation.
pub fn prepare_training_volume(image: &Volume, labels: &LabelVolume) -> Result<TrainingVolume> {
    if image.dims != labels.dims || image.spacing != labels.spacing {
        return Err(Error::invalid("image and label grids differ"));
    }
    let normalized = normalize_intensities(image)?;
    let iso = resample_trilinear(&normalized, ISOTROPIC_SPACING);
    let labels = resample_labels_nearest(labels, iso.dims, iso.spacing);
    Ok(TrainingVolume { image: iso, labels })
}

/// One training sub-image and the labels of its classified centre.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    /// `size * size` normalized intensities, row-major.
    pub image: Vec<f32>,
    /// `out * out` labels of the central region, row-major.
    pub labels: Vec<u8>,
    pub plane: Plane,
    pub size: usize,
    pub out: usize,
}

/// Draws `batch` sub-images of `size * size` pixels.
///
/// Volume, plane, slice and top-left corner are uniform. Labels cover the
/// central `out = size - rf + 1` square, `margin` pixels in from each edge.
/// Per axis of extent `H`, the corner ranges over:
///
/// * `[0, H - size]` when the window fits in the slice;
/// * otherwise every position where the slice and the labelled square overlap
///   fully: the slice inside the square when `H <= out`, the square inside the
///   slice when `H > out`. This matches inference, which pads slices by the
///   margin so that every slice pixel is classified.
///
/// Pixels outside the slice take the pad value and background label.
pub fn sample_minibatch<R: Rng + ?Sized>(
    dataset: &[TrainingVolume],
    batch: usize,
    size: usize,
    spec: &NetworkSpec,
    rng: &mut R,
) -> Result<Vec<SamplePair>> {
    if dataset.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let (rf, _) = spec.receptive_field();
    if size < rf {
        return Err(Error::invalid(format!("sub-image size {size} is below the {rf} receptive field")));
    }
    let margin = spec.margin();
    let out = size - rf + 1;
    for (i, t) in dataset.iter().enumerate() {
        if t.image.unit != IntensityUnit::Normalized || t.image.dims != t.labels.dims {
            return Err(Error::invalid(format!("training volume {i} is not prepared")));
        }
    }
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..batch {
        let tv = &dataset[rng.random_range(0..dataset.len())];
        let plane = Plane::ALL[rng.random_range(0..3)];
        let (count, rows, cols) = plane.layout(tv.image.dims);
        let slice = rng.random_range(0..count);
        let r0 = corner(rows, size, margin, rng);
        let c0 = corner(cols, size, margin, rng);
        let mut image = vec![PAD_VALUE; size * size];
        let mut labels = vec![0u8; out * out];
        for r in 0..size {
            let sr = r0 + r as i64;
            if sr < 0 || sr >= rows as i64 {
                continue;
            }
            for c in 0..size {
                let sc = c0 + c as i64;
                if sc < 0 || sc >= cols as i64 {
                    continue;
                }
                let idx = plane.index(tv.image.dims, slice, sr as usize, sc as usize);
                image[r * size + c] = tv.image.data[idx];
                let (lr, lc) = (r as i64 - margin as i64, c as i64 - margin as i64);
                if (0..out as i64).contains(&lr) && (0..out as i64).contains(&lc) {
                    labels[lr as usize * out + lc as usize] = tv.labels.data[idx];
                }
            }
        }
        samples.push(SamplePair {
            image,
            labels,
            plane,
            size,
            out,
        });
    }
    Ok(samples)
}

fn corner<R: Rng + ?Sized>(extent: usize, size: usize, margin: usize, rng: &mut R) -> i64 {
    let (h, s, m) = (extent as i64, size as i64, margin as i64);
    if h >= s {
        return rng.random_range(0..=h - s);
    }
    let (a, b) = (h - s + m, -m);
    rng.random_range(a.min(b)..=a.max(b))
}
