//! 3D grids: intensity volumes, label volumes and per-class probability volumes.
//!
//! All grids are stored z-major (`x` fastest) with dims `[nz, ny, nx]` and
//! spacing `[sz, sy, sx]` in millimetres.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntensityUnit {
    Hounsfield,
    Normalized,
}

pub type Dims = [usize; 3];
pub type Spacing = [f64; 3];

fn check_grid(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!("volume dims {dims:?} must be positive")));
    }
    if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("volume spacing {spacing:?} must be positive")));
    }
    let n = dims.iter().product::<usize>();
    if n != len {
        return Err(Error::invalid(format!("dims {dims:?} need {n} voxels, got {len}")));
    }
    Ok(())
}

pub fn voxel_count(dims: Dims) -> usize {
    dims.iter().product()
}

#[inline]
pub fn voxel_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
    pub unit: IntensityUnit,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>, unit: IntensityUnit) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        Ok(Self {
            dims,
            spacing,
            data,
            unit,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32, unit: IntensityUnit) -> Result<Self> {
        Self::new(dims, spacing, vec![value; voxel_count(dims)], unit)
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[voxel_index(self.dims, z, y, x)]
    }
}

/// Per-voxel class ids: 0 background, 1 ascending aorta, 2 aortic arch,
/// 3 descending aorta (two-class mode: 1 thoracic aorta).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_grid(dims, spacing, data.len())?;
        Ok(Self { dims, spacing, data })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[voxel_index(self.dims, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&l| l == class).count()
    }

    pub fn max_label(&self) -> u8 {
        self.data.iter().copied().max().unwrap_or(0)
    }
}

/// Channel-major per-class probabilities: `data[c * voxels + i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityVolume {
    pub class_count: usize,
    pub dims: Dims,
    pub spacing: Spacing,
    pub data: Vec<f32>,
}

impl ProbabilityVolume {
    pub fn new(class_count: usize, dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        if class_count == 0 {
            return Err(Error::invalid("probability volume needs at least one class"));
        }
        check_grid(dims, spacing, data.len() / class_count)?;
        if data.len() != class_count * voxel_count(dims) {
            return Err(Error::invalid("probability data length does not match dims and classes"));
        }
        Ok(Self {
            class_count,
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(class_count: usize, dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(class_count, dims, spacing, vec![0.0; class_count * voxel_count(dims)])
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.dims)
    }

    pub fn class(&self, c: usize) -> &[f32] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, i: usize) -> f32 {
        self.data[c * self.voxels() + i]
    }

    /// Largest deviation of a per-voxel class sum from 1.
    pub fn max_sum_deviation(&self) -> f64 {
        let n = self.voxels();
        (0..n)
            .map(|i| {
                let s: f64 = (0..self.class_count).map(|c| self.data[c * n + i] as f64).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }
}

/// Slice orientation. Axial slices are `(y, x)` at fixed `z`, coronal `(z, x)`
/// at fixed `y`, sagittal `(z, y)` at fixed `x`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// `(slice count, rows, cols)` of this orientation for a grid.
    pub fn layout(self, dims: Dims) -> (usize, usize, usize) {
        let [nz, ny, nx] = dims;
        match self {
            Plane::Axial => (nz, ny, nx),
            Plane::Coronal => (ny, nz, nx),
            Plane::Sagittal => (nx, nz, ny),
        }
    }

    #[inline]
    pub fn index(self, dims: Dims, slice: usize, row: usize, col: usize) -> usize {
        match self {
            Plane::Axial => voxel_index(dims, slice, row, col),
            Plane::Coronal => voxel_index(dims, row, slice, col),
            Plane::Sagittal => voxel_index(dims, row, col, slice),
        }
    }

    /// Copies one slice (`rows * cols`, row-major) out of a z-major grid.
    pub fn extract<T: Copy>(self, data: &[T], dims: Dims, slice: usize) -> Vec<T> {
        let (_, rows, cols) = self.layout(dims);
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                out.push(data[self.index(dims, slice, r, c)]);
            }
        }
        out
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}
