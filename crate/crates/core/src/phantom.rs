//! Synthetic "candy-cane" aorta phantoms.
//!
//! Two vertical tubes (ascending and descending aorta) rise to a horizontal
//! arch plane and are joined above it by a half torus (the arch). The torus
//! lies in the vertical plane through both tube axes, centred midway between
//! them, so its radius is half the axis separation. Geometry is given in
//! millimetres with voxel centres at `(i + 0.5) * spacing`; `z` points up.
//!
//! Labels depend on geometry only. Organ-like ellipsoids and Gaussian noise
//! affect intensities alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::volume::{voxel_index, Dims, IntensityUnit, LabelVolume, Spacing, Volume};

pub const ASCENDING: u8 = 1;
pub const ARCH: u8 = 2;
pub const DESCENDING: u8 = 3;

/// Required clearance between the aorta and the grid border, in voxels.
const MARGIN_VOXELS: f64 = 2.0;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    pub tube_radius: f64,
    /// `(x, y)` of the ascending tube axis, mm.
    pub ascending_axis: [f64; 2],
    /// `(x, y)` of the descending tube axis, mm.
    pub descending_axis: [f64; 2],
    /// Height of the arch plane (torus centre), mm.
    pub arch_z: f64,
    /// Lower end of the ascending tube (aortic root), mm.
    pub ascending_base_z: f64,
    /// Lower end of the descending tube, mm.
    pub descending_base_z: f64,
    pub background_hu: f32,
    pub aorta_hu: f32,
    pub organ_hu: (f32, f32),
    pub noise_sigma: f32,
    pub blob_count: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    /// 96 x 96 x 128 voxels at 1 mm, tube radius 8 mm, aorta 40 HU over 0 HU, noise sigma 20 HU.
    fn default() -> Self {
        Self {
            dims: [128, 96, 96],
            spacing: [1.0; 3],
            tube_radius: 8.0,
            ascending_axis: [30.0, 48.0],
            descending_axis: [66.0, 48.0],
            arch_z: 88.0,
            ascending_base_z: 40.0,
            descending_base_z: 8.0,
            background_hu: 0.0,
            aorta_hu: 40.0,
            organ_hu: (-60.0, 60.0),
            noise_sigma: 20.0,
            blob_count: 6,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    /// A 32 x 32 x 40 phantom for fast tests.
    pub fn compact() -> Self {
        Self {
            dims: [40, 32, 32],
            spacing: [1.0; 3],
            tube_radius: 3.0,
            ascending_axis: [9.0, 16.0],
            descending_axis: [23.0, 16.0],
            arch_z: 26.0,
            ascending_base_z: 12.0,
            descending_base_z: 3.0,
            blob_count: 2,
            ..Self::default()
        }
    }

    /// Physical extent `[z, y, x]` in mm.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    /// Same physical geometry sampled at another spacing.
    pub fn with_spacing(&self, spacing: Spacing) -> Self {
        let extent = self.extent();
        let dims = [0, 1, 2].map(|a| ((extent[a] / spacing[a]).round() as usize).max(1));
        Self {
            dims,
            spacing,
            ..self.clone()
        }
    }

    /// `(x, y, z)` of the torus centre.
    pub fn arch_center(&self) -> [f64; 3] {
        [
            0.5 * (self.ascending_axis[0] + self.descending_axis[0]),
            0.5 * (self.ascending_axis[1] + self.descending_axis[1]),
            self.arch_z,
        ]
    }

    pub fn arch_radius(&self) -> f64 {
        0.5 * self.axis_separation()
    }

    fn axis_separation(&self) -> f64 {
        let dx = self.descending_axis[0] - self.ascending_axis[0];
        let dy = self.descending_axis[1] - self.ascending_axis[1];
        dx.hypot(dy)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad("dims and spacing must be positive".into());
        }
        let r = self.tube_radius;
        if !(r > 0.0) {
            return bad("tube radius must be positive".into());
        }
        if self.noise_sigma < 0.0 || self.organ_hu.0 > self.organ_hu.1 {
            return bad("noise sigma must be non-negative and the organ HU range ordered".into());
        }
        let sep = self.axis_separation();
        if sep <= 2.0 * (r + 2.0) {
            return bad(format!("tube axes {sep:.2} mm apart; need more than {:.2}", 2.0 * (r + 2.0)));
        }
        let [ez, ey, ex] = self.extent();
        let [mz, my, mx] = [0, 1, 2].map(|a| MARGIN_VOXELS * self.spacing[a]);
        for (name, [x, y]) in [("ascending", self.ascending_axis), ("descending", self.descending_axis)] {
            if x - r < mx || x + r > ex - mx || y - r < my || y + r > ey - my {
                return bad(format!("{name} tube leaves the volume margin"));
            }
        }
        for (name, base) in [("ascending", self.ascending_base_z), ("descending", self.descending_base_z)] {
            if base < mz || base >= self.arch_z {
                return bad(format!("{name} tube base {base} must lie in [{mz}, arch plane)"));
            }
        }
        let top = self.arch_z + self.arch_radius() + r;
        if top > ez - mz {
            return bad(format!("arch top {top:.2} mm exceeds the volume margin"));
        }
        Ok(())
    }

    /// Class at a physical point.
    pub fn label_at(&self, x: f64, y: f64, z: f64) -> u8 {
        let r = self.tube_radius;
        if z >= self.arch_z {
            let [cx, cy, cz] = self.arch_center();
            let big = self.arch_radius();
            let (ux, uy) = (
                (self.descending_axis[0] - self.ascending_axis[0]) / (2.0 * big),
                (self.descending_axis[1] - self.ascending_axis[1]) / (2.0 * big),
            );
            let (px, py) = (x - cx, y - cy);
            let along = px * ux + py * uy;
            let across = -px * uy + py * ux;
            let h = z - cz;
            let ring = along.hypot(h) - big;
            return if ring.hypot(across) <= r { ARCH } else { 0 };
        }
        let inside = |[ax, ay]: [f64; 2]| (x - ax).hypot(y - ay) <= r;
        if z >= self.ascending_base_z && inside(self.ascending_axis) {
            ASCENDING
        } else if z >= self.descending_base_z && inside(self.descending_axis) {
            DESCENDING
        } else {
            0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub spec: PhantomSpec,
    pub volume: Volume,
    pub labels: LabelVolume,
}

#[inline]
fn center(i: usize, s: f64) -> f64 {
    (i as f64 + 0.5) * s
}

pub fn phantom_labels(spec: &PhantomSpec) -> Result<LabelVolume> {
    spec.validate()?;
    let [nz, ny, nx] = spec.dims;
    let [sz, sy, sx] = spec.spacing;
    let mut data = Vec::with_capacity(nz * ny * nx);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push(spec.label_at(center(x, sx), center(y, sy), center(z, sz)));
            }
        }
    }
    LabelVolume::new(spec.dims, spec.spacing, data)
}

/// Builds the Hounsfield volume and exact labels of a phantom.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    let labels = phantom_labels(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut hu: Vec<f32> = labels
        .data
        .iter()
        .map(|&l| if l == 0 { spec.background_hu } else { spec.aorta_hu })
        .collect();

    let dims = spec.dims;
    let [sz, sy, sx] = spec.spacing;
    let extent = spec.extent();
    let (lo, hi) = (0.5 * spec.tube_radius, 1.5 * spec.tube_radius);
    for _ in 0..spec.blob_count {
        for _attempt in 0..20 {
            let c = [0, 1, 2].map(|a| rng.random_range(0.0..extent[a]));
            let semi = [0, 1, 2].map(|_| rng.random_range(lo..=hi));
            let value = rng.random_range(spec.organ_hu.0..=spec.organ_hu.1);
            let voxels = ellipsoid_voxels(dims, [sz, sy, sx], c, semi);
            if voxels.is_empty() || voxels.iter().any(|&i| labels.data[i] != 0) {
                continue;
            }
            for i in voxels {
                hu[i] = value;
            }
            break;
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f64, spec.noise_sigma as f64).map_err(|e| Error::InvalidSpec(e.to_string()))?;
        for v in hu.iter_mut() {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    for v in hu.iter_mut() {
        *v = v.round();
    }

    let volume = Volume::new(dims, spec.spacing, hu, IntensityUnit::Hounsfield)?;
    Ok(Phantom {
        spec: spec.clone(),
        volume,
        labels,
    })
}

fn ellipsoid_voxels(dims: Dims, spacing: Spacing, c: [f64; 3], semi: [f64; 3]) -> Vec<usize> {
    let range = |a: usize| {
        let lo = ((c[a] - semi[a]) / spacing[a] - 0.5).floor().max(0.0) as usize;
        let hi = (((c[a] + semi[a]) / spacing[a] - 0.5).ceil().max(0.0) as usize).min(dims[a] - 1);
        lo..=hi
    };
    let mut out = Vec::new();
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let p = [center(z, spacing[0]), center(y, spacing[1]), center(x, spacing[2])];
                let q: f64 = (0..3).map(|a| ((p[a] - c[a]) / semi[a]).powi(2)).sum();
                if q <= 1.0 {
                    out.push(voxel_index(dims, z, y, x));
                }
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    /// Resample every phantom's geometry onto this spacing (anisotropic variant).
    pub spacing: Option<Spacing>,
    /// Uniform jitter of each tube-axis coordinate, mm.
    pub axis_jitter_mm: f64,
    /// Uniform jitter of the tube radius, mm.
    pub radius_jitter_mm: f64,
    /// Relative jitter of the noise sigma.
    pub noise_jitter: f64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            spacing: None,
            axis_jitter_mm: 8.0,
            radius_jitter_mm: 2.0,
            noise_jitter: 0.25,
        }
    }
}

impl DatasetOptions {
    /// Jitter scaled down for [`PhantomSpec::compact`] geometry.
    pub fn compact() -> Self {
        Self {
            axis_jitter_mm: 2.0,
            radius_jitter_mm: 0.5,
            ..Self::default()
        }
    }
}

const MAX_REDRAWS: usize = 100;

/// Draws the jittered spec of one dataset member.
fn jittered<R: Rng>(base: &PhantomSpec, opts: &DatasetOptions, rng: &mut R) -> Result<PhantomSpec> {
    for _ in 0..MAX_REDRAWS {
        let mut s = base.clone();
        let a = opts.axis_jitter_mm;
        let mut j = || rng.random_range(-a..=a);
        s.ascending_axis = [base.ascending_axis[0] + j(), base.ascending_axis[1] + j()];
        s.descending_axis = [base.descending_axis[0] + j(), base.descending_axis[1] + j()];
        let r = opts.radius_jitter_mm;
        s.tube_radius = base.tube_radius + rng.random_range(-r..=r);
        let n = opts.noise_jitter;
        s.noise_sigma = base.noise_sigma * rng.random_range(1.0 - n..=1.0 + n) as f32;
        s.seed = rng.random();
        if let Some(spacing) = opts.spacing {
            s = s.with_spacing(spacing);
        }
        if s.validate().is_ok() {
            return Ok(s);
        }
    }
    Err(Error::InvalidSpec(format!(
        "no valid jittered geometry after {MAX_REDRAWS} draws"
    )))
}

/// `count` phantoms with jittered geometry; fully determined by `seed`.
pub fn make_dataset(count: usize, base: &PhantomSpec, seed: u64, opts: &DatasetOptions) -> Result<Vec<Phantom>> {
    if count == 0 {
        return Err(Error::invalid("dataset count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let specs = (0..count)
        .map(|_| jittered(base, opts, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    specs.iter().map(generate_phantom).collect()
}
