//! CT volumes: ingestion, denoising and continuous sampling.

mod dicom;
mod nrrd;
mod phantom;
mod raw;
mod smooth;

pub use dicom::{
    assemble_series, load_dicom_series, parse_dicom_slice, write_dicom_slice, DicomSlice,
};
pub use nrrd::{load_nrrd, parse_nrrd, save_nrrd, write_nrrd};
pub use phantom::{make_phantom, PhantomKind};
pub use raw::{load_raw, RawDtype};
pub use smooth::{gauss_smooth, SmoothingParams};

use glam::DVec3;

use crate::error::{Error, Result};

/// Lowest representable CT value; also what out-of-volume space reads as.
pub const HU_MIN: f32 = -1024.0;
pub const HU_MAX: f32 = 4095.0;
pub const AIR_HU: f32 = HU_MIN;

/// A 3D scalar CT field in Hounsfield units with anisotropic voxel spacing.
///
/// Voxel `(i, j, k)` has its center at `origin + (i, j, k) * spacing`; values are
/// stored x-fastest. The sampling domain extends half a voxel beyond the outer
/// voxel centers, and everything outside it is air.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: DVec3,
    origin: DVec3,
    inv_spacing: DVec3,
    values: Vec<f32>,
}

impl VoxelGrid {
    /// Validates the layout and clamps values into `[HU_MIN, HU_MAX]`.
    pub fn new(
        dims: [usize; 3],
        spacing: DVec3,
        origin: DVec3,
        mut values: Vec<f32>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "grid dims must be >= 1, got {dims:?}"
            )));
        }
        if !(spacing.x > 0.0 && spacing.y > 0.0 && spacing.z > 0.0) || !spacing.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "grid spacing must be > 0, got {spacing}"
            )));
        }
        if !origin.is_finite() {
            return Err(Error::InvalidArgument("grid origin must be finite".into()));
        }
        let n = dims[0] * dims[1] * dims[2];
        if values.len() != n {
            return Err(Error::InvalidArgument(format!(
                "expected {n} voxel values for dims {dims:?}, got {}",
                values.len()
            )));
        }
        for v in &mut values {
            if v.is_nan() {
                return Err(Error::Ingest("NaN voxel value".into()));
            }
            *v = v.clamp(HU_MIN, HU_MAX);
        }
        Ok(VoxelGrid {
            dims,
            spacing,
            origin,
            inv_spacing: spacing.recip(),
            values,
        })
    }

    pub fn from_fn(
        dims: [usize; 3],
        spacing: DVec3,
        origin: DVec3,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    values.push(f(i, j, k));
                }
            }
        }
        Self::new(dims, spacing, origin, values)
    }

    /// Places the grid so its center lies at the world origin.
    pub fn centered_origin(dims: [usize; 3], spacing: DVec3) -> DVec3 {
        -0.5 * DVec3::new(
            (dims[0] - 1) as f64 * spacing.x,
            (dims[1] - 1) as f64 * spacing.y,
            (dims[2] - 1) as f64 * spacing.z,
        )
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> DVec3 {
        self.spacing
    }

    pub fn origin(&self) -> DVec3 {
        self.origin
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.values[self.index(i, j, k)]
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> DVec3 {
        self.origin + DVec3::new(i as f64, j as f64, k as f64) * self.spacing
    }

    /// Continuous voxel coordinates of a world point (voxel centers are integers).
    #[inline]
    pub fn world_to_voxel(&self, p: DVec3) -> DVec3 {
        (p - self.origin) * self.inv_spacing
    }

    /// World-space bounds of the sampling domain.
    pub fn bounds(&self) -> (DVec3, DVec3) {
        let n = DVec3::new(
            self.dims[0] as f64,
            self.dims[1] as f64,
            self.dims[2] as f64,
        );
        (
            self.origin - 0.5 * self.spacing,
            self.origin + (n - 0.5) * self.spacing,
        )
    }

    pub fn center(&self) -> DVec3 {
        let (lo, hi) = self.bounds();
        0.5 * (lo + hi)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).length()
    }

    /// Voxel containing a world point, if inside the sampling domain.
    pub fn voxel_at(&self, p: DVec3) -> Option<[usize; 3]> {
        let v = self.world_to_voxel(p) + 0.5;
        let mut out = [0usize; 3];
        for a in 0..3 {
            let c = v[a].floor();
            if !(c >= 0.0 && c < self.dims[a] as f64) {
                return None;
            }
            out[a] = c as usize;
        }
        Some(out)
    }

    /// Trilinear interpolation at a world point; air outside the grid.
    #[inline]
    pub fn sample(&self, p: DVec3) -> f32 {
        let v = self.world_to_voxel(p);
        let mut base = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let n = self.dims[a];
            let c = v[a];
            if !(c >= -0.5 && c <= n as f64 - 0.5) {
                return AIR_HU;
            }
            if n == 1 {
                continue;
            }
            let c = c.clamp(0.0, (n - 1) as f64);
            let i0 = (c as usize).min(n - 2);
            base[a] = i0;
            frac[a] = c - i0 as f64;
        }
        let sx = usize::from(self.dims[0] > 1);
        let sy = if self.dims[1] > 1 { self.dims[0] } else { 0 };
        let sz = if self.dims[2] > 1 {
            self.dims[0] * self.dims[1]
        } else {
            0
        };
        let i000 = self.index(base[0], base[1], base[2]);
        let val = |off: usize| f64::from(self.values[i000 + off]);
        let [fx, fy, fz] = frac;
        let c00 = val(0) + (val(sx) - val(0)) * fx;
        let c10 = val(sy) + (val(sy + sx) - val(sy)) * fx;
        let c01 = val(sz) + (val(sz + sx) - val(sz)) * fx;
        let c11 = val(sz + sy) + (val(sz + sy + sx) - val(sz + sy)) * fx;
        let c0 = c00 + (c10 - c00) * fy;
        let c1 = c01 + (c11 - c01) * fy;
        (c0 + (c1 - c0) * fz) as f32
    }

    /// Central-difference gradient of [`sample`](Self::sample) in HU/mm.
    pub fn gradient(&self, p: DVec3) -> DVec3 {
        let s = self.spacing;
        let d = |off: DVec3| f64::from(self.sample(p + off)) - f64::from(self.sample(p - off));
        DVec3::new(
            d(DVec3::new(s.x, 0.0, 0.0)) / (2.0 * s.x),
            d(DVec3::new(0.0, s.y, 0.0)) / (2.0 * s.y),
            d(DVec3::new(0.0, 0.0, s.z)) / (2.0 * s.z),
        )
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.values
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().map(|&v| f64::from(v)).sum::<f64>() / self.values.len() as f64
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values
            .iter()
            .map(|&v| (f64::from(v) - m).powi(2))
            .sum::<f64>()
            / self.values.len() as f64
    }
}
