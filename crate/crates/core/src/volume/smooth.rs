use glam::DVec3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::VoxelGrid;
use crate::error::{Error, Result};

/// Gaussian denoising parameters. Sigma is physical (mm) per axis so that
/// anisotropic CT spacing is handled without distorting the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingParams {
    pub sigma_mm: DVec3,
}

impl Default for SmoothingParams {
    fn default() -> Self {
        Self::isotropic(0.5)
    }
}

impl SmoothingParams {
    pub fn isotropic(sigma_mm: f64) -> Self {
        SmoothingParams {
            sigma_mm: DVec3::splat(sigma_mm),
        }
    }

    pub fn none() -> Self {
        Self::isotropic(0.0)
    }

    /// Kernel half-width in voxels per axis: `ceil(3 sigma / spacing)`.
    pub fn kernel_radius(&self, spacing: DVec3) -> [usize; 3] {
        [0, 1, 2].map(|a| (3.0 * self.sigma_mm[a] / spacing[a]).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_mm.cmpge(DVec3::ZERO).all() && self.sigma_mm.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "smoothing sigma must be >= 0, got {}",
                self.sigma_mm
            )));
        }
        Ok(())
    }
}

/// Normalized discrete Gaussian with `radius` taps each side.
fn kernel(sigma_vox: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let w: Vec<f64> = (-r..=r)
        .map(|x| (-(x as f64).powi(2) / (2.0 * sigma_vox * sigma_vox)).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    w.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian convolution with clamp-to-edge borders.
pub fn gauss_smooth(grid: &VoxelGrid, params: &SmoothingParams) -> Result<VoxelGrid> {
    params.validate()?;
    let dims = grid.dims();
    let radii = params.kernel_radius(grid.spacing());
    if radii.iter().all(|&r| r == 0) {
        return Ok(grid.clone());
    }
    let mut data: Vec<f64> = grid.values().iter().map(|&v| f64::from(v)).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    for axis in 0..3 {
        if radii[axis] == 0 {
            continue;
        }
        let k = kernel(params.sigma_mm[axis] / grid.spacing()[axis], radii[axis]);
        data = convolve_axis(&data, dims, strides, axis, &k);
    }
    VoxelGrid::new(
        dims,
        grid.spacing(),
        grid.origin(),
        data.into_iter().map(|v| v as f32).collect(),
    )
}

fn convolve_axis(
    src: &[f64],
    dims: [usize; 3],
    strides: [usize; 3],
    axis: usize,
    k: &[f64],
) -> Vec<f64> {
    let n = dims[axis] as isize;
    let r = (k.len() / 2) as isize;
    let stride = strides[axis];
    let mut out = vec![0.0; src.len()];
    // One z-slice per task; every output element is an independent ordered sum.
    let slice_len = dims[0] * dims[1];
    out.par_chunks_mut(slice_len)
        .enumerate()
        .for_each(|(z, slice)| {
            for (local, o) in slice.iter_mut().enumerate() {
                let idx = z * slice_len + local;
                let coord = [local % dims[0], local / dims[0], z][axis] as isize;
                let line_start = idx - coord as usize * stride;
                let mut acc = 0.0;
                for (t, w) in k.iter().enumerate() {
                    let c = (coord + t as isize - r).clamp(0, n - 1) as usize;
                    acc += w * src[line_start + c * stride];
                }
                *o = acc;
            }
        });
    out
}
