//! Clip planes and voxel cut regions. Both act in sampling space: the tracer
//! sees zero extinction where a plane clips or a cut mask removes tissue,
//! and the voxel data itself is never modified.

use glam::DVec3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelGrid;

/// Half-space `{p : p·normal <= offset}` is kept; the rest is clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipPlane {
    pub normal: DVec3,
    pub offset: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn yes() -> bool {
    true
}

impl ClipPlane {
    /// Normalizes `normal`, scaling `offset` so the plane is unchanged.
    pub fn new(normal: DVec3, offset: f64) -> Result<Self> {
        let len = normal.length();
        if !(len > 0.0 && len.is_finite()) || !offset.is_finite() {
            return Err(Error::InvalidArgument(
                "clip plane needs a finite nonzero normal".into(),
            ));
        }
        Ok(ClipPlane {
            normal: normal / len,
            offset: offset / len,
            enabled: true,
        })
    }

    /// Plane through `point` keeping the side opposite to `normal`.
    pub fn through(point: DVec3, normal: DVec3) -> Result<Self> {
        let n = normal
            .try_normalize()
            .ok_or_else(|| Error::InvalidArgument("zero clip normal".into()))?;
        ClipPlane::new(n, point.dot(n))
    }

    pub fn validate(&self) -> Result<()> {
        if (self.normal.length() - 1.0).abs() > 1e-6 || !self.offset.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "clip plane normal must be unit length, got {}",
                self.normal
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn clips(&self, p: DVec3) -> bool {
        self.enabled && p.dot(self.normal) > self.offset
    }
}

#[inline]
pub fn is_clipped(p: DVec3, planes: &[ClipPlane]) -> bool {
    planes.iter().any(|c| c.clips(p))
}

/// Parametric range `[t0, t1]` of a ray kept by every enabled plane, or
/// `None` if the ray is clipped over the whole input range.
pub fn clip_ray_interval(
    origin: DVec3,
    dir: DVec3,
    mut t0: f64,
    mut t1: f64,
    planes: &[ClipPlane],
) -> Option<(f64, f64)> {
    for c in planes.iter().filter(|c| c.enabled) {
        let d = dir.dot(c.normal);
        let s = c.offset - origin.dot(c.normal);
        if d.abs() < 1e-15 {
            if s < 0.0 {
                return None;
            }
            continue;
        }
        let t = s / d;
        if d > 0.0 {
            t1 = t1.min(t);
        } else {
            t0 = t0.max(t);
        }
        if t0 > t1 {
            return None;
        }
    }
    Some((t0, t1))
}

/// Per-voxel removal mask (`true` = removed).
#[derive(Debug, Clone, PartialEq)]
pub struct CutRegion {
    dims: [usize; 3],
    mask: Vec<bool>,
    pub provenance: String,
}

impl CutRegion {
    pub fn empty(grid: &VoxelGrid) -> Self {
        CutRegion {
            dims: grid.dims(),
            mask: vec![false; grid.len()],
            provenance: String::new(),
        }
    }

    fn from_predicate(
        grid: &VoxelGrid,
        provenance: String,
        f: impl Fn(usize, usize, usize) -> bool,
    ) -> Self {
        let [nx, ny, nz] = grid.dims();
        let mut mask = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    mask.push(f(i, j, k));
                }
            }
        }
        CutRegion {
            dims: grid.dims(),
            mask,
            provenance,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    #[inline]
    pub fn is_cut(&self, i: usize, j: usize, k: usize) -> bool {
        self.mask[i + self.dims[0] * (j + self.dims[1] * k)]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn union(mut self, other: &CutRegion) -> Result<Self> {
        if self.dims != other.dims {
            return Err(Error::InvalidArgument(format!(
                "cut regions differ in dims: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        for (a, b) in self.mask.iter_mut().zip(&other.mask) {
            *a |= *b;
        }
        if self.provenance.is_empty() {
            self.provenance = other.provenance.clone();
        } else if !other.provenance.is_empty() {
            self.provenance = format!("{} + {}", self.provenance, other.provenance);
        }
        Ok(self)
    }
}

/// Removes voxels whose centers lie within `radius` of `center`.
pub fn cut_sphere(grid: &VoxelGrid, center: DVec3, radius: f64) -> Result<CutRegion> {
    if !(radius > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "cut sphere radius must be > 0, got {radius}"
        )));
    }
    let r2 = radius * radius;
    Ok(CutRegion::from_predicate(
        grid,
        format!("sphere center={center} radius={radius}"),
        |i, j, k| grid.voxel_center(i, j, k).distance_squared(center) <= r2,
    ))
}

/// Removes voxels with values in `[hu_min, hu_max]`.
pub fn cut_threshold(grid: &VoxelGrid, hu_min: f64, hu_max: f64) -> Result<CutRegion> {
    if !(hu_min <= hu_max) {
        return Err(Error::InvalidArgument(format!(
            "cut threshold needs hu_min <= hu_max, got [{hu_min}, {hu_max}]"
        )));
    }
    Ok(CutRegion::from_predicate(
        grid,
        format!("threshold [{hu_min}, {hu_max}]"),
        |i, j, k| {
            let v = f64::from(grid.get(i, j, k));
            (hu_min..=hu_max).contains(&v)
        },
    ))
}

/// A replayable cut operation as stored in scene files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum CutOp {
    Sphere {
        center: DVec3,
        radius: f64,
        #[serde(default = "yes")]
        enabled: bool,
    },
    Threshold {
        hu_min: f64,
        hu_max: f64,
        #[serde(default = "yes")]
        enabled: bool,
    },
}

impl CutOp {
    pub fn enabled(&self) -> bool {
        match *self {
            CutOp::Sphere { enabled, .. } | CutOp::Threshold { enabled, .. } => enabled,
        }
    }

    pub fn apply(&self, grid: &VoxelGrid) -> Result<CutRegion> {
        match *self {
            CutOp::Sphere { center, radius, .. } => cut_sphere(grid, center, radius),
            CutOp::Threshold { hu_min, hu_max, .. } => cut_threshold(grid, hu_min, hu_max),
        }
    }
}

/// Union of all enabled operations, replayed in order; `None` if none apply.
pub fn apply_cuts(grid: &VoxelGrid, ops: &[CutOp]) -> Result<Option<CutRegion>> {
    let mut region: Option<CutRegion> = None;
    for op in ops.iter().filter(|o| o.enabled()) {
        let r = op.apply(grid)?;
        region = Some(match region {
            Some(acc) => acc.union(&r)?,
            None => r,
        });
    }
    Ok(region)
}
