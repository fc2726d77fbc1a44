use std::path::Path;

use glam::DVec3;
use serde::{Deserialize, Serialize};

use super::VoxelGrid;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RawDtype {
    I16,
    U16,
    F32,
}

/// Headerless volume; geometry comes from the scene file.
pub fn load_raw(
    path: impl AsRef<Path>,
    dims: [usize; 3],
    spacing: DVec3,
    dtype: RawDtype,
    big_endian: bool,
) -> Result<VoxelGrid> {
    let bytes = std::fs::read(path.as_ref())?;
    let size = match dtype {
        RawDtype::I16 | RawDtype::U16 => 2,
        RawDtype::F32 => 4,
    };
    let count = dims.iter().product::<usize>();
    if bytes.len() < count * size {
        return Err(Error::Ingest(format!(
            "raw volume {} holds {} bytes, need {}",
            path.as_ref().display(),
            bytes.len(),
            count * size
        )));
    }
    let values = bytes[..count * size]
        .chunks_exact(size)
        .map(|c| {
            let mut b = [0u8; 4];
            b[..size].copy_from_slice(c);
            if big_endian {
                b[..size].reverse();
            }
            match dtype {
                RawDtype::I16 => f32::from(i16::from_le_bytes([b[0], b[1]])),
                RawDtype::U16 => f32::from(u16::from_le_bytes([b[0], b[1]])),
                RawDtype::F32 => f32::from_le_bytes(b),
            }
        })
        .collect();
    VoxelGrid::new(
        dims,
        spacing,
        VoxelGrid::centered_origin(dims, spacing),
        values,
    )
}
