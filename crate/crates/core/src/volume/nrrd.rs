//! NRRD reader/writer for raw-encoded 3D scalar volumes.

use std::collections::HashMap;
use std::path::Path;

use glam::DVec3;

use super::VoxelGrid;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Scalar {
    I16,
    U16,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "short" | "short int" | "signed short" | "signed short int" | "int16" | "int16_t" => {
                Scalar::I16
            }
            "ushort" | "unsigned short" | "unsigned short int" | "uint16" | "uint16_t" => {
                Scalar::U16
            }
            "float" => Scalar::F32,
            "double" => Scalar::F64,
            other => return Err(Error::UnsupportedFormat(format!("NRRD type `{other}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }
}

fn parse_vector(s: &str) -> Result<DVec3> {
    let inner = s.trim().strip_prefix('(').and_then(|r| r.strip_suffix(')'));
    let parts: Vec<f64> = inner
        .ok_or_else(|| Error::Ingest(format!("malformed NRRD vector `{s}`")))?
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Ingest(format!("malformed NRRD vector `{s}`")))?;
    match parts[..] {
        [x, y, z] => Ok(DVec3::new(x, y, z)),
        _ => Err(Error::Ingest(format!(
            "NRRD vector `{s}` must have 3 components"
        ))),
    }
}

fn spacing_from_directions(s: &str) -> Result<DVec3> {
    let vecs = s
        .split_whitespace()
        .map(parse_vector)
        .collect::<Result<Vec<_>>>()?;
    if vecs.len() != 3 {
        return Err(Error::Ingest("space directions must list 3 vectors".into()));
    }
    let mut spacing = DVec3::ZERO;
    for (a, v) in vecs.iter().enumerate() {
        for b in 0..3 {
            if a != b && v[b] != 0.0 {
                return Err(Error::Ingest(
                    "only diagonal space directions are supported".into(),
                ));
            }
        }
        spacing[a] = v[a].abs();
    }
    Ok(spacing)
}

/// Parses an NRRD file's bytes. `base_dir` resolves a detached `data file`.
pub fn parse_nrrd(bytes: &[u8], base_dir: &Path) -> Result<VoxelGrid> {
    if !bytes.starts_with(b"NRRD000") {
        return Err(Error::Ingest("missing NRRD magic".into()));
    }
    let mut fields: HashMap<String, String> = HashMap::new();
    let mut pos = 0;
    let mut first = true;
    let data_start = loop {
        let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
            break bytes.len();
        };
        let line = String::from_utf8_lossy(&bytes[pos..pos + nl])
            .trim_end_matches('\r')
            .to_string();
        pos += nl + 1;
        if first {
            first = false;
            continue;
        }
        if line.is_empty() {
            break pos;
        }
        if line.starts_with('#') || line.contains(":=") {
            continue;
        }
        let (k, v) = line
            .split_once(": ")
            .ok_or_else(|| Error::Ingest(format!("malformed NRRD header line `{line}`")))?;
        fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
    };
    let field = |k: &str| {
        fields
            .get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Ingest(format!("NRRD header lacks `{k}`")))
    };

    let encoding = field("encoding")?;
    if encoding != "raw" {
        return Err(Error::UnsupportedFormat(format!(
            "NRRD encoding `{encoding}` (only raw)"
        )));
    }
    let dimension: usize = field("dimension")?
        .parse()
        .map_err(|_| Error::Ingest("malformed NRRD dimension".into()))?;
    if dimension != 3 {
        return Err(Error::Ingest(format!(
            "NRRD dimension {dimension}, expected 3"
        )));
    }
    let sizes: Vec<usize> = field("sizes")?
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Ingest("malformed NRRD sizes".into()))?;
    let dims: [usize; 3] = sizes
        .try_into()
        .map_err(|_| Error::Ingest("NRRD sizes must list 3 values".into()))?;
    let scalar = Scalar::parse(field("type")?)?;
    let big_endian = match fields.get("endian").map(String::as_str) {
        None | Some("little") => false,
        Some("big") => true,
        Some(other) => return Err(Error::Ingest(format!("unknown NRRD endian `{other}`"))),
    };
    let spacing = if let Some(d) = fields.get("space directions") {
        spacing_from_directions(d)?
    } else if let Some(s) = fields.get("spacings") {
        let v: Vec<f64> = s
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Ingest("malformed NRRD spacings".into()))?;
        match v[..] {
            [x, y, z] => DVec3::new(x, y, z),
            _ => return Err(Error::Ingest("NRRD spacings must list 3 values".into())),
        }
    } else {
        DVec3::ONE
    };
    let origin = fields
        .get("space origin")
        .map(|s| parse_vector(s))
        .transpose()?
        .unwrap_or(DVec3::ZERO);
    let skip: usize = fields
        .get("byte skip")
        .map(|s| s.parse().unwrap_or(0))
        .unwrap_or(0);

    let detached;
    let payload: &[u8] =
        if let Some(file) = fields.get("data file").or_else(|| fields.get("datafile")) {
            detached = std::fs::read(base_dir.join(file))?;
            &detached
        } else {
            &bytes[data_start..]
        };
    let count = dims[0] * dims[1] * dims[2];
    let needed = count * scalar.size();
    let payload = payload.get(skip..skip + needed).ok_or_else(|| {
        Error::Ingest(format!(
            "NRRD payload too short: need {needed} bytes for {dims:?}"
        ))
    })?;
    let values = payload
        .chunks_exact(scalar.size())
        .map(|c| {
            let mut b = [0u8; 8];
            b[..c.len()].copy_from_slice(c);
            if big_endian {
                b[..c.len()].reverse();
            }
            match scalar {
                Scalar::I16 => f32::from(i16::from_le_bytes([b[0], b[1]])),
                Scalar::U16 => f32::from(u16::from_le_bytes([b[0], b[1]])),
                Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]),
                Scalar::F64 => f64::from_le_bytes(b) as f32,
            }
        })
        .collect();
    VoxelGrid::new(dims, spacing, origin, values)
}

pub fn load_nrrd(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    parse_nrrd(&bytes, path.parent().unwrap_or(Path::new(".")))
}

/// Attached-header, little-endian float NRRD encoding of a grid.
pub fn write_nrrd(grid: &VoxelGrid) -> Vec<u8> {
    let [nx, ny, nz] = grid.dims();
    let s = grid.spacing();
    let o = grid.origin();
    let header = format!(
        "NRRD0004\n\
         type: float\n\
         dimension: 3\n\
         space dimension: 3\n\
         sizes: {nx} {ny} {nz}\n\
         space directions: ({:?},0,0) (0,{:?},0) (0,0,{:?})\n\
         space origin: ({:?},{:?},{:?})\n\
         endian: little\n\
         encoding: raw\n\n",
        s.x, s.y, s.z, o.x, o.y, o.z
    );
    let mut out = header.into_bytes();
    for v in grid.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn save_nrrd(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_nrrd(grid))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{make_phantom, PhantomKind};

    fn header(extra: &str) -> String {
        format!("NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\n{extra}encoding: raw\nendian: little\n\n")
    }

    #[test]
    fn single_voxel() {
        let mut bytes = header("").into_bytes();
        bytes.extend_from_slice(&100.0f32.to_le_bytes());
        let g = parse_nrrd(&bytes, Path::new(".")).unwrap();
        assert_eq!(g.dims(), [1, 1, 1]);
        assert_eq!(g.values(), &[100.0]);
    }

    #[test]
    fn spacing_from_header() {
        let mut bytes = header("space directions: (0.5,0,0) (0,0.5,0) (0,0,1.0)\n").into_bytes();
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        let g = parse_nrrd(&bytes, Path::new(".")).unwrap();
        assert_eq!(g.spacing(), DVec3::new(0.5, 0.5, 1.0));
    }

    #[test]
    fn big_endian_short() {
        let mut bytes =
            b"NRRD0004\ntype: short\ndimension: 3\nsizes: 2 1 1\nendian: big\nencoding: raw\n\n"
                .to_vec();
        bytes.extend_from_slice(&(-300i16).to_be_bytes());
        bytes.extend_from_slice(&1200i16.to_be_bytes());
        let g = parse_nrrd(&bytes, Path::new(".")).unwrap();
        assert_eq!(g.values(), &[-300.0, 1200.0]);
    }

    #[test]
    fn gzip_encoding_unsupported() {
        let bytes = header("").replace("encoding: raw", "encoding: gzip");
        assert!(matches!(
            parse_nrrd(bytes.as_bytes(), Path::new(".")),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn wrong_dimension() {
        let bytes = header("")
            .replace("dimension: 3", "dimension: 2")
            .replace("sizes: 1 1 1", "sizes: 1 1");
        assert!(matches!(
            parse_nrrd(bytes.as_bytes(), Path::new(".")),
            Err(Error::Ingest(_))
        ));
    }

    #[test]
    fn detached_header() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("vol.raw"),
            [7.5f32.to_le_bytes(), 8.5f32.to_le_bytes()].concat(),
        )
        .unwrap();
        let hdr = "NRRD0004\ntype: float\ndimension: 3\nsizes: 1 2 1\nencoding: raw\ndata file: vol.raw\n";
        std::fs::write(dir.path().join("vol.nhdr"), hdr).unwrap();
        let g = load_nrrd(dir.path().join("vol.nhdr")).unwrap();
        assert_eq!(g.values(), &[7.5, 8.5]);
    }

    #[test]
    fn phantom_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for kind in [PhantomKind::SphereShell, PhantomKind::Noise(12)] {
            let g = make_phantom(kind, [64, 64, 64]).unwrap();
            let path = dir.path().join("p.nrrd");
            save_nrrd(&g, &path).unwrap();
            let back = load_nrrd(&path).unwrap();
            assert_eq!(back.dims(), g.dims());
            assert_eq!(back.spacing(), g.spacing());
            assert_eq!(back.origin(), g.origin());
            assert!(back
                .values()
                .iter()
                .zip(g.values())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
