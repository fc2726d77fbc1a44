use std::fmt;
use std::str::FromStr;

use glam::DVec3;
use rand::{Rng, SeedableRng};

use super::VoxelGrid;
use crate::error::{Error, Result};

/// HU levels used by the structured phantoms: contrast blood, myocardium, air.
pub const BLOOD_HU: f32 = 300.0;
pub const MYOCARDIUM_HU: f32 = 50.0;
pub const AIR_PHANTOM_HU: f32 = -1000.0;

/// Deterministic synthetic volumes standing in for patient data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PhantomKind {
    /// Blood-filled sphere inside a myocardium shell, air outside.
    SphereShell,
    /// Two blood chambers separated by a septum inside an ellipsoidal wall.
    TwoChamber,
    /// Value equals the x voxel index.
    Ramp,
    Constant(f32),
    /// Uniform noise in [-200, 200] HU.
    Noise(u64),
}

impl PhantomKind {
    fn is_structured(self) -> bool {
        matches!(self, PhantomKind::SphereShell | PhantomKind::TwoChamber)
    }

    /// Inner and outer shell radii in voxels for a cube of side `n`.
    pub fn shell_radii(n: usize) -> (f64, f64) {
        (0.25 * n as f64, 0.35 * n as f64)
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhantomKind::SphereShell => write!(f, "sphere_shell"),
            PhantomKind::TwoChamber => write!(f, "two_chamber"),
            PhantomKind::Ramp => write!(f, "ramp"),
            PhantomKind::Constant(c) => write!(f, "constant({c})"),
            PhantomKind::Noise(s) => write!(f, "noise({s})"),
        }
    }
}

impl FromStr for PhantomKind {
    type Err = Error;

    /// Accepts `sphere_shell`, `two_chamber`, `ramp`, `constant(c)` / `constantC`
    /// and `noise(seed)` / `noiseSEED`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown phantom kind `{s}`"));
        let arg = |prefix: &str| -> Option<&str> {
            let rest = s.strip_prefix(prefix)?;
            Some(
                rest.strip_prefix('(')
                    .and_then(|r| r.strip_suffix(')'))
                    .unwrap_or(rest),
            )
        };
        match s {
            "sphere_shell" => return Ok(PhantomKind::SphereShell),
            "two_chamber" => return Ok(PhantomKind::TwoChamber),
            "ramp" => return Ok(PhantomKind::Ramp),
            _ => {}
        }
        if let Some(a) = arg("constant") {
            return a.parse().map(PhantomKind::Constant).map_err(|_| bad());
        }
        if let Some(a) = arg("noise") {
            return a.parse().map(PhantomKind::Noise).map_err(|_| bad());
        }
        Err(bad())
    }
}

/// Builds a phantom with 1 mm isotropic spacing centered on the world origin.
pub fn make_phantom(kind: PhantomKind, dims: [usize; 3]) -> Result<VoxelGrid> {
    if kind.is_structured() && dims.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument(format!(
            "{kind} phantom needs dims >= 8, got {dims:?}"
        )));
    }
    let spacing = DVec3::ONE;
    let origin = VoxelGrid::centered_origin(dims, spacing);
    let n = *dims.iter().min().unwrap() as f64;
    let center = 0.5
        * DVec3::new(
            (dims[0] - 1) as f64,
            (dims[1] - 1) as f64,
            (dims[2] - 1) as f64,
        );
    let rel = |i: usize, j: usize, k: usize| DVec3::new(i as f64, j as f64, k as f64) - center;
    match kind {
        PhantomKind::SphereShell => {
            let (ri, ro) = PhantomKind::shell_radii(n as usize);
            VoxelGrid::from_fn(dims, spacing, origin, |i, j, k| {
                let r = rel(i, j, k).length();
                if r <= ri {
                    BLOOD_HU
                } else if r <= ro {
                    MYOCARDIUM_HU
                } else {
                    AIR_PHANTOM_HU
                }
            })
        }
        PhantomKind::TwoChamber => {
            let axes = DVec3::new(0.42, 0.3, 0.3) * n;
            let offset = 0.17 * n;
            let chamber_r = 0.13 * n;
            VoxelGrid::from_fn(dims, spacing, origin, |i, j, k| {
                let p = rel(i, j, k);
                let left = (p - DVec3::new(-offset, 0.0, 0.0)).length();
                let right = (p - DVec3::new(offset, 0.0, 0.0)).length();
                if left <= chamber_r || right <= chamber_r {
                    BLOOD_HU
                } else if (p / axes).length_squared() <= 1.0 {
                    MYOCARDIUM_HU
                } else {
                    AIR_PHANTOM_HU
                }
            })
        }
        PhantomKind::Ramp => VoxelGrid::from_fn(dims, spacing, origin, |i, _, _| i as f32),
        PhantomKind::Constant(c) => VoxelGrid::from_fn(dims, spacing, origin, |_, _, _| c),
        PhantomKind::Noise(seed) => {
            let mut rng = rand_pcg::Pcg32::seed_from_u64(seed);
            VoxelGrid::from_fn(dims, spacing, origin, |_, _, _| {
                rng.random_range(-200.0..200.0)
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    #[test]
    fn constant_is_constant() {
        let g = make_phantom(PhantomKind::Constant(0.0), [8, 8, 8]).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ramp_equals_x_index() {
        let g = make_phantom(PhantomKind::Ramp, [16, 16, 16]).unwrap();
        for k in 0..16 {
            for j in 0..16 {
                for i in 0..16 {
                    assert_eq!(g.get(i, j, k), i as f32);
                }
            }
        }
    }

    #[test]
    fn shell_histogram_matches_brute_force() {
        let g = make_phantom(PhantomKind::SphereShell, [64, 64, 64]).unwrap();
        let mut expected: BTreeMap<i32, usize> = BTreeMap::new();
        let (ri, ro) = (16.0f64, 22.4f64);
        for k in 0..64 {
            for j in 0..64 {
                for i in 0..64 {
                    let d = [i, j, k].map(|c| c as f64 - 31.5);
                    let r2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    let level = if r2 <= ri * ri {
                        300
                    } else if r2 <= ro * ro {
                        50
                    } else {
                        -1000
                    };
                    *expected.entry(level).or_default() += 1;
                }
            }
        }
        let mut got: BTreeMap<i32, usize> = BTreeMap::new();
        for &v in g.values() {
            *got.entry(v as i32).or_default() += 1;
        }
        assert_eq!(
            got.keys().copied().collect::<Vec<_>>(),
            vec![-1000, 50, 300]
        );
        assert_eq!(got, expected);
    }

    #[test]
    fn structured_phantoms_need_eight_voxels() {
        assert!(matches!(
            make_phantom(PhantomKind::SphereShell, [7, 8, 8]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_phantom(PhantomKind::TwoChamber, [8, 8, 8]).is_ok());
        assert!(make_phantom(PhantomKind::Constant(1.0), [1, 1, 1]).is_ok());
    }

    #[test]
    fn noise_is_deterministic() {
        let a = make_phantom(PhantomKind::Noise(7), [8, 8, 8]).unwrap();
        let b = make_phantom(PhantomKind::Noise(7), [8, 8, 8]).unwrap();
        let c = make_phantom(PhantomKind::Noise(8), [8, 8, 8]).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn parses_kind_names() {
        assert_eq!(
            "constant0".parse::<PhantomKind>().unwrap(),
            PhantomKind::Constant(0.0)
        );
        assert_eq!(
            "constant(-1000)".parse::<PhantomKind>().unwrap(),
            PhantomKind::Constant(-1000.0)
        );
        assert_eq!(
            "noise(42)".parse::<PhantomKind>().unwrap(),
            PhantomKind::Noise(42)
        );
        assert_eq!(
            "noise7".parse::<PhantomKind>().unwrap(),
            PhantomKind::Noise(7)
        );
        assert_eq!(
            "two_chamber".parse::<PhantomKind>().unwrap(),
            PhantomKind::TwoChamber
        );
        assert!("cube".parse::<PhantomKind>().is_err());
        for k in [
            PhantomKind::SphereShell,
            PhantomKind::Constant(2.5),
            PhantomKind::Noise(9),
        ] {
            assert_eq!(k.to_string().parse::<PhantomKind>().unwrap(), k);
        }
    }
}
