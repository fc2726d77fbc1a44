//! Rectangular area lights, constant and cubemap environment lighting, and
//! the light-sampling routines used for next-event estimation.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use glam::{DVec2, DVec3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{self, HdrImage};
use crate::math::{self, luminance, Rgb};

/// One-sided emitting rectangle spanning `center ± edge_u/2 ± edge_v/2`.
/// It emits toward `edge_u × edge_v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AreaLight {
    pub center: DVec3,
    pub edge_u: DVec3,
    pub edge_v: DVec3,
    pub radiance: Rgb,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LightSample {
    /// Unit direction from the shading point toward the light.
    pub wi: DVec3,
    /// Distance to the sampled point; infinite for the environment.
    pub distance: f64,
    pub radiance: Rgb,
    /// Solid-angle density.
    pub pdf: f64,
}

impl AreaLight {
    pub fn validate(&self) -> Result<()> {
        if !(self.edge_u.cross(self.edge_v).length() > 0.0) {
            return Err(Error::InvalidArgument(
                "area light edges are degenerate".into(),
            ));
        }
        if !(self.radiance.min_element() >= 0.0 && self.radiance.is_finite()) {
            return Err(Error::InvalidArgument(
                "area light radiance must be finite and >= 0".into(),
            ));
        }
        if !self.center.is_finite() {
            return Err(Error::InvalidArgument(
                "area light center must be finite".into(),
            ));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.edge_u.cross(self.edge_v).length()
    }

    pub fn normal(&self) -> DVec3 {
        self.edge_u.cross(self.edge_v).normalize()
    }

    /// Square light of side `size` at `center` facing `target`.
    pub fn facing(center: DVec3, target: DVec3, size: f64, radiance: Rgb) -> Self {
        let n = (target - center).normalize();
        let (t, b) = math::tangent_frame(n);
        // tangent × bitangent = n for the Duff frame.
        AreaLight {
            center,
            edge_u: t * size,
            edge_v: b * size,
            radiance,
            enabled: true,
        }
    }

    /// Radiance leaving the light toward a receiver that sees it along `wi`.
    pub fn emitted(&self, wi: DVec3) -> Rgb {
        if wi.dot(self.normal()) < 0.0 {
            self.radiance
        } else {
            Rgb::ZERO
        }
    }

    /// Distance along a ray to the rectangle, if hit.
    pub fn intersect(&self, origin: DVec3, dir: DVec3) -> Option<f64> {
        let n = self.normal();
        let denom = dir.dot(n);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = (self.center - origin).dot(n) / denom;
        if !(t > 0.0) {
            return None;
        }
        let d = origin + dir * t - self.center;
        let a = d.dot(self.edge_u) / self.edge_u.length_squared();
        let b = d.dot(self.edge_v) / self.edge_v.length_squared();
        (a.abs() <= 0.5 && b.abs() <= 0.5).then_some(t)
    }

    /// Solid-angle pdf of [`sample_area_light`] for a point seen at `distance` along `wi`.
    pub fn pdf(&self, wi: DVec3, distance: f64) -> f64 {
        let cos = wi.dot(self.normal()).abs();
        if cos <= 0.0 {
            return 0.0;
        }
        distance * distance / (cos * self.area())
    }
}

/// Uniform area sampling converted to solid angle. A receiver behind the
/// light or in its plane gets a zero-radiance sample.
pub fn sample_area_light(l: &AreaLight, x: DVec3, u: DVec2) -> LightSample {
    let p = l.center + (u.x - 0.5) * l.edge_u + (u.y - 0.5) * l.edge_v;
    let d = p - x;
    let distance = d.length();
    let wi = d / distance;
    let pdf = l.pdf(wi, distance);
    if !(pdf > 0.0 && pdf.is_finite()) {
        return LightSample {
            wi,
            distance,
            radiance: Rgb::ZERO,
            pdf: 1.0,
        };
    }
    LightSample {
        wi,
        distance,
        radiance: l.emitted(wi),
        pdf,
    }
}

/// Cube faces in `+X, -X, +Y, -Y, +Z, -Z` order.
pub const FACE_NAMES: [&str; 6] = ["posx", "negx", "posy", "negy", "posz", "negz"];

/// Face index and `(s, t)` in `[0,1]²` for a direction (OpenGL cube layout,
/// `t` grows downward in the face image).
pub fn direction_to_face(d: DVec3) -> (usize, f64, f64) {
    let a = d.abs();
    let (face, sc, tc, ma) = if a.x >= a.y && a.x >= a.z {
        if d.x > 0.0 {
            (0, -d.z, -d.y, a.x)
        } else {
            (1, d.z, -d.y, a.x)
        }
    } else if a.y >= a.z {
        if d.y > 0.0 {
            (2, d.x, d.z, a.y)
        } else {
            (3, d.x, -d.z, a.y)
        }
    } else if d.z > 0.0 {
        (4, d.x, -d.y, a.z)
    } else {
        (5, -d.x, -d.y, a.z)
    };
    (face, 0.5 * (sc / ma + 1.0), 0.5 * (tc / ma + 1.0))
}

/// Unnormalized direction through face coordinates `(s, t)`.
pub fn face_to_direction(face: usize, s: f64, t: f64) -> DVec3 {
    let (sc, tc) = (2.0 * s - 1.0, 2.0 * t - 1.0);
    match face {
        0 => DVec3::new(1.0, -tc, -sc),
        1 => DVec3::new(-1.0, -tc, sc),
        2 => DVec3::new(sc, 1.0, tc),
        3 => DVec3::new(sc, -1.0, -tc),
        4 => DVec3::new(sc, -tc, 1.0),
        _ => DVec3::new(-sc, -tc, -1.0),
    }
}

/// Solid angle subtended by the face-plane rectangle `[x0,x1]×[y0,y1]`
/// (plane at distance 1, coordinates in `[-1,1]`).
fn face_rect_solid_angle(x0: f64, x1: f64, y0: f64, y1: f64) -> f64 {
    let f = |x: f64, y: f64| (x * y).atan2((x * x + y * y + 1.0).sqrt());
    f(x1, y1) - f(x0, y1) - f(x1, y0) + f(x0, y0)
}

/// Six square HDR faces of equal power-of-two size.
#[derive(Debug, Clone, PartialEq)]
pub struct Cubemap {
    size: usize,
    faces: Vec<HdrImage>,
}

impl Cubemap {
    pub fn new(faces: Vec<HdrImage>) -> Result<Self> {
        if faces.len() != 6 {
            return Err(Error::Ingest(format!(
                "cubemap needs 6 faces, got {}",
                faces.len()
            )));
        }
        let size = faces[0].width();
        for (f, name) in faces.iter().zip(FACE_NAMES) {
            if f.width() != size || f.height() != size {
                return Err(Error::Ingest(format!(
                    "cubemap face {name} is {}x{}, expected {size}x{size}",
                    f.width(),
                    f.height()
                )));
            }
            if let Some(v) = f.data().iter().find(|v| !(**v >= 0.0) || v.is_infinite()) {
                return Err(Error::Ingest(format!(
                    "cubemap face {name} has invalid texel {v}"
                )));
            }
        }
        if !size.is_power_of_two() {
            return Err(Error::Ingest(format!(
                "cubemap face size {size} is not a power of two"
            )));
        }
        Ok(Cubemap { size, faces })
    }

    /// Bakes a directional function at texel centers.
    pub fn from_fn(size: usize, f: impl Fn(DVec3) -> Rgb) -> Result<Self> {
        let n = size as f64;
        let faces = (0..6)
            .map(|face| {
                HdrImage::from_fn(size, size, |i, j| {
                    f(
                        face_to_direction(face, (i as f64 + 0.5) / n, (j as f64 + 0.5) / n)
                            .normalize(),
                    )
                })
            })
            .collect();
        Cubemap::new(faces)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn faces(&self) -> &[HdrImage] {
        &self.faces
    }

    /// Bilinear fetch on the dominant-axis face, clamped at face edges.
    pub fn eval(&self, dir: DVec3) -> Rgb {
        let (face, s, t) = direction_to_face(dir);
        let img = &self.faces[face];
        let last = (self.size - 1) as f64;
        let x = (s * self.size as f64 - 0.5).clamp(0.0, last);
        let y = (t * self.size as f64 - 0.5).clamp(0.0, last);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.size - 1), (y0 + 1).min(self.size - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = img.get(x0, y0).lerp(img.get(x1, y0), fx);
        let bottom = img.get(x0, y1).lerp(img.get(x1, y1), fx);
        top.lerp(bottom, fy)
    }

    fn texel_bounds(&self, i: usize, j: usize) -> (f64, f64, f64, f64) {
        let n = self.size as f64;
        let c = |k: usize| 2.0 * k as f64 / n - 1.0;
        (c(i), c(i + 1), c(j), c(j + 1))
    }

    pub fn texel_solid_angle(&self, i: usize, j: usize) -> f64 {
        let (x0, x1, y0, y1) = self.texel_bounds(i, j);
        face_rect_solid_angle(x0, x1, y0, y1)
    }

    /// Σ texel · solid angle over all faces.
    pub fn total_power(&self) -> Rgb {
        let mut sum = Rgb::ZERO;
        for img in &self.faces {
            for j in 0..self.size {
                for i in 0..self.size {
                    sum += img.get(i, j) * self.texel_solid_angle(i, j);
                }
            }
        }
        sum
    }

    /// Overcast-sky substitute: bright zenith, softened sun, dark ground.
    pub fn procedural_sky(size: usize) -> Self {
        let sun = DVec3::new(0.4, 0.8, 0.45).normalize();
        Cubemap::from_fn(size, |d| {
            let up = d.y;
            let sky = if up >= 0.0 {
                Rgb::new(0.55, 0.65, 0.85).lerp(Rgb::new(1.0, 1.0, 1.05), (1.0 - up).powi(3))
            } else {
                Rgb::new(0.18, 0.16, 0.14)
            };
            let glow = (d.dot(sun) - 0.9).max(0.0) * 80.0;
            sky + Rgb::new(1.0, 0.95, 0.85) * glow
        })
        .expect("procedural sky is valid")
    }

    /// Indoor-hall substitute: warm dim ambience with two bright windows.
    pub fn procedural_interior(size: usize) -> Self {
        Cubemap::from_fn(size, |d| {
            let base = Rgb::new(0.25, 0.18, 0.12) * (0.6 + 0.4 * d.y.max(0.0));
            let window = |c: DVec3| {
                let (f, s, t) = direction_to_face(d);
                let (fc, _, _) = direction_to_face(c);
                if f == fc && (s - 0.5).abs() < 0.18 && (t - 0.35).abs() < 0.2 {
                    Rgb::new(6.0, 6.2, 6.8)
                } else {
                    Rgb::ZERO
                }
            };
            base + window(DVec3::X) + window(-DVec3::Z)
        })
        .expect("procedural interior is valid")
    }
}

fn load_face(path: &Path) -> Result<HdrImage> {
    if !path.exists() {
        return Err(Error::Ingest(format!(
            "missing cubemap face {}",
            path.display()
        )));
    }
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("pfm") => imageio::load_pfm(path),
        Some("png") => imageio::load_png_linear(path),
        _ => Err(Error::UnsupportedFormat(format!(
            "cubemap face {} (expected .pfm or .png)",
            path.display()
        ))),
    }
}

/// Loads six faces given in `+X, -X, +Y, -Y, +Z, -Z` order.
pub fn load_cubemap<P: AsRef<Path>>(paths: &[P]) -> Result<Cubemap> {
    if paths.len() != 6 {
        return Err(Error::Ingest(format!(
            "cubemap needs 6 face paths, got {}",
            paths.len()
        )));
    }
    Cubemap::new(
        paths
            .iter()
            .map(|p| load_face(p.as_ref()))
            .collect::<Result<_>>()?,
    )
}

/// Loads `{posx,negx,posy,negy,posz,negz}.{pfm,png}` from a directory.
pub fn load_cubemap_dir(dir: impl AsRef<Path>) -> Result<Cubemap> {
    let dir = dir.as_ref();
    let paths: Vec<PathBuf> = FACE_NAMES
        .iter()
        .map(|name| {
            let pfm = dir.join(format!("{name}.pfm"));
            if pfm.exists() {
                pfm
            } else {
                dir.join(format!("{name}.png"))
            }
        })
        .collect();
    load_cubemap(&paths)
}

/// Writes the faces as `{posx,…}.pfm` into `dir`.
pub fn save_cubemap(cubemap: &Cubemap, dir: impl AsRef<Path>) -> Result<()> {
    std::fs::create_dir_all(dir.as_ref())?;
    for (img, name) in cubemap.faces.iter().zip(FACE_NAMES) {
        imageio::save_pfm(img, dir.as_ref().join(format!("{name}.pfm")))?;
    }
    Ok(())
}

/// Share of a texel's sampling weight borrowed from its brightest neighbor.
/// Bilinear lookups spill light half a texel into dark neighbors, so those
/// need a nonzero density.
const NEIGHBOR_BLEED: f64 = 5e-4;

/// Cubemap plus a texel-luminance sampling distribution.
#[derive(Debug, Clone)]
pub struct Environment {
    map: Cubemap,
    /// Per-texel probabilities in face-major, row-major order; empty if black.
    pmf: Vec<f64>,
    cdf: Vec<f64>,
}

impl Environment {
    pub fn new(map: Cubemap) -> Self {
        let n = map.size;
        let mut weights = Vec::with_capacity(6 * n * n);
        for img in &map.faces {
            for j in 0..n {
                for i in 0..n {
                    let mut neighbor = 0.0f64;
                    for y in j.saturating_sub(1)..=(j + 1).min(n - 1) {
                        for x in i.saturating_sub(1)..=(i + 1).min(n - 1) {
                            neighbor = neighbor.max(luminance(img.get(x, y)));
                        }
                    }
                    let w = luminance(img.get(i, j)) + NEIGHBOR_BLEED * neighbor;
                    weights.push(w * map.texel_solid_angle(i, j));
                }
            }
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Environment {
                map,
                pmf: Vec::new(),
                cdf: Vec::new(),
            };
        }
        let pmf: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let mut acc = 0.0;
        let cdf = pmf
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Environment { map, pmf, cdf }
    }

    pub fn map(&self) -> &Cubemap {
        &self.map
    }

    pub fn has_energy(&self) -> bool {
        !self.pmf.is_empty()
    }

    fn texel_of(&self, dir: DVec3) -> (usize, f64, f64) {
        let n = self.map.size;
        let (face, s, t) = direction_to_face(dir);
        let i = ((s * n as f64) as usize).min(n - 1);
        let j = ((t * n as f64) as usize).min(n - 1);
        (face * n * n + j * n + i, 2.0 * s - 1.0, 2.0 * t - 1.0)
    }

    fn density(&self, k: usize, x: f64, y: f64) -> f64 {
        let n = self.map.size as f64;
        let texel_area = (2.0 / n) * (2.0 / n);
        self.pmf[k] / texel_area * (1.0 + x * x + y * y).powf(1.5)
    }

    pub fn pdf(&self, dir: DVec3) -> f64 {
        if !self.has_energy() {
            return 0.0;
        }
        let (k, x, y) = self.texel_of(dir);
        self.density(k, x, y)
    }

    pub fn sample(&self, u: DVec2) -> Option<(DVec3, f64)> {
        if !self.has_energy() {
            return None;
        }
        let k = self
            .cdf
            .partition_point(|&c| c <= u.x)
            .min(self.pmf.len() - 1);
        let below = if k == 0 { 0.0 } else { self.cdf[k - 1] };
        let ux = ((u.x - below) / self.pmf[k]).clamp(0.0, 1.0 - f64::EPSILON);
        let n = self.map.size;
        let (face, j, i) = (k / (n * n), (k / n) % n, k % n);
        let s = (i as f64 + ux) / n as f64;
        let t = (j as f64 + u.y.min(1.0 - f64::EPSILON)) / n as f64;
        let dir = face_to_direction(face, s, t).normalize();
        let pdf = self.density(k, 2.0 * s - 1.0, 2.0 * t - 1.0);
        (pdf > 0.0).then_some((dir, pdf))
    }
}

#[derive(Debug, Clone)]
pub enum Background {
    Constant(Rgb),
    Cubemap(Arc<Environment>),
}

#[derive(Debug, Clone)]
pub struct BackgroundLight {
    pub mode: Background,
    pub intensity_scale: f64,
    pub enabled: bool,
}

impl BackgroundLight {
    pub fn constant(color: Rgb) -> Self {
        BackgroundLight {
            mode: Background::Constant(color),
            intensity_scale: 1.0,
            enabled: true,
        }
    }

    pub fn cubemap(map: Cubemap, intensity_scale: f64) -> Self {
        BackgroundLight {
            mode: Background::Cubemap(Arc::new(Environment::new(map))),
            intensity_scale,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        BackgroundLight {
            enabled: false,
            ..Self::constant(Rgb::ZERO)
        }
    }

    /// False when the light cannot contribute anything.
    pub fn is_active(&self) -> bool {
        self.enabled
            && self.intensity_scale > 0.0
            && match &self.mode {
                Background::Constant(c) => c.max_element() > 0.0,
                Background::Cubemap(env) => env.has_energy(),
            }
    }
}

/// Environment radiance arriving from `dir`; zero when disabled.
pub fn eval_background(b: &BackgroundLight, dir: DVec3) -> Rgb {
    if !b.enabled {
        return Rgb::ZERO;
    }
    let c = match &b.mode {
        Background::Constant(c) => *c,
        Background::Cubemap(env) => env.map.eval(dir),
    };
    c * b.intensity_scale
}

/// Solid-angle density of [`sample_background`].
pub fn background_pdf(b: &BackgroundLight, dir: DVec3) -> f64 {
    if !b.is_active() {
        return 0.0;
    }
    match &b.mode {
        Background::Constant(_) => math::UNIFORM_SPHERE_PDF,
        Background::Cubemap(env) => env.pdf(dir),
    }
}

/// Uniform directions for constant mode, texel-luminance importance
/// sampling for cubemaps. [`Error::NoEnergy`] when nothing can be sampled.
pub fn sample_background(b: &BackgroundLight, u: DVec2) -> Result<LightSample> {
    if !b.is_active() {
        return Err(Error::NoEnergy);
    }
    let (wi, pdf) = match &b.mode {
        Background::Constant(_) => (math::uniform_sphere(u), math::UNIFORM_SPHERE_PDF),
        Background::Cubemap(env) => env.sample(u).ok_or(Error::NoEnergy)?,
    };
    Ok(LightSample {
        wi,
        distance: f64::INFINITY,
        radiance: eval_background(b, wi),
        pdf,
    })
}
