//! Scene description: volume source, classification, material, lights,
//! camera, edits and render settings, plus JSON persistence and camera rays.
//!
//! Relative paths inside a scene file resolve against the file's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use glam::DVec3;
use serde::{Deserialize, Serialize};

use crate::classify::{build_lut, load_preset_csv, preset, ControlPoint, TransferFunction};
use crate::edit::{apply_cuts, ClipPlane, CutOp};
use crate::error::{Error, Result};
use crate::lighting::{load_cubemap_dir, AreaLight, BackgroundLight, Cubemap};
use crate::material::Material;
use crate::math::Rgb;
use crate::tracer::{Ray, RenderScene, RenderSettings};
use crate::volume::{
    gauss_smooth, load_dicom_series, load_nrrd, load_raw, make_phantom, PhantomKind, RawDtype,
    SmoothingParams, VoxelGrid,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Perspective,
    Orthographic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Camera {
    pub position: DVec3,
    pub target: DVec3,
    pub up: DVec3,
    pub projection: Projection,
    /// Degrees, used by perspective projection.
    #[serde(default = "default_fov")]
    pub vertical_fov: f64,
    /// Millimeters, used by orthographic projection.
    #[serde(default = "default_half_height")]
    pub half_height: f64,
}

fn default_fov() -> f64 {
    35.0
}

fn default_half_height() -> f64 {
    50.0
}

impl Default for Camera {
    fn default() -> Self {
        Camera {
            position: DVec3::new(0.0, -200.0, 0.0),
            target: DVec3::ZERO,
            up: DVec3::Z,
            projection: Projection::Perspective,
            vertical_fov: default_fov(),
            half_height: default_half_height(),
        }
    }
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        if !(self.position.is_finite() && self.target.is_finite() && self.up.is_finite()) {
            return Err(Error::scene(
                "camera.position",
                "camera vectors must be finite",
            ));
        }
        if self.position.distance(self.target) <= 0.0 {
            return Err(Error::scene(
                "camera.target",
                "camera target must differ from position",
            ));
        }
        if !(self.vertical_fov > 0.0 && self.vertical_fov < 180.0) {
            return Err(Error::scene(
                "camera.vertical_fov",
                format!("must lie in (0, 180) degrees, got {}", self.vertical_fov),
            ));
        }
        if !(self.half_height > 0.0) {
            return Err(Error::scene(
                "camera.half_height",
                format!("must be > 0, got {}", self.half_height),
            ));
        }
        Ok(())
    }

    /// Replaces an up vector parallel to the view direction by the world axis
    /// least aligned with it. Returns whether a repair happened.
    pub fn repair_up(&mut self) -> bool {
        let fwd = (self.target - self.position).normalize();
        let up = self.up.try_normalize();
        if up.is_some_and(|u| u.cross(fwd).length() > 1e-6) {
            return false;
        }
        let a = fwd.abs();
        self.up = if a.x <= a.y && a.x <= a.z {
            DVec3::X
        } else if a.y <= a.z {
            DVec3::Y
        } else {
            DVec3::Z
        };
        log::warn!("camera up vector is degenerate; using {}", self.up);
        true
    }

    /// Orthonormal `(right, up, forward)` basis.
    pub fn basis(&self) -> (DVec3, DVec3, DVec3) {
        let fwd = (self.target - self.position).normalize();
        let right = fwd.cross(self.up).normalize();
        let up = right.cross(fwd);
        (right, up, fwd)
    }

    /// Continuous pixel coordinates and ray depth of a world point, if it
    /// lies in front of the camera.
    pub fn project(&self, p: DVec3, width: usize, height: usize) -> Option<(f64, f64, f64)> {
        let (right, up, fwd) = self.basis();
        let aspect = width as f64 / height as f64;
        let d = p - self.position;
        let z = d.dot(fwd);
        let (nx, ny, depth) = match self.projection {
            Projection::Perspective => {
                if z <= 0.0 {
                    return None;
                }
                let tan_half = (0.5 * self.vertical_fov).to_radians().tan();
                (
                    d.dot(right) / (z * tan_half * aspect),
                    d.dot(up) / (z * tan_half),
                    d.length(),
                )
            }
            Projection::Orthographic => (
                d.dot(right) / (self.half_height * aspect),
                d.dot(up) / self.half_height,
                z,
            ),
        };
        Some((
            0.5 * (nx + 1.0) * width as f64,
            0.5 * (1.0 - ny) * height as f64,
            depth,
        ))
    }
}

/// Primary ray through pixel `(px, py)` at sub-pixel offset `jitter ∈ [0,1)²`.
/// Rows run top to bottom.
pub fn generate_ray(
    cam: &Camera,
    px: usize,
    py: usize,
    jitter: glam::DVec2,
    width: usize,
    height: usize,
) -> Ray {
    let (right, up, fwd) = cam.basis();
    let aspect = width as f64 / height as f64;
    let nx = 2.0 * (px as f64 + jitter.x) / width as f64 - 1.0;
    let ny = 1.0 - 2.0 * (py as f64 + jitter.y) / height as f64;
    match cam.projection {
        Projection::Perspective => {
            let tan_half = (0.5 * cam.vertical_fov).to_radians().tan();
            let dir = fwd + right * (nx * tan_half * aspect) + up * (ny * tan_half);
            Ray::new(cam.position, dir)
        }
        Projection::Orthographic => {
            let origin = cam.position
                + right * (nx * cam.half_height * aspect)
                + up * (ny * cam.half_height);
            Ray::new(origin, fwd)
        }
    }
}

/// Where the CT volume comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeSource {
    Phantom {
        kind: PhantomName,
        dims: [usize; 3],
    },
    Nrrd {
        path: PathBuf,
    },
    Dicom {
        path: PathBuf,
    },
    Raw {
        path: PathBuf,
        dims: [usize; 3],
        spacing: DVec3,
        dtype: RawDtype,
        #[serde(default)]
        big_endian: bool,
    },
}

/// Phantom kind serialized by its textual name, e.g. `"noise(42)"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhantomName(pub PhantomKind);

impl Serialize for PhantomName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for PhantomName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(PhantomName).map_err(serde::de::Error::custom)
    }
}

impl VolumeSource {
    pub fn phantom(kind: PhantomKind, n: usize) -> Self {
        VolumeSource::Phantom {
            kind: PhantomName(kind),
            dims: [n; 3],
        }
    }

    pub fn load(&self, base_dir: &Path) -> Result<VoxelGrid> {
        match self {
            VolumeSource::Phantom { kind, dims } => make_phantom(kind.0, *dims),
            VolumeSource::Nrrd { path } => load_nrrd(base_dir.join(path)),
            VolumeSource::Dicom { path } => load_dicom_series(base_dir.join(path)),
            VolumeSource::Raw {
                path,
                dims,
                spacing,
                dtype,
                big_endian,
            } => load_raw(base_dir.join(path), *dims, *spacing, *dtype, *big_endian),
        }
    }
}

/// Transfer function given inline, by built-in preset name, or as a
/// `.tfcsv` file. Exactly one form must be present.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TfSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<ControlPoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_level: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window_width: Option<f64>,
}

impl TfSource {
    pub fn named(name: &str) -> Self {
        TfSource {
            preset: Some(name.into()),
            ..Default::default()
        }
    }

    pub fn inline(tf: &TransferFunction) -> Self {
        TfSource {
            points: Some(tf.points.clone()),
            window_level: Some(tf.window_level),
            window_width: Some(tf.window_width),
            ..Default::default()
        }
    }

    /// Resolves the transfer function. Window fields, when given alongside a
    /// preset, override the preset's window.
    pub fn resolve(&self, base_dir: &Path) -> Result<TransferFunction> {
        let forms = [
            self.preset.is_some(),
            self.preset_path.is_some(),
            self.points.is_some(),
        ];
        if forms.iter().filter(|&&f| f).count() != 1 {
            return Err(Error::scene(
                "transfer_function",
                "give exactly one of `preset`, `preset_path` or `points`",
            ));
        }
        let mut tf = if let Some(name) = &self.preset {
            preset(name).ok_or_else(|| {
                Error::scene(
                    "transfer_function.preset",
                    format!("unknown preset `{name}`"),
                )
            })?
        } else if let Some(path) = &self.preset_path {
            let path = base_dir.join(path);
            let bytes = std::fs::read(&path).map_err(|e| {
                Error::scene(
                    "transfer_function.preset_path",
                    format!("{}: {e}", path.display()),
                )
            })?;
            load_preset_csv(&bytes)?
        } else {
            let points = self.points.clone().unwrap_or_default();
            let mut tf = TransferFunction::with_default_window(points)
                .map_err(|e| Error::scene("transfer_function.points", e.to_string()))?;
            tf.window_level = self.window_level.unwrap_or(tf.window_level);
            tf.window_width = self.window_width.unwrap_or(tf.window_width);
            tf
        };
        if self.points.is_none() {
            tf.window_level = self.window_level.unwrap_or(tf.window_level);
            tf.window_width = self.window_width.unwrap_or(tf.window_width);
        }
        tf.validate()
            .map_err(|e| Error::scene("transfer_function", e.to_string()))?;
        Ok(tf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundMode {
    Constant,
    Cubemap,
}

/// Background light as stored in scene files. `cubemap` is a directory of
/// faces or `procedural:sky` / `procedural:interior`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    pub mode: BackgroundMode,
    #[serde(default = "white")]
    pub color: Rgb,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cubemap: Option<String>,
    #[serde(default = "one")]
    pub intensity_scale: f64,
    #[serde(default = "yes")]
    pub enabled: bool,
}

fn white() -> Rgb {
    Rgb::ONE
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Face resolution of the built-in procedural environments.
pub const PROCEDURAL_CUBEMAP_SIZE: usize = 64;

impl BackgroundSpec {
    pub fn constant(color: Rgb) -> Self {
        BackgroundSpec {
            mode: BackgroundMode::Constant,
            color,
            cubemap: None,
            intensity_scale: 1.0,
            enabled: true,
        }
    }

    pub fn cubemap(source: &str, intensity_scale: f64) -> Self {
        BackgroundSpec {
            mode: BackgroundMode::Cubemap,
            color: Rgb::ONE,
            cubemap: Some(source.into()),
            intensity_scale,
            enabled: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.color.min_element() >= 0.0 && self.color.is_finite()) {
            return Err(Error::scene("background.color", "must be finite and >= 0"));
        }
        if !(self.intensity_scale >= 0.0 && self.intensity_scale.is_finite()) {
            return Err(Error::scene(
                "background.intensity_scale",
                "must be finite and >= 0",
            ));
        }
        if self.mode == BackgroundMode::Cubemap && self.cubemap.is_none() {
            return Err(Error::scene(
                "background.cubemap",
                "cubemap mode needs a `cubemap` source",
            ));
        }
        Ok(())
    }

    pub fn resolve(&self, base_dir: &Path) -> Result<BackgroundLight> {
        let mut light = match self.mode {
            BackgroundMode::Constant => BackgroundLight::constant(self.color),
            BackgroundMode::Cubemap => {
                let src = self.cubemap.as_deref().unwrap_or_default();
                let map = match src.strip_prefix("procedural:") {
                    Some("sky") => Cubemap::procedural_sky(PROCEDURAL_CUBEMAP_SIZE),
                    Some("interior") => Cubemap::procedural_interior(PROCEDURAL_CUBEMAP_SIZE),
                    Some(other) => {
                        return Err(Error::scene(
                            "background.cubemap",
                            format!("unknown procedural cubemap `{other}`"),
                        ))
                    }
                    None => load_cubemap_dir(base_dir.join(src))?,
                };
                BackgroundLight::cubemap(map, 1.0)
            }
        };
        light.intensity_scale = self.intensity_scale;
        light.enabled = self.enabled;
        Ok(light)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub volume: VolumeSource,
    #[serde(default)]
    pub smoothing: SmoothingParams,
    pub transfer_function: TfSource,
    #[serde(default)]
    pub material: Material,
    #[serde(default)]
    pub area_lights: Vec<AreaLight>,
    pub background: BackgroundSpec,
    #[serde(default)]
    pub camera: Camera,
    #[serde(default)]
    pub clip_planes: Vec<ClipPlane>,
    #[serde(default)]
    pub cuts: Vec<CutOp>,
    #[serde(default)]
    pub render: RenderSettings,
}

impl Scene {
    /// Checks every component invariant, reporting the offending key path.
    pub fn validate(&self) -> Result<()> {
        self.smoothing
            .validate()
            .map_err(|e| Error::scene("smoothing", e.to_string()))?;
        self.material
            .validate()
            .map_err(|e| Error::scene("material", e.to_string()))?;
        for (i, l) in self.area_lights.iter().enumerate() {
            l.validate()
                .map_err(|e| Error::scene(format!("area_lights[{i}]"), e.to_string()))?;
        }
        self.background.validate()?;
        self.camera.validate()?;
        for (i, c) in self.clip_planes.iter().enumerate() {
            c.validate()
                .map_err(|e| Error::scene(format!("clip_planes[{i}]"), e.to_string()))?;
        }
        for (i, op) in self.cuts.iter().enumerate() {
            let ok = match *op {
                CutOp::Sphere { radius, center, .. } => radius > 0.0 && center.is_finite(),
                CutOp::Threshold { hu_min, hu_max, .. } => hu_min <= hu_max,
            };
            if !ok {
                return Err(Error::scene(
                    format!("cuts[{i}]"),
                    format!("invalid cut {op:?}"),
                ));
            }
        }
        if let TfSource {
            points: Some(points),
            ..
        } = &self.transfer_function
        {
            TransferFunction::with_default_window(points.clone())
                .map_err(|e| Error::scene("transfer_function.points", e.to_string()))?;
        }
        if let Some(w) = self.transfer_function.window_width {
            if !(w > 0.0) {
                return Err(Error::scene(
                    "transfer_function.window_width",
                    format!("must be > 0, got {w}"),
                ));
            }
        }
        self.render.validate()?;
        if !self.has_light() {
            log::warn!("scene has no enabled light; it will render black");
        }
        Ok(())
    }

    pub fn has_light(&self) -> bool {
        self.area_lights.iter().any(|l| l.enabled) || self.background.enabled
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut scene: Scene = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::SceneParse {
                path,
                line: Some(inner.line()),
                msg: inner.to_string(),
            }
        })?;
        scene.camera.repair_up();
        scene.validate()?;
        Ok(scene)
    }

    pub fn from_value(value: serde_json::Value) -> Result<Self> {
        let mut scene: Scene =
            serde_path_to_error::deserialize(value).map_err(|e| Error::SceneParse {
                path: e.path().to_string(),
                line: None,
                msg: e.into_inner().to_string(),
            })?;
        scene.camera.repair_up();
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("scene serializes")
    }

    /// Loads and smooths the volume.
    pub fn load_volume(&self, base_dir: &Path) -> Result<VoxelGrid> {
        let grid = self.volume.load(base_dir)?;
        gauss_smooth(&grid, &self.smoothing)
    }

    /// Resolves everything except the volume, which the caller supplies
    /// (already smoothed) so it can be shared between edits.
    pub fn prepare_with_grid(&self, grid: Arc<VoxelGrid>, base_dir: &Path) -> Result<RenderScene> {
        self.validate()?;
        let tf = self.transfer_function.resolve(base_dir)?;
        let lut = build_lut(&tf, self.render.lut_size)?;
        let background = self.background.resolve(base_dir)?;
        let cut = apply_cuts(&grid, &self.cuts)?;
        Ok(RenderScene::new(
            grid,
            lut,
            self.material,
            self.area_lights.clone(),
            background,
            self.camera,
            self.clip_planes.clone(),
            cut,
            self.render,
        ))
    }

    pub fn prepare(&self, base_dir: &Path) -> Result<RenderScene> {
        let grid = Arc::new(self.load_volume(base_dir)?);
        self.prepare_with_grid(grid, base_dir)
    }
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Ingest(format!("cannot read scene {}: {e}", path.display())))?;
    Scene::from_json(&text)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scene.to_json() + "\n")?;
    Ok(())
}

/// Directory that relative paths in a scene file resolve against.
pub fn scene_base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Built-in scene presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScenePreset {
    Default,
    RoughnessSweep,
    LightCount,
    AreaVsBackground,
    IblDemo,
}

pub const SCENE_PRESETS: [ScenePreset; 5] = [
    ScenePreset::Default,
    ScenePreset::RoughnessSweep,
    ScenePreset::LightCount,
    ScenePreset::AreaVsBackground,
    ScenePreset::IblDemo,
];

impl fmt::Display for ScenePreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenePreset::Default => "default",
            ScenePreset::RoughnessSweep => "roughness_sweep",
            ScenePreset::LightCount => "light_count",
            ScenePreset::AreaVsBackground => "area_vs_background",
            ScenePreset::IblDemo => "ibl_demo",
        })
    }
}

impl std::str::FromStr for ScenePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SCENE_PRESETS
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scene preset `{s}`")))
    }
}

/// Edge length of the phantom used by the presets, in voxels (1 mm spacing).
pub const PRESET_PHANTOM_SIZE: usize = 64;

/// Square light at `direction` from the volume center, two volume diagonals
/// away, facing the center.
pub fn light_from(direction: DVec3, diagonal: f64, size: f64, radiance: Rgb) -> AreaLight {
    AreaLight::facing(
        direction.normalize() * 2.0 * diagonal,
        DVec3::ZERO,
        size,
        radiance,
    )
}

/// Radiance of the preset key light; gives a white diffuser at the volume
/// center roughly unit exitant radiance.
pub const KEY_RADIANCE: f64 = 120.0;

/// Direction of the default key light: above, to the right, toward the viewer.
pub const TOP_RIGHT: DVec3 = DVec3::new(0.6, -0.5, 0.8);

pub fn preset_scene(p: ScenePreset) -> Scene {
    let n = PRESET_PHANTOM_SIZE;
    let diagonal = (3.0f64).sqrt() * n as f64;
    let key = light_from(
        TOP_RIGHT,
        diagonal,
        0.5 * n as f64,
        Rgb::splat(KEY_RADIANCE),
    );
    let mut scene = Scene {
        volume: VolumeSource::phantom(PhantomKind::TwoChamber, n),
        smoothing: SmoothingParams::isotropic(1.0),
        transfer_function: TfSource::named("cardiac"),
        material: Material {
            base_color: Rgb::ONE,
            metallic: 0.0,
            roughness: 0.5,
            specular: 0.5,
        },
        area_lights: vec![key],
        background: BackgroundSpec {
            intensity_scale: 0.3,
            ..BackgroundSpec::constant(Rgb::ONE)
        },
        camera: Camera {
            position: DVec3::new(0.0, -2.2 * n as f64, 0.0),
            target: DVec3::ZERO,
            up: DVec3::Z,
            projection: Projection::Perspective,
            vertical_fov: 30.0,
            half_height: 0.6 * n as f64,
        },
        clip_planes: Vec::new(),
        cuts: Vec::new(),
        render: RenderSettings {
            width: 128,
            height: 128,
            iterations: 64,
            ..RenderSettings::default()
        },
    };
    match p {
        ScenePreset::Default => {}
        ScenePreset::RoughnessSweep => {
            scene.material.metallic = 0.5;
            scene.material.specular = 0.5;
            scene.material.roughness = 0.0;
            scene.background.intensity_scale = 0.1;
        }
        ScenePreset::LightCount => {
            scene.area_lights = vec![key, key];
            scene.render.max_bounces = 1;
            scene.background.enabled = false;
        }
        ScenePreset::AreaVsBackground => {
            // Close framing and a bright key so the lit side and its shadow dominate the frame.
            scene.camera.position = DVec3::new(0.0, -1.4 * n as f64, 0.0);
            for l in &mut scene.area_lights {
                l.radiance = Rgb::splat(3.0 * KEY_RADIANCE);
            }
        }
        ScenePreset::IblDemo => {
            scene.area_lights.clear();
            scene.background = BackgroundSpec::cubemap("procedural:sky", 1.0);
        }
    }
    scene
}
