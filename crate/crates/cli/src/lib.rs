//! Batch front end: render scenes to disk, run parameter sweeps with image
//! statistics, and write phantoms and presets.

use std::fmt;
use std::fs;
use std::io::Write;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use cinevol::classify::{preset, save_preset_csv};
use cinevol::imageio::{save_pfm, HdrImage};
use cinevol::lighting::AreaLight;
use cinevol::postfx::{finish, image_stats, ImageStats, LdrImage};
use cinevol::scene::{load_scene, preset_scene, save_scene, scene_base_dir, Scene, ScenePreset};
use cinevol::tracer::{render_with, Framebuffer};
use cinevol::volume::{make_phantom, save_nrrd, PhantomKind, VoxelGrid};
use cinevol::DVec3;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_INGEST: u8 = 3;
pub const EXIT_RENDER: u8 = 4;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(cinevol::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<cinevol::Error> for CliError {
    fn from(e: cinevol::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use cinevol::Error as E;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(
                E::Ingest(_)
                | E::MissingTag { .. }
                | E::UnsupportedFormat(_)
                | E::PresetParse { .. }
                | E::SceneParse { .. }
                | E::InvalidTransferFunction(_),
            ) => EXIT_INGEST,
            CliError::Core(_) => EXIT_RENDER,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

/// `WxH` image size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
        let parse = |v: &str| v.trim().parse::<usize>().ok().filter(|&n| n > 0);
        match (parse(w), parse(h)) {
            (Some(width), Some(height)) => Ok(Size { width, height }),
            _ => Err(format!("expected positive WxH, got `{s}`")),
        }
    }
}

/// Command-line overrides applied on top of a scene's render settings.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub iterations: Option<u32>,
    pub seed: Option<u64>,
    pub size: Option<Size>,
    pub no_ssao: bool,
}

impl Overrides {
    pub fn apply(&self, scene: &mut Scene) {
        if let Some(n) = self.iterations {
            scene.render.iterations = n;
        }
        if let Some(s) = self.seed {
            scene.render.seed = s;
        }
        if let Some(Size { width, height }) = self.size {
            scene.render.width = width;
            scene.render.height = height;
        }
        if self.no_ssao {
            scene.render.ssao = None;
        }
    }
}

/// A scene file path, or `preset:NAME` for a built-in scene.
pub fn load_scene_arg(arg: Option<&str>) -> Result<(Scene, PathBuf)> {
    match arg {
        None => Ok((preset_scene(ScenePreset::Default), PathBuf::from("."))),
        Some(a) => match a.strip_prefix("preset:") {
            Some(name) => {
                let p = name
                    .parse::<ScenePreset>()
                    .map_err(|e| CliError::Usage(e.to_string()))?;
                Ok((preset_scene(p), PathBuf::from(".")))
            }
            None => {
                let path = Path::new(a);
                Ok((load_scene(path)?, scene_base_dir(path)))
            }
        },
    }
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Core(cinevol::Error::InvalidArgument(e.to_string())))?;
            Ok(pool.install(f))
        }
    }
}

/// Result of one batch render.
pub struct Rendered {
    pub fb: Framebuffer,
    pub hdr: HdrImage,
    pub ldr: LdrImage,
    pub pass_ms: Vec<f64>,
}

/// Renders `scene` with volume `grid`, timing every pass.
pub fn render_scene(scene: &Scene, grid: Arc<VoxelGrid>, base_dir: &Path) -> Result<Rendered> {
    let rs = scene.prepare_with_grid(grid, base_dir)?;
    let mut fb = Framebuffer::new(rs.settings.width, rs.settings.height);
    let mut pass_ms = Vec::with_capacity(rs.settings.iterations as usize);
    let mut t = Instant::now();
    render_with(&rs, &rs.settings, &mut fb, |_| {
        pass_ms.push(t.elapsed().as_secs_f64() * 1e3);
        t = Instant::now();
        ControlFlow::Continue(())
    })?;
    let (hdr, ldr) = finish(&fb, &rs.camera, &rs.settings)?;
    Ok(Rendered {
        fb,
        hdr,
        ldr,
        pass_ms,
    })
}

/// `render`: writes the PNG at `out` and, with `hdr`, a PFM beside it.
pub fn cmd_render(
    scene: &Scene,
    base_dir: &Path,
    out: &Path,
    hdr: bool,
    log: &mut impl Write,
) -> Result<Rendered> {
    let grid = Arc::new(scene.load_volume(base_dir)?);
    let r = render_scene(scene, grid, base_dir)?;
    let n = r.pass_ms.len();
    for (i, ms) in r.pass_ms.iter().enumerate() {
        writeln!(log, "pass {}/{n} {ms:.1} ms", i + 1)?;
    }
    writeln!(log, "iteration_count {}", r.fb.iteration_count())?;
    writeln!(log, "total {:.1} ms", r.pass_ms.iter().sum::<f64>())?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    r.ldr.save_png(out)?;
    if hdr {
        save_pfm(&r.hdr, out.with_extension("pfm"))?;
    }
    if r.fb.nonfinite_count() > 0 {
        log::warn!(
            "{} non-finite samples were discarded",
            r.fb.nonfinite_count()
        );
    }
    Ok(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Roughness,
    Metallic,
    Specular,
    LightCount,
    LightLayout,
    BackgroundMode,
}

pub const SWEEP_AXES: [SweepAxis; 6] = [
    SweepAxis::Roughness,
    SweepAxis::Metallic,
    SweepAxis::Specular,
    SweepAxis::LightCount,
    SweepAxis::LightLayout,
    SweepAxis::BackgroundMode,
];

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Roughness => "roughness",
            SweepAxis::Metallic => "metallic",
            SweepAxis::Specular => "specular",
            SweepAxis::LightCount => "light_count",
            SweepAxis::LightLayout => "light_layout",
            SweepAxis::BackgroundMode => "background_mode",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        SWEEP_AXES
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| {
                let names: Vec<String> = SWEEP_AXES.iter().map(ToString::to_string).collect();
                format!(
                    "unknown sweep axis `{s}` (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

/// Named key-light placements relative to the camera.
pub const LIGHT_LAYOUTS: [&str; 3] = ["top_right", "front", "behind"];

pub const BACKGROUND_MODES: [&str; 3] = ["area_only", "background_only", "both"];

/// Key light for `layout`, two volume diagonals from the volume center.
/// `template` supplies size and radiance.
pub fn layout_light(
    scene: &Scene,
    grid: &VoxelGrid,
    layout: &str,
    template: &AreaLight,
) -> Result<AreaLight> {
    let (right, up, fwd) = scene.camera.basis();
    let dir = match layout {
        "top_right" => right * 0.6 + up * 0.8 - fwd * 0.5,
        "front" => -fwd + up * 0.15,
        "behind" => fwd + up * 0.15,
        other => {
            return Err(CliError::Usage(format!(
                "unknown light layout `{other}` (expected {LIGHT_LAYOUTS:?})"
            )))
        }
    };
    let center = grid.center();
    let size = template.edge_u.length();
    let mut light = AreaLight::facing(
        center + dir.normalize() * 2.0 * grid.diagonal(),
        center,
        size,
        template.radiance,
    );
    light.enabled = true;
    Ok(light)
}

fn number(axis: SweepAxis, v: &str) -> Result<f64> {
    v.trim()
        .parse::<f64>()
        .map_err(|_| CliError::Usage(format!("{axis} value `{v}` is not a number")))
}

/// Scene variant for one sweep value.
pub fn sweep_variant(
    base: &Scene,
    grid: &VoxelGrid,
    axis: SweepAxis,
    value: &str,
) -> Result<Scene> {
    let mut s = base.clone();
    let template = base.area_lights.first().copied().unwrap_or_else(|| {
        cinevol::scene::light_from(
            cinevol::scene::TOP_RIGHT,
            grid.diagonal(),
            0.5 * grid.dims()[0] as f64 * grid.spacing().x,
            DVec3::splat(cinevol::scene::KEY_RADIANCE),
        )
    });
    match axis {
        SweepAxis::Roughness => s.material.roughness = number(axis, value)?,
        SweepAxis::Metallic => s.material.metallic = number(axis, value)?,
        SweepAxis::Specular => s.material.specular = number(axis, value)?,
        SweepAxis::LightCount => {
            let n: usize = value.trim().parse().map_err(|_| {
                CliError::Usage(format!("light_count value `{value}` is not a count"))
            })?;
            s.area_lights = vec![
                AreaLight {
                    enabled: true,
                    ..template
                };
                n
            ];
        }
        SweepAxis::LightLayout => {
            s.area_lights = vec![layout_light(base, grid, value.trim(), &template)?]
        }
        SweepAxis::BackgroundMode => {
            let (area, background) = match value.trim() {
                "area_only" => (true, false),
                "background_only" => (false, true),
                "both" => (true, true),
                other => {
                    return Err(CliError::Usage(format!(
                        "unknown background mode `{other}` (expected {BACKGROUND_MODES:?})"
                    )))
                }
            };
            if area && !s.area_lights.iter().any(|l| l.enabled) {
                s.area_lights = vec![AreaLight {
                    enabled: true,
                    ..template
                }];
            }
            for l in &mut s.area_lights {
                l.enabled = area;
            }
            s.background.enabled = background;
        }
    }
    s.validate()?;
    Ok(s)
}

pub struct SweepRow {
    pub value: String,
    pub stats: ImageStats,
    pub image: LdrImage,
    pub hdr: HdrImage,
}

pub const CSV_HEADER: &str = "value,max_lum,mean_lum,overexposed_frac,lum_var";

pub fn stats_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let st = r.stats;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.value, st.max_lum, st.mean_lum, st.overexposed_frac, st.lum_var
        ));
    }
    s
}

/// Images side by side with a 4 pixel dark gap, top-aligned.
pub fn composite_row(images: &[&LdrImage]) -> LdrImage {
    const GAP: usize = 4;
    const GAP_SHADE: u8 = 24;
    let width =
        images.iter().map(|i| i.width).sum::<usize>() + GAP * images.len().saturating_sub(1);
    let height = images.iter().map(|i| i.height).max().unwrap_or(0);
    let mut rgb8 = vec![GAP_SHADE; width * height * 3];
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            let src = &img.rgb8[y * img.width * 3..(y + 1) * img.width * 3];
            let dst = (y * width + x0) * 3;
            rgb8[dst..dst + src.len()].copy_from_slice(src);
        }
        x0 += img.width + GAP;
    }
    LdrImage {
        width,
        height,
        rgb8,
    }
}

fn file_stem(value: &str) -> String {
    value
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Renders every sweep value (in order) without touching the filesystem.
pub fn run_sweep(
    base: &Scene,
    base_dir: &Path,
    axis: SweepAxis,
    values: &[String],
) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let grid = Arc::new(base.load_volume(base_dir)?);
    let variants = values
        .iter()
        .map(|v| sweep_variant(base, &grid, axis, v))
        .collect::<Result<Vec<_>>>()?;
    variants
        .iter()
        .zip(values)
        .map(|(s, v)| {
            let r = render_scene(s, grid.clone(), base_dir)?;
            Ok(SweepRow {
                value: v.trim().to_string(),
                stats: image_stats(&r.hdr, s.render.exposure),
                image: r.ldr,
                hdr: r.hdr,
            })
        })
        .collect()
}

/// `sweep`: one PNG per value, `grid.png` and `stats.csv` under `out_dir`.
pub fn cmd_sweep(
    base: &Scene,
    base_dir: &Path,
    axis: SweepAxis,
    values: &[String],
    out_dir: &Path,
    hdr: bool,
    log: &mut impl Write,
) -> Result<Vec<SweepRow>> {
    let rows = run_sweep(base, base_dir, axis, values)?;
    fs::create_dir_all(out_dir)?;
    for r in &rows {
        let stem = format!("{axis}_{}", file_stem(&r.value));
        r.image.save_png(out_dir.join(format!("{stem}.png")))?;
        if hdr {
            save_pfm(&r.hdr, out_dir.join(format!("{stem}.pfm")))?;
        }
        writeln!(
            log,
            "{axis}={} max_lum {:.4} mean_lum {:.4} overexposed {:.4}",
            r.value, r.stats.max_lum, r.stats.mean_lum, r.stats.overexposed_frac
        )?;
    }
    let images: Vec<&LdrImage> = rows.iter().map(|r| &r.image).collect();
    composite_row(&images).save_png(out_dir.join("grid.png"))?;
    fs::write(out_dir.join("stats.csv"), stats_csv(&rows))?;
    Ok(rows)
}

/// `phantom KIND N OUT`: an `N`³ phantom as NRRD.
pub fn cmd_phantom(kind: &str, n: usize, out: &Path) -> Result<VoxelGrid> {
    let kind: PhantomKind = kind
        .parse()
        .map_err(|e: cinevol::Error| CliError::Usage(e.to_string()))?;
    let grid = make_phantom(kind, [n; 3]).map_err(|e| CliError::Usage(e.to_string()))?;
    save_nrrd(&grid, out)?;
    Ok(grid)
}

/// `preset NAME OUT`: a transfer function preset as `.tfcsv`, or a scene
/// preset as `.scene.json`.
pub fn cmd_preset(name: &str, out: &Path) -> Result<()> {
    if let Some(tf) = preset(name) {
        fs::write(out, save_preset_csv(&tf))?;
        return Ok(());
    }
    if let Ok(p) = name.parse::<ScenePreset>() {
        save_scene(&preset_scene(p), out)?;
        return Ok(());
    }
    Err(CliError::Usage(format!("unknown preset `{name}`")))
}
