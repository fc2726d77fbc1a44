//! Progressive volumetric path tracer.
//!
//! Free flights are sampled with delta tracking against a macro-cell
//! majorant grid; shadow rays use residual ratio tracking with a per-cell
//! minorant as control extinction. At every real collision the tracer shades
//! either a surface (Disney BRDF, normal from the HU gradient) or an
//! isotropic scattering event, combining light sampling and BSDF sampling
//! with the balance heuristic.
//!
//! Every pixel of every pass draws from its own PCG stream keyed by
//! `(seed, pixel, pass)`, so output does not depend on scheduling.

use std::ops::ControlFlow;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use glam::{DVec2, DVec3};
use rand::{Rng, RngCore, SeedableRng};
use rand_pcg::Pcg32;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::Lut;
use crate::edit::{clip_ray_interval, ClipPlane, CutRegion};
use crate::error::{Error, Result};
use crate::lighting::{
    background_pdf, eval_background, sample_area_light, sample_background, AreaLight,
    BackgroundLight,
};
use crate::material::{eval_brdf, pdf_brdf, sample_brdf, Material};
use crate::math::{self, luminance, Rgb};
use crate::postfx::SsaoParams;
use crate::scene::{generate_ray, Camera};
use crate::volume::VoxelGrid;

/// Edge length of a majorant macro cell, in voxels.
pub const MACRO_CELL: usize = 8;
/// Russian roulette starts at this bounce.
pub const RR_START: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: DVec3,
    pub dir: DVec3,
    pub t_min: f64,
    pub t_max: f64,
}

impl Ray {
    pub fn new(origin: DVec3, dir: DVec3) -> Self {
        Ray {
            origin,
            dir: dir.normalize(),
            t_min: 0.0,
            t_max: f64::INFINITY,
        }
    }

    pub fn segment(from: DVec3, to: DVec3) -> Self {
        let d = to - from;
        let len = d.length();
        Ray {
            origin: from,
            dir: d / len,
            t_min: 0.0,
            t_max: len,
        }
    }

    #[inline]
    pub fn at(&self, t: f64) -> DVec3 {
        self.origin + self.dir * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderSettings {
    pub width: usize,
    pub height: usize,
    pub iterations: u32,
    pub max_bounces: u32,
    pub seed: u64,
    /// Multiplies extinction derived from opacity (mm⁻¹ per unit `-ln(1-a)`).
    pub density_scale: f64,
    /// Gradient magnitude (HU/mm) above which a collision shades as a surface.
    pub gradient_threshold: f64,
    pub exposure: f64,
    pub lut_size: usize,
    /// Screen-space ambient occlusion; `null` disables it.
    pub ssao: Option<SsaoParams>,
}

impl Default for RenderSettings {
    fn default() -> Self {
        RenderSettings {
            width: 256,
            height: 256,
            iterations: 64,
            max_bounces: 8,
            seed: 0,
            density_scale: 1.0,
            gradient_threshold: 10.0,
            exposure: 1.0,
            lut_size: crate::classify::DEFAULT_LUT_SIZE,
            ssao: Some(SsaoParams::default()),
        }
    }
}

impl RenderSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::scene(format!("render.{field}"), msg));
        if self.width == 0 || self.height == 0 {
            return bad(
                "width",
                format!(
                    "image size must be >= 1, got {}x{}",
                    self.width, self.height
                ),
            );
        }
        if self.iterations == 0 {
            return bad("iterations", "must be >= 1".into());
        }
        if self.max_bounces == 0 {
            return bad("max_bounces", "must be >= 1".into());
        }
        if !(self.density_scale > 0.0 && self.density_scale.is_finite()) {
            return bad(
                "density_scale",
                format!("must be > 0, got {}", self.density_scale),
            );
        }
        if !(self.gradient_threshold >= 0.0) {
            return bad(
                "gradient_threshold",
                format!("must be >= 0, got {}", self.gradient_threshold),
            );
        }
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return bad("exposure", format!("must be > 0, got {}", self.exposure));
        }
        if self.lut_size < 2 {
            return bad("lut_size", format!("must be >= 2, got {}", self.lut_size));
        }
        if let Some(s) = &self.ssao {
            s.validate()
                .map_err(|e| Error::scene("render.ssao", e.to_string()))?;
        }
        Ok(())
    }
}

/// Per-macro-cell extinction bounds (mm⁻¹).
#[derive(Debug, Clone, PartialEq)]
pub struct MajorantGrid {
    cells: [usize; 3],
    max: Vec<f64>,
    min: Vec<f64>,
}

impl MajorantGrid {
    pub fn cells(&self) -> [usize; 3] {
        self.cells
    }

    #[inline]
    fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.cells[0] * (c[1] + self.cells[1] * c[2])
    }

    pub fn majorant(&self, c: [usize; 3]) -> f64 {
        self.max[self.index(c)]
    }

    pub fn minorant(&self, c: [usize; 3]) -> f64 {
        self.min[self.index(c)]
    }

    pub fn majorants(&self) -> &[f64] {
        &self.max
    }
}

/// Bounds extinction over each 8³ cell. A cell owns the points whose nearest
/// voxel it contains; trilinear lookups there read one extra voxel on each
/// side, so the HU range includes that border.
pub fn precompute_majorant(
    grid: &VoxelGrid,
    lut: &Lut,
    density_scale: f64,
    cut: Option<&CutRegion>,
) -> MajorantGrid {
    cell_bounds(grid, &lut.with_extinction(density_scale), cut)
}

fn cell_bounds(grid: &VoxelGrid, sigma: &Lut, cut: Option<&CutRegion>) -> MajorantGrid {
    let dims = grid.dims();
    let cells = dims.map(|d| d.div_ceil(MACRO_CELL));
    let n = cells[0] * cells[1] * cells[2];
    let per_cell: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let c = [
                idx % cells[0],
                (idx / cells[0]) % cells[1],
                idx / (cells[0] * cells[1]),
            ];
            let own = |a: usize| (c[a] * MACRO_CELL, ((c[a] + 1) * MACRO_CELL).min(dims[a]));
            let support = |a: usize| {
                let (lo, hi) = own(a);
                (lo.saturating_sub(1), (hi + 1).min(dims[a]))
            };
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            let (sx, sy, sz) = (support(0), support(1), support(2));
            for k in sz.0..sz.1 {
                for j in sy.0..sy.1 {
                    for i in sx.0..sx.1 {
                        let v = f64::from(grid.get(i, j, k));
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
            let (mut any_cut, mut all_cut) = (false, true);
            if let Some(cut) = cut {
                let (ox, oy, oz) = (own(0), own(1), own(2));
                for k in oz.0..oz.1 {
                    for j in oy.0..oy.1 {
                        for i in ox.0..ox.1 {
                            let m = cut.is_cut(i, j, k);
                            any_cut |= m;
                            all_cut &= m;
                        }
                    }
                }
            } else {
                all_cut = false;
            }
            if all_cut {
                return (0.0, 0.0);
            }
            let max = sigma.max_alpha_in(lo, hi);
            let min = if any_cut {
                0.0
            } else {
                sigma.min_alpha_in(lo, hi)
            };
            (max, min)
        })
        .collect();
    MajorantGrid {
        cells,
        max: per_cell.iter().map(|p| p.0).collect(),
        min: per_cell.iter().map(|p| p.1).collect(),
    }
}

/// A scene resolved for rendering: volume, LUT, lights and edits. Derived
/// tables are built in [`RenderScene::new`]; build a new value rather than
/// changing `lut`, `grid`, `cut` or `settings.density_scale` in place.
#[derive(Debug, Clone)]
pub struct RenderScene {
    pub grid: Arc<VoxelGrid>,
    pub lut: Lut,
    pub material: Material,
    /// Enabled area lights only.
    pub area_lights: Vec<AreaLight>,
    pub background: BackgroundLight,
    pub camera: Camera,
    /// Enabled clip planes only.
    pub clip_planes: Vec<ClipPlane>,
    pub cut: Option<CutRegion>,
    pub settings: RenderSettings,
    /// `lut` with extinction (mm⁻¹) in place of opacity.
    sigma_lut: Lut,
    /// NEE stream per area light, keyed by geometry so a light keeps its
    /// samples when other lights are added or removed.
    light_streams: Vec<u64>,
    majorant: MajorantGrid,
}

impl RenderScene {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: Arc<VoxelGrid>,
        lut: Lut,
        material: Material,
        area_lights: Vec<AreaLight>,
        background: BackgroundLight,
        camera: Camera,
        clip_planes: Vec<ClipPlane>,
        cut: Option<CutRegion>,
        settings: RenderSettings,
    ) -> Self {
        let sigma_lut = lut.with_extinction(settings.density_scale);
        let majorant = cell_bounds(&grid, &sigma_lut, cut.as_ref());
        let area_lights: Vec<AreaLight> = area_lights.into_iter().filter(|l| l.enabled).collect();
        let light_streams = light_streams(&area_lights);
        RenderScene {
            grid,
            lut,
            material,
            area_lights,
            background,
            camera,
            clip_planes: clip_planes.into_iter().filter(|c| c.enabled).collect(),
            cut,
            settings,
            sigma_lut,
            light_streams,
            majorant,
        }
    }

    pub fn majorant(&self) -> &MajorantGrid {
        &self.majorant
    }

    /// Extinction at a point, zero where cut. Clipping is handled on ray
    /// intervals before any lookup.
    #[inline]
    pub fn sigma_t(&self, p: DVec3) -> f64 {
        if self.is_cut(p) {
            return 0.0;
        }
        self.sigma_lut.alpha(f64::from(self.grid.sample(p)))
    }

    #[inline]
    fn is_cut(&self, p: DVec3) -> bool {
        match &self.cut {
            Some(cut) => self
                .grid
                .voxel_at(p)
                .is_some_and(|[i, j, k]| cut.is_cut(i, j, k)),
            None => false,
        }
    }

    fn classify_at(&self, p: DVec3) -> (Rgb, f64) {
        if self.is_cut(p) {
            return (Rgb::ZERO, 0.0);
        }
        let [r, g, b, sigma] = self.sigma_lut.lookup(f64::from(self.grid.sample(p)));
        (Rgb::new(r, g, b), sigma)
    }

    /// Walks the macro cells crossed by `ray` within `[t0, t1]`, after box
    /// and clip-plane clipping, calling `f(cell, ta, tb)` per segment.
    fn walk<B>(
        &self,
        ray: &Ray,
        f: impl FnMut([usize; 3], f64, f64) -> ControlFlow<B>,
    ) -> Option<B> {
        let Some((t0, t1)) =
            clip_ray_interval(ray.origin, ray.dir, ray.t_min, ray.t_max, &self.clip_planes)
        else {
            return None;
        };
        walk_cells(&self.grid, self.majorant.cells, ray, t0, t1, f)
    }
}

/// 3D DDA over macro cells in voxel-footprint coordinates, where voxel `i`
/// spans `[i, i+1]` and cell `c` spans `[8c, 8c+8]`.
fn walk_cells<B>(
    grid: &VoxelGrid,
    cells: [usize; 3],
    ray: &Ray,
    t0: f64,
    t1: f64,
    mut f: impl FnMut([usize; 3], f64, f64) -> ControlFlow<B>,
) -> Option<B> {
    let dims = grid.dims();
    let q0 = grid.world_to_voxel(ray.origin) + 0.5;
    let dq = ray.dir / grid.spacing();
    let (mut ta, mut tb) = (t0, t1);
    for a in 0..3 {
        let hi = dims[a] as f64;
        if dq[a] == 0.0 {
            if !(q0[a] >= 0.0 && q0[a] <= hi) {
                return None;
            }
            continue;
        }
        let (mut e0, mut e1) = ((0.0 - q0[a]) / dq[a], (hi - q0[a]) / dq[a]);
        if e0 > e1 {
            std::mem::swap(&mut e0, &mut e1);
        }
        ta = ta.max(e0);
        tb = tb.min(e1);
    }
    if !(ta < tb) {
        return None;
    }
    let cell_size = MACRO_CELL as f64;
    let entry = q0 + dq * ta;
    let mut cell = [0usize; 3];
    let mut t_next = DVec3::splat(f64::INFINITY);
    let mut t_delta = DVec3::splat(f64::INFINITY);
    let mut step = [0i64; 3];
    for a in 0..3 {
        let c = ((entry[a] / cell_size).floor().max(0.0) as usize).min(cells[a] - 1);
        cell[a] = c;
        if dq[a] > 0.0 {
            step[a] = 1;
            t_next[a] = ((c + 1) as f64 * cell_size - q0[a]) / dq[a];
            t_delta[a] = cell_size / dq[a];
        } else if dq[a] < 0.0 {
            step[a] = -1;
            t_next[a] = (c as f64 * cell_size - q0[a]) / dq[a];
            t_delta[a] = -cell_size / dq[a];
        }
    }
    let mut t = ta;
    loop {
        let axis = if t_next.x <= t_next.y && t_next.x <= t_next.z {
            0
        } else if t_next.y <= t_next.z {
            1
        } else {
            2
        };
        let end = t_next[axis].min(tb);
        if end > t {
            if let ControlFlow::Break(b) = f(cell, t, end) {
                return Some(b);
            }
        }
        if t_next[axis] >= tb {
            return None;
        }
        t = end;
        let next = cell[axis] as i64 + step[axis];
        if next < 0 || next >= cells[axis] as i64 {
            return None;
        }
        cell[axis] = next as usize;
        t_next[axis] += t_delta[axis];
    }
}

/// A real collision found by delta tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub t: f64,
    pub position: DVec3,
    pub color: Rgb,
    pub sigma_t: f64,
    pub gradient: DVec3,
    pub gradient_magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FreeFlight {
    Escaped,
    Interaction(Interaction),
}

#[inline]
fn exp_sample(rng: &mut impl RngCore, rate: f64) -> f64 {
    rng.sample::<f64, _>(rand_distr::Exp1) / rate
}

/// Woodcock tracking: tentative collisions at the cell majorant rate,
/// accepted with probability `sigma_t / majorant`.
pub fn sample_free_flight(scene: &RenderScene, ray: &Ray, rng: &mut impl RngCore) -> FreeFlight {
    let hit = scene.walk(ray, |cell, ta, tb| {
        let m = scene.majorant.majorant(cell);
        if m <= 0.0 {
            return ControlFlow::Continue(());
        }
        let mut t = ta;
        loop {
            t += exp_sample(rng, m);
            if t >= tb {
                return ControlFlow::Continue(());
            }
            let p = ray.at(t);
            let (color, sigma_t) = scene.classify_at(p);
            if rng.random::<f64>() * m < sigma_t {
                return ControlFlow::Break((t, p, color, sigma_t));
            }
        }
    });
    match hit {
        None => FreeFlight::Escaped,
        Some((t, position, color, sigma_t)) => {
            let gradient = scene.grid.gradient(position);
            FreeFlight::Interaction(Interaction {
                t,
                position,
                color,
                sigma_t,
                gradient,
                gradient_magnitude: gradient.length(),
            })
        }
    }
}

/// Residual ratio tracking estimate of transmittance from `x` to `y`.
pub fn transmittance(scene: &RenderScene, x: DVec3, y: DVec3, rng: &mut impl RngCore) -> f64 {
    if x == y {
        return 1.0;
    }
    transmittance_along(scene, &Ray::segment(x, y), rng)
}

fn transmittance_along(scene: &RenderScene, ray: &Ray, rng: &mut impl RngCore) -> f64 {
    let mut tr = 1.0;
    let zero = scene.walk(ray, |cell, ta, tb| {
        let (max, min) = (scene.majorant.majorant(cell), scene.majorant.minorant(cell));
        if min > 0.0 {
            tr *= (-min * (tb - ta)).exp();
        }
        let residual = max - min;
        if residual > 0.0 {
            let mut t = ta;
            loop {
                t += exp_sample(rng, residual);
                if t >= tb {
                    break;
                }
                tr *= 1.0 - (scene.sigma_t(ray.at(t)) - min) / residual;
            }
        }
        if tr <= 0.0 {
            return ControlFlow::Break(());
        }
        // Unbiased early exit once little light remains.
        if tr < 0.05 {
            if rng.random::<f64>() < 0.5 {
                return ControlFlow::Break(());
            }
            tr *= 2.0;
        }
        ControlFlow::Continue(())
    });
    if zero.is_some() {
        0.0
    } else {
        tr
    }
}

/// First real interaction along the primary ray, for the aux buffers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FirstHit {
    pub depth: f64,
    pub normal: DVec3,
}

/// Scattering behavior at a collision.
enum Vertex {
    Surface { material: Material, normal: DVec3 },
    Medium { albedo: Rgb },
}

impl Vertex {
    fn eval(&self, wo: DVec3, wi: DVec3) -> (Rgb, f64) {
        match self {
            Vertex::Surface { material, normal } => (
                eval_brdf(material, wo, wi, *normal) * wi.dot(*normal).max(0.0),
                pdf_brdf(material, wo, wi, *normal),
            ),
            Vertex::Medium { albedo } => {
                (*albedo * math::UNIFORM_SPHERE_PDF, math::UNIFORM_SPHERE_PDF)
            }
        }
    }

    /// Returns `(wi, throughput weight, pdf)`.
    fn sample(
        &self,
        wo: DVec3,
        rng: &mut impl RngCore,
        fixed: Option<&PrimarySamples>,
    ) -> Option<(DVec3, Rgb, f64)> {
        let u = fixed.map_or_else(|| DVec2::new(rng.random(), rng.random()), |p| p.scatter);
        let lobe_u = rng.random();
        match self {
            Vertex::Surface { material, normal } => {
                let s = sample_brdf(material, wo, *normal, u, lobe_u)?;
                Some((s.wi, s.weight, s.pdf))
            }
            Vertex::Medium { albedo } => {
                Some((math::uniform_sphere(u), *albedo, math::UNIFORM_SPHERE_PDF))
            }
        }
    }
}

fn balance(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        0.0
    } else {
        a / (a + b)
    }
}

/// Light sampling at a vertex: one sample per enabled area light and one for
/// the background, each MIS-weighted against the vertex's own sampling.
/// `fixed` replaces the random light sample with a rotated stratified point.
fn direct_light(
    scene: &RenderScene,
    x: DVec3,
    wo: DVec3,
    v: &Vertex,
    light_seed: u64,
    fixed: Option<DVec2>,
) -> Rgb {
    let light_u = |stream: u64, rng: &mut Pcg32| match fixed {
        Some(u) => rotate(u, stream),
        None => DVec2::new(rng.random(), rng.random()),
    };
    let mut sum = Rgb::ZERO;
    for (i, light) in scene.area_lights.iter().enumerate() {
        let stream = scene.light_streams[i];
        let mut rng = Pcg32::new(light_seed, stream);
        let ls = sample_area_light(light, x, light_u(stream, &mut rng));
        if ls.radiance == Rgb::ZERO {
            continue;
        }
        let (f, pdf) = v.eval(wo, ls.wi);
        if f == Rgb::ZERO {
            continue;
        }
        let tr = transmittance_along(
            scene,
            &Ray {
                origin: x,
                dir: ls.wi,
                t_min: 0.0,
                t_max: ls.distance,
            },
            &mut rng,
        );
        if tr > 0.0 {
            sum += f * ls.radiance * (tr * balance(ls.pdf, pdf) / ls.pdf);
        }
    }
    if scene.background.is_active() {
        let mut rng = Pcg32::new(light_seed, 0);
        if let Ok(ls) = sample_background(&scene.background, light_u(0, &mut rng)) {
            let (f, pdf) = v.eval(wo, ls.wi);
            if f != Rgb::ZERO && ls.radiance != Rgb::ZERO {
                let tr = transmittance_along(scene, &Ray::new(x, ls.wi), &mut rng);
                if tr > 0.0 {
                    sum += f * ls.radiance * (tr * balance(ls.pdf, pdf) / ls.pdf);
                }
            }
        }
    }
    sum
}

/// Area-light emission picked up by a BSDF-sampled segment `[0, t_end)`.
/// Lights are transparent emitters, matching light sampling which never
/// tests them for occlusion.
fn emission_along(scene: &RenderScene, ray: &Ray, t_end: f64, bsdf_pdf: f64) -> Rgb {
    let mut sum = Rgb::ZERO;
    for light in &scene.area_lights {
        if let Some(t) = light.intersect(ray.origin, ray.dir) {
            if t < t_end {
                let le = light.emitted(ray.dir);
                if le != Rgb::ZERO {
                    sum += le * balance(bsdf_pdf, light.pdf(ray.dir, t));
                }
            }
        }
    }
    sum
}

/// Estimates radiance arriving along `ray`. Emission from tissue is zero.
pub fn trace_path(
    scene: &RenderScene,
    ray: Ray,
    rng: &mut impl RngCore,
) -> (Rgb, Option<FirstHit>) {
    trace_path_with(scene, ray, rng, None)
}

/// Like [`trace_path`], taking the first vertex's light and scattering
/// samples from `primary` when given.
pub fn trace_path_with(
    scene: &RenderScene,
    ray: Ray,
    rng: &mut impl RngCore,
    primary: Option<&PrimarySamples>,
) -> (Rgb, Option<FirstHit>) {
    let max_bounces = scene.settings.max_bounces;
    let g_min = scene.settings.gradient_threshold;
    let mut radiance = Rgb::ZERO;
    let mut beta = Rgb::ONE;
    let mut ray = ray;
    let mut first_hit = None;
    // Solid-angle pdf of the direction that produced `ray`; `None` for camera rays.
    let mut last_pdf: Option<f64> = None;
    let mut bounce = 0u32;
    loop {
        let flight = sample_free_flight(scene, &ray, rng);
        if let Some(pdf) = last_pdf {
            let t_end = match flight {
                FreeFlight::Interaction(it) => it.t,
                FreeFlight::Escaped => f64::INFINITY,
            };
            radiance += beta * emission_along(scene, &ray, t_end, pdf);
        }
        let it = match flight {
            FreeFlight::Escaped => {
                let le = eval_background(&scene.background, ray.dir);
                let w = match last_pdf {
                    None => 1.0,
                    Some(pdf) => balance(pdf, background_pdf(&scene.background, ray.dir)),
                };
                radiance += beta * le * w;
                break;
            }
            FreeFlight::Interaction(it) => it,
        };
        let wo = -ray.dir;
        let normal = if it.gradient_magnitude > 0.0 {
            let n = -it.gradient / it.gradient_magnitude;
            if n.dot(wo) < 0.0 {
                -n
            } else {
                n
            }
        } else {
            DVec3::ZERO
        };
        if bounce == 0 {
            first_hit = Some(FirstHit {
                depth: it.t,
                normal,
            });
        }
        if bounce >= max_bounces {
            break;
        }
        let vertex = if it.gradient_magnitude >= g_min && it.gradient_magnitude > 0.0 {
            Vertex::Surface {
                material: scene
                    .material
                    .with_base_color(scene.material.base_color * it.color),
                normal,
            }
        } else {
            Vertex::Medium { albedo: it.color }
        };
        let fixed = primary.filter(|_| bounce == 0);
        let light_seed = rng.next_u64();
        radiance += beta
            * direct_light(
                scene,
                it.position,
                wo,
                &vertex,
                light_seed,
                fixed.map(|p| p.light),
            );
        let Some((wi, weight, pdf)) = vertex.sample(wo, rng, fixed) else {
            break;
        };
        beta *= weight;
        if beta == Rgb::ZERO {
            break;
        }
        bounce += 1;
        if bounce >= RR_START {
            let survive = luminance(beta).clamp(0.05, 1.0);
            if rng.random::<f64>() >= survive {
                break;
            }
            beta /= survive;
        }
        ray = Ray::new(it.position, wi);
        last_pdf = Some(pdf);
    }
    (radiance, first_hit)
}

/// HDR accumulation with first-hit auxiliary buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Framebuffer {
    width: usize,
    height: usize,
    accum: Vec<Rgb>,
    aux_depth: Vec<f64>,
    aux_normal: Vec<DVec3>,
    iteration_count: u32,
    nonfinite: u64,
}

impl Framebuffer {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Framebuffer {
            width,
            height,
            accum: vec![Rgb::ZERO; n],
            aux_depth: vec![f64::INFINITY; n],
            aux_normal: vec![DVec3::ZERO; n],
            iteration_count: 0,
            nonfinite: 0,
        }
    }

    /// Builds a framebuffer from existing buffers (tests, post effects).
    pub fn from_parts(
        width: usize,
        height: usize,
        accum: Vec<Rgb>,
        aux_depth: Vec<f64>,
        aux_normal: Vec<DVec3>,
        iteration_count: u32,
    ) -> Result<Self> {
        let n = width * height;
        if accum.len() != n || aux_depth.len() != n || aux_normal.len() != n {
            return Err(Error::InvalidArgument(format!(
                "buffers do not match {width}x{height}"
            )));
        }
        if accum.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidArgument(
                "accumulation buffer must be finite".into(),
            ));
        }
        Ok(Framebuffer {
            width,
            height,
            accum,
            aux_depth,
            aux_normal,
            iteration_count,
            nonfinite: 0,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn accum(&self) -> &[Rgb] {
        &self.accum
    }

    pub fn aux_depth(&self) -> &[f64] {
        &self.aux_depth
    }

    pub fn aux_normal(&self) -> &[DVec3] {
        &self.aux_normal
    }

    pub fn iteration_count(&self) -> u32 {
        self.iteration_count
    }

    /// Number of non-finite path contributions dropped so far.
    pub fn nonfinite_count(&self) -> u64 {
        self.nonfinite
    }

    /// Per-pixel mean radiance.
    pub fn mean(&self) -> Result<Vec<Rgb>> {
        if self.iteration_count == 0 {
            return Err(Error::InvalidArgument(
                "framebuffer has no completed passes".into(),
            ));
        }
        let inv = 1.0 / f64::from(self.iteration_count);
        Ok(self.accum.iter().map(|c| *c * inv).collect())
    }

    /// Pixels whose primary ray met tissue in the first pass.
    pub fn covered_pixels(&self) -> usize {
        self.aux_depth.iter().filter(|d| d.is_finite()).count()
    }

    pub fn reset(&mut self) {
        *self = Framebuffer::new(self.width, self.height);
    }
}

/// Stream ids from each light's center and edges. Radiance is left out so
/// scaling a light reuses its samples, and identical lights draw identical
/// samples. Never 0, which the background uses.
fn light_streams(lights: &[AreaLight]) -> Vec<u64> {
    lights
        .iter()
        .map(|l| {
            let mut h = 0x1F3D_5B79_u64;
            for v in [l.center, l.edge_u, l.edge_v] {
                for c in v.to_array() {
                    h = splitmix64(h ^ c.to_bits());
                }
            }
            h.max(1)
        })
        .collect()
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one pixel in one pass.
pub fn pixel_rng(seed: u64, pixel: u64, pass: u32) -> Pcg32 {
    let h = splitmix64(splitmix64(splitmix64(seed) ^ pixel) ^ u64::from(pass));
    Pcg32::seed_from_u64(h)
}

/// Stratified sub-pixel offset: an R2 low-discrepancy sequence over passes,
/// shifted per pixel (Cranley–Patterson rotation).
pub fn pixel_jitter(seed: u64, pixel: u64, pass: u32) -> DVec2 {
    const G: f64 = 1.324_717_957_244_746;
    let h = splitmix64(splitmix64(seed ^ 0xA5A5_5A5A_DEAD_BEEF) ^ pixel);
    let shift = DVec2::new(
        (h >> 11) as f64 / (1u64 << 53) as f64,
        (h & 0xFFFF_FFFF) as f64 / 4_294_967_296.0,
    );
    let k = f64::from(pass) + 1.0;
    DVec2::new((shift.x + k / G).fract(), (shift.y + k / (G * G)).fract())
}

/// Stratified sample values for the first vertex of a path. Later vertices
/// draw from the path rng.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrimarySamples {
    /// Light sample, rotated per light before use.
    pub light: DVec2,
    /// BSDF or phase direction sample.
    pub scatter: DVec2,
}

fn unit_f64(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Toroidal shift of `u` keyed on a light stream, so each light sees its own
/// stratified points and identical lights see the same ones.
fn rotate(u: DVec2, stream: u64) -> DVec2 {
    let h = splitmix64(stream ^ 0x6C8E_9CF5_7093_2BD5);
    let s = DVec2::new(unit_f64(h), unit_f64(splitmix64(h)));
    DVec2::new((u.x + s.x).fract(), (u.y + s.y).fract())
}

/// Hash-based nested uniform (Owen) scramble of a base-2 fraction.
fn owen_scramble(x: u32, seed: u32) -> u32 {
    let mut x = x.reverse_bits().wrapping_add(seed);
    x ^= x.wrapping_mul(0x6C50_B47C);
    x ^= x.wrapping_mul(0xB82F_1E52);
    x ^= x.wrapping_mul(0xC7AF_E638);
    x ^= x.wrapping_mul(0x8D22_F6E6);
    x.reverse_bits()
}

/// First two Sobol' dimensions at `index`, each Owen-scrambled with its own
/// seed drawn from `h`.
fn scrambled_sobol(index: u32, h: u64) -> DVec2 {
    let (mut a, mut b) = (0u32, 0u32);
    let (mut va, mut vb) = (1u32 << 31, 1u32 << 31);
    let mut i = index;
    while i != 0 {
        if i & 1 == 1 {
            a ^= va;
            b ^= vb;
        }
        i >>= 1;
        va >>= 1;
        vb ^= vb >> 1;
    }
    let unit = |x: u32| f64::from(x) / 4_294_967_296.0;
    DVec2::new(
        unit(owen_scramble(a, h as u32)),
        unit(owen_scramble(b, (h >> 32) as u32)),
    )
}

/// First-vertex samples for one pixel in one pass. Each pair is a Sobol'
/// sequence over passes with independent per-pixel scrambles, so every
/// power-of-two run of passes stratifies it.
pub fn primary_samples(seed: u64, pixel: u64, pass: u32) -> PrimarySamples {
    let h = splitmix64(splitmix64(seed ^ 0x3C6E_F372_FE94_F82B) ^ pixel);
    PrimarySamples {
        light: scrambled_sobol(pass, splitmix64(h)),
        scatter: scrambled_sobol(pass, splitmix64(h ^ 1)),
    }
}

/// Renders one full-frame pass into `fb` with pass index `fb.iteration_count()`.
pub fn render_pass(scene: &RenderScene, seed: u64, fb: &mut Framebuffer) {
    let (w, h) = (fb.width, fb.height);
    let pass = fb.iteration_count;
    let first = pass == 0;
    let nonfinite = AtomicU64::new(0);
    fb.accum
        .par_chunks_mut(w)
        .zip(fb.aux_depth.par_chunks_mut(w))
        .zip(fb.aux_normal.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((acc, depth), normal))| {
            for x in 0..w {
                let pixel = (y * w + x) as u64;
                let mut rng = pixel_rng(seed, pixel, pass);
                let jitter = pixel_jitter(seed, pixel, pass);
                let ray = generate_ray(&scene.camera, x, y, jitter, w, h);
                let primary = primary_samples(seed, pixel, pass);
                let (l, hit) = trace_path_with(scene, ray, &mut rng, Some(&primary));
                if l.is_finite() && l.min_element() >= 0.0 {
                    acc[x] += l;
                } else {
                    nonfinite.fetch_add(1, Ordering::Relaxed);
                }
                if first {
                    if let Some(hit) = hit {
                        depth[x] = hit.depth;
                        normal[x] = hit.normal;
                    }
                }
            }
        });
    fb.nonfinite += nonfinite.into_inner();
    fb.iteration_count += 1;
}

/// Runs `settings.iterations` passes. `fb` must be empty or match the size.
pub fn render(scene: &RenderScene, settings: &RenderSettings, fb: &mut Framebuffer) -> Result<()> {
    render_with(scene, settings, fb, |_| ControlFlow::Continue(()))
}

/// Like [`render`], calling `on_pass` after every pass; `Break` stops early.
pub fn render_with(
    scene: &RenderScene,
    settings: &RenderSettings,
    fb: &mut Framebuffer,
    mut on_pass: impl FnMut(&Framebuffer) -> ControlFlow<()>,
) -> Result<()> {
    if fb.width * fb.height == 0 {
        *fb = Framebuffer::new(settings.width, settings.height);
    }
    if fb.width != settings.width || fb.height != settings.height {
        return Err(Error::InvalidArgument(format!(
            "framebuffer is {}x{} but settings ask for {}x{}",
            fb.width, fb.height, settings.width, settings.height
        )));
    }
    for _ in 0..settings.iterations {
        render_pass(scene, settings.seed, fb);
        if on_pass(fb).is_break() {
            break;
        }
    }
    Ok(())
}
