#![allow(dead_code)]

use std::sync::Arc;

use cinevol::classify::{build_lut, ControlPoint, TransferFunction};
use cinevol::edit::{ClipPlane, CutRegion};
use cinevol::lighting::{AreaLight, BackgroundLight};
use cinevol::material::Material;
use cinevol::scene::{Camera, Projection};
use cinevol::tracer::{RenderScene, RenderSettings};
use cinevol::volume::VoxelGrid;
use cinevol::DVec3;

/// Opacity whose extinction at density scale 1 is `sigma` (mm⁻¹).
pub fn alpha_for_sigma(sigma: f64) -> f64 {
    1.0 - (-sigma).exp()
}

/// Transfer function with the same color and opacity for every value.
pub fn flat_tf(color: DVec3, alpha: f64) -> TransferFunction {
    let p = |v| ControlPoint::new(v, color.x, color.y, color.z, alpha);
    TransferFunction::with_default_window(vec![p(-2000.0), p(5000.0)]).unwrap()
}

/// Opacity rising linearly from 0 at `lo` to `a_hi` at `hi`, white.
pub fn ramp_tf(lo: f64, hi: f64, a_hi: f64) -> TransferFunction {
    TransferFunction::with_default_window(vec![
        ControlPoint::new(lo, 1.0, 1.0, 1.0, 0.0),
        ControlPoint::new(hi, 1.0, 1.0, 1.0, a_hi),
    ])
    .unwrap()
}

pub fn constant_grid(n: [usize; 3], value: f32) -> VoxelGrid {
    let origin = VoxelGrid::centered_origin(n, DVec3::ONE);
    VoxelGrid::from_fn(n, DVec3::ONE, origin, |_, _, _| value).unwrap()
}

pub fn settings(width: usize, height: usize, iterations: u32, max_bounces: u32) -> RenderSettings {
    RenderSettings {
        width,
        height,
        iterations,
        max_bounces,
        ssao: None,
        ..RenderSettings::default()
    }
}

pub fn front_camera(distance: f64) -> Camera {
    Camera {
        position: DVec3::new(0.0, -distance, 0.0),
        target: DVec3::ZERO,
        up: DVec3::Z,
        projection: Projection::Perspective,
        vertical_fov: 30.0,
        half_height: 10.0,
    }
}

pub struct Builder {
    pub grid: VoxelGrid,
    pub tf: TransferFunction,
    pub material: Material,
    pub lights: Vec<AreaLight>,
    pub background: BackgroundLight,
    pub camera: Camera,
    pub clips: Vec<ClipPlane>,
    pub cut: Option<CutRegion>,
    pub settings: RenderSettings,
}

impl Builder {
    pub fn new(grid: VoxelGrid, tf: TransferFunction) -> Self {
        Builder {
            grid,
            tf,
            material: Material::default(),
            lights: Vec::new(),
            background: BackgroundLight::disabled(),
            camera: front_camera(100.0),
            clips: Vec::new(),
            cut: None,
            settings: settings(16, 16, 1, 8),
        }
    }

    pub fn build(self) -> RenderScene {
        let lut = build_lut(&self.tf, self.settings.lut_size).unwrap();
        RenderScene::new(
            Arc::new(self.grid),
            lut,
            self.material,
            self.lights,
            self.background,
            self.camera,
            self.clips,
            self.cut,
            self.settings,
        )
    }
}

/// Homogeneous medium of extinction `sigma` filling an `n`³ box of 1 mm voxels.
pub fn homogeneous(n: usize, sigma: f64) -> RenderScene {
    Builder::new(
        constant_grid([n; 3], 0.0),
        flat_tf(DVec3::ONE, alpha_for_sigma(sigma)),
    )
    .build()
}
