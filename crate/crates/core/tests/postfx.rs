mod common;

use cinevol::imageio::HdrImage;
use cinevol::material::Material;
use cinevol::math::luminance;
use cinevol::postfx::{
    apply_ssao, compute_ssao, finish, mean_image, tone_map, tone_map_image, OcclusionMap,
    SsaoParams,
};
use cinevol::scene::{generate_ray, Camera, Projection};
use cinevol::tracer::{render, Framebuffer, RenderSettings};
use cinevol::volume::VoxelGrid;
use cinevol::{DVec3, Error};
use common::{ramp_tf, settings, Builder};
use glam::DVec2;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg32;

/// Framebuffer whose aux buffers come from intersecting each pixel-center
/// ray with an analytic surface `hit(origin, dir) -> (t, normal)`.
fn synthetic_fb(
    cam: &Camera,
    w: usize,
    h: usize,
    hit: impl Fn(DVec3, DVec3) -> Option<(f64, DVec3)>,
) -> Framebuffer {
    let mut depth = vec![f64::INFINITY; w * h];
    let mut normal = vec![DVec3::ZERO; w * h];
    for y in 0..h {
        for x in 0..w {
            let r = generate_ray(cam, x, y, DVec2::splat(0.5), w, h);
            if let Some((t, n)) = hit(r.origin, r.dir) {
                depth[y * w + x] = t;
                normal[y * w + x] = n;
            }
        }
    }
    Framebuffer::from_parts(w, h, vec![DVec3::ONE; w * h], depth, normal, 1).unwrap()
}

fn plane_hit(o: DVec3, d: DVec3, n: DVec3, offset: f64) -> Option<f64> {
    let denom = d.dot(n);
    if denom.abs() < 1e-12 {
        return None;
    }
    let t = (offset - o.dot(n)) / denom;
    (t > 0.0).then_some(t)
}

#[test]
fn flat_plane_is_not_occluded() {
    for projection in [Projection::Perspective, Projection::Orthographic] {
        let cam = Camera {
            position: DVec3::new(0.0, 0.0, 80.0),
            target: DVec3::ZERO,
            up: DVec3::Y,
            projection,
            vertical_fov: 40.0,
            half_height: 30.0,
        };
        let fb = synthetic_fb(&cam, 48, 40, |o, d| {
            plane_hit(o, d, DVec3::Z, 0.0).map(|t| (t, DVec3::Z))
        });
        let map = compute_ssao(
            &fb,
            &cam,
            &SsaoParams {
                strength: 1.0,
                ..SsaoParams::default()
            },
        )
        .unwrap();
        let min = map.values.iter().copied().fold(1.0, f64::min);
        assert!(min > 0.95, "{projection:?}: {min}");
    }
}

/// Floor `z = 0` (x >= 0) meeting wall `x = 0` (z >= 0): a 90° concave crease
/// along the y axis, seen from the open side.
fn corner_hit(o: DVec3, d: DVec3) -> Option<(f64, DVec3)> {
    let floor = plane_hit(o, d, DVec3::Z, 0.0)
        .filter(|&t| o.x + t * d.x >= 0.0)
        .map(|t| (t, DVec3::Z));
    let wall = plane_hit(o, d, DVec3::X, 0.0)
        .filter(|&t| o.z + t * d.z >= 0.0)
        .map(|t| (t, DVec3::X));
    match (floor, wall) {
        (Some(a), Some(b)) => Some(if a.0 < b.0 { a } else { b }),
        (a, b) => a.or(b),
    }
}

#[test]
fn concave_corner_is_darker_than_flat_regions() {
    let radius = 4.0;
    for projection in [Projection::Perspective, Projection::Orthographic] {
        let cam = Camera {
            position: DVec3::new(60.0, -10.0, 60.0),
            target: DVec3::new(0.0, 0.0, 0.0),
            up: DVec3::Y,
            projection,
            vertical_fov: 40.0,
            half_height: 25.0,
        };
        let (w, h) = (64, 64);
        let fb = synthetic_fb(&cam, w, h, corner_hit);
        let map = compute_ssao(
            &fb,
            &cam,
            &SsaoParams {
                radius,
                sample_count: 16,
                strength: 1.0,
            },
        )
        .unwrap();
        // Geometric oracle: only points within `radius` of the crease have the
        // other face inside their sampling hemisphere. Pixels near the frame
        // edge are skipped since their samples can fall off screen.
        let mut near = Vec::new();
        let mut far = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = fb.aux_depth()[y * w + x];
                if !d.is_finite() || x < 6 || y < 6 || x >= w - 6 || y >= h - 6 {
                    continue;
                }
                let p = generate_ray(&cam, x, y, DVec2::splat(0.5), w, h).at(d);
                let to_crease = p.x.abs().max(p.z.abs());
                if to_crease < 0.5 * radius {
                    near.push(map.get(x, y));
                } else if to_crease > 1.5 * radius {
                    far.push(map.get(x, y));
                }
            }
        }
        assert!(near.len() > 10 && far.len() > 100, "{projection:?}");
        let near_max = near.iter().copied().fold(0.0, f64::max);
        let far_min = far.iter().copied().fold(1.0, f64::min);
        assert!(
            near_max < far_min,
            "{projection:?}: crease max {near_max}, flat min {far_min}"
        );
    }
}

#[test]
fn background_pixels_map_to_one() {
    let cam = Camera::default();
    let fb = Framebuffer::from_parts(
        8,
        8,
        vec![DVec3::ONE; 64],
        vec![f64::INFINITY; 64],
        vec![DVec3::ZERO; 64],
        1,
    )
    .unwrap();
    let map = compute_ssao(&fb, &cam, &SsaoParams::default()).unwrap();
    assert!(map.values.iter().all(|&v| v == 1.0));
}

#[test]
fn zero_strength_is_identity() {
    let cam = Camera {
        position: DVec3::new(60.0, -10.0, 60.0),
        target: DVec3::ZERO,
        up: DVec3::Y,
        ..Camera::default()
    };
    let fb = synthetic_fb(&cam, 32, 32, corner_hit);
    let map = compute_ssao(
        &fb,
        &cam,
        &SsaoParams {
            strength: 0.0,
            ..SsaoParams::default()
        },
    )
    .unwrap();
    assert!(map.values.iter().all(|&v| v == 1.0));
    let img = mean_image(&fb).unwrap();
    assert_eq!(apply_ssao(&img, &map).unwrap(), img);
}

#[test]
fn ssao_is_deterministic() {
    let cam = Camera {
        position: DVec3::new(60.0, -10.0, 60.0),
        target: DVec3::ZERO,
        up: DVec3::Y,
        ..Camera::default()
    };
    let fb = synthetic_fb(&cam, 40, 30, corner_hit);
    let p = SsaoParams::default();
    assert_eq!(
        compute_ssao(&fb, &cam, &p).unwrap(),
        compute_ssao(&fb, &cam, &p).unwrap()
    );
}

#[test]
fn half_map_halves_every_channel() {
    let mut r = Pcg32::seed_from_u64(3);
    let img = HdrImage::from_fn(17, 9, |_, _| {
        DVec3::new(
            r.random_range(0.0..8.0),
            r.random(),
            r.random_range(0.0..100.0),
        )
    });
    let out = apply_ssao(&img, &OcclusionMap::uniform(17, 9, 0.5)).unwrap();
    for (a, b) in img.data().iter().zip(out.data()) {
        assert_eq!(*b, *a * 0.5);
    }
    assert_eq!(
        apply_ssao(&img, &OcclusionMap::uniform(17, 9, 1.0)).unwrap(),
        img
    );
}

#[test]
fn ssao_never_brightens() {
    let mut r = Pcg32::seed_from_u64(4);
    let img = HdrImage::from_fn(20, 20, |_, _| {
        DVec3::new(r.random(), r.random(), r.random()) * 5.0
    });
    let map = OcclusionMap {
        width: 20,
        height: 20,
        values: (0..400).map(|_| r.random()).collect(),
    };
    let out = apply_ssao(&img, &map).unwrap();
    assert!(img.data().iter().zip(out.data()).all(|(a, b)| b <= a));
}

#[test]
fn mismatched_sizes_are_rejected() {
    let img = HdrImage::new(4, 4);
    assert!(matches!(
        apply_ssao(&img, &OcclusionMap::uniform(4, 5, 1.0)),
        Err(Error::InvalidArgument(_))
    ));
}

#[test]
fn doubling_exposure_never_darkens() {
    let mut r = Pcg32::seed_from_u64(5);
    let img = HdrImage::from_fn(100, 100, |_, _| {
        let scale = 10f64.powf(r.random_range(-4.0..4.0));
        DVec3::new(r.random(), r.random(), r.random()) * scale
    });
    for exposure in [0.25, 1.0, 3.0] {
        let a = tone_map_image(&img, exposure);
        let b = tone_map_image(&img, 2.0 * exposure);
        assert!(a.rgb8.iter().zip(&b.rgb8).all(|(x, y)| y >= x));
    }
}

#[test]
fn tone_map_reference_values() {
    let fb = Framebuffer::from_parts(
        1,
        1,
        vec![DVec3::new(2.0, 0.0, 4.0)],
        vec![f64::INFINITY],
        vec![DVec3::ZERO],
        2,
    )
    .unwrap();
    // Mean (1, 0, 2): Reinhard 0.5 -> 188, 0 -> 0, 2/3 -> sRGB 0.8353 -> 213.
    let srgb = |c: f64| {
        if c <= 0.0031308 {
            12.92 * c
        } else {
            1.055 * c.powf(1.0 / 2.4) - 0.055
        }
    };
    let expect = (srgb(2.0 / 3.0) * 255.0).round() as u8;
    assert_eq!(tone_map(&fb, 1.0).unwrap().rgb8, vec![188, 0, expect]);
}

/// Solid filling `x < 0` or `z < 0` inside a box: an inside corner facing
/// the camera.
fn corner_scene(ssao: Option<SsaoParams>) -> cinevol::tracer::RenderScene {
    let dims = [40, 24, 40];
    let origin = VoxelGrid::centered_origin(dims, DVec3::ONE);
    let grid = VoxelGrid::from_fn(dims, DVec3::ONE, origin, |i, _, k| {
        if i < 20 || k < 20 {
            1000.0
        } else {
            -1000.0
        }
    })
    .unwrap();
    let mut b = Builder::new(grid, ramp_tf(-200.0, 200.0, 0.999));
    b.material = Material::new(DVec3::ONE, 0.0, 1.0, 0.0).unwrap();
    b.background = cinevol::lighting::BackgroundLight::constant(DVec3::splat(0.8));
    b.camera = Camera {
        position: DVec3::new(70.0, -25.0, 70.0),
        target: DVec3::ZERO,
        up: DVec3::Y,
        projection: Projection::Perspective,
        vertical_fov: 35.0,
        half_height: 10.0,
    };
    b.settings = RenderSettings {
        ssao,
        density_scale: 8.0,
        ..settings(48, 48, 8, 3)
    };
    b.build()
}

#[test]
fn ssao_darkens_the_crease_of_a_rendered_corner() {
    let params = SsaoParams {
        radius: 4.0,
        sample_count: 16,
        strength: 0.8,
    };
    let on = corner_scene(Some(params));
    let off = corner_scene(None);
    let mut fb = Framebuffer::new(48, 48);
    render(&on, &on.settings, &mut fb).unwrap();
    let mut fb_off = Framebuffer::new(48, 48);
    render(&off, &off.settings, &mut fb_off).unwrap();
    assert_eq!(fb.accum(), fb_off.accum());
    let (with, _) = finish(&fb, &on.camera, &on.settings).unwrap();
    let (without, _) = finish(&fb_off, &off.camera, &off.settings).unwrap();
    // Crease mask from geometry: first hits within the SSAO radius of the
    // inner edge x = z = 0 (the volume is centered, so the edge sits there).
    let mut lum_on = 0.0;
    let mut lum_off = 0.0;
    let mut count = 0;
    for y in 0..48 {
        for x in 0..48 {
            let d = fb.aux_depth()[y * 48 + x];
            if !d.is_finite() {
                continue;
            }
            let p = generate_ray(&on.camera, x, y, DVec2::splat(0.5), 48, 48).at(d);
            if p.x.abs().max(p.z.abs()) < 3.0 {
                lum_on += luminance(with.get(x, y));
                lum_off += luminance(without.get(x, y));
                count += 1;
            }
        }
    }
    assert!(count > 5, "{count}");
    assert!(lum_on < lum_off, "{lum_on} vs {lum_off}");
}
