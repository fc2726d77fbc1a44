//! Display conversion: screen-space ambient occlusion on the first-hit
//! buffers, exposure, Reinhard tone mapping and sRGB encoding.

use glam::{DVec2, DVec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{encode_png, srgb_encode, HdrImage};
use crate::math::{luminance, radical_inverse_2, to_world};
use crate::scene::{generate_ray, Camera};
use crate::tracer::{Framebuffer, RenderSettings};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsaoParams {
    /// Sampling hemisphere radius in mm.
    pub radius: f64,
    pub sample_count: usize,
    /// 0 disables darkening, 1 applies the full occlusion fraction.
    pub strength: f64,
}

impl Default for SsaoParams {
    fn default() -> Self {
        SsaoParams {
            radius: 4.0,
            sample_count: 16,
            strength: 0.6,
        }
    }
}

impl SsaoParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ssao radius must be > 0, got {}",
                self.radius
            )));
        }
        if self.sample_count < 4 {
            return Err(Error::InvalidArgument(format!(
                "ssao sample_count must be >= 4, got {}",
                self.sample_count
            )));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::InvalidArgument(format!(
                "ssao strength must lie in [0, 1], got {}",
                self.strength
            )));
        }
        Ok(())
    }
}

/// 8-bit sRGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LdrImage {
    pub width: usize,
    pub height: usize,
    pub rgb8: Vec<u8>,
}

impl LdrImage {
    pub fn to_png(&self) -> Result<Vec<u8>> {
        encode_png(self.width, self.height, &self.rgb8)
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        std::fs::write(path, self.to_png()?)?;
        Ok(())
    }
}

/// Per-pixel multiplier in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl OcclusionMap {
    pub fn uniform(width: usize, height: usize, v: f64) -> Self {
        OcclusionMap {
            width,
            height,
            values: vec![v; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Mean radiance `accum / iteration_count` as a float image.
pub fn mean_image(fb: &Framebuffer) -> Result<HdrImage> {
    let mean = fb.mean()?;
    let (w, h) = (fb.width(), fb.height());
    Ok(HdrImage::from_fn(w, h, |x, y| mean[y * w + x]))
}

#[inline]
fn tone_channel(v: f64, exposure: f64) -> u8 {
    let x = (v * exposure).max(0.0);
    let r = if x.is_finite() {
        x / (1.0 + x)
    } else if x.is_nan() {
        0.0
    } else {
        1.0
    };
    (srgb_encode(r) * 255.0).round() as u8
}

/// Exposure, Reinhard `x / (1 + x)` per channel, sRGB encode.
pub fn tone_map_image(img: &HdrImage, exposure: f64) -> LdrImage {
    let rgb8 = img
        .data()
        .iter()
        .map(|&v| tone_channel(f64::from(v), exposure))
        .collect();
    LdrImage {
        width: img.width(),
        height: img.height(),
        rgb8,
    }
}

pub fn tone_map(fb: &Framebuffer, exposure: f64) -> Result<LdrImage> {
    Ok(tone_map_image(&mean_image(fb)?, exposure))
}

/// Fixed hemisphere kernel in local coordinates (z up): Hammersley points,
/// cosine distributed, with lengths growing toward the radius so nearby
/// geometry counts more.
fn ssao_kernel(n: usize) -> Vec<DVec3> {
    (0..n)
        .map(|i| {
            let u = DVec2::new((i as f64 + 0.5) / n as f64, radical_inverse_2(i as u32));
            let r = u.x.sqrt();
            let phi = 2.0 * std::f64::consts::PI * u.y;
            // Keep samples off the tangent plane so flat surfaces never self-occlude.
            let z = (1.0 - u.x).sqrt().max(0.15);
            let dir = DVec3::new(r * phi.cos(), r * phi.sin(), z).normalize();
            let t = (i as f64 + 1.0) / n as f64;
            dir * (0.1 + 0.9 * t * t)
        })
        .collect()
}

/// Screen-space ambient occlusion from the framebuffer's first-hit depth and
/// normal buffers. Pixels without a hit map to 1.
pub fn compute_ssao(
    fb: &Framebuffer,
    camera: &Camera,
    params: &SsaoParams,
) -> Result<OcclusionMap> {
    params.validate()?;
    let (w, h) = (fb.width(), fb.height());
    let depth = fb.aux_depth();
    let normals = fb.aux_normal();
    if depth.len() != w * h || normals.len() != w * h {
        return Err(Error::InvalidArgument(
            "framebuffer aux buffers are missing".into(),
        ));
    }
    if params.strength == 0.0 {
        return Ok(OcclusionMap::uniform(w, h, 1.0));
    }
    let kernel = ssao_kernel(params.sample_count);
    let radius = params.radius;
    let bias = 0.05 * radius;
    let mut values = vec![1.0; w * h];
    values.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (x, out) in row.iter_mut().enumerate() {
            let d = depth[y * w + x];
            if !d.is_finite() {
                continue;
            }
            let ray = generate_ray(camera, x, y, DVec2::splat(0.5), w, h);
            let p = ray.at(d);
            let mut n = normals[y * w + x];
            if n.length_squared() < 1e-12 {
                n = -ray.dir;
            }
            let mut occluded = 0.0;
            for k in &kernel {
                let s = p + to_world(*k * radius, n);
                let Some((sx, sy, sd)) = camera.project(s, w, h) else {
                    continue;
                };
                if !(sx >= 0.0 && sy >= 0.0 && sx < w as f64 && sy < h as f64) {
                    continue;
                }
                let stored = depth[sy as usize * w + sx as usize];
                if stored.is_finite() && stored < sd - bias {
                    let range = (radius / (d - stored).abs().max(1e-9)).min(1.0);
                    occluded += range * range * (3.0 - 2.0 * range);
                }
            }
            *out = 1.0 - params.strength * occluded / kernel.len() as f64;
        }
    });
    Ok(OcclusionMap {
        width: w,
        height: h,
        values,
    })
}

/// Multiplies pre-tonemap radiance by the occlusion map.
pub fn apply_ssao(img: &HdrImage, map: &OcclusionMap) -> Result<HdrImage> {
    if img.width() != map.width || img.height() != map.height {
        return Err(Error::InvalidArgument(format!(
            "occlusion map is {}x{}, image is {}x{}",
            map.width,
            map.height,
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    for (px, &o) in out.data_mut().chunks_exact_mut(3).zip(&map.values) {
        let o = o.clamp(0.0, 1.0) as f32;
        for c in px {
            *c *= o;
        }
    }
    Ok(out)
}

/// Final display pipeline: mean radiance, optional SSAO, tone mapping.
/// Returns the HDR image (after SSAO) and its tone-mapped counterpart.
pub fn finish(
    fb: &Framebuffer,
    camera: &Camera,
    settings: &RenderSettings,
) -> Result<(HdrImage, LdrImage)> {
    let mut hdr = mean_image(fb)?;
    if let Some(params) = &settings.ssao {
        hdr = apply_ssao(&hdr, &compute_ssao(fb, camera, params)?)?;
    }
    let ldr = tone_map_image(&hdr, settings.exposure);
    Ok((hdr, ldr))
}

/// Summary statistics of an HDR image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageStats {
    pub max_lum: f64,
    pub mean_lum: f64,
    /// Fraction of pixels whose exposed luminance is at least 0.99.
    pub overexposed_frac: f64,
    pub lum_var: f64,
}

pub fn image_stats(img: &HdrImage, exposure: f64) -> ImageStats {
    let lums: Vec<f64> = img.pixels().map(luminance).collect();
    let n = lums.len().max(1) as f64;
    let mean = lums.iter().sum::<f64>() / n;
    ImageStats {
        max_lum: lums.iter().copied().fold(0.0, f64::max),
        mean_lum: mean,
        overexposed_frac: lums.iter().filter(|&&l| l * exposure >= 0.99).count() as f64 / n,
        lum_var: lums.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rgb;

    fn fb_const(v: f64, w: usize, h: usize) -> Framebuffer {
        let n = w * h;
        Framebuffer::from_parts(
            w,
            h,
            vec![Rgb::splat(v); n],
            vec![f64::INFINITY; n],
            vec![DVec3::ZERO; n],
            1,
        )
        .unwrap()
    }

    #[test]
    fn unit_radiance_maps_to_188() {
        assert!(tone_map(&fb_const(1.0, 2, 2), 1.0)
            .unwrap()
            .rgb8
            .iter()
            .all(|&b| b == 188));
        assert!(tone_map(&fb_const(0.0, 2, 2), 1.0)
            .unwrap()
            .rgb8
            .iter()
            .all(|&b| b == 0));
    }

    #[test]
    fn zero_passes_is_an_error() {
        let fb = Framebuffer::new(2, 2);
        assert!(matches!(tone_map(&fb, 1.0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn extreme_values_give_valid_bytes() {
        let img = HdrImage::from_data(2, 1, vec![f32::MAX, 1e-30, -5.0, f32::INFINITY, 0.5, 1e30])
            .unwrap();
        let ldr = tone_map_image(&img, 1.0);
        assert_eq!(ldr.rgb8, vec![255, 0, 0, 255, tone_channel(0.5, 1.0), 255]);
    }

    #[test]
    fn params_validation() {
        assert!(SsaoParams::default().validate().is_ok());
        assert!(SsaoParams {
            radius: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SsaoParams {
            sample_count: 3,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(SsaoParams {
            strength: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn kernel_is_in_upper_hemisphere_within_unit_ball() {
        for k in ssao_kernel(32) {
            assert!(k.z > 0.0 && k.length() <= 1.0 + 1e-12);
        }
    }
}
