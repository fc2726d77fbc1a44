//! Disney-style principled reflectance restricted to base color, metallic,
//! roughness and specular.
//!
//! Specular is a height-correlated Smith GGX microfacet lobe with Schlick
//! Fresnel (`F0 = lerp(0.08 * specular, base_color, metallic)` at normal
//! incidence). The diffuse lobe is Lambertian, weighted by `1 - metallic` and
//! by the dielectric Fresnel transmittance on both the incoming and outgoing
//! side so the sum stays energy conserving and reciprocal.
//!
//! Sampling picks a lobe in proportion to its Fresnel-weighted albedo. The
//! specular lobe uses visible-normal sampling; reflections that would end up
//! below the horizon are mirrored back above it, which keeps the sampling
//! density normalized over the hemisphere.

use std::f64::consts::{FRAC_1_PI, PI};

use glam::{DVec2, DVec3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, luminance, Rgb};

/// Lower clamp on the roughness parameter; GGX alpha is its square.
pub const MIN_ROUGHNESS: f64 = 1e-3;
const MIN_PDF: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Material {
    pub base_color: Rgb,
    pub metallic: f64,
    pub roughness: f64,
    pub specular: f64,
}

impl Default for Material {
    fn default() -> Self {
        Material {
            base_color: Rgb::splat(0.8),
            metallic: 0.0,
            roughness: 0.5,
            specular: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BsdfSample {
    pub wi: DVec3,
    pub pdf: f64,
    /// `f * |cos| / pdf`
    pub weight: Rgb,
}

impl Material {
    pub fn new(base_color: Rgb, metallic: f64, roughness: f64, specular: f64) -> Result<Self> {
        let m = Material {
            base_color,
            metallic,
            roughness,
            specular,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !(self.base_color.to_array().into_iter().all(unit)
            && unit(self.metallic)
            && unit(self.roughness)
            && unit(self.specular))
        {
            return Err(Error::InvalidArgument(format!(
                "material parameters must lie in [0,1]: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn with_base_color(self, base_color: Rgb) -> Self {
        Material { base_color, ..self }
    }

    pub fn alpha(&self) -> f64 {
        self.roughness.max(MIN_ROUGHNESS).powi(2)
    }

    /// Dielectric Fresnel reflectance: Schlick with `F0 = 0.08`, scaled by
    /// `specular` so that `specular = 0` leaves a pure diffuse dielectric.
    fn dielectric_fresnel(&self, cos: f64) -> f64 {
        self.specular * schlick_scalar(0.08, cos)
    }

    /// Specular Fresnel blended between dielectric and tinted metal. At normal
    /// incidence this is `lerp(0.08 * specular, base_color, metallic)`.
    fn fresnel(&self, cos: f64) -> Rgb {
        Rgb::splat(self.dielectric_fresnel(cos)).lerp(schlick(self.base_color, cos), self.metallic)
    }

    /// Probability of picking the specular lobe for a given outgoing cosine.
    fn specular_probability(&self, cos_o: f64) -> f64 {
        let ws = luminance(self.fresnel(cos_o));
        let wd = (1.0 - self.metallic)
            * luminance(self.base_color)
            * (1.0 - self.dielectric_fresnel(cos_o));
        if ws + wd <= 0.0 {
            0.0
        } else {
            ws / (ws + wd)
        }
    }
}

fn schlick(f0: Rgb, cos: f64) -> Rgb {
    f0 + (Rgb::ONE - f0) * (1.0 - cos).clamp(0.0, 1.0).powi(5)
}

fn schlick_scalar(f0: f64, cos: f64) -> f64 {
    f0 + (1.0 - f0) * (1.0 - cos).clamp(0.0, 1.0).powi(5)
}

/// GGX normal distribution for a local-frame half vector.
fn ggx_d(h: DVec3, a2: f64) -> f64 {
    let sin2 = h.x * h.x + h.y * h.y;
    let denom = sin2 + h.z * h.z * a2;
    a2 / (PI * denom * denom)
}

fn smith_lambda(w: DVec3, a2: f64) -> f64 {
    let tan2 = (w.x * w.x + w.y * w.y) / (w.z * w.z);
    0.5 * (-1.0 + (1.0 + a2 * tan2).sqrt())
}

fn local_frame(wo: DVec3, wi: DVec3, n: DVec3) -> Option<(DVec3, DVec3)> {
    let n = n.try_normalize()?;
    let lo = math::to_local(wo, n);
    let li = math::to_local(wi, n);
    if lo.z <= 0.0 || li.z <= 0.0 {
        None
    } else {
        Some((lo, li))
    }
}

/// BRDF value in sr⁻¹. Zero outside the upper hemisphere of `n`.
pub fn eval_brdf(m: &Material, wo: DVec3, wi: DVec3, n: DVec3) -> Rgb {
    let Some((lo, li)) = local_frame(wo, wi, n) else {
        return Rgb::ZERO;
    };
    let diffuse = (1.0 - m.metallic)
        * m.base_color
        * FRAC_1_PI
        * (1.0 - m.dielectric_fresnel(li.z))
        * (1.0 - m.dielectric_fresnel(lo.z));
    let Some(h) = (lo + li).try_normalize() else {
        return diffuse;
    };
    let a2 = m.alpha() * m.alpha();
    let g2 = 1.0 / (1.0 + smith_lambda(lo, a2) + smith_lambda(li, a2));
    let spec = m.fresnel(li.dot(h)) * (ggx_d(h, a2) * g2 / (4.0 * lo.z * li.z));
    diffuse + spec
}

/// Density of reflecting `lo` about a visible normal, over the full sphere.
fn reflected_vndf_pdf(lo: DVec3, w: DVec3, a2: f64) -> f64 {
    match (lo + w).try_normalize() {
        Some(h) if h.z > 0.0 => ggx_d(h, a2) / ((1.0 + smith_lambda(lo, a2)) * 4.0 * lo.z),
        _ => 0.0,
    }
}

/// Specular sampling folds directions that land below the horizon back
/// across it, so the density over the upper hemisphere is the sum of both.
fn vndf_pdf(lo: DVec3, li: DVec3, a2: f64) -> f64 {
    let mirrored = DVec3::new(li.x, li.y, -li.z);
    reflected_vndf_pdf(lo, li, a2) + reflected_vndf_pdf(lo, mirrored, a2)
}

/// Mixture pdf (solid angle) of [`sample_brdf`].
pub fn pdf_brdf(m: &Material, wo: DVec3, wi: DVec3, n: DVec3) -> f64 {
    let Some((lo, li)) = local_frame(wo, wi, n) else {
        return 0.0;
    };
    let ps = m.specular_probability(lo.z);
    let a2 = m.alpha() * m.alpha();
    let spec = if ps > 0.0 { vndf_pdf(lo, li, a2) } else { 0.0 };
    ps * spec + (1.0 - ps) * li.z * FRAC_1_PI
}

/// Visible-normal GGX sample (Heitz 2018) in the local frame.
fn sample_vndf(lo: DVec3, alpha: f64, u: DVec2) -> DVec3 {
    let vh = DVec3::new(alpha * lo.x, alpha * lo.y, lo.z).normalize();
    let lensq = vh.x * vh.x + vh.y * vh.y;
    let t1 = if lensq > 0.0 {
        DVec3::new(-vh.y, vh.x, 0.0) / lensq.sqrt()
    } else {
        DVec3::X
    };
    let t2 = vh.cross(t1);
    let r = u.x.sqrt();
    let phi = 2.0 * PI * u.y;
    let p1 = r * phi.cos();
    let s = 0.5 * (1.0 + vh.z);
    let p2 = (1.0 - s) * (1.0 - p1 * p1).max(0.0).sqrt() + s * r * phi.sin();
    let nh = p1 * t1 + p2 * t2 + (1.0 - p1 * p1 - p2 * p2).max(0.0).sqrt() * vh;
    DVec3::new(alpha * nh.x, alpha * nh.y, nh.z.max(0.0)).normalize()
}

/// Importance samples an incoming direction. `None` when the sample is
/// numerically degenerate; the caller terminates the path.
pub fn sample_brdf(m: &Material, wo: DVec3, n: DVec3, u: DVec2, lobe_u: f64) -> Option<BsdfSample> {
    let n = n.try_normalize()?;
    let lo = math::to_local(wo, n);
    if lo.z <= 0.0 {
        return None;
    }
    let li = if lobe_u < m.specular_probability(lo.z) {
        let h = sample_vndf(lo, m.alpha(), u);
        let r = math::reflect(lo, h);
        DVec3::new(r.x, r.y, r.z.abs())
    } else {
        math::cosine_hemisphere(u)
    };
    if li.z <= 0.0 {
        return None;
    }
    let wi = math::to_world(li, n).normalize();
    let pdf = pdf_brdf(m, wo, wi, n);
    if !(pdf > MIN_PDF) || !pdf.is_finite() {
        return None;
    }
    let cos = wi.dot(n).max(0.0);
    let weight = eval_brdf(m, wo, wi, n) * cos / pdf;
    if !weight.is_finite() {
        return None;
    }
    Some(BsdfSample { wi, pdf, weight })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn hemi_dir(theta_deg: f64, phi_deg: f64) -> DVec3 {
        let (t, p) = (theta_deg.to_radians(), phi_deg.to_radians());
        DVec3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos())
    }

    #[test]
    fn below_hemisphere_is_zero() {
        let m = Material::default();
        let wo = hemi_dir(30.0, 0.0);
        let wi = DVec3::new(0.3, 0.0, -0.9).normalize();
        assert_eq!(eval_brdf(&m, wo, wi, DVec3::Z), Rgb::ZERO);
        assert_eq!(pdf_brdf(&m, wo, wi, DVec3::Z), 0.0);
        assert_eq!(
            eval_brdf(&m, wo, hemi_dir(10.0, 0.0), DVec3::ZERO),
            Rgb::ZERO
        );
    }

    #[test]
    fn cosine_lobe_pdf_is_analytic() {
        let m = Material::new(Rgb::splat(0.7), 0.0, 0.4, 0.0).unwrap();
        let wo = hemi_dir(40.0, 20.0);
        for t in [0.0, 15.0, 45.0, 80.0] {
            let wi = hemi_dir(t, 200.0);
            assert!((pdf_brdf(&m, wo, wi, DVec3::Z) - wi.z / PI).abs() < 1e-6);
        }
    }

    #[test]
    fn mirror_peak_falls_with_roughness() {
        let n = DVec3::new(0.2, -0.1, 1.0).normalize();
        let wo = math::to_world(hemi_dir(35.0, 10.0), n);
        let wi = math::reflect(wo, n);
        let peaks: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&r| {
                luminance(eval_brdf(
                    &Material::new(Rgb::splat(0.8), 0.5, r, 0.5).unwrap(),
                    wo,
                    wi,
                    n,
                ))
            })
            .collect();
        assert!(peaks[0] > peaks[1] && peaks[1] > peaks[2], "{peaks:?}");
    }

    #[test]
    fn smooth_metal_samples_the_mirror_direction() {
        let m = Material::new(Rgb::ONE, 1.0, 0.0, 0.5).unwrap();
        let mut rng = rand_pcg::Pcg32::seed_from_u64(2);
        let n = DVec3::new(-0.3, 0.5, 0.8).normalize();
        for _ in 0..1000 {
            let wo = math::to_world(
                hemi_dir(rng.random_range(0.0..85.0), rng.random_range(0.0..360.0)),
                n,
            );
            let s = sample_brdf(
                &m,
                wo,
                n,
                DVec2::new(rng.random(), rng.random()),
                rng.random(),
            )
            .unwrap();
            assert!((s.wi - math::reflect(wo, n)).length() < 1e-4);
        }
    }

    #[test]
    fn sample_pdf_matches_pdf_function() {
        let mut rng = rand_pcg::Pcg32::seed_from_u64(3);
        for _ in 0..2000 {
            let m = Material::new(
                Rgb::new(rng.random(), rng.random(), rng.random()),
                rng.random(),
                rng.random(),
                rng.random(),
            )
            .unwrap();
            let wo = hemi_dir(rng.random_range(0.0..89.0), rng.random_range(0.0..360.0));
            if let Some(s) = sample_brdf(
                &m,
                wo,
                DVec3::Z,
                DVec2::new(rng.random(), rng.random()),
                rng.random(),
            ) {
                assert!((s.wi.length() - 1.0).abs() < 1e-6);
                assert!(s.pdf > 0.0 && s.weight.min_element() >= 0.0 && s.weight.is_finite());
                let p = pdf_brdf(&m, wo, s.wi, DVec3::Z);
                assert!(((p - s.pdf) / s.pdf).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_parameters() {
        assert!(Material::new(Rgb::ONE, 1.5, 0.0, 0.0).is_err());
        assert!(Material::new(Rgb::new(0.0, 2.0, 0.0), 0.0, 0.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn reciprocity(base in proptest::array::uniform3(0.0..=1.0f64), metallic in 0.0..=1.0f64,
                       roughness in 0.0..=1.0f64, specular in 0.0..=1.0f64,
                       t1 in 0.0..89.0f64, p1 in 0.0..360.0f64, t2 in 0.0..89.0f64, p2 in 0.0..360.0f64) {
            let m = Material::new(Rgb::from_array(base), metallic, roughness, specular).unwrap();
            let (a, b) = (hemi_dir(t1, p1), hemi_dir(t2, p2));
            let f1 = eval_brdf(&m, a, b, DVec3::Z);
            let f2 = eval_brdf(&m, b, a, DVec3::Z);
            for c in 0..3 {
                let scale = f1[c].abs().max(f2[c].abs()).max(1e-300);
                prop_assert!((f1[c] - f2[c]).abs() / scale < 1e-5);
            }
        }
    }
}
