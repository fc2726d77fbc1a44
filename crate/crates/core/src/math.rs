//! Small shared geometry and sampling helpers.

use std::f64::consts::{FRAC_1_PI, PI};

use glam::{DVec2, DVec3};

/// Linear RGB triple. Shares the vector type so arithmetic stays uniform.
pub type Rgb = DVec3;

pub fn luminance(c: Rgb) -> f64 {
    0.2126 * c.x + 0.7152 * c.y + 0.0722 * c.z
}

/// Orthonormal tangent frame around a unit normal (Duff et al. branchless form).
pub fn tangent_frame(n: DVec3) -> (DVec3, DVec3) {
    let sign = 1.0f64.copysign(n.z);
    let a = -1.0 / (sign + n.z);
    let b = n.x * n.y * a;
    let t = DVec3::new(1.0 + sign * n.x * n.x * a, sign * b, -sign * n.x);
    let bt = DVec3::new(b, sign + n.y * n.y * a, -n.y);
    (t, bt)
}

pub fn to_world(local: DVec3, n: DVec3) -> DVec3 {
    let (t, b) = tangent_frame(n);
    t * local.x + b * local.y + n * local.z
}

pub fn to_local(v: DVec3, n: DVec3) -> DVec3 {
    let (t, b) = tangent_frame(n);
    DVec3::new(v.dot(t), v.dot(b), v.dot(n))
}

pub fn reflect(v: DVec3, n: DVec3) -> DVec3 {
    2.0 * v.dot(n) * n - v
}

/// Cosine-weighted direction in the local frame (z up).
pub fn cosine_hemisphere(u: DVec2) -> DVec3 {
    let r = u.x.sqrt();
    let phi = 2.0 * PI * u.y;
    DVec3::new(r * phi.cos(), r * phi.sin(), (1.0 - u.x).max(0.0).sqrt())
}

pub fn cosine_hemisphere_pdf(cos_theta: f64) -> f64 {
    cos_theta.max(0.0) * FRAC_1_PI
}

pub fn uniform_sphere(u: DVec2) -> DVec3 {
    let z = 1.0 - 2.0 * u.x;
    let r = (1.0 - z * z).max(0.0).sqrt();
    let phi = 2.0 * PI * u.y;
    DVec3::new(r * phi.cos(), r * phi.sin(), z)
}

pub const UNIFORM_SPHERE_PDF: f64 = 1.0 / (4.0 * PI);

/// Van der Corput radical inverse in base 2.
pub fn radical_inverse_2(i: u32) -> f64 {
    f64::from(i.reverse_bits()) / 4_294_967_296.0
}
