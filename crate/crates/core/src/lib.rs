//! Cinematic volume rendering for CT data.
//!
//! The crate covers the whole offline pipeline: loading CT volumes
//! ([`volume`]), classifying them with transfer functions ([`classify`]),
//! Disney-style surface reflectance ([`material`]), area, background and
//! cubemap lighting ([`lighting`]), a progressive volumetric path tracer
//! ([`tracer`]), screen-space post effects ([`postfx`]), clip/cut editing
//! ([`edit`]) and the serializable scene description ([`scene`]).

pub mod classify;
pub mod edit;
pub mod error;
pub mod imageio;
pub mod lighting;
pub mod material;
pub mod postfx;
pub mod scene;
pub mod tracer;
pub mod volume;

pub mod math;

pub use error::{Error, Result};
pub use glam::DVec3;
