//! Transfer functions: HU → color and extinction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rgb;

pub const DEFAULT_LUT_SIZE: usize = 4096;
/// Opacity is capped here before conversion so extinction stays finite.
pub const MAX_OPACITY: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlPoint {
    pub value: f64,
    pub r: f64,
    pub g: f64,
    pub b: f64,
    pub a: f64,
}

impl ControlPoint {
    pub fn new(value: f64, r: f64, g: f64, b: f64, a: f64) -> Self {
        ControlPoint { value, r, g, b, a }
    }

    fn rgba(&self) -> [f64; 4] {
        [self.r, self.g, self.b, self.a]
    }
}

/// Piecewise-linear RGBA mapping over HU with a display window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferFunction {
    pub points: Vec<ControlPoint>,
    pub window_level: f64,
    pub window_width: f64,
}

impl TransferFunction {
    pub fn new(points: Vec<ControlPoint>, window_level: f64, window_width: f64) -> Result<Self> {
        let tf = TransferFunction {
            points,
            window_level,
            window_width,
        };
        tf.validate()?;
        Ok(tf)
    }

    /// Uses a window spanning exactly the control points.
    pub fn with_default_window(points: Vec<ControlPoint>) -> Result<Self> {
        let (lo, hi) = match (points.first(), points.last()) {
            (Some(f), Some(l)) => (f.value, l.value),
            _ => {
                return Err(Error::InvalidTransferFunction(
                    "needs at least 2 control points".into(),
                ))
            }
        };
        Self::new(points, 0.5 * (lo + hi), hi - lo)
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |m: String| Err(Error::InvalidTransferFunction(m));
        if self.points.len() < 2 {
            return invalid(format!(
                "needs at least 2 control points, got {}",
                self.points.len()
            ));
        }
        for p in &self.points {
            if !p.value.is_finite() {
                return invalid("control point value must be finite".into());
            }
            if p.rgba().iter().any(|c| !(0.0..=1.0).contains(c)) {
                return invalid(format!(
                    "channels of point at {} must lie in [0,1]",
                    p.value
                ));
            }
        }
        if let Some(w) = self.points.windows(2).find(|w| w[1].value <= w[0].value) {
            return invalid(format!(
                "control points must be strictly ascending ({} then {})",
                w[0].value, w[1].value
            ));
        }
        if !(self.window_width > 0.0 && self.window_width.is_finite()) {
            return invalid(format!(
                "window width must be > 0, got {}",
                self.window_width
            ));
        }
        if !self.window_level.is_finite() {
            return invalid("window level must be finite".into());
        }
        Ok(())
    }

    /// HU interval covered by the window.
    pub fn window_range(&self) -> (f64, f64) {
        let half = 0.5 * self.window_width;
        (self.window_level - half, self.window_level + half)
    }

    /// Direct piecewise-linear evaluation, clamped to the end points.
    pub fn eval(&self, value: f64) -> [f64; 4] {
        let pts = &self.points;
        if value <= pts[0].value {
            return pts[0].rgba();
        }
        let last = pts[pts.len() - 1];
        if value >= last.value {
            return last.rgba();
        }
        let i = pts.partition_point(|p| p.value <= value);
        let (p0, p1) = (pts[i - 1], pts[i]);
        let t = (value - p0.value) / (p1.value - p0.value);
        let (c0, c1) = (p0.rgba(), p1.rgba());
        [0, 1, 2, 3].map(|c| c0[c] + (c1[c] - c0[c]) * t)
    }
}

/// Normalized window position: `clamp((v - (level - width/2)) / width, 0, 1)`.
pub fn apply_window(tf: &TransferFunction, value: f64) -> f64 {
    ((value - (tf.window_level - 0.5 * tf.window_width)) / tf.window_width).clamp(0.0, 1.0)
}

/// `-ln(1 - min(a, 0.999)) * density_scale`, in mm⁻¹.
pub fn opacity_to_extinction(alpha: f64, density_scale: f64) -> f64 {
    if alpha <= 0.0 {
        return 0.0;
    }
    -(1.0 - alpha.min(MAX_OPACITY)).ln() * density_scale
}

/// Tabulated transfer function over the window interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Lut {
    entries: Vec<[f64; 4]>,
    domain: (f64, f64),
}

pub fn build_lut(tf: &TransferFunction, n: usize) -> Result<Lut> {
    tf.validate()?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "LUT needs at least 2 entries, got {n}"
        )));
    }
    let domain = tf.window_range();
    let step = (domain.1 - domain.0) / (n - 1) as f64;
    let entries = (0..n)
        .map(|i| tf.eval(domain.0 + step * i as f64))
        .collect();
    Ok(Lut { entries, domain })
}

impl Lut {
    pub fn entries(&self) -> &[[f64; 4]] {
        &self.entries
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    /// HU position of entry `i`.
    pub fn entry_value(&self, i: usize) -> f64 {
        let (lo, hi) = self.domain;
        lo + (hi - lo) * i as f64 / (self.entries.len() - 1) as f64
    }

    fn position(&self, value: f64) -> f64 {
        let (lo, hi) = self.domain;
        ((value - lo) / (hi - lo)).clamp(0.0, 1.0) * (self.entries.len() - 1) as f64
    }

    /// RGBA at a HU value, linearly interpolated between entries.
    #[inline]
    pub fn lookup(&self, value: f64) -> [f64; 4] {
        let x = self.position(value);
        let i = (x as usize).min(self.entries.len() - 2);
        let t = x - i as f64;
        let (a, b) = (self.entries[i], self.entries[i + 1]);
        [0, 1, 2, 3].map(|c| a[c] + (b[c] - a[c]) * t)
    }

    #[inline]
    pub fn alpha(&self, value: f64) -> f64 {
        let x = self.position(value);
        let i = (x as usize).min(self.entries.len() - 2);
        let t = x - i as f64;
        self.entries[i][3] + (self.entries[i + 1][3] - self.entries[i][3]) * t
    }

    /// Copy whose fourth channel holds extinction instead of opacity, so
    /// lookups interpolate extinction directly.
    pub fn with_extinction(&self, density_scale: f64) -> Lut {
        let entries = self
            .entries
            .iter()
            .map(|&[r, g, b, a]| [r, g, b, opacity_to_extinction(a, density_scale)])
            .collect();
        Lut {
            entries,
            domain: self.domain,
        }
    }

    /// Largest opacity reachable by interpolated lookups of values in `[lo, hi]`.
    pub fn max_alpha_in(&self, lo: f64, hi: f64) -> f64 {
        let (xl, xh) = (self.position(lo), self.position(hi));
        let mut m = self.alpha(lo).max(self.alpha(hi));
        let first = xl.floor() as usize + 1;
        let last = (xh.ceil() as usize).min(self.entries.len() - 1);
        for e in self.entries.iter().take(last).skip(first) {
            m = m.max(e[3]);
        }
        m
    }

    /// Smallest opacity reachable by interpolated lookups of values in `[lo, hi]`.
    pub fn min_alpha_in(&self, lo: f64, hi: f64) -> f64 {
        let (xl, xh) = (self.position(lo), self.position(hi));
        let mut m = self.alpha(lo).min(self.alpha(hi));
        let first = xl.floor() as usize + 1;
        let last = (xh.ceil() as usize).min(self.entries.len() - 1);
        for e in self.entries.iter().take(last).skip(first) {
            m = m.min(e[3]);
        }
        m
    }

    pub fn max_alpha(&self) -> f64 {
        self.entries.iter().map(|e| e[3]).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifiedSample {
    pub color: Rgb,
    pub sigma_t: f64,
}

pub fn classify(lut: &Lut, value: f64, density_scale: f64) -> ClassifiedSample {
    let [r, g, b, a] = lut.lookup(value);
    ClassifiedSample {
        color: Rgb::new(r, g, b),
        sigma_t: opacity_to_extinction(a, density_scale),
    }
}

const CSV_HEADER: &str = "value,r,g,b,a";

/// Serializes control points plus `#level` / `#width` rows.
pub fn save_preset_csv(tf: &TransferFunction) -> Vec<u8> {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for p in &tf.points {
        s.push_str(&format!("{},{},{},{},{}\n", p.value, p.r, p.g, p.b, p.a));
    }
    s.push_str(&format!(
        "#level,{}\n#width,{}\n",
        tf.window_level, tf.window_width
    ));
    s.into_bytes()
}

pub fn load_preset_csv(bytes: &[u8]) -> Result<TransferFunction> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::PresetParse {
        line: 1,
        msg: "not UTF-8".into(),
    })?;
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')));
    match lines.next() {
        Some((_, h)) if h.trim() == CSV_HEADER => {}
        _ => {
            return Err(Error::PresetParse {
                line: 1,
                msg: format!("expected header `{CSV_HEADER}`"),
            })
        }
    }
    let mut points = Vec::new();
    let (mut level, mut width) = (None, None);
    for (line, row) in lines {
        if row.trim().is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::PresetParse {
            line,
            msg: msg.to_string(),
        };
        let num = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| bad(&format!("`{s}` is not a number")))
        };
        if let Some(meta) = row.strip_prefix('#') {
            let (key, val) = meta
                .split_once(',')
                .ok_or_else(|| bad("metadata row needs `#key,value`"))?;
            match key.trim() {
                "level" => level = Some(num(val)?),
                "width" => width = Some(num(val)?),
                other => return Err(bad(&format!("unknown metadata key `{other}`"))),
            }
            continue;
        }
        let cols: Vec<&str> = row.split(',').collect();
        if cols.len() != 5 {
            return Err(bad(&format!("expected 5 columns, got {}", cols.len())));
        }
        points.push(ControlPoint::new(
            num(cols[0])?,
            num(cols[1])?,
            num(cols[2])?,
            num(cols[3])?,
            num(cols[4])?,
        ));
    }
    match (level, width) {
        (Some(l), Some(w)) => TransferFunction::new(points, l, w),
        (None, None) => TransferFunction::with_default_window(points),
        _ => Err(Error::PresetParse {
            line: 0,
            msg: "`#level` and `#width` must appear together".into(),
        }),
    }
}

pub const PRESET_NAMES: &[&str] = &["cardiac", "soft_tissue", "bone", "vessels"];

/// Built-in presets tuned for contrast CT of the heart and the synthetic phantoms.
pub fn preset(name: &str) -> Option<TransferFunction> {
    let p = ControlPoint::new;
    let points = match name {
        "cardiac" => vec![
            p(-1024.0, 0.0, 0.0, 0.0, 0.0),
            p(-150.0, 0.55, 0.25, 0.2, 0.0),
            p(20.0, 0.75, 0.38, 0.32, 0.5),
            p(150.0, 0.85, 0.2, 0.15, 0.85),
            p(450.0, 0.95, 0.8, 0.75, 0.98),
            p(4095.0, 1.0, 1.0, 1.0, 1.0),
        ],
        "soft_tissue" => vec![
            p(-1024.0, 0.0, 0.0, 0.0, 0.0),
            p(-300.0, 0.8, 0.6, 0.5, 0.0),
            p(40.0, 0.9, 0.65, 0.55, 0.6),
            p(400.0, 1.0, 0.95, 0.9, 0.9),
            p(4095.0, 1.0, 1.0, 1.0, 1.0),
        ],
        "bone" => vec![
            p(-1024.0, 0.0, 0.0, 0.0, 0.0),
            p(200.0, 0.9, 0.85, 0.7, 0.0),
            p(700.0, 0.95, 0.92, 0.85, 0.9),
            p(4095.0, 1.0, 1.0, 1.0, 1.0),
        ],
        "vessels" => vec![
            p(-1024.0, 0.0, 0.0, 0.0, 0.0),
            p(120.0, 0.7, 0.1, 0.1, 0.0),
            p(250.0, 0.85, 0.15, 0.12, 0.9),
            p(600.0, 0.95, 0.9, 0.85, 0.95),
            p(4095.0, 1.0, 1.0, 1.0, 1.0),
        ],
        _ => return None,
    };
    TransferFunction::with_default_window(points).ok()
}
