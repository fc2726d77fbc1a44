//! HDR float images, PFM and PNG codecs, sRGB transfer curves.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rgb;

/// Linear RGB float image, row 0 at the top.
#[derive(Debug, Clone, PartialEq)]
pub struct HdrImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl HdrImage {
    pub fn new(width: usize, height: usize) -> Self {
        HdrImage {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidArgument(format!(
                "{width}x{height} RGB image needs {} floats, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(HdrImage {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut img = HdrImage::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        Rgb::new(
            self.data[i].into(),
            self.data[i + 1].into(),
            self.data[i + 2].into(),
        )
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i] = c.x as f32;
        self.data[i + 1] = c.y as f32;
        self.data[i + 2] = c.z as f32;
    }

    pub fn pixels(&self) -> impl Iterator<Item = Rgb> + '_ {
        self.data
            .chunks_exact(3)
            .map(|p| Rgb::new(p[0].into(), p[1].into(), p[2].into()))
    }
}

/// Encodes a color PFM (`PF`, little-endian, rows stored bottom to top).
pub fn encode_pfm(img: &HdrImage) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    out.reserve(img.data.len() * 4);
    for y in (0..img.height).rev() {
        let row = &img.data[y * img.width * 3..(y + 1) * img.width * 3];
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Ingest("truncated PFM header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| Error::Ingest("non-ASCII PFM header".into()))
}

/// Decodes `PF` (color) and `Pf` (grayscale, replicated to RGB) images.
pub fn decode_pfm(bytes: &[u8]) -> Result<HdrImage> {
    let mut pos = 0;
    let channels = match header_token(bytes, &mut pos)? {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::Ingest(format!("not a PFM file (magic {m:?})"))),
    };
    let parse = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Ingest(format!("bad PFM {what} {s:?}")))
    };
    let width = parse(header_token(bytes, &mut pos)?, "width")? as usize;
    let height = parse(header_token(bytes, &mut pos)?, "height")? as usize;
    let scale = parse(header_token(bytes, &mut pos)?, "scale")?;
    if scale == 0.0 {
        return Err(Error::Ingest("PFM scale must be nonzero".into()));
    }
    let big_endian = scale > 0.0;
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let n = width * height * channels;
    let raster = bytes
        .get(pos..pos + n * 4)
        .ok_or_else(|| Error::Ingest(format!("PFM raster truncated: expected {} bytes", n * 4)))?;
    let floats: Vec<f32> = raster
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if big_endian {
                f32::from_be_bytes(b)
            } else {
                f32::from_le_bytes(b)
            }
        })
        .collect();
    let mut img = HdrImage::new(width, height);
    for y in 0..height {
        let src = (height - 1 - y) * width * channels;
        for x in 0..width {
            for c in 0..3 {
                let s = if channels == 3 { c } else { 0 };
                img.data[(y * width + x) * 3 + c] = floats[src + x * channels + s];
            }
        }
    }
    Ok(img)
}

pub fn save_pfm(img: &HdrImage, path: impl AsRef<Path>) -> Result<()> {
    fs::File::create(path)?.write_all(&encode_pfm(img))?;
    Ok(())
}

pub fn load_pfm(path: impl AsRef<Path>) -> Result<HdrImage> {
    decode_pfm(&fs::read(path)?)
}

pub fn srgb_encode(linear: f64) -> f64 {
    let c = linear.clamp(0.0, 1.0);
    if c <= 0.003_130_8 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_decode(encoded: f64) -> f64 {
    let c = encoded.clamp(0.0, 1.0);
    if c <= 0.040_45 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

/// 8-bit RGB PNG in memory.
pub fn encode_png(width: usize, height: usize, rgb8: &[u8]) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out).write_image(
        rgb8,
        width as u32,
        height as u32,
        image::ExtendedColorType::Rgb8,
    )?;
    Ok(out)
}

/// Decodes any PNG to 8-bit RGB, returning `(width, height, bytes)`.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.to_rgb8();
    Ok((img.width() as usize, img.height() as usize, img.into_raw()))
}

/// Loads an LDR PNG and converts it from sRGB to linear values.
pub fn load_png_linear(path: impl AsRef<Path>) -> Result<HdrImage> {
    let (w, h, bytes) = decode_png(&fs::read(path)?)?;
    let data = bytes
        .iter()
        .map(|&b| srgb_decode(f64::from(b) / 255.0) as f32)
        .collect();
    HdrImage::from_data(w, h, data)
}
