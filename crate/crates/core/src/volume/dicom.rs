//! Minimal DICOM reader for uncompressed, Explicit VR Little Endian,
//! single-frame CT slices. Anything outside that subset is rejected.

use std::path::Path;

use glam::DVec3;

use super::VoxelGrid;
use crate::error::{Error, Result, Tag};

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";
const CT_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.2";

const TRANSFER_SYNTAX: Tag = Tag(0x0002, 0x0010);
const SLICE_THICKNESS: Tag = Tag(0x0018, 0x0050);
const IMAGE_POSITION: Tag = Tag(0x0020, 0x0032);
const SAMPLES_PER_PIXEL: Tag = Tag(0x0028, 0x0002);
const NUMBER_OF_FRAMES: Tag = Tag(0x0028, 0x0008);
const ROWS: Tag = Tag(0x0028, 0x0010);
const COLUMNS: Tag = Tag(0x0028, 0x0011);
const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
const BITS_ALLOCATED: Tag = Tag(0x0028, 0x0100);
const PIXEL_REPRESENTATION: Tag = Tag(0x0028, 0x0103);
const RESCALE_INTERCEPT: Tag = Tag(0x0028, 0x1052);
const RESCALE_SLOPE: Tag = Tag(0x0028, 0x1053);
const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

const ITEM: Tag = Tag(0xFFFE, 0xE000);
const ITEM_DELIMITER: Tag = Tag(0xFFFE, 0xE00D);
const SEQUENCE_DELIMITER: Tag = Tag(0xFFFE, 0xE0DD);
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;

/// The attributes of one CT slice that matter for volume assembly.
///
/// Parsing fills in whatever is present; writing emits only the `Some` fields,
/// which makes the type double as a fixture builder.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSlice {
    pub transfer_syntax: String,
    pub rows: Option<u16>,
    pub columns: Option<u16>,
    /// Row spacing then column spacing, in mm.
    pub pixel_spacing: Option<[f64; 2]>,
    pub image_position: Option<DVec3>,
    pub slice_thickness: Option<f64>,
    pub rescale_slope: Option<f64>,
    pub rescale_intercept: Option<f64>,
    pub bits_allocated: Option<u16>,
    pub signed: bool,
    pub number_of_frames: Option<u32>,
    /// Stored (pre-rescale) pixel values, row-major.
    pub pixels: Option<Vec<i32>>,
}

impl DicomSlice {
    /// A complete CT slice with the given geometry and stored values.
    pub fn ct(
        rows: u16,
        columns: u16,
        pixel_spacing: [f64; 2],
        position: DVec3,
        pixels: Vec<i32>,
    ) -> Self {
        DicomSlice {
            transfer_syntax: EXPLICIT_VR_LITTLE_ENDIAN.to_string(),
            rows: Some(rows),
            columns: Some(columns),
            pixel_spacing: Some(pixel_spacing),
            image_position: Some(position),
            slice_thickness: None,
            rescale_slope: Some(1.0),
            rescale_intercept: Some(0.0),
            bits_allocated: Some(16),
            signed: true,
            number_of_frames: None,
            pixels: Some(pixels),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    file: &'a str,
}

struct Element<'a> {
    tag: Tag,
    vr: [u8; 2],
    value: Option<&'a [u8]>,
}

fn has_long_length(vr: &[u8; 2]) -> bool {
    matches!(
        vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"SV"
            | b"UV"
    )
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::Ingest(format!(
            "{}: truncated DICOM data at byte {}",
            self.file, self.pos
        ))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| self.truncated())?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn tag(&mut self) -> Result<Tag> {
        Ok(Tag(self.u16()?, self.u16()?))
    }

    /// Reads the next element. Undefined-length sequences are skipped and
    /// reported with `value: None`.
    fn element(&mut self) -> Result<Element<'a>> {
        let tag = self.tag()?;
        if tag.0 == 0xFFFE {
            let len = self.u32()?;
            let value = if len == UNDEFINED_LENGTH {
                None
            } else {
                Some(self.take(len as usize)?)
            };
            return Ok(Element {
                tag,
                vr: *b"  ",
                value,
            });
        }
        let vr_bytes = self.take(2)?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        if !vr.iter().all(u8::is_ascii_uppercase) {
            return Err(Error::UnsupportedFormat(format!(
                "{}: element {tag} has no explicit VR; only Explicit VR Little Endian is supported",
                self.file
            )));
        }
        let len = if has_long_length(&vr) {
            self.take(2)?;
            self.u32()?
        } else {
            u32::from(self.u16()?)
        };
        if len == UNDEFINED_LENGTH {
            if tag == PIXEL_DATA {
                return Err(Error::UnsupportedFormat(format!(
                    "{}: encapsulated (compressed) pixel data",
                    self.file
                )));
            }
            self.skip_undefined_sequence()?;
            return Ok(Element {
                tag,
                vr,
                value: None,
            });
        }
        Ok(Element {
            tag,
            vr,
            value: Some(self.take(len as usize)?),
        })
    }

    fn skip_undefined_sequence(&mut self) -> Result<()> {
        loop {
            let tag = self.tag()?;
            let len = self.u32()?;
            match tag {
                SEQUENCE_DELIMITER => return Ok(()),
                ITEM if len == UNDEFINED_LENGTH => self.skip_undefined_item()?,
                ITEM => {
                    self.take(len as usize)?;
                }
                other => {
                    return Err(Error::Ingest(format!(
                        "{}: unexpected {other} inside sequence",
                        self.file
                    )))
                }
            }
        }
    }

    fn skip_undefined_item(&mut self) -> Result<()> {
        loop {
            let el = self.element()?;
            if el.tag == ITEM_DELIMITER {
                return Ok(());
            }
        }
    }
}

fn text(value: &[u8]) -> String {
    String::from_utf8_lossy(value)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

fn decimals(value: &[u8], tag: Tag, file: &str) -> Result<Vec<f64>> {
    text(value)
        .split('\\')
        .map(|s| {
            s.trim().parse::<f64>().map_err(|_| {
                Error::Ingest(format!("{file}: malformed decimal string in {tag}: `{s}`"))
            })
        })
        .collect()
}

fn us(value: &[u8], tag: Tag, file: &str) -> Result<u16> {
    match value {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(Error::Ingest(format!("{file}: short US value in {tag}"))),
    }
}

/// Parses one DICOM Part 10 file.
pub fn parse_dicom_slice(bytes: &[u8], file: &str) -> Result<DicomSlice> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(Error::Ingest(format!("{file}: missing DICM preamble")));
    }
    let mut r = Reader {
        buf: bytes,
        pos: 132,
        file,
    };
    let mut slice = DicomSlice {
        transfer_syntax: String::new(),
        rows: None,
        columns: None,
        pixel_spacing: None,
        image_position: None,
        slice_thickness: None,
        rescale_slope: None,
        rescale_intercept: None,
        bits_allocated: None,
        signed: false,
        number_of_frames: None,
        pixels: None,
    };
    let mut checked_syntax = false;
    let mut raw_pixels: Option<&[u8]> = None;
    while !r.at_end() {
        let el = r.element()?;
        if el.tag.0 != 0x0002 && !checked_syntax {
            if slice.transfer_syntax.is_empty() {
                return Err(Error::MissingTag {
                    tag: TRANSFER_SYNTAX,
                    file: file.into(),
                });
            }
            if slice.transfer_syntax != EXPLICIT_VR_LITTLE_ENDIAN {
                return Err(Error::UnsupportedFormat(format!(
                    "{file}: transfer syntax {} (only {EXPLICIT_VR_LITTLE_ENDIAN} is supported)",
                    slice.transfer_syntax
                )));
            }
            checked_syntax = true;
        }
        let Some(v) = el.value else { continue };
        match el.tag {
            TRANSFER_SYNTAX => slice.transfer_syntax = text(v),
            ROWS => slice.rows = Some(us(v, el.tag, file)?),
            COLUMNS => slice.columns = Some(us(v, el.tag, file)?),
            BITS_ALLOCATED => slice.bits_allocated = Some(us(v, el.tag, file)?),
            PIXEL_REPRESENTATION => slice.signed = us(v, el.tag, file)? == 1,
            SAMPLES_PER_PIXEL if us(v, el.tag, file)? != 1 => {
                return Err(Error::UnsupportedFormat(format!(
                    "{file}: multi-sample pixels"
                )));
            }
            NUMBER_OF_FRAMES => {
                let n = text(v)
                    .parse::<u32>()
                    .map_err(|_| Error::Ingest(format!("{file}: malformed {NUMBER_OF_FRAMES}")))?;
                slice.number_of_frames = Some(n);
            }
            PIXEL_SPACING => match decimals(v, el.tag, file)?[..] {
                [a, b] => slice.pixel_spacing = Some([a, b]),
                _ => {
                    return Err(Error::Ingest(format!(
                        "{file}: {PIXEL_SPACING} needs 2 values"
                    )))
                }
            },
            IMAGE_POSITION => match decimals(v, el.tag, file)?[..] {
                [x, y, z] => slice.image_position = Some(DVec3::new(x, y, z)),
                _ => {
                    return Err(Error::Ingest(format!(
                        "{file}: {IMAGE_POSITION} needs 3 values"
                    )))
                }
            },
            SLICE_THICKNESS => slice.slice_thickness = decimals(v, el.tag, file)?.first().copied(),
            RESCALE_INTERCEPT => {
                slice.rescale_intercept = decimals(v, el.tag, file)?.first().copied()
            }
            RESCALE_SLOPE => slice.rescale_slope = decimals(v, el.tag, file)?.first().copied(),
            PIXEL_DATA => {
                if el.vr != *b"OW" && el.vr != *b"OB" {
                    return Err(Error::Ingest(format!(
                        "{file}: unexpected VR for pixel data"
                    )));
                }
                raw_pixels = Some(v);
            }
            _ => {}
        }
    }
    if slice.number_of_frames.is_some_and(|n| n > 1) {
        return Err(Error::UnsupportedFormat(format!(
            "{file}: multi-frame images"
        )));
    }
    if slice.bits_allocated.is_some_and(|b| b != 16) {
        return Err(Error::UnsupportedFormat(format!(
            "{file}: {} bits allocated (only 16 supported)",
            slice.bits_allocated.unwrap()
        )));
    }
    if let Some(raw) = raw_pixels {
        if raw.len() % 2 != 0 {
            return Err(Error::Ingest(format!("{file}: odd pixel data length")));
        }
        let pixels = raw
            .chunks_exact(2)
            .map(|c| {
                let u = u16::from_le_bytes([c[0], c[1]]);
                if slice.signed {
                    i32::from(u as i16)
                } else {
                    i32::from(u)
                }
            })
            .collect();
        slice.pixels = Some(pixels);
    }
    Ok(slice)
}

/// Serializes a slice as an Explicit VR Little Endian Part 10 file.
pub fn write_dicom_slice(slice: &DicomSlice) -> Vec<u8> {
    fn element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
        let mut v = value.to_vec();
        if v.len() % 2 == 1 {
            v.push(if matches!(vr, b"UI" | b"OB") { 0 } else { b' ' });
        }
        out.extend_from_slice(&tag.0.to_le_bytes());
        out.extend_from_slice(&tag.1.to_le_bytes());
        out.extend_from_slice(vr);
        if has_long_length(vr) {
            out.extend_from_slice(&[0, 0]);
            out.extend_from_slice(&(v.len() as u32).to_le_bytes());
        } else {
            out.extend_from_slice(&(v.len() as u16).to_le_bytes());
        }
        out.extend_from_slice(&v);
    }
    let ds = |vals: &[f64]| {
        vals.iter()
            .map(|v| format!("{v}"))
            .collect::<Vec<_>>()
            .join("\\")
    };

    let mut meta = Vec::new();
    element(&mut meta, Tag(0x0002, 0x0001), b"OB", &[0, 1]);
    element(
        &mut meta,
        Tag(0x0002, 0x0002),
        b"UI",
        CT_IMAGE_STORAGE.as_bytes(),
    );
    element(&mut meta, Tag(0x0002, 0x0003), b"UI", b"2.25.1");
    element(
        &mut meta,
        TRANSFER_SYNTAX,
        b"UI",
        slice.transfer_syntax.as_bytes(),
    );

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    element(
        &mut out,
        Tag(0x0002, 0x0000),
        b"UL",
        &(meta.len() as u32).to_le_bytes(),
    );
    out.extend_from_slice(&meta);

    if let Some(t) = slice.slice_thickness {
        element(&mut out, SLICE_THICKNESS, b"DS", ds(&[t]).as_bytes());
    }
    if let Some(p) = slice.image_position {
        element(
            &mut out,
            IMAGE_POSITION,
            b"DS",
            ds(&[p.x, p.y, p.z]).as_bytes(),
        );
    }
    element(&mut out, SAMPLES_PER_PIXEL, b"US", &1u16.to_le_bytes());
    if let Some(n) = slice.number_of_frames {
        element(&mut out, NUMBER_OF_FRAMES, b"IS", n.to_string().as_bytes());
    }
    if let Some(r) = slice.rows {
        element(&mut out, ROWS, b"US", &r.to_le_bytes());
    }
    if let Some(c) = slice.columns {
        element(&mut out, COLUMNS, b"US", &c.to_le_bytes());
    }
    if let Some(s) = slice.pixel_spacing {
        element(&mut out, PIXEL_SPACING, b"DS", ds(&s).as_bytes());
    }
    if let Some(b) = slice.bits_allocated {
        element(&mut out, BITS_ALLOCATED, b"US", &b.to_le_bytes());
    }
    element(
        &mut out,
        PIXEL_REPRESENTATION,
        b"US",
        &u16::from(slice.signed).to_le_bytes(),
    );
    if let Some(i) = slice.rescale_intercept {
        element(&mut out, RESCALE_INTERCEPT, b"DS", ds(&[i]).as_bytes());
    }
    if let Some(s) = slice.rescale_slope {
        element(&mut out, RESCALE_SLOPE, b"DS", ds(&[s]).as_bytes());
    }
    if let Some(px) = &slice.pixels {
        let bytes: Vec<u8> = px
            .iter()
            .flat_map(|&v| {
                if slice.signed {
                    (v as i16).to_le_bytes()
                } else {
                    (v as u16).to_le_bytes()
                }
            })
            .collect();
        element(&mut out, PIXEL_DATA, b"OW", &bytes);
    }
    out
}

struct ValidSlice {
    rows: usize,
    columns: usize,
    spacing: [f64; 2],
    position: DVec3,
    thickness: Option<f64>,
    hu: Vec<f32>,
}

fn validate(slice: DicomSlice, file: &str) -> Result<ValidSlice> {
    let missing = |tag| Error::MissingTag {
        tag,
        file: file.to_string(),
    };
    let rows = slice.rows.ok_or_else(|| missing(ROWS))? as usize;
    let columns = slice.columns.ok_or_else(|| missing(COLUMNS))? as usize;
    let spacing = slice.pixel_spacing.ok_or_else(|| missing(PIXEL_SPACING))?;
    let position = slice
        .image_position
        .ok_or_else(|| missing(IMAGE_POSITION))?;
    let intercept = slice
        .rescale_intercept
        .ok_or_else(|| missing(RESCALE_INTERCEPT))?;
    let slope = slice.rescale_slope.ok_or_else(|| missing(RESCALE_SLOPE))?;
    let pixels = slice.pixels.ok_or_else(|| missing(PIXEL_DATA))?;
    if pixels.len() != rows * columns {
        return Err(Error::Ingest(format!(
            "{file}: pixel data holds {} values, expected {rows}x{columns}",
            pixels.len()
        )));
    }
    if !(spacing[0] > 0.0 && spacing[1] > 0.0) {
        return Err(Error::Ingest(format!("{file}: non-positive pixel spacing")));
    }
    let hu = pixels
        .iter()
        .map(|&p| (f64::from(p) * slope + intercept) as f32)
        .collect();
    Ok(ValidSlice {
        rows,
        columns,
        spacing,
        position,
        thickness: slice.slice_thickness,
        hu,
    })
}

/// Stacks parsed slices into a volume. Input order does not matter.
pub fn assemble_series(slices: Vec<(String, DicomSlice)>) -> Result<VoxelGrid> {
    if slices.is_empty() {
        return Err(Error::Ingest("no DICOM slices found".into()));
    }
    let mut valid = slices
        .into_iter()
        .map(|(file, s)| validate(s, &file).map(|v| (file, v)))
        .collect::<Result<Vec<_>>>()?;
    valid.sort_by(|a, b| {
        a.1.position
            .z
            .total_cmp(&b.1.position.z)
            .then_with(|| a.0.cmp(&b.0))
    });
    let (first_file, first) = &valid[0];
    for (file, s) in &valid[1..] {
        if s.rows != first.rows || s.columns != first.columns {
            return Err(Error::Ingest(format!(
                "mixed slice dimensions: {file} is {}x{}, {first_file} is {}x{}",
                s.rows, s.columns, first.rows, first.columns
            )));
        }
        if (s.spacing[0] - first.spacing[0]).abs() > 1e-6
            || (s.spacing[1] - first.spacing[1]).abs() > 1e-6
        {
            return Err(Error::Ingest(format!(
                "mixed pixel spacing between {file} and {first_file}"
            )));
        }
    }
    let mut gaps: Vec<f64> = valid
        .windows(2)
        .map(|w| w[1].1.position.z - w[0].1.position.z)
        .collect();
    if gaps.iter().any(|&g| g <= 1e-9) {
        return Err(Error::Ingest("two slices share the same z position".into()));
    }
    let z_spacing = if gaps.is_empty() {
        first.thickness.filter(|&t| t > 0.0).unwrap_or(1.0)
    } else {
        gaps.sort_by(f64::total_cmp);
        let m = gaps.len() / 2;
        if gaps.len() % 2 == 1 {
            gaps[m]
        } else {
            0.5 * (gaps[m - 1] + gaps[m])
        }
    };
    let dims = [first.columns, first.rows, valid.len()];
    let spacing = DVec3::new(first.spacing[1], first.spacing[0], z_spacing);
    let origin = first.position;
    let values = valid.into_iter().flat_map(|(_, s)| s.hu).collect();
    VoxelGrid::new(dims, spacing, origin, values)
}

/// Loads every DICOM file in a directory as one CT series.
///
/// Files without the `DICM` magic are ignored.
pub fn load_dicom_series(dir: impl AsRef<Path>) -> Result<VoxelGrid> {
    let dir = dir.as_ref();
    let mut slices = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if !path.is_file() {
            continue;
        }
        let bytes = std::fs::read(&path)?;
        if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
            continue;
        }
        let name = path.display().to_string();
        let slice = parse_dicom_slice(&bytes, &name)?;
        slices.push((name, slice));
    }
    if slices.is_empty() {
        return Err(Error::Ingest(format!(
            "no DICOM files in {}",
            dir.display()
        )));
    }
    assemble_series(slices)
}
