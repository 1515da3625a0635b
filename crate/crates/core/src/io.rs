//! File formats: PFM float maps, the `DHAR` activation-record container and
//! 8-bit PNG masks/images.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::ActivationRecord;
use crate::raster::{FeatureMap, Mask, ScalarField};

/// Parsed PFM header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PfmHeader {
    pub channels: usize,
    pub width: usize,
    pub height: usize,
    pub little_endian: bool,
}

/// Parse the three header lines; returns the header and the payload offset.
pub fn parse_pfm_header(bytes: &[u8]) -> Result<(PfmHeader, usize)> {
    let mut lines = Vec::with_capacity(3);
    let mut start = 0;
    while lines.len() < 3 {
        let rel = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("header ended before three lines".into()))?;
        let line = std::str::from_utf8(&bytes[start..start + rel])
            .map_err(|_| Error::MalformedHeader("header is not ASCII".into()))?;
        lines.push(line.trim().to_owned());
        start += rel + 1;
    }
    let channels = match lines[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::MalformedHeader(format!("unknown magic {:?}", other))),
    };
    let dims: Vec<&str> = lines[1].split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::MalformedHeader(format!("bad dimension line {:?}", lines[1])));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::MalformedHeader(format!("bad dimension {:?}", s)))
    };
    let width = parse_dim(dims[0])?;
    let height = parse_dim(dims[1])?;
    let scale: f32 = lines[2]
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("bad scale {:?}", lines[2])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::MalformedHeader(format!("bad scale {}", scale)));
    }
    Ok((
        PfmHeader {
            channels,
            width,
            height,
            little_endian: scale < 0.0,
        },
        start,
    ))
}

/// Decode a PFM byte buffer into a channel-major feature map (1 or 3 channels).
pub fn decode_pfm(bytes: &[u8]) -> Result<FeatureMap> {
    let (header, offset) = parse_pfm_header(bytes)?;
    let PfmHeader {
        channels,
        width,
        height,
        little_endian,
    } = header;
    let expected = channels * width * height * 4;
    let payload = &bytes[offset..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let mut data = vec![0.0f32; channels * width * height];
    for (i, chunk) in payload[..expected].chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little_endian {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() {
            return Err(Error::NonFinite { index: i });
        }
        // file order: rows bottom-up, pixels interleaved
        let c = i % channels;
        let px = i / channels;
        let x = px % width;
        let file_row = px / width;
        let y = height - 1 - file_row;
        data[(c * height + y) * width + x] = v;
    }
    FeatureMap::new(channels, width, height, data)
}

/// Encode a 1- or 3-channel map as little-endian PFM.
pub fn encode_pfm(map: &FeatureMap) -> Result<Vec<u8>> {
    let (channels, width, height) = map.shape();
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidArgument(format!(
                "PFM stores 1 or 3 channels, not {}",
                c
            )))
        }
    };
    if let Some(index) = map.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    let mut out = format!("{}\n{} {}\n-1.0\n", magic, width, height).into_bytes();
    out.reserve(channels * width * height * 4);
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                out.extend_from_slice(&map.get(c, x, y).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ScalarField> {
    let map = decode_pfm(&read_bytes(path.as_ref())?)?;
    if map.channels() != 1 {
        return Err(Error::MalformedHeader(format!(
            "{}: expected single-channel Pf, found {} channels",
            path.as_ref().display(),
            map.channels()
        )));
    }
    map.to_scalar_field()
}

pub fn write_pfm(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(&field.to_feature_map())?)
}

pub fn read_pfm_map(path: impl AsRef<Path>) -> Result<FeatureMap> {
    decode_pfm(&read_bytes(path.as_ref())?)
}

pub fn write_pfm_map(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(map)?)
}

const DHAR_MAGIC: [u8; 4] = *b"DHAR";
const DHAR_VERSION: u32 = 1;

pub fn encode_activation_record(record: &ActivationRecord) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&DHAR_MAGIC);
    out.extend_from_slice(&DHAR_VERSION.to_le_bytes());
    out.extend_from_slice(&(record.len() as u32).to_le_bytes());
    for ((layer, step), map) in record.iter() {
        let (c, w, h) = map.shape();
        for v in [layer, step, c as u32, w as u32, h as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in map.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_activation_record(bytes: &[u8]) -> Result<ActivationRecord> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != DHAR_MAGIC {
        return Err(Error::BadMagic {
            expected: DHAR_MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = cur.u32()?;
    if version != DHAR_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = cur.u32()?;
    let mut record = ActivationRecord::new();
    for _ in 0..count {
        let layer = cur.u32()?;
        let step = cur.u32()?;
        let c = cur.u32()? as usize;
        let w = cur.u32()? as usize;
        let h = cur.u32()? as usize;
        let n = c
            .checked_mul(w)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| Error::MalformedHeader("entry size overflows".into()))?;
        let raw = cur.take(n)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if record.get(layer, step).is_some() {
            return Err(Error::DuplicateKey { layer, step });
        }
        record.insert(layer, step, FeatureMap::new(c, w, h, data)?)?;
    }
    Ok(record)
}

pub fn read_activation_record(path: impl AsRef<Path>) -> Result<ActivationRecord> {
    decode_activation_record(&read_bytes(path.as_ref())?)
}

pub fn write_activation_record(record: &ActivationRecord, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_activation_record(record))
}

fn image_err(path: &Path, e: image::ImageError) -> Error {
    Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    }
}

/// Write a mask as an 8-bit grayscale PNG with values 0 / 255.
pub fn write_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let buf: Vec<u8> = mask.data().iter().map(|&v| v * 255).collect();
    image::save_buffer(
        path,
        &buf,
        mask.width() as u32,
        mask.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(|e| image_err(path, e))
}

/// Read a mask PNG; any channel-averaged value `>= 128` is set.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_luma8();
    let (w, h) = img.dimensions();
    Mask::new(
        w as usize,
        h as usize,
        img.into_raw().into_iter().map(|v| (v >= 128) as u8).collect(),
    )
}

/// Write a 3-channel map with values in `[0, 1]` as an 8-bit RGB PNG.
pub fn write_rgb_png(map: &FeatureMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if map.channels() != 3 {
        return Err(Error::InvalidArgument(format!(
            "RGB PNG needs 3 channels, found {}",
            map.channels()
        )));
    }
    let (w, h) = (map.width(), map.height());
    let mut buf = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                buf.push((map.get(c, x, y).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer(path, &buf, w as u32, h as u32, image::ExtendedColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<FeatureMap> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    FeatureMap::from_fn(3, w, h, |c, x, y| raw[(y * w + x) * 3 + c] as f32 / 255.0)
}
