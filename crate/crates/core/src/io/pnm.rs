//! Binary PPM (P6) images and PGM (P5) masks.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::MaskMetric;
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// `[3, H, W]` in [-1, 1] to P6 bytes.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::Format(format!("PPM needs a [3, H, W] image, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let area = h * w;
    for i in 0..area {
        for c in 0..3 {
            out.push(to_byte(image.data()[c * area + i]));
        }
    }
    Ok(out)
}

/// Splits the header into its numeric fields and returns the payload.
fn header<'a>(bytes: &'a [u8], magic: &str, fields: usize) -> Result<(Vec<usize>, &'a [u8])> {
    if !bytes.starts_with(magic.as_bytes()) {
        return Err(Error::Format(format!("expected `{magic}` header")));
    }
    let mut pos = magic.len();
    let mut values = Vec::with_capacity(fields);
    while values.len() < fields {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        let field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("malformed `{magic}` header")))?;
        values.push(field);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::Format(format!("truncated `{magic}` header")));
    }
    Ok((values, &bytes[pos + 1..]))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let (f, data) = header(bytes, "P6", 3)?;
    let (w, h, max) = (f[0], f[1], f[2]);
    if max != 255 || w == 0 || h == 0 {
        return Err(Error::Format(format!("unsupported PPM {w}x{h} maxval {max}")));
    }
    let area = w * h;
    if data.len() != 3 * area {
        return Err(Error::Format(format!("PPM payload {} bytes, expected {}", data.len(), 3 * area)));
    }
    let mut out = vec![0.0; 3 * area];
    for i in 0..area {
        for c in 0..3 {
            out[c * area + i] = from_byte(data[3 * i + c]);
        }
    }
    Tensor::new(vec![3, h, w], out)
}

/// 0 for valid cells, 255 for invalid.
pub fn encode_pgm(mask: &MaskMetric) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.cells().iter().map(|&c| if c == 1 { 255u8 } else { 0 }));
    out
}

/// Cells at or above 128 are invalid.
pub fn decode_pgm(bytes: &[u8]) -> Result<MaskMetric> {
    let (f, data) = header(bytes, "P5", 3)?;
    let (w, h, max) = (f[0], f[1], f[2]);
    if max != 255 || data.len() != w * h {
        return Err(Error::Format(format!("unsupported PGM {w}x{h} maxval {max}")));
    }
    MaskMetric::new(h, w, data.iter().map(|&b| (b >= 128) as u8).collect())
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    Ok(fs::write(path, encode_ppm(image)?)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, mask: &MaskMetric) -> Result<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}

pub fn read_pgm(path: &Path) -> Result<MaskMetric> {
    decode_pgm(&fs::read(path)?)
}

/// Panels of equal height placed left to right.
pub fn side_by_side(panels: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = panels.first() else {
        return Err(Error::Format("no panels".into()));
    };
    let (c, h) = (first.shape()[0], first.shape()[1]);
    if panels.iter().any(|p| p.ndim() != 3 || p.shape()[0] != c || p.shape()[1] != h) {
        return Err(Error::Format("panels differ in channels or height".into()));
    }
    let total_w: usize = panels.iter().map(|p| p.shape()[2]).sum();
    let mut out = Vec::with_capacity(c * h * total_w);
    for ch in 0..c {
        for y in 0..h {
            for p in panels {
                let w = p.shape()[2];
                let start = (ch * h + y) * w;
                out.extend_from_slice(&p.data()[start..start + w]);
            }
        }
    }
    Tensor::new(vec![c, h, total_w], out)
}
