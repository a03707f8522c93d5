//! PPM (P6, 8-bit) and PFM (32-bit float) image files.
//!
//! PPM export applies gamma 2.2 to radiance images and writes every other
//! kind linearly; single-channel images are replicated to gray RGB. PFM is
//! always linear, little-endian (scale `-1.0`), stored bottom row first.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{ImageBuffer, ImageKind};

pub const GAMMA: f64 = 2.2;

/// How 8-bit samples relate to linear values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transfer {
    Linear,
    Gamma,
}

impl Transfer {
    pub fn for_kind(kind: ImageKind) -> Self {
        if kind == ImageKind::Radiance {
            Transfer::Gamma
        } else {
            Transfer::Linear
        }
    }
}

pub fn encode_u8(v: f64, transfer: Transfer) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    let e = match transfer {
        Transfer::Linear => v,
        Transfer::Gamma => v.powf(1.0 / GAMMA),
    };
    (e * 255.0).round() as u8
}

pub fn decode_u8(b: u8, transfer: Transfer) -> f64 {
    let e = b as f64 / 255.0;
    match transfer {
        Transfer::Linear => e,
        Transfer::Gamma => e.powf(GAMMA),
    }
}

pub fn ppm_bytes(img: &ImageBuffer, transfer: Transfer) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.reserve(img.width * img.height * 3);
    for px in img.data.chunks_exact(img.channels) {
        if img.channels == 1 {
            let b = encode_u8(px[0], transfer);
            out.extend_from_slice(&[b, b, b]);
        } else {
            out.extend(px.iter().map(|&v| encode_u8(v, transfer)));
        }
    }
    out
}

/// Splits `n` whitespace-separated header tokens (skipping `#` comments)
/// from the front of `bytes`, returning them and the payload offset.
fn header_tokens(bytes: &[u8], n: usize, what: &str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Format(format!("{what}: truncated header")));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the payload
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::Format(format!("{what}: missing payload")));
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str, what: &str, field: &str) -> Result<usize> {
    tok.parse::<usize>()
        .ok()
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Format(format!("{what}: bad {field} {tok:?}")))
}

/// Decodes a P6 file to a 3-channel image of kind `kind`.
pub fn parse_ppm(bytes: &[u8], transfer: Transfer, kind: ImageKind) -> Result<ImageBuffer> {
    let (tok, at) = header_tokens(bytes, 4, "PPM")?;
    if tok[0] != "P6" {
        return Err(Error::Format(format!("PPM: magic {:?}, expected P6", tok[0])));
    }
    let w = parse_dim(&tok[1], "PPM", "width")?;
    let h = parse_dim(&tok[2], "PPM", "height")?;
    if tok[3] != "255" {
        return Err(Error::Format(format!("PPM: maxval {}, only 255 is supported", tok[3])));
    }
    let payload = &bytes[at..];
    if payload.len() != w * h * 3 {
        return Err(Error::Format(format!("PPM: expected {} payload bytes, found {}", w * h * 3, payload.len())));
    }
    let data = payload.iter().map(|&b| decode_u8(b, transfer)).collect();
    ImageBuffer::from_data(w, h, 3, kind, data)
}

pub fn pfm_bytes(img: &ImageBuffer) -> Vec<u8> {
    let magic = if img.channels == 1 { "Pf" } else { "PF" };
    let mut out = format!("{magic}\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let row_len = img.width * img.channels;
    for row in (0..img.height).rev() {
        for v in &img.data[row * row_len..(row + 1) * row_len] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

/// Decodes a PFM file; a positive scale means big-endian samples.
pub fn parse_pfm(bytes: &[u8], kind: ImageKind) -> Result<ImageBuffer> {
    let (tok, at) = header_tokens(bytes, 4, "PFM")?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        m => return Err(Error::Format(format!("PFM: magic {m:?}, expected PF or Pf"))),
    };
    let w = parse_dim(&tok[1], "PFM", "width")?;
    let h = parse_dim(&tok[2], "PFM", "height")?;
    let scale: f64 = tok[3]
        .parse()
        .ok()
        .filter(|s: &f64| s.is_finite() && *s != 0.0)
        .ok_or_else(|| Error::Format(format!("PFM: bad scale {:?}", tok[3])))?;
    let payload = &bytes[at..];
    let n = w * h * channels;
    if payload.len() != 4 * n {
        return Err(Error::Format(format!("PFM: expected {} payload bytes, found {}", 4 * n, payload.len())));
    }
    let row_len = w * channels;
    let mut data = vec![0.0; n];
    for (k, chunk) in payload.chunks_exact(4).enumerate() {
        let raw: [u8; 4] = chunk.try_into().unwrap();
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (file_row, off) = (k / row_len, k % row_len);
        data[(h - 1 - file_row) * row_len + off] = v as f64;
    }
    ImageBuffer::from_data(w, h, channels, kind, data).map_err(|e| Error::Format(format!("PFM: {e}")))
}

pub fn write_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, ppm_bytes(img, Transfer::for_kind(img.kind)))?;
    Ok(())
}

pub fn write_pfm(path: &Path, img: &ImageBuffer) -> Result<()> {
    std::fs::write(path, pfm_bytes(img))?;
    Ok(())
}

/// Reads a PPM or PFM image by extension. PPM is linearized from gamma 2.2.
pub fn read_image(path: &Path) -> Result<ImageBuffer> {
    let bytes = std::fs::read(path)?;
    match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
        Some("ppm") => parse_ppm(&bytes, Transfer::Gamma, ImageKind::Radiance),
        Some("pfm") => parse_pfm(&bytes, ImageKind::Radiance),
        _ => Err(Error::Format(format!("{}: expected a .ppm or .pfm file", path.display()))),
    }
}
