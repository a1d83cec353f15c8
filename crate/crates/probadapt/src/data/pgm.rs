//! Minimal binary PGM (P5) reader/writer. 8-bit files carry images and
//! masks; 16-bit files carry instance label maps. The format is
//! byte-exact and dependency-free, which keeps dataset round-trips
//! reproducible.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

fn pgm_error(path: &Path, detail: impl Into<String>) -> Error {
    Error::Pgm {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Reads one whitespace-delimited token, skipping `#` comments.
fn next_token(data: &[u8], pos: &mut usize) -> Option<String> {
    let mut tok = String::new();
    while *pos < data.len() {
        let b = data[*pos];
        if b == b'#' {
            while *pos < data.len() && data[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        if b.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Some(tok);
            }
            *pos += 1;
            continue;
        }
        tok.push(b as char);
        *pos += 1;
    }
    if tok.is_empty() {
        None
    } else {
        Some(tok)
    }
}

/// Raw decode: pixel values as written, plus the maxval.
pub fn read_pgm(path: &Path) -> Result<(Array2<u16>, u16)> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut pos = 0usize;
    let magic = next_token(&data, &mut pos).ok_or_else(|| pgm_error(path, "empty file"))?;
    if magic != "P5" {
        return Err(pgm_error(path, format!("expected P5 magic, got {magic:?}")));
    }
    let mut dims = [0usize; 2];
    for d in dims.iter_mut() {
        let tok = next_token(&data, &mut pos).ok_or_else(|| pgm_error(path, "truncated header"))?;
        *d = tok
            .parse()
            .map_err(|_| pgm_error(path, format!("bad dimension {tok:?}")))?;
    }
    let (width, height) = (dims[0], dims[1]);
    if width == 0 || height == 0 {
        return Err(pgm_error(path, "zero dimension"));
    }
    let maxval: u32 = {
        let tok = next_token(&data, &mut pos).ok_or_else(|| pgm_error(path, "truncated header"))?;
        tok.parse()
            .map_err(|_| pgm_error(path, format!("bad maxval {tok:?}")))?
    };
    if maxval == 0 || maxval > 65_535 {
        return Err(pgm_error(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates header and payload
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(pgm_error(path, "missing header terminator"));
    }
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * bytes_per;
    let payload = &data[pos..];
    if payload.len() < need {
        return Err(pgm_error(
            path,
            format!("payload truncated: need {need} bytes, have {}", payload.len()),
        ));
    }
    let mut out = Array2::<u16>::zeros((height, width));
    for (i, v) in out.iter_mut().enumerate() {
        let raw = if bytes_per == 2 {
            u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]])
        } else {
            payload[i] as u16
        };
        if raw as u32 > maxval {
            return Err(pgm_error(path, format!("pixel {raw} exceeds maxval {maxval}")));
        }
        *v = raw;
    }
    Ok((out, maxval as u16))
}

pub fn write_pgm(path: &Path, pixels: &Array2<u16>, maxval: u16) -> Result<()> {
    if maxval == 0 {
        return Err(Error::InvalidInput("pgm maxval must be positive".into()));
    }
    if let Some(&v) = pixels.iter().find(|&&v| v > maxval) {
        return Err(Error::InvalidInput(format!(
            "pixel value {v} exceeds maxval {maxval}"
        )));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let (h, w) = pixels.dim();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n{maxval}\n")?;
    if maxval > 255 {
        for &v in pixels.iter() {
            f.write_all(&v.to_be_bytes())?;
        }
    } else {
        for &v in pixels.iter() {
            f.write_all(&[v as u8])?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Stores an image in `[0, 1]` as 8-bit gray (`round(v * 255)`).
pub fn write_image(path: &Path, pixels: &Array2<f64>) -> Result<()> {
    let quantized = pixels.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u16);
    write_pgm(path, &quantized, 255)
}

/// Loads an 8-bit gray file back into `[0, 1]` (`v / 255`).
pub fn read_image(path: &Path) -> Result<Array2<f64>> {
    let (raw, maxval) = read_pgm(path)?;
    if maxval != 255 {
        return Err(pgm_error(path, format!("expected 8-bit image, maxval {maxval}")));
    }
    Ok(raw.map(|&v| v as f64 / 255.0))
}

/// Stores a binary mask as 0/255.
pub fn write_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    let scaled = mask.map(|&v| if v > 0 { 255u16 } else { 0 });
    write_pgm(path, &scaled, 255)
}

/// Loads a mask, binarizing at > 127.
pub fn read_mask(path: &Path) -> Result<Array2<u8>> {
    let (raw, maxval) = read_pgm(path)?;
    if maxval != 255 {
        return Err(pgm_error(path, format!("expected 8-bit mask, maxval {maxval}")));
    }
    Ok(raw.map(|&v| u8::from(v > 127)))
}

/// Stores instance labels as 16-bit gray so ids above 255 survive.
pub fn write_labels16(path: &Path, labels: &Array2<u16>) -> Result<()> {
    write_pgm(path, labels, 65_535)
}
