//! File formats: PNG, binary PGM (P5), raw little-endian arrays, JSON.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{GtpError, Result};

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| GtpError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| GtpError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| GtpError::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| GtpError::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| GtpError::io(path, e))
}

pub fn write_f32(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| GtpError::io(path, e))
}

fn read_words(path: &Path) -> Result<Vec<[u8; 4]>> {
    let bytes = fs::read(path).map_err(|e| GtpError::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(GtpError::validation(path, format!("{} bytes is not a whole number of 4-byte words", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn read_f32(path: &Path) -> Result<Vec<f64>> {
    Ok(read_words(path)?.into_iter().map(|w| f32::from_le_bytes(w) as f64).collect())
}

pub fn write_u32(path: &Path, values: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| GtpError::io(path, e))
}

pub fn read_u32(path: &Path) -> Result<Vec<u32>> {
    Ok(read_words(path)?.into_iter().map(u32::from_le_bytes).collect())
}

pub fn write_i32(path: &Path, values: &[i32]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| GtpError::io(path, e))
}

pub fn read_i32(path: &Path) -> Result<Vec<i32>> {
    Ok(read_words(path)?.into_iter().map(i32::from_le_bytes).collect())
}

/// 8-bit binary PGM.
pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GtpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{width} {height}\n255\n").map_err(|e| GtpError::io(path, e))?;
    w.write_all(values).map_err(|e| GtpError::io(path, e))?;
    w.flush().map_err(|e| GtpError::io(path, e))
}

/// Returns (width, height, values).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| GtpError::io(path, e))?;
    let bad = |why: &str| GtpError::validation(path, format!("malformed PGM: {why}"));
    // header: four whitespace-separated tokens, then exactly one whitespace byte
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
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
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if tokens[0] != "P5" {
        return Err(bad("magic is not P5"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("non-numeric header field"));
    let (width, height, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    if maxval != 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &bytes[pos + 1..];
    if data.len() != width * height {
        return Err(bad("pixel count does not match header"));
    }
    Ok((width, height, data.to_vec()))
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> GtpError {
    GtpError::Png {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

pub fn write_png_rgb(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GtpError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(rgb).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Returns (width, height, rgb bytes).
pub fn read_png_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path).map_err(|e| GtpError::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(png_err(path, "expected 8-bit RGB"));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
