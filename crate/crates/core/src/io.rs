//! Binary PGM/PPM rasters, raw `f64` sidecars, and CSV traces.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Image, ScalarField};
use crate::supervision::LabelMap;

/// Header and raw sample bytes of a binary netpbm file.
struct Pnm {
    width: usize,
    height: usize,
    channels: usize,
    maxval: u32,
    samples: Vec<u32>,
}

fn parse_pnm(bytes: &[u8]) -> Result<Pnm> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("expected a binary PGM (P5) or PPM (P6) file".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *field = text
            .parse()
            .map_err(|_| Error::Format(format!("bad header field at byte {start}")))?;
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("header not terminated by whitespace".into()));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::Format("zero image dimension".into()));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("maxval {maxval} out of range")));
    }
    let wide = maxval > 255;
    let count = width * height * channels;
    let need = count * if wide { 2 } else { 1 };
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Format(format!("raster truncated: need {need} bytes")))?;
    let samples: Vec<u32> = if wide {
        raster.chunks_exact(2).map(|c| u32::from(u16::from_be_bytes([c[0], c[1]]))).collect()
    } else {
        raster.iter().map(|&b| u32::from(b)).collect()
    };
    if samples.iter().any(|&s| s > maxval as u32) {
        return Err(Error::Format("sample exceeds maxval".into()));
    }
    Ok(Pnm { width, height, channels, maxval: maxval as u32, samples })
}

fn encode(magic: &str, width: usize, height: usize, samples: &[u8]) -> Vec<u8> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(samples);
    out
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a P5/P6 file, mapping samples linearly onto `[0, 1]`.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let pnm = parse_pnm(&fs::read(path)?)?;
    let scale = f64::from(pnm.maxval);
    let data = pnm.samples.iter().map(|&s| f64::from(s) / scale).collect();
    Image::new(pnm.height, pnm.width, pnm.channels, data)
}

/// Writes 1-channel images as P5 and 3-channel images as P6, 8-bit.
pub fn image_bytes(image: &Image) -> Result<Vec<u8>> {
    let magic = match image.channels() {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::input(format!("cannot store a {c}-channel image as PGM/PPM"))),
    };
    let samples: Vec<u8> = image.as_slice().iter().map(|&v| quantize(v)).collect();
    Ok(encode(magic, image.width(), image.height(), &samples))
}

pub fn write_image(path: impl AsRef<Path>, image: &Image) -> Result<()> {
    fs::write(path, image_bytes(image)?)?;
    Ok(())
}

/// Min-max rescales the field to 0..=255. A constant field maps to 0.
pub fn field_bytes(field: &ScalarField) -> Vec<u8> {
    let (lo, hi) = field.min_max();
    let span = hi - lo;
    let samples: Vec<u8> = field
        .as_slice()
        .iter()
        .map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 })
        .collect();
    encode("P5", field.width(), field.height(), &samples)
}

pub fn write_field_pgm(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    fs::write(path, field_bytes(field))?;
    Ok(())
}

/// Class indices stored directly as gray levels; 255 is the ignore label.
pub fn read_labels(path: impl AsRef<Path>) -> Result<LabelMap> {
    let pnm = parse_pnm(&fs::read(path)?)?;
    if pnm.channels != 1 || pnm.maxval > 255 {
        return Err(Error::Format("label maps must be 8-bit single-channel PGM".into()));
    }
    LabelMap::new(pnm.height, pnm.width, pnm.samples.iter().map(|&s| s as u8).collect())
}

pub fn label_bytes(labels: &LabelMap) -> Vec<u8> {
    encode("P5", labels.width(), labels.height(), labels.as_slice())
}

pub fn write_labels(path: impl AsRef<Path>, labels: &LabelMap) -> Result<()> {
    fs::write(path, label_bytes(labels))?;
    Ok(())
}

/// Row-major little-endian `f64` values with no header.
pub fn write_f64_raw(path: impl AsRef<Path>, field: &ScalarField) -> Result<()> {
    let bytes: Vec<u8> = field.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f64_raw(path: impl AsRef<Path>, height: usize, width: usize) -> Result<ScalarField> {
    let bytes = fs::read(path)?;
    if bytes.len() != height * width * 8 {
        return Err(Error::Format(format!(
            "raw field has {} bytes, expected {}",
            bytes.len(),
            height * width * 8
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    ScalarField::new(height, width, data)
}

/// Writes `header` then one line per row, values joined by commas with
/// shortest round-trip formatting.
pub fn write_csv<W: Write>(mut out: W, header: &str, rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    writeln!(out, "{header}")?;
    for (iter, row) in rows.into_iter().enumerate() {
        write!(out, "{iter}")?;
        for v in row {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}
