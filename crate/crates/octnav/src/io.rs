//! File formats: `.ioct` volumes, PGM and PNG images, JSON scene files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use octnav_core::{IoctVolume, PhantomScene, VolumeGeometry};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("unsupported dtype `{0}` (only u16)")]
    Dtype(String),
    #[error(transparent)]
    Volume(#[from] octnav_core::Error),
    #[error("png encoding failed: {0}")]
    Png(#[from] png::EncodingError),
}

/// First line of an `.ioct` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoctHeader {
    pub dims: [usize; 3],
    pub spacing_um: [f64; 3],
    pub dtype: String,
}

/// Reads a volume: one JSON header line, then `X·Y·Z` little-endian u16
/// samples (z fastest, then x, then y) and nothing else.
pub fn read_ioct(mut reader: impl BufRead) -> Result<IoctVolume, IoError> {
    let mut line = Vec::new();
    reader.read_until(b'\n', &mut line)?;
    if line.last() != Some(&b'\n') {
        return Err(IoError::Io(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            "header line is not terminated",
        )));
    }
    let header: IoctHeader = serde_json::from_slice(&line)?;
    if header.dtype != "u16" {
        return Err(IoError::Dtype(header.dtype));
    }
    let geometry = VolumeGeometry::new(header.dims, header.spacing_um)?;
    let expected = geometry.voxel_count();
    let mut payload = Vec::with_capacity(expected * 2);
    reader.read_to_end(&mut payload)?;
    if payload.len() != expected * 2 {
        return Err(octnav_core::Error::SizeMismatch {
            expected,
            actual: payload.len() / 2,
        }
        .into());
    }
    let voxels = payload
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    Ok(IoctVolume::new(geometry, voxels)?)
}

pub fn write_ioct(mut writer: impl Write, volume: &IoctVolume) -> Result<(), IoError> {
    let g = volume.geometry();
    let header = IoctHeader {
        dims: g.dims,
        spacing_um: g.spacing,
        dtype: "u16".into(),
    };
    serde_json::to_writer(&mut writer, &header)?;
    writer.write_all(b"\n")?;
    let mut bytes = Vec::with_capacity(volume.voxels().len() * 2);
    for v in volume.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<IoctVolume, IoError> {
    read_ioct(BufReader::new(File::open(path)?))
}

pub fn save_volume(path: impl AsRef<Path>, volume: &IoctVolume) -> Result<(), IoError> {
    write_ioct(BufWriter::new(File::create(path)?), volume)
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<PhantomScene, IoError> {
    let scene: PhantomScene = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    scene.validate()?;
    Ok(scene)
}

pub fn save_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Linear rescale to the full u16 range; returns the samples and the
/// source (min, max). A constant image maps to zeros.
pub fn rescale_u16(values: &[f32]) -> (Vec<u16>, f32, f32) {
    let (lo, hi) = values
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if values.is_empty() {
        return (Vec::new(), 0.0, 0.0);
    }
    let span = (hi - lo) as f64;
    let out = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) as f64 / span * 65535.0).round() as u16
            } else {
                0
            }
        })
        .collect();
    (out, lo, hi)
}

/// Sidecar describing how a rescaled image maps back to intensities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleSidecar {
    pub width: usize,
    pub height: usize,
    pub min: f32,
    pub max: f32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    pub spacing_um: [f64; 2],
}

/// Binary 16-bit PGM (P5, maxval 65535, big-endian samples).
pub fn write_pgm16(mut writer: impl Write, width: usize, height: usize, data: &[u16]) -> std::io::Result<()> {
    write!(writer, "P5\n{width} {height}\n65535\n")?;
    let mut bytes = Vec::with_capacity(data.len() * 2);
    for v in data {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    writer.write_all(&bytes)?;
    writer.flush()
}

/// Binary 8-bit PGM (P5, maxval 255).
pub fn write_pgm8(mut writer: impl Write, width: usize, height: usize, data: &[u8]) -> std::io::Result<()> {
    write!(writer, "P5\n{width} {height}\n255\n")?;
    writer.write_all(data)?;
    writer.flush()
}

/// Reads a binary PGM written by [`write_pgm16`] or [`write_pgm8`].
pub fn read_pgm(mut reader: impl BufRead) -> std::io::Result<(usize, usize, u16, Vec<u16>)> {
    let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
    let mut tokens = Vec::new();
    while tokens.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("truncated PGM header"));
        }
        let line = line.split('#').next().unwrap_or("");
        tokens.extend(line.split_whitespace().map(str::to_string));
    }
    if tokens[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, maxval) = (parse(&tokens[1])?, parse(&tokens[2])?, parse(&tokens[3])?);
    let mut raw = Vec::new();
    reader.read_to_end(&mut raw)?;
    let data = if maxval > 255 {
        raw.chunks_exact(2).map(|b| u16::from_be_bytes([b[0], b[1]])).collect::<Vec<_>>()
    } else {
        raw.iter().map(|&b| b as u16).collect()
    };
    if data.len() != w * h {
        return Err(bad("PGM payload size mismatch"));
    }
    Ok((w, h, maxval as u16, data))
}

/// 16-bit grayscale PNG.
pub fn encode_png16(width: usize, height: usize, data: &[u16]) -> Result<Vec<u8>, IoError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Sixteen);
        let mut w = enc.write_header()?;
        let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
        w.write_image_data(&bytes)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rescale_endpoints() {
        let (v, lo, hi) = rescale_u16(&[2.0, 4.0, 3.0]);
        assert_eq!((lo, hi), (2.0, 4.0));
        assert_eq!(v, vec![0, 65535, 32768]);
        assert_eq!(rescale_u16(&[5.0, 5.0]).0, vec![0, 0]);
    }

    #[test]
    fn pgm_round_trip() {
        let mut buf = Vec::new();
        write_pgm16(&mut buf, 3, 2, &[0, 1, 65535, 300, 2, 7]).unwrap();
        let (w, h, m, d) = read_pgm(&buf[..]).unwrap();
        assert_eq!((w, h, m), (3, 2, 65535));
        assert_eq!(d, vec![0, 1, 65535, 300, 2, 7]);
        let mut buf = Vec::new();
        write_pgm8(&mut buf, 2, 1, &[9, 255]).unwrap();
        assert_eq!(read_pgm(&buf[..]).unwrap().3, vec![9, 255]);
    }
}
