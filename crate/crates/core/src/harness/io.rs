//! Raster file formats: 8-bit RGB PNG, 16-bit gray PNG (labels and depth in
//! millimeters) and little-endian PFM depth.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{ImageBuffer as PngBuffer, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{RadError, Result};
use crate::image::{DepthMap, ImageBuffer};

fn codec(path: &Path, e: impl std::fmt::Display) -> RadError {
    RadError::Codec {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_png16(path: &Path, width: usize, height: usize, values: &[u16]) -> Result<()> {
    let buf: PngBuffer<Luma<u16>, Vec<u16>> = PngBuffer::from_raw(width as u32, height as u32, values.to_vec())
        .ok_or_else(|| codec(path, "buffer does not fit the raster"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| codec(path, e))
}

/// Reads a single-channel 16-bit PNG; 8-bit gray is widened.
pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let img = image::open(path).map_err(|e| codec(path, e))?;
    match img {
        image::DynamicImage::ImageLuma16(b) => Ok((b.width() as usize, b.height() as usize, b.into_raw())),
        image::DynamicImage::ImageLuma8(b) => Ok((
            b.width() as usize,
            b.height() as usize,
            b.into_raw().into_iter().map(u16::from).collect(),
        )),
        other => Err(codec(path, format!("expected a gray PNG, found {:?}", other.color()))),
    }
}

pub fn write_rgb_png(path: &Path, image: &ImageBuffer) -> Result<()> {
    let data: Vec<u8> = image
        .data()
        .iter()
        .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_rgb8(path, image.width(), image.height(), data)
}

pub fn write_rgb8(path: &Path, width: usize, height: usize, data: Vec<u8>) -> Result<()> {
    let buf: PngBuffer<Rgb<u8>, Vec<u8>> = PngBuffer::from_raw(width as u32, height as u32, data)
        .ok_or_else(|| codec(path, "buffer does not fit the raster"))?;
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| codec(path, e))
}

pub fn read_rgb_png(path: &Path) -> Result<ImageBuffer> {
    let img = image::open(path).map_err(|e| codec(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|x| x as f64 / 255.0).collect();
    ImageBuffer::from_raw(w, h, data)
}

/// On-disk depth encodings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthFormat {
    /// 16-bit PNG in millimeters, 0 = invalid.
    Png16,
    /// Little-endian single-channel PFM in meters, non-positive = invalid.
    Pfm,
}

impl DepthFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(DepthFormat::Png16),
            "pfm" => Some(DepthFormat::Pfm),
            _ => None,
        }
    }
}

pub fn write_depth(path: &Path, depth: &DepthMap, format: DepthFormat) -> Result<()> {
    match format {
        DepthFormat::Png16 => {
            let mm: Vec<u16> = (0..depth.len())
                .map(|i| depth.get_index(i).map_or(0, |d| (d * 1000.0).round().clamp(1.0, 65535.0) as u16))
                .collect();
            write_png16(path, depth.width(), depth.height(), &mm)
        }
        DepthFormat::Pfm => write_pfm(path, depth),
    }
}

pub fn read_depth(path: &Path, format: DepthFormat) -> Result<DepthMap> {
    match format {
        DepthFormat::Png16 => {
            let (w, h, mm) = read_png16(path)?;
            DepthMap::from_values(w, h, mm.into_iter().map(|x| x as f64 / 1000.0).collect())
        }
        DepthFormat::Pfm => read_pfm(path),
    }
}

/// PFM stores rows bottom to top; scale `-1` marks little-endian.
pub fn write_pfm(path: &Path, depth: &DepthMap) -> Result<()> {
    let f = File::create(path).map_err(|e| RadError::io(path, e))?;
    let mut w = BufWriter::new(f);
    let io = |e| RadError::io(path, e);
    write!(w, "Pf\n{} {}\n-1\n", depth.width(), depth.height()).map_err(io)?;
    for v in (0..depth.height()).rev() {
        for u in 0..depth.width() {
            let d = depth.get(u, v).unwrap_or(0.0) as f32;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_pfm(path: &Path) -> Result<DepthMap> {
    let f = File::open(path).map_err(|e| RadError::io(path, e))?;
    let mut r = BufReader::new(f);
    let parse = |m: &str| RadError::Parse {
        location: path.display().to_string(),
        message: m.to_string(),
    };
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line).map_err(|e| RadError::io(path, e))? == 0 {
            return Err(parse("truncated PFM header"));
        }
        header.extend(line.split_whitespace().map(str::to_string));
        if header.first().is_some_and(|h| h != "Pf") {
            return Err(parse("only single-channel PFM (Pf) is supported"));
        }
    }
    let mut tokens = header.iter().skip(1);
    let mut next = |what: &str| tokens.next().ok_or_else(|| parse(&format!("missing {what}")));
    let w: usize = next("width")?.parse().map_err(|_| parse("bad width"))?;
    let h: usize = next("height")?.parse().map_err(|_| parse("bad height"))?;
    let scale: f64 = next("scale")?.parse().map_err(|_| parse("bad scale"))?;
    let mut bytes = vec![0u8; w * h * 4];
    r.read_exact(&mut bytes).map_err(|_| parse("truncated PFM data"))?;
    let mut values = vec![0.0; w * h];
    for (i, c) in bytes.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let x = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, u) = (i / w, i % w);
        values[(h - 1 - row) * w + u] = x as f64;
    }
    DepthMap::from_values(w, h, values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_formats_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::from_fn(5, 3, |u, v| (u != 2).then_some(0.25 + u as f64 * 0.5 + v as f64 * 0.125));
        let pfm = dir.path().join("d.pfm");
        write_depth(&pfm, &d, DepthFormat::Pfm).unwrap();
        assert_eq!(read_depth(&pfm, DepthFormat::Pfm).unwrap(), d);
        let png = dir.path().join("d.png");
        write_depth(&png, &d, DepthFormat::Png16).unwrap();
        assert_eq!(read_depth(&png, DepthFormat::Png16).unwrap(), d);
    }

    #[test]
    fn rgb_round_trip_is_8bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuffer::from_fn(4, 2, |u, v| [u as f64 / 255.0, v as f64 * 100.0 / 255.0, 1.0]);
        let p = dir.path().join("x.png");
        write_rgb_png(&p, &img).unwrap();
        assert_eq!(read_rgb_png(&p).unwrap(), img);
    }
}
