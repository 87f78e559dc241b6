//! Grayscale PNG reading and writing.

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma};

use crate::error::{ingest_err, Error, Result};

/// Decoded grayscale raster with its source bit depth.
#[derive(Clone, Debug)]
pub struct Gray {
    pub h: usize,
    pub w: usize,
    /// Raw integer samples.
    pub data: Vec<u16>,
    pub bits: u8,
}

impl Gray {
    /// Samples scaled to `[0, 1]` by the full range of the bit depth.
    pub fn to_unit(&self) -> Vec<f32> {
        let max = if self.bits == 16 { 65535.0 } else { 255.0 };
        self.data.iter().map(|&v| (v as f64 / max) as f32).collect()
    }
}

/// Reads an 8- or 16-bit single-channel PNG.
pub fn read_gray16(path: &Path) -> Result<Gray> {
    let img = image::open(path).map_err(|e| ingest_err(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma16(b) => Ok(Gray { h, w, data: b.into_raw(), bits: 16 }),
        DynamicImage::ImageLuma8(b) => Ok(Gray { h, w, data: b.into_raw().into_iter().map(u16::from).collect(), bits: 8 }),
        other => Err(ingest_err(path, format!("expected grayscale PNG, found {:?}", other.color()))),
    }
}

/// Writes `[0, 1]` values as a 16-bit PNG; values are clamped then rounded.
pub fn write_gray16(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<()> {
    if values.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} image", values.len())));
    }
    let raw: Vec<u16> = values.iter().map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}
