//! 8-bit PNG input/output mapped linearly to the [-1, 1] pixel range.

use crate::error::{DbafError, Result};
use crate::types::ImageTensor;
use ndarray::Array3;
use std::path::Path;

/// Maps a [-1, 1] value to an 8-bit channel.
pub fn to_u8(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Maps an 8-bit channel to [-1, 1] (0 -> -1, 255 -> 1).
pub fn from_u8(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

pub fn encode_png(image: &ImageTensor) -> Result<Vec<u8>> {
    let size = image.size() as u32;
    let mut img = image::RgbImage::new(size, size);
    for (y, x, px) in img.enumerate_pixels_mut().map(|(x, y, p)| (y, x, p)) {
        for c in 0..3 {
            px.0[c] = to_u8(image.pixels()[[y as usize, x as usize, c]]);
        }
    }
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)?;
    Ok(buf.into_inner())
}

pub fn save_png(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(image)?)?;
    Ok(())
}

pub fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?.into_rgb8();
    let (w, h) = img.dimensions();
    if w != h || !(w as usize).is_power_of_two() {
        return Err(DbafError::shape(format!(
            "expected square power-of-two image, got {w}x{h}"
        )));
    }
    let size = w as usize;
    let mut px = Array3::zeros((size, size, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            px[[y as usize, x as usize, c]] = from_u8(p.0[c]);
        }
    }
    ImageTensor::new(px)
}

pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    decode_png(&std::fs::read(path)?)
}
