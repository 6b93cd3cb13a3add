use std::path::Path;

use image::{GrayImage, RgbImage};

use super::{ColorSpace, ImageBuffer, ValueRange};
use crate::error::{Error, Result};

/// Reads any 8-bit PNG as RGB in `[0, 1]` (`value / 255`).
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageBuffer::new(h as usize, w as usize, ColorSpace::Rgb, ValueRange::Unit, data)
}

/// Quantizes to 8 bits by rounding.
pub fn to_rgb8(img: &ImageBuffer) -> Vec<u8> {
    let k = 255.0 / img.range().max();
    let q = |v: f32| (v * k).round().clamp(0.0, 255.0) as u8;
    match img.channels() {
        3 => img.data().iter().map(|&v| q(v)).collect(),
        _ => img.data().iter().flat_map(|&v| [q(v); 3]).collect(),
    }
}

/// Writes RGB images as 8-bit RGB PNG and single-channel images as grayscale.
pub fn save_png(path: impl AsRef<Path>, img: &ImageBuffer) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (img.height() as u32, img.width() as u32);
    let k = 255.0 / img.range().max();
    let q = |v: f32| (v * k).round().clamp(0.0, 255.0) as u8;
    let res = if img.channels() == 3 {
        let raw = img.data().iter().map(|&v| q(v)).collect();
        RgbImage::from_raw(w, h, raw)
            .expect("buffer size matches")
            .save(path)
    } else {
        let raw = img.data().iter().map(|&v| q(v)).collect();
        GrayImage::from_raw(w, h, raw)
            .expect("buffer size matches")
            .save(path)
    };
    res.map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
