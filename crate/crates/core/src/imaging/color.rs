use super::{ColorSpace, ImageBuffer, ValueRange};
use crate::error::{Error, Result};

// ITU-R BT.601 studio swing, input in [0, 1], output in [0, 255].
const Y_COEF: [f64; 3] = [65.481, 128.553, 24.966];
const CB_COEF: [f64; 3] = [-37.797, -74.203, 112.0];
const CR_COEF: [f64; 3] = [112.0, -93.786, -18.214];

fn require_rgb(img: &ImageBuffer) -> Result<()> {
    if img.color() != ColorSpace::Rgb {
        return Err(Error::InvalidColorSpace {
            expected: ColorSpace::Rgb.name(),
            actual: img.color().name(),
        });
    }
    Ok(())
}

fn unit_scale(img: &ImageBuffer) -> f64 {
    match img.range() {
        ValueRange::Unit => 1.0,
        ValueRange::Byte => 1.0 / 255.0,
    }
}

/// Luma of an RGB image: `16 + 65.481 R + 128.553 G + 24.966 B`, in `[0, 255]`.
pub fn rgb_to_y(img: &ImageBuffer) -> Result<ImageBuffer> {
    require_rgb(img)?;
    let k = unit_scale(img);
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| {
            let (r, g, b) = (p[0] as f64 * k, p[1] as f64 * k, p[2] as f64 * k);
            (16.0 + Y_COEF[0] * r + Y_COEF[1] * g + Y_COEF[2] * b) as f32
        })
        .collect();
    ImageBuffer::new(
        img.height(),
        img.width(),
        ColorSpace::Y,
        ValueRange::Byte,
        data,
    )
}

/// Full BT.601 studio-swing YCbCr, `[0, 255]` per channel.
pub fn rgb_to_ycbcr(img: &ImageBuffer) -> Result<ImageBuffer> {
    require_rgb(img)?;
    let k = unit_scale(img);
    let mut data = Vec::with_capacity(img.data().len());
    for p in img.data().chunks_exact(3) {
        let rgb = [p[0] as f64 * k, p[1] as f64 * k, p[2] as f64 * k];
        let dot = |c: &[f64; 3]| c[0] * rgb[0] + c[1] * rgb[1] + c[2] * rgb[2];
        data.push((16.0 + dot(&Y_COEF)) as f32);
        data.push((128.0 + dot(&CB_COEF)) as f32);
        data.push((128.0 + dot(&CR_COEF)) as f32);
    }
    ImageBuffer::new(
        img.height(),
        img.width(),
        ColorSpace::YCbCr,
        ValueRange::Byte,
        data,
    )
}
