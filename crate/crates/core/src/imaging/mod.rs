//! Pixel-level primitives: the [`ImageBuffer`] container, color conversion,
//! bicubic resampling, PSNR/SSIM and PNG IO.

mod color;
mod io;
mod metrics;
mod resize;

pub use color::{rgb_to_y, rgb_to_ycbcr};
pub use io::{load_png, save_png, to_rgb8};
pub use metrics::{psnr, ssim, PSNR_PEAK};
pub use resize::{bicubic_resize, cubic_kernel, resize_plane, Scale, CUBIC_A};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Declared value domain of an image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[0, 255]`
    Byte,
}

impl ValueRange {
    pub fn max(self) -> f32 {
        match self {
            ValueRange::Unit => 1.0,
            ValueRange::Byte => 255.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ColorSpace {
    Rgb,
    YCbCr,
    /// Single luma channel.
    Y,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb | ColorSpace::YCbCr => 3,
            ColorSpace::Y => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Rgb => "RGB",
            ColorSpace::YCbCr => "YCbCr",
            ColorSpace::Y => "Y",
        }
    }
}

/// Interleaved `H x W x C` float image.
///
/// Every constructor clamps into the declared [`ValueRange`], so pixel values
/// are always inside the range.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    color: ColorSpace,
    range: ValueRange,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(
        height: usize,
        width: usize,
        color: ColorSpace,
        range: ValueRange,
        mut data: Vec<f32>,
    ) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be at least 1x1, got {height}x{width}"
            )));
        }
        let expected = height * width * color.channels();
        if data.len() != expected {
            return Err(Error::invalid(format!(
                "pixel buffer has {} values, expected {expected}",
                data.len()
            )));
        }
        let hi = range.max();
        for v in &mut data {
            // NaN maps to 0 so the range invariant holds unconditionally.
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
        }
        Ok(ImageBuffer {
            height,
            width,
            color,
            range,
            data,
        })
    }

    pub fn filled(
        height: usize,
        width: usize,
        color: ColorSpace,
        range: ValueRange,
        value: f32,
    ) -> Result<Self> {
        Self::new(
            height,
            width,
            color,
            range,
            vec![value; height * width * color.channels()],
        )
    }

    /// Builds an image from `f(y, x, c)`.
    pub fn from_fn(
        height: usize,
        width: usize,
        color: ColorSpace,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let c = color.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in 0..height {
            for x in 0..width {
                for ch in 0..c {
                    data.push(f(y, x, ch));
                }
            }
        }
        Self::new(height, width, color, range, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn color(&self) -> ColorSpace {
        self.color
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels() + c]
    }

    /// Applies `f` to every value and re-clamps.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> ImageBuffer {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Self::new(self.height, self.width, self.color, self.range, data)
            .expect("shape preserved")
    }

    /// Same pixels re-expressed in another range.
    pub fn to_range(&self, range: ValueRange) -> ImageBuffer {
        if range == self.range {
            return self.clone();
        }
        let k = range.max() / self.range.max();
        let data = self.data.iter().map(|&v| v * k).collect();
        Self::new(self.height, self.width, self.color, range, data).expect("shape preserved")
    }

    /// Channel `c` as a row-major plane in 64-bit.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        let ch = self.channels();
        self.data
            .iter()
            .skip(c)
            .step_by(ch)
            .map(|&v| v as f64)
            .collect()
    }

    /// Rebuilds an image from per-channel row-major planes.
    pub fn from_planes(
        height: usize,
        width: usize,
        color: ColorSpace,
        range: ValueRange,
        planes: &[Vec<f64>],
    ) -> Result<Self> {
        let c = color.channels();
        if planes.len() != c || planes.iter().any(|p| p.len() != height * width) {
            return Err(Error::invalid("plane count or plane size mismatch"));
        }
        let mut data = vec![0f32; height * width * c];
        for (ch, plane) in planes.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * c + ch] = v as f32;
            }
        }
        Self::new(height, width, color, range, data)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::invalid(format!(
                "crop {height}x{width}+{top}+{left} exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for y in top..top + height {
            let start = (y * self.width + left) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        Self::new(height, width, self.color, self.range, data)
    }

    /// Removes `n` pixels from every border.
    pub fn shave(&self, n: usize) -> Result<Self> {
        if 2 * n >= self.height || 2 * n >= self.width {
            return Err(Error::invalid(format!(
                "cannot shave {n} px from a {}x{} image",
                self.height, self.width
            )));
        }
        self.crop(n, n, self.height - 2 * n, self.width - 2 * n)
    }

    /// Pads bottom/right by reflection so both dims are multiples of `multiple`.
    pub fn pad_reflect_to_multiple(&self, multiple: usize) -> Self {
        let ph = self.height.div_ceil(multiple) * multiple;
        let pw = self.width.div_ceil(multiple) * multiple;
        if ph == self.height && pw == self.width {
            return self.clone();
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(ph * pw * c);
        for y in 0..ph {
            let sy = reflect_index(y, self.height);
            for x in 0..pw {
                let sx = reflect_index(x, self.width);
                let s = (sy * self.width + sx) * c;
                data.extend_from_slice(&self.data[s..s + c]);
            }
        }
        Self::new(ph, pw, self.color, self.range, data).expect("valid padded shape")
    }
}

/// Mirror index without repeating the edge sample; clamps when the extent is
/// too small to mirror.
fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_clamps_to_range() {
        let img = ImageBuffer::new(
            1,
            3,
            ColorSpace::Y,
            ValueRange::Unit,
            vec![-0.5, 0.5, 2.0],
        )
        .unwrap();
        assert_eq!(img.data(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn rejects_empty_and_mismatched() {
        assert!(ImageBuffer::new(0, 3, ColorSpace::Y, ValueRange::Unit, vec![]).is_err());
        assert!(ImageBuffer::new(2, 2, ColorSpace::Rgb, ValueRange::Unit, vec![0.0; 4]).is_err());
    }

    #[test]
    fn reflect_padding() {
        let img = ImageBuffer::from_fn(1, 3, ColorSpace::Y, ValueRange::Byte, |_, x, _| x as f32)
            .unwrap();
        let p = img.pad_reflect_to_multiple(4);
        assert_eq!(p.dims(), (4, 4));
        // row 0: 0 1 2 |1
        assert_eq!(&p.data()[0..4], &[0.0, 1.0, 2.0, 1.0]);
        // rows replicate since height 1 clamps
        assert_eq!(&p.data()[12..16], &[0.0, 1.0, 2.0, 1.0]);
    }

    #[test]
    fn planes_roundtrip() {
        let img = ImageBuffer::from_fn(2, 3, ColorSpace::Rgb, ValueRange::Unit, |y, x, c| {
            (y * 6 + x * 2 + c) as f32 / 20.0
        })
        .unwrap();
        let planes: Vec<_> = (0..3).map(|c| img.plane(c)).collect();
        let back =
            ImageBuffer::from_planes(2, 3, ColorSpace::Rgb, ValueRange::Unit, &planes).unwrap();
        assert_eq!(back, img);
    }
}
