use super::ImageBuffer;
use crate::error::{Error, Result};

/// Cubic convolution parameter.
pub const CUBIC_A: f64 = -0.5;

/// Keys cubic convolution kernel with `a = -0.5`.
#[inline]
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    let x2 = x * x;
    let x3 = x2 * x;
    if x <= 1.0 {
        (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    } else if x < 2.0 {
        a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Positive rational resampling factor (`out = floor(in * num / den)`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    num: u32,
    den: u32,
}

impl Scale {
    pub fn new(num: i64, den: i64) -> Result<Self> {
        if num <= 0 || den <= 0 {
            return Err(Error::invalid(format!(
                "scale must be positive, got {num}/{den}"
            )));
        }
        let (num, den) = (
            u32::try_from(num).map_err(|_| Error::invalid("scale numerator too large"))?,
            u32::try_from(den).map_err(|_| Error::invalid("scale denominator too large"))?,
        );
        Ok(Scale { num, den })
    }

    pub fn up(factor: u32) -> Self {
        Scale {
            num: factor.max(1),
            den: 1,
        }
    }

    pub fn down(factor: u32) -> Self {
        Scale {
            num: 1,
            den: factor.max(1),
        }
    }

    pub fn apply(self, n: usize) -> usize {
        n * self.num as usize / self.den as usize
    }

    pub fn factor(self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Per-output-sample taps along one axis.
struct AxisTaps {
    // Flattened (source index, weight) lists; `starts[o]..starts[o + 1]`.
    index: Vec<usize>,
    weight: Vec<f64>,
    starts: Vec<usize>,
}

fn axis_taps(in_len: usize, out_len: usize, scale: f64) -> AxisTaps {
    // Downscaling widens the kernel by 1/scale (antialiased), upscaling uses
    // the plain 4-tap kernel.
    let stretch = if scale < 1.0 { scale } else { 1.0 };
    let support = 2.0 / stretch;
    let mut taps = AxisTaps {
        index: Vec::new(),
        weight: Vec::new(),
        starts: Vec::with_capacity(out_len + 1),
    };
    for o in 0..out_len {
        taps.starts.push(taps.index.len());
        let center = (o as f64 + 0.5) / scale - 0.5;
        let first = (center - support).floor() as i64;
        let last = (center + support).ceil() as i64;
        let begin = taps.index.len();
        let mut sum = 0.0;
        for i in first..=last {
            let w = cubic_kernel((center - i as f64) * stretch);
            if w == 0.0 {
                continue;
            }
            let clamped = i.clamp(0, in_len as i64 - 1) as usize;
            taps.index.push(clamped);
            taps.weight.push(w);
            sum += w;
        }
        if sum != 1.0 {
            for w in &mut taps.weight[begin..] {
                *w /= sum;
            }
        }
    }
    taps.starts.push(taps.index.len());
    taps
}

/// Separable bicubic resampling of one row-major plane (width pass, then
/// height pass). Half-pixel centers, edge-clamped borders.
pub fn resize_plane(
    src: &[f64],
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), height * width);
    if out_height == height && out_width == width {
        return src.to_vec();
    }
    let sx = out_width as f64 / width as f64;
    let sy = out_height as f64 / height as f64;
    let tx = axis_taps(width, out_width, sx);
    let ty = axis_taps(height, out_height, sy);

    let mut tmp = vec![0.0; height * out_width];
    for y in 0..height {
        let row = &src[y * width..(y + 1) * width];
        for o in 0..out_width {
            let (a, b) = (tx.starts[o], tx.starts[o + 1]);
            let mut acc = 0.0;
            for t in a..b {
                acc += row[tx.index[t]] * tx.weight[t];
            }
            tmp[y * out_width + o] = acc;
        }
    }
    let mut out = vec![0.0; out_height * out_width];
    for o in 0..out_height {
        let (a, b) = (ty.starts[o], ty.starts[o + 1]);
        let dst = &mut out[o * out_width..(o + 1) * out_width];
        for t in a..b {
            let w = ty.weight[t];
            let row = &tmp[ty.index[t] * out_width..(ty.index[t] + 1) * out_width];
            for (d, &s) in dst.iter_mut().zip(row) {
                *d += s * w;
            }
        }
    }
    out
}

/// Bicubic resize by a rational factor; output is `floor(H*s) x floor(W*s)`.
pub fn bicubic_resize(img: &ImageBuffer, scale: Scale) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    let (oh, ow) = (scale.apply(h), scale.apply(w));
    if oh == 0 || ow == 0 {
        return Err(Error::invalid(format!(
            "resizing {h}x{w} by {} yields an empty image",
            scale.factor()
        )));
    }
    if (oh, ow) == (h, w) {
        return Ok(img.clone());
    }
    let planes: Vec<Vec<f64>> = (0..img.channels())
        .map(|c| resize_plane(&img.plane(c), h, w, oh, ow))
        .collect();
    ImageBuffer::from_planes(oh, ow, img.color(), img.range(), &planes)
}
