use super::homography::Homography;
use crate::error::Result;
use crate::imaging::{cubic_kernel, ImageBuffer};

/// Bicubic sample of an interleaved image at continuous coordinates, edge
/// clamped. Writes one value per channel into `out`.
pub(crate) fn sample_bicubic(img: &ImageBuffer, x: f64, y: f64, out: &mut [f64]) {
    let (h, w) = img.dims();
    let c = img.channels();
    let data = img.data();
    // continuous -> index space
    let (u, v) = (x - 0.5, y - 0.5);
    let (x0, y0) = (u.floor(), v.floor());
    let (fx, fy) = (u - x0, v - y0);
    let (x0, y0) = (x0 as i64, y0 as i64);
    let wx = [
        cubic_kernel(fx + 1.0),
        cubic_kernel(fx),
        cubic_kernel(fx - 1.0),
        cubic_kernel(fx - 2.0),
    ];
    let wy = [
        cubic_kernel(fy + 1.0),
        cubic_kernel(fy),
        cubic_kernel(fy - 1.0),
        cubic_kernel(fy - 2.0),
    ];
    out.iter_mut().for_each(|o| *o = 0.0);
    for (j, &ky) in wy.iter().enumerate() {
        if ky == 0.0 {
            continue;
        }
        let yy = (y0 - 1 + j as i64).clamp(0, h as i64 - 1) as usize;
        for (i, &kx) in wx.iter().enumerate() {
            if kx == 0.0 {
                continue;
            }
            let xx = (x0 - 1 + i as i64).clamp(0, w as i64 - 1) as usize;
            let k = ky * kx;
            let base = (yy * w + xx) * c;
            for (ch, o) in out.iter_mut().enumerate() {
                *o += k * data[base + ch] as f64;
            }
        }
    }
}

/// Inverse-mapping warp: `out(q) = img(h^-1 q)`, same canvas size, bicubic
/// sampling with edge-clamped out-of-bounds reads.
pub fn warp_perspective(img: &ImageBuffer, h: &Homography) -> Result<ImageBuffer> {
    let inv = h.inverse()?;
    let (height, width) = img.dims();
    let c = img.channels();
    let mut data = Vec::with_capacity(height * width * c);
    let mut px = vec![0.0; c];
    for y in 0..height {
        for x in 0..width {
            let [sx, sy] = inv.apply([x as f64 + 0.5, y as f64 + 0.5]);
            sample_bicubic(img, sx, sy, &mut px);
            data.extend(px.iter().map(|&v| v as f32));
        }
    }
    ImageBuffer::new(height, width, img.color(), img.range(), data)
}
