//! Three toolkit operations over RGBA canvas buffers, exported to the
//! browser. The plain functions do the work and are testable natively; the
//! `#[wasm_bindgen]` wrappers only translate errors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use rrsr::data::{degrade, synthetic};
use rrsr::eval::score;
use rrsr::geometry::{make_perspective_pair, PerturbationRange, SR_SCALE};
use rrsr::imaging::{bicubic_resize, ColorSpace, ImageBuffer, Scale, ValueRange};
use rrsr::matching::{match_features, FeatureMap};

/// An RGBA image plus whatever number the operation reports.
#[wasm_bindgen]
pub struct Frame {
    rgba: Vec<u8>,
    width: usize,
    height: usize,
    value: f64,
    offsets: Vec<f64>,
}

#[wasm_bindgen]
impl Frame {
    #[wasm_bindgen(getter)]
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn width(&self) -> usize {
        self.width
    }

    #[wasm_bindgen(getter)]
    pub fn height(&self) -> usize {
        self.height
    }

    /// PSNR in dB for the upscale, mean match score for the transfer.
    #[wasm_bindgen(getter)]
    pub fn value(&self) -> f64 {
        self.value
    }

    /// Vertex offsets of a warp as `[dx0, dy0, .., dx3, dy3]`.
    #[wasm_bindgen(getter)]
    pub fn offsets(&self) -> Vec<f64> {
        self.offsets.clone()
    }
}

impl Frame {
    fn new(img: &ImageBuffer, value: f64) -> Self {
        Frame {
            rgba: to_rgba(img),
            width: img.width(),
            height: img.height(),
            value,
            offsets: Vec::new(),
        }
    }
}

fn from_rgba(rgba: &[u8], width: usize, height: usize) -> Result<ImageBuffer, String> {
    if rgba.len() != width * height * 4 {
        return Err(format!("expected {} RGBA bytes for {width}x{height}, got {}", width * height * 4, rgba.len()));
    }
    let data = rgba
        .chunks_exact(4)
        .flat_map(|p| p[..3].iter().map(|&v| v as f32 / 255.0))
        .collect();
    ImageBuffer::new(height, width, ColorSpace::Rgb, ValueRange::Unit, data).map_err(|e| e.to_string())
}

fn to_rgba(img: &ImageBuffer) -> Vec<u8> {
    img.data()
        .chunks_exact(img.channels())
        .flat_map(|p| {
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [q(p[0]), q(p[1]), q(p[2]), 255]
        })
        .collect()
}

/// Crops to a multiple of the SR scale.
fn aligned(img: &ImageBuffer) -> Result<ImageBuffer, String> {
    let (h, w) = (img.height() / SR_SCALE * SR_SCALE, img.width() / SR_SCALE * SR_SCALE);
    if h == 0 || w == 0 {
        return Err(format!("image must be at least {SR_SCALE}x{SR_SCALE}"));
    }
    img.crop(0, 0, h, w).map_err(|e| e.to_string())
}

/// A seeded test texture.
pub fn texture(width: usize, height: usize, seed: u32) -> Frame {
    Frame::new(&synthetic::texture(height, width, seed as u64), 0.0)
}

/// Degrades by 4 and upscales back with bicubic; `value` is the Y-PSNR
/// against the (cropped) input.
pub fn bicubic_roundtrip(rgba: &[u8], width: usize, height: usize) -> Result<Frame, String> {
    let hr = aligned(&from_rgba(rgba, width, height)?)?;
    let up = degrade(&hr)
        .and_then(|lr| bicubic_resize(&lr, Scale::up(SR_SCALE as u32)))
        .map_err(|e| e.to_string())?;
    let (psnr, _) = score(&up, &hr, 0).map_err(|e| e.to_string())?;
    Ok(Frame::new(&up, psnr))
}

/// Random perspective warp with per-component vertex offsets in `[lo, hi]`.
pub fn warp(rgba: &[u8], width: usize, height: usize, seed: u32, lo: f64, hi: f64) -> Result<Frame, String> {
    let hr = aligned(&from_rgba(rgba, width, height)?)?;
    let lr = degrade(&hr).map_err(|e| e.to_string())?;
    let range = PerturbationRange::new(lo, hi).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
    let pair = make_perspective_pair(&lr, &hr, &mut rng, range).map_err(|e| e.to_string())?;
    let mut frame = Frame::new(&pair.hr_warped, 0.0);
    frame.offsets = pair.offsets.iter().flatten().copied().collect();
    Ok(frame)
}

/// Matches the 4x-degraded `target` against the 4x-degraded `reference`
/// and rebuilds the target from the matched reference pixels, at LR size.
/// `value` is the mean normalized cross-correlation of the matches.
pub fn transfer(
    target: &[u8],
    width: usize,
    height: usize,
    reference: &[u8],
    ref_width: usize,
    ref_height: usize,
    patch: usize,
) -> Result<Frame, String> {
    let lr = degrade(&aligned(&from_rgba(target, width, height)?)?).map_err(|e| e.to_string())?;
    let small = degrade(&aligned(&from_rgba(reference, ref_width, ref_height)?)?).map_err(|e| e.to_string())?;
    let m = match_features(&FeatureMap::from_image(&lr), &FeatureMap::from_image(&small), patch, None)
        .map_err(|e| e.to_string())?;
    let rebuilt = ImageBuffer::from_fn(lr.height(), lr.width(), ColorSpace::Rgb, ValueRange::Unit, |y, x, c| {
        let [dy, dx] = m.offset(y, x);
        small.get((y as i32 + dy) as usize, (x as i32 + dx) as usize, c)
    })
    .map_err(|e| e.to_string())?;
    let mean = m.scores.iter().map(|&s| s as f64).sum::<f64>() / m.scores.len() as f64;
    Ok(Frame::new(&rebuilt, mean))
}

fn js<T>(r: Result<T, String>) -> Result<T, JsError> {
    r.map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = texture)]
pub fn texture_js(width: usize, height: usize, seed: u32) -> Frame {
    texture(width, height, seed)
}

#[wasm_bindgen(js_name = bicubicRoundtrip)]
pub fn bicubic_roundtrip_js(rgba: &[u8], width: usize, height: usize) -> Result<Frame, JsError> {
    js(bicubic_roundtrip(rgba, width, height))
}

#[wasm_bindgen(js_name = warp)]
pub fn warp_js(rgba: &[u8], width: usize, height: usize, seed: u32, lo: f64, hi: f64) -> Result<Frame, JsError> {
    js(warp(rgba, width, height, seed, lo, hi))
}

#[wasm_bindgen(js_name = transfer)]
pub fn transfer_js(
    target: &[u8],
    width: usize,
    height: usize,
    reference: &[u8],
    ref_width: usize,
    ref_height: usize,
    patch: usize,
) -> Result<Frame, JsError> {
    js(transfer(target, width, height, reference, ref_width, ref_height, patch))
}
