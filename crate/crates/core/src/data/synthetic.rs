//! Procedural images for desk-scale runs, demos and tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::imaging::{ColorSpace, ImageBuffer, ValueRange};

/// High-frequency RGB texture: oriented gratings (periods 3 to 9 px) plus a
/// handful of hard-edged rectangles.
pub fn texture(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gratings: Vec<(f32, f32, f32, f32, [f32; 3])> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let period = rng.gen_range(3.0..9.0f32);
            let k = std::f32::consts::TAU / period;
            let phase = rng.gen_range(0.0..std::f32::consts::TAU);
            let amp = rng.gen_range(0.08..0.16f32);
            let tint = [rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0), rng.gen_range(0.5..1.0)];
            (k * angle.cos(), k * angle.sin(), phase, amp, tint)
        })
        .collect();
    let rects: Vec<(usize, usize, usize, usize, [f32; 3])> = (0..5)
        .map(|_| {
            let h = rng.gen_range(2..=height.max(3) / 3 + 1);
            let w = rng.gen_range(2..=width.max(3) / 3 + 1);
            let top = rng.gen_range(0..height);
            let left = rng.gen_range(0..width);
            let delta = [
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
                rng.gen_range(-0.2..0.2),
            ];
            (top, left, h, w, delta)
        })
        .collect();
    let base = [rng.gen_range(0.35..0.65f32), rng.gen_range(0.35..0.65), rng.gen_range(0.35..0.65)];
    ImageBuffer::from_fn(height, width, ColorSpace::Rgb, ValueRange::Unit, |y, x, c| {
        let (fy, fx) = (y as f32, x as f32);
        let mut v = base[c];
        for (kx, ky, phase, amp, tint) in &gratings {
            v += amp * tint[c] * (kx * fx + ky * fy + phase).sin();
        }
        for (top, left, h, w, delta) in &rects {
            if y >= *top && y < top + h && x >= *left && x < left + w {
                v += delta[c];
            }
        }
        v
    })
    .expect("valid dims")
}

/// Smooth, band-limited RGB scene (no detail above ~1/12 cycles per px).
pub fn smooth_scene(height: usize, width: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let waves: Vec<(f32, f32, f32, f32)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-0.08..0.08),
                rng.gen_range(-0.08..0.08),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.05..0.1),
            )
        })
        .collect();
    ImageBuffer::from_fn(height, width, ColorSpace::Rgb, ValueRange::Unit, |y, x, c| {
        let mut v = 0.5;
        for (i, (kx, ky, phase, amp)) in waves.iter().enumerate() {
            let shift = (c * (i + 1)) as f32 * 0.7;
            v += amp * (kx * x as f32 + ky * y as f32 + phase + shift).sin();
        }
        v
    })
    .expect("valid dims")
}

/// Target/reference pairs cut from one texture canvas. The reference is the
/// whole `size + 8` canvas and contains the target at an offset on the 4x
/// grid, so every target pixel has an exact match.
pub fn desk_pairs(count: usize, size: usize, seed: u64) -> Vec<(ImageBuffer, ImageBuffer)> {
    let margin = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    (0..count)
        .map(|i| {
            let canvas = texture(size + margin, size + margin, seed.wrapping_add(i as u64 * 7919));
            let (dy, dx) = (4 * rng.gen_range(0..=2usize), 4 * rng.gen_range(0..=2usize));
            let hr = canvas.crop(dy, dx, size, size).expect("inside canvas");
            (hr, canvas)
        })
        .collect()
}
