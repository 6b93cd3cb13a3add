//! Dense correspondence between LR-input features and reference features.
//!
//! Every LR position is matched against every reference position by cosine
//! similarity of edge-clamped `patch x patch` neighborhoods. The winning
//! displacement becomes the pre-offset used by deformable alignment.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;

/// Planar `C x H x W` feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::invalid(format!(
                "feature map {channels}x{height}x{width} does not fit {} values",
                data.len()
            )));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    /// Raw pixel channels as features.
    pub fn from_image(img: &ImageBuffer) -> Self {
        let (h, w) = img.dims();
        let c = img.channels();
        let mut data = vec![0f32; c * h * w];
        for (i, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v;
            }
        }
        FeatureMap {
            channels: c,
            height: h,
            width: w,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Value at a signed position, clamped to the nearest edge sample.
    #[inline]
    pub fn at_clamped(&self, c: usize, y: i64, x: i64) -> f32 {
        let y = y.clamp(0, self.height as i64 - 1) as usize;
        let x = x.clamp(0, self.width as i64 - 1) as usize;
        self.at(c, y, x)
    }
}

/// Per-position integer displacement into the reference grid plus the
/// winning similarity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceMap {
    pub height: usize,
    pub width: usize,
    pub ref_height: usize,
    pub ref_width: usize,
    /// Row-major `(dy, dx)` per LR position.
    pub offsets: Vec<[i32; 2]>,
    pub scores: Vec<f32>,
}

impl CorrespondenceMap {
    /// Uniform displacement everywhere (used for tests and degenerate refs).
    pub fn uniform(height: usize, width: usize, ref_height: usize, ref_width: usize, dy: i32, dx: i32) -> Self {
        CorrespondenceMap {
            height,
            width,
            ref_height,
            ref_width,
            offsets: vec![[dy, dx]; height * width],
            scores: vec![1.0; height * width],
        }
    }

    #[inline]
    pub fn offset(&self, y: usize, x: usize) -> [i32; 2] {
        self.offsets[y * self.width + x]
    }

    /// True when every `p + offset(p)` lands inside the reference grid.
    pub fn in_bounds(&self) -> bool {
        (0..self.height).all(|y| {
            (0..self.width).all(|x| {
                let [dy, dx] = self.offset(y, x);
                let (ty, tx) = (y as i64 + dy as i64, x as i64 + dx as i64);
                ty >= 0 && tx >= 0 && ty < self.ref_height as i64 && tx < self.ref_width as i64
            })
        })
    }

    pub const DUMP_MAGIC: &'static [u8; 8] = b"RRSROFF1";

    /// Little-endian dump: magic, `h`, `w` (u32), `h*w*2` i32 offsets,
    /// `h*w` f32 scores.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        out.write_all(Self::DUMP_MAGIC)?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        for [dy, dx] in &self.offsets {
            out.write_all(&dy.to_le_bytes())?;
            out.write_all(&dx.to_le_bytes())?;
        }
        for s in &self.scores {
            out.write_all(&s.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    /// Reads a dump back. Reference extents are not stored and come back as 0.
    pub fn read_from(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        let bad = |e: std::io::Error| Error::invalid(format!("truncated offset dump: {e}"));
        input.read_exact(&mut magic).map_err(bad)?;
        if &magic != Self::DUMP_MAGIC {
            return Err(Error::invalid("not an offset dump (bad magic)"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(bad)?;
        let height = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word).map_err(bad)?;
        let width = u32::from_le_bytes(word) as usize;
        let n = height * width;
        let mut offsets = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut word).map_err(bad)?;
            let dy = i32::from_le_bytes(word);
            input.read_exact(&mut word).map_err(bad)?;
            offsets.push([dy, i32::from_le_bytes(word)]);
        }
        let mut scores = Vec::with_capacity(n);
        for _ in 0..n {
            input.read_exact(&mut word).map_err(bad)?;
            scores.push(f32::from_le_bytes(word));
        }
        Ok(CorrespondenceMap {
            height,
            width,
            ref_height: 0,
            ref_width: 0,
            offsets,
            scores,
        })
    }
}

/// Source of pre-offsets; the dense matcher below is one implementation, a
/// learned correspondence network would be another.
pub trait CorrespondenceProvider {
    fn correspond(&self, lr: &FeatureMap, reference: &FeatureMap) -> Result<CorrespondenceMap>;
}

/// Exhaustive (or windowed) normalized cross-correlation matcher.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NccMatcher {
    pub patch: usize,
    /// Restrict the search to `|q - p| <= radius` per axis when set.
    pub radius: Option<usize>,
}

impl Default for NccMatcher {
    fn default() -> Self {
        NccMatcher {
            patch: 3,
            radius: None,
        }
    }
}

impl CorrespondenceProvider for NccMatcher {
    fn correspond(&self, lr: &FeatureMap, reference: &FeatureMap) -> Result<CorrespondenceMap> {
        match_features(lr, reference, self.patch, self.radius)
    }
}

/// Unit-normalized patch vector at every position, ordered `(ky, kx, c)`.
/// Norms below the guard yield the zero vector.
fn unit_patches(f: &FeatureMap, patch: usize) -> Vec<f64> {
    let d = patch * patch * f.channels;
    let half = (patch / 2) as i64;
    let mut out = vec![0.0f64; f.height * f.width * d];
    let mut buf = vec![0.0f64; d];
    for y in 0..f.height {
        for x in 0..f.width {
            let mut i = 0;
            for ky in 0..patch as i64 {
                for kx in 0..patch as i64 {
                    for c in 0..f.channels {
                        buf[i] = f.at_clamped(c, y as i64 + ky - half, x as i64 + kx - half) as f64;
                        i += 1;
                    }
                }
            }
            let norm = buf.iter().fold(0.0, |acc, v| acc + v * v).sqrt();
            let dst = &mut out[(y * f.width + x) * d..][..d];
            if norm > NORM_GUARD {
                for (o, v) in dst.iter_mut().zip(&buf) {
                    *o = v / norm;
                }
            }
        }
    }
    out
}

pub(crate) const NORM_GUARD: f64 = 1e-12;

/// True when `(score, dy, dx)` beats the current best: higher score, then
/// smaller squared displacement, then smaller `(dy, dx)` lexicographically.
#[inline]
pub(crate) fn better(score: f64, dy: i64, dx: i64, best: f64, bdy: i64, bdx: i64) -> bool {
    if score != best {
        return score > best;
    }
    let (d, bd) = (dy * dy + dx * dx, bdy * bdy + bdx * bdx);
    if d != bd {
        return d < bd;
    }
    (dy, dx) < (bdy, bdx)
}

pub fn match_features(
    f_lr: &FeatureMap,
    f_ref: &FeatureMap,
    patch: usize,
    radius: Option<usize>,
) -> Result<CorrespondenceMap> {
    if f_lr.channels != f_ref.channels {
        return Err(Error::invalid(format!(
            "channel mismatch: {} vs {}",
            f_lr.channels, f_ref.channels
        )));
    }
    if patch == 0 || patch.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch size {patch} must be odd")));
    }
    for (name, f) in [("lr", f_lr), ("reference", f_ref)] {
        if f.height < patch || f.width < patch {
            return Err(Error::invalid(format!(
                "{name} feature map {}x{} smaller than patch {patch}",
                f.height, f.width
            )));
        }
    }
    let d = patch * patch * f_lr.channels;
    let lr_units = unit_patches(f_lr, patch);
    let ref_units = unit_patches(f_ref, patch);
    let (h, w) = (f_lr.height, f_lr.width);
    let (rh, rw) = (f_ref.height, f_ref.width);

    let match_row = |y: usize| -> Vec<([i32; 2], f32)> {
        (0..w)
            .map(|x| {
                let a = &lr_units[(y * w + x) * d..][..d];
                let (y0, y1, x0, x1) = match radius {
                    Some(r) => (
                        y.saturating_sub(r),
                        (y + r + 1).min(rh),
                        x.saturating_sub(r),
                        (x + r + 1).min(rw),
                    ),
                    None => (0, rh, 0, rw),
                };
                let (mut best, mut bdy, mut bdx) = (f64::NEG_INFINITY, 0i64, 0i64);
                for qy in y0..y1 {
                    for qx in x0..x1 {
                        let b = &ref_units[(qy * rw + qx) * d..][..d];
                        let mut s = 0.0f64;
                        for i in 0..d {
                            s += a[i] * b[i];
                        }
                        let (dy, dx) = (qy as i64 - y as i64, qx as i64 - x as i64);
                        if better(s, dy, dx, best, bdy, bdx) {
                            best = s;
                            bdy = dy;
                            bdx = dx;
                        }
                    }
                }
                if best == f64::NEG_INFINITY {
                    // empty window: nearest in-bounds position
                    bdy = y.min(rh - 1) as i64 - y as i64;
                    bdx = x.min(rw - 1) as i64 - x as i64;
                    best = 0.0;
                }
                ([bdy as i32, bdx as i32], best as f32)
            })
            .collect()
    };

    #[cfg(feature = "parallel")]
    let rows: Vec<Vec<([i32; 2], f32)>> = {
        use rayon::prelude::*;
        (0..h).into_par_iter().map(match_row).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<Vec<([i32; 2], f32)>> = (0..h).map(match_row).collect();

    let mut offsets = Vec::with_capacity(h * w);
    let mut scores = Vec::with_capacity(h * w);
    for (o, s) in rows.into_iter().flatten() {
        offsets.push(o);
        scores.push(s);
    }
    Ok(CorrespondenceMap {
        height: h,
        width: w,
        ref_height: rh,
        ref_width: rw,
        offsets,
        scores,
    })
}

/// Lifts a 1x map to scale `s`: offsets times `s`, nearest replication.
pub fn scale_offsets(m: &CorrespondenceMap, s: usize) -> Result<CorrespondenceMap> {
    if ![1, 2, 4].contains(&s) {
        return Err(Error::invalid(format!("offset scale must be 1, 2 or 4, got {s}")));
    }
    if s == 1 {
        return Ok(m.clone());
    }
    let (h, w) = (m.height * s, m.width * s);
    let mut offsets = Vec::with_capacity(h * w);
    let mut scores = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let i = (y / s) * m.width + x / s;
            let [dy, dx] = m.offsets[i];
            offsets.push([dy * s as i32, dx * s as i32]);
            scores.push(m.scores[i]);
        }
    }
    Ok(CorrespondenceMap {
        height: h,
        width: w,
        ref_height: m.ref_height * s,
        ref_width: m.ref_width * s,
        offsets,
        scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(c: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0f32)).collect();
        FeatureMap::new(c, h, w, data).unwrap()
    }

    fn roll(f: &FeatureMap, dy: usize, dx: usize) -> FeatureMap {
        let (c, h, w) = (f.channels(), f.height(), f.width());
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[(ch * h + (y + dy) % h) * w + (x + dx) % w] = f.at(ch, y, x);
                }
            }
        }
        FeatureMap::new(c, h, w, data).unwrap()
    }

    #[test]
    fn self_match() {
        let f = random_map(4, 10, 12, 1);
        let m = match_features(&f, &f, 3, None).unwrap();
        assert!(m.offsets.iter().all(|&o| o == [0, 0]));
        assert!(m.scores.iter().all(|&s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rolled_copy_recovers_shift() {
        let f = random_map(3, 16, 16, 2);
        let r = roll(&f, 3, 5);
        let m = match_features(&f, &r, 3, None).unwrap();
        for y in 1..16 - 3 - 1 {
            for x in 1..16 - 5 - 1 {
                assert_eq!(m.offset(y, x), [3, 5], "at {y},{x}");
            }
        }
        assert!(m.in_bounds());
    }

    #[test]
    fn constant_reference_ties_to_zero() {
        let f = random_map(2, 8, 8, 3);
        let c = FeatureMap::new(2, 8, 8, vec![0.5; 128]).unwrap();
        let m = match_features(&f, &c, 3, None).unwrap();
        assert!(m.offsets.iter().all(|&o| o == [0, 0]));
        assert!(m.scores.iter().all(|s| s.is_finite()));
        let z = FeatureMap::new(2, 8, 8, vec![0.0; 128]).unwrap();
        let mz = match_features(&f, &z, 3, None).unwrap();
        assert!(mz.offsets.iter().all(|&o| o == [0, 0]));
        assert!(mz.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn channel_mismatch() {
        assert!(match_features(&random_map(2, 4, 4, 0), &random_map(3, 4, 4, 0), 3, None).is_err());
    }

    #[test]
    fn windowed_search_stays_local() {
        let f = random_map(3, 12, 12, 4);
        let r = roll(&f, 1, 2);
        let m = match_features(&f, &r, 3, Some(2)).unwrap();
        assert_eq!(m.offset(5, 5), [1, 2]);
        assert!(m.offsets.iter().all(|o| o[0].abs() <= 2 && o[1].abs() <= 2));
    }

    #[test]
    fn scaling_rules() {
        let f = random_map(2, 6, 6, 5);
        let m = match_features(&f, &roll(&f, 1, 1), 3, None).unwrap();
        assert_eq!(scale_offsets(&m, 1).unwrap(), m);
        let u = CorrespondenceMap::uniform(3, 3, 6, 6, 1, 2);
        let u4 = scale_offsets(&u, 4).unwrap();
        assert_eq!((u4.height, u4.width), (12, 12));
        assert!(u4.offsets.iter().all(|&o| o == [4, 8]));
        let m2 = scale_offsets(&m, 2).unwrap();
        for y in 0..12 {
            for x in 0..12 {
                let [dy, dx] = m.offset(y / 2, x / 2);
                assert_eq!(m2.offset(y, x), [2 * dy, 2 * dx]);
            }
        }
        assert!(m2.in_bounds());
        assert!(scale_offsets(&m, 3).is_err());
    }

    #[test]
    fn dump_roundtrip() {
        let f = random_map(2, 5, 7, 6);
        let m = match_features(&f, &roll(&f, 2, 0), 3, None).unwrap();
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"RRSROFF1");
        assert_eq!(buf.len(), 8 + 8 + 35 * 8 + 35 * 4);
        let back = CorrespondenceMap::read_from(&buf[..]).unwrap();
        assert_eq!(back.offsets, m.offsets);
        assert_eq!(back.scores, m.scores);
        buf[0] = b'X';
        assert!(CorrespondenceMap::read_from(&buf[..]).is_err());
    }
}
