//! Dataset ingestion, degradation, patch sampling and reference stitching.
//!
//! Training pairs live side by side in one directory as `<stem>_hr.png` and
//! `<stem>_ref.png`. A manifest with one `hr_path<TAB>ref_path` line per pair
//! is accepted instead.

mod augment;
pub mod synthetic;

pub use augment::{flip_horizontal, flip_vertical, rotate_ccw, rotate_cw, Augment};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::SR_SCALE;
use crate::imaging::{bicubic_resize, ColorSpace, ImageBuffer, Scale, ValueRange};

/// Paths of one training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairPaths {
    pub hr: PathBuf,
    pub reference: PathBuf,
}

/// Lists `*_hr.png` / `*_ref.png` siblings in lexicographic stem order.
pub fn load_pair_dataset(root: impl AsRef<Path>) -> Result<Vec<PairPaths>> {
    let root = root.as_ref();
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut hr: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut refs: BTreeMap<String, PathBuf> = BTreeMap::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        if let Some(stem) = name.strip_suffix("_hr.png") {
            hr.insert(stem.to_owned(), path.clone());
        } else if let Some(stem) = name.strip_suffix("_ref.png") {
            refs.insert(stem.to_owned(), path.clone());
        }
    }
    if let Some((_, orphan)) = refs.iter().find(|(s, _)| !hr.contains_key(*s)) {
        return Err(Error::MalformedDataset(format!(
            "{} has no matching _hr.png",
            orphan.display()
        )));
    }
    hr.into_iter()
        .map(|(stem, hr_path)| match refs.remove(&stem) {
            Some(reference) => Ok(PairPaths {
                hr: hr_path,
                reference,
            }),
            None => Err(Error::MalformedDataset(format!(
                "{} has no matching _ref.png",
                hr_path.display()
            ))),
        })
        .collect()
}

/// Reads a tab-separated manifest; relative paths resolve against its folder.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PairPaths>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(h), Some(r), None) => out.push(PairPaths {
                hr: base.join(h.trim()),
                reference: base.join(r.trim()),
            }),
            _ => {
                return Err(Error::MalformedDataset(format!(
                    "{}:{}: expected `hr_path<TAB>ref_path`",
                    path.display(),
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

/// One training example at HR patch size `P` and LR size `P / 4`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub x_hr: ImageBuffer,
    pub x_lr: ImageBuffer,
    pub y_hr: ImageBuffer,
    pub y_lr: ImageBuffer,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleOptions {
    /// HR patch edge (multiple of 4).
    pub patch: usize,
    pub augment: bool,
    /// Crop the reference to the patch too; otherwise it is used whole and
    /// must have sides divisible by 4.
    pub crop_reference: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        SampleOptions {
            patch: 160,
            augment: true,
            crop_reference: true,
        }
    }
}

fn random_crop<R: Rng + ?Sized>(img: &ImageBuffer, patch: usize, rng: &mut R) -> Result<ImageBuffer> {
    let (h, w) = img.dims();
    // crop origins stay on the 4x grid
    let top = SR_SCALE * rng.gen_range(0..=(h - patch) / SR_SCALE);
    let left = SR_SCALE * rng.gen_range(0..=(w - patch) / SR_SCALE);
    img.crop(top, left, patch, patch)
}

/// Degrades an HR image by bicubic 1/4.
pub fn degrade(hr: &ImageBuffer) -> Result<ImageBuffer> {
    bicubic_resize(hr, Scale::down(SR_SCALE as u32))
}

/// Crops target and reference independently, augments each with its own
/// draw and derives the LR halves by bicubic 1/4.
pub fn make_train_sample<R: Rng + ?Sized>(
    hr: &ImageBuffer,
    reference: &ImageBuffer,
    rng: &mut R,
    opts: SampleOptions,
) -> Result<TrainSample> {
    let p = opts.patch;
    if p == 0 || !p.is_multiple_of(SR_SCALE) {
        return Err(Error::invalid(format!("patch {p} is not a positive multiple of 4")));
    }
    for (name, img) in [("target", hr), ("reference", reference)] {
        if img.height() < p || img.width() < p {
            return Err(Error::invalid(format!(
                "{name} image {}x{} is smaller than the {p}x{p} patch",
                img.height(),
                img.width()
            )));
        }
    }
    let mut x_hr = random_crop(hr, p, rng)?;
    let mut y_hr = if opts.crop_reference {
        random_crop(reference, p, rng)?
    } else {
        let (h, w) = reference.dims();
        if h % SR_SCALE != 0 || w % SR_SCALE != 0 {
            return Err(Error::invalid(format!("uncropped reference {h}x{w} is not divisible by 4")));
        }
        reference.clone()
    };
    if opts.augment {
        x_hr = Augment::sample(rng).apply(&x_hr);
        y_hr = Augment::sample(rng).apply(&y_hr);
    }
    Ok(TrainSample {
        x_lr: degrade(&x_hr)?,
        y_lr: degrade(&y_hr)?,
        x_hr,
        y_hr,
    })
}

/// One benchmark item. `lr` is the degradation of `hr` reflect-padded to a
/// multiple of 4; metrics are taken on the unpadded `hr` region.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub name: String,
    pub hr: ImageBuffer,
    pub lr: ImageBuffer,
    pub reference: ImageBuffer,
}

impl EvalSample {
    pub fn from_hr(name: impl Into<String>, hr: ImageBuffer, reference: ImageBuffer) -> Result<Self> {
        let padded = hr.pad_reflect_to_multiple(SR_SCALE);
        let lr = degrade(&padded)?;
        Ok(EvalSample {
            name: name.into(),
            hr,
            lr,
            reference: reference.pad_reflect_to_multiple(SR_SCALE),
        })
    }
}

/// Places `count` references at the top-left of consecutive `cell x cell`
/// zero tiles, left to right.
pub fn stitch_references(refs: &[ImageBuffer], cell: usize, count: usize) -> Result<ImageBuffer> {
    if refs.len() != count {
        return Err(Error::invalid(format!(
            "expected exactly {count} references, got {}",
            refs.len()
        )));
    }
    let channels = refs.first().map_or(3, |r| r.channels());
    let color = refs.first().map_or(ColorSpace::Rgb, |r| r.color());
    let range = refs.first().map_or(ValueRange::Unit, |r| r.range());
    let width = cell * count;
    let mut data = vec![0f32; cell * width * channels];
    for (i, r) in refs.iter().enumerate() {
        if r.height() > cell || r.width() > cell {
            return Err(Error::invalid(format!(
                "reference {i} is {}x{}, larger than the {cell}x{cell} cell",
                r.height(),
                r.width()
            )));
        }
        if r.color() != color || r.range() != range {
            return Err(Error::invalid("references disagree on color space or range"));
        }
        for y in 0..r.height() {
            let dst = (y * width + i * cell) * channels;
            let src = y * r.width() * channels;
            let n = r.width() * channels;
            data[dst..dst + n].copy_from_slice(&r.data()[src..src + n]);
        }
    }
    ImageBuffer::new(cell, width, color, range, data)
}
