//! Benchmark runner: upscale, convert to luma, score, aggregate.
//!
//! Scores are Y-channel PSNR (peak 255) and SSIM on the unpadded HR region.
//! A failing image becomes an error row and is left out of the means.

mod datasets;

pub use datasets::{cufed5, from_pairs, random_reference, self_reference, synthetic, Dataset, CUFED5_CELL, CUFED5_REFS};

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::EvalSample;
use crate::error::{Error, Result};
use crate::imaging::{bicubic_resize, psnr, rgb_to_y, ssim, ImageBuffer, Scale, PSNR_PEAK};
use crate::network::RefSr;
use crate::tensor::ParamStore;

/// Anything that maps an evaluation sample to a super-resolved image at the
/// padded HR size (or larger; the result is cropped to the HR region).
pub trait Upscaler: Sync {
    fn upscale(&self, sample: &EvalSample) -> Result<ImageBuffer>;
}

pub struct ModelUpscaler<'a> {
    pub model: &'a RefSr,
    pub store: &'a ParamStore<f32>,
}

impl Upscaler for ModelUpscaler<'_> {
    fn upscale(&self, sample: &EvalSample) -> Result<ImageBuffer> {
        self.model.infer(self.store, &sample.lr, &sample.reference)
    }
}

/// Plain bicubic x4, the usual floor.
pub struct BicubicUpscaler;

impl Upscaler for BicubicUpscaler {
    fn upscale(&self, sample: &EvalSample) -> Result<ImageBuffer> {
        bicubic_resize(&sample.lr, Scale::up(4))
    }
}

/// Returns the ground truth; the upper bound of every metric.
pub struct OracleUpscaler;

impl Upscaler for OracleUpscaler {
    fn upscale(&self, sample: &EvalSample) -> Result<ImageBuffer> {
        Ok(sample.hr.clone())
    }
}

/// One row of the report. `psnr` is `f64::INFINITY` for an exact match and
/// is written to JSON as the string `"inf"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    #[serde(with = "db", default)]
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset: String,
    pub checkpoint: String,
    pub per_image: Vec<ImageMetrics>,
    /// `None` when no image was scored.
    #[serde(with = "db")]
    pub mean_psnr: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub scored: usize,
    pub failed: usize,
}

mod db {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_finite() => s.serialize_f64(*x),
            Some(x) if *x > 0.0 => s.serialize_str("inf"),
            Some(_) => s.serialize_str("-inf"),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Repr>::deserialize(d)? {
            None => Ok(None),
            Some(Repr::Num(x)) => Ok(Some(x)),
            Some(Repr::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Repr::Text(t)) if t == "-inf" => Ok(Some(f64::NEG_INFINITY)),
            Some(Repr::Text(t)) => Err(serde::de::Error::custom(format!("bad dB value `{t}`"))),
        }
    }
}

/// Y-channel PSNR and SSIM of `sr` against `hr`, after cropping `sr` to the
/// HR size. `shave` trims a border from both before scoring.
pub fn score(sr: &ImageBuffer, hr: &ImageBuffer, shave: usize) -> Result<(f64, f64)> {
    if sr.height() < hr.height() || sr.width() < hr.width() {
        return Err(Error::invalid(format!(
            "output {}x{} is smaller than the target {}x{}",
            sr.height(),
            sr.width(),
            hr.height(),
            hr.width()
        )));
    }
    let sr = sr.crop(0, 0, hr.height(), hr.width())?;
    let (a, b) = (rgb_to_y(&sr)?.shave(shave)?, rgb_to_y(hr)?.shave(shave)?);
    Ok((psnr(&a, &b, PSNR_PEAK)?, ssim(&a, &b)?))
}

fn score_sample(up: &dyn Upscaler, sample: &EvalSample, shave: usize) -> ImageMetrics {
    let scored = up.upscale(sample).and_then(|sr| score(&sr, &sample.hr, shave));
    match scored {
        Ok((p, s)) => ImageMetrics {
            name: sample.name.clone(),
            psnr: Some(p),
            ssim: Some(s),
            error: None,
        },
        Err(e) => ImageMetrics {
            name: sample.name.clone(),
            psnr: None,
            ssim: None,
            error: Some(e.to_string()),
        },
    }
}

/// Sums in sorted order so the mean does not depend on sample order.
fn order_free_mean(mut xs: Vec<f64>) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    Some(xs.iter().sum::<f64>() / xs.len() as f64)
}

impl MetricsReport {
    pub fn from_rows(dataset: impl Into<String>, checkpoint: impl Into<String>, per_image: Vec<ImageMetrics>) -> Self {
        let ok: Vec<&ImageMetrics> = per_image.iter().filter(|m| m.error.is_none()).collect();
        let mean_psnr = order_free_mean(ok.iter().filter_map(|m| m.psnr).collect());
        let mean_ssim = order_free_mean(ok.iter().filter_map(|m| m.ssim).collect());
        MetricsReport {
            dataset: dataset.into(),
            checkpoint: checkpoint.into(),
            scored: ok.len(),
            failed: per_image.len() - ok.len(),
            per_image,
            mean_psnr,
            mean_ssim,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Fixed-width table, one row per image plus the mean.
    pub fn to_table(&self) -> String {
        let width = self.per_image.iter().map(|m| m.name.len()).max().unwrap_or(0).max(24);
        let fmt_db = |v: Option<f64>| match v {
            Some(x) if x.is_infinite() => format!("{:>8}", "inf"),
            Some(x) => format!("{x:>8.2}"),
            None => format!("{:>8}", "-"),
        };
        let fmt_ssim = |v: Option<f64>| v.map_or(format!("{:>7}", "-"), |x| format!("{x:>7.4}"));
        let mut out = String::new();
        let _ = writeln!(out, "dataset: {}  checkpoint: {}", self.dataset, self.checkpoint);
        let _ = writeln!(out, "{:<width$}  {:>8}   {:>7}", "image", "PSNR", "SSIM");
        let _ = writeln!(out, "{}", "-".repeat(width + 20));
        for m in &self.per_image {
            match &m.error {
                Some(e) => {
                    let _ = writeln!(out, "{:<width$}  error: {e}", m.name);
                }
                None => {
                    let _ = writeln!(out, "{:<width$}  {} / {}", m.name, fmt_db(m.psnr), fmt_ssim(m.ssim));
                }
            }
        }
        let _ = writeln!(out, "{}", "-".repeat(width + 20));
        let label = format!("mean ({} ok, {} failed)", self.scored, self.failed);
        let _ = writeln!(out, "{:<width$}  {} / {}", label, fmt_db(self.mean_psnr), fmt_ssim(self.mean_ssim));
        out
    }

    /// Writes `<stem>.json` and `<stem>.txt`.
    pub fn write(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let json = stem.with_extension("json");
        std::fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        let txt = stem.with_extension("txt");
        std::fs::write(&txt, self.to_table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Scores every sample. Images are independent and may run in parallel;
/// rows keep input order.
pub fn evaluate(
    up: &dyn Upscaler,
    samples: &[EvalSample],
    dataset: &str,
    checkpoint: &str,
    shave: usize,
) -> MetricsReport {
    #[cfg(feature = "parallel")]
    let rows: Vec<ImageMetrics> = {
        use rayon::prelude::*;
        samples.par_iter().map(|s| score_sample(up, s, shave)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Vec<ImageMetrics> = samples.iter().map(|s| score_sample(up, s, shave)).collect();
    MetricsReport::from_rows(dataset, checkpoint, rows)
}
