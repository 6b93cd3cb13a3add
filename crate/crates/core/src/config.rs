//! Run configuration: profile defaults, then a TOML file, then dotted
//! `section.key=value` overrides, validated before any work starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SampleOptions;
use crate::error::{Error, Result};
use crate::geometry::PerturbationRange;
use crate::network::NetworkConfig;
use crate::training::{LossWeights, RtrrGradient};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Small model on synthetic pairs; trains from scratch in minutes.
    Desk,
    /// Full-sized model and schedule on a pair dataset.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub iterations: u64,
    pub batch: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub enable_rtrr: bool,
    /// Perspective-warp the pass-two pair; off reproduces the collapse ablation.
    pub enable_pt: bool,
    pub rtrr_gradient: RtrrGradient,
    pub perturbation_lo: f64,
    pub perturbation_hi: f64,
    /// Multiply the learning rate by `lr_decay_gamma` every this many
    /// iterations; 0 disables decay.
    pub lr_decay_every: u64,
    pub lr_decay_gamma: f64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub critic_lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub lambda_rec: f64,
    pub lambda_rtrr: f64,
    pub lambda_per: f64,
    pub lambda_adv: f64,
    pub gp_weight: f64,
    pub critic_channels: usize,
    /// Archive holding the frozen perceptual feature extractor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perceptual_weights: Option<PathBuf>,
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_rec: self.lambda_rec,
            lambda_rtrr: self.lambda_rtrr,
            lambda_per: self.lambda_per,
            lambda_adv: self.lambda_adv,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generated texture pairs, no files needed.
    Synthetic,
    /// A directory of `*_hr.png` / `*_ref.png` siblings.
    Pairs,
    /// A tab-separated `hr<TAB>ref` manifest.
    Manifest,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub synthetic_count: usize,
    pub synthetic_size: usize,
    pub synthetic_seed: u64,
    pub patch: usize,
    pub augment: bool,
    pub crop_reference: bool,
}

impl DataConfig {
    pub fn sample_options(&self) -> SampleOptions {
        SampleOptions {
            patch: self.patch,
            augment: self.augment,
            crop_reference: self.crop_reference,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub output_dir: PathBuf,
    pub training: TrainingConfig,
    pub network: NetworkConfig,
    pub losses: LossConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            profile: Profile::Desk,
            output_dir: PathBuf::from("runs/desk"),
            training: TrainingConfig {
                iterations: 2000,
                batch: 2,
                lr: 1e-3,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                seed: 0,
                enable_rtrr: true,
                enable_pt: true,
                rtrr_gradient: RtrrGradient::Full,
                // the 5-20 px band for 160 px patches, scaled to 40 px references
                perturbation_lo: 1.25,
                perturbation_hi: 5.0,
                lr_decay_every: 0,
                lr_decay_gamma: 0.5,
                checkpoint_every: 500,
                log_every: 1,
                critic_lr: 1e-4,
            },
            network: NetworkConfig::desk(),
            losses: LossConfig {
                lambda_per: 0.0,
                lambda_adv: 0.0,
                critic_channels: 8,
                ..Self::full().losses
            },
            data: DataConfig {
                source: DataSource::Synthetic,
                root: None,
                manifest: None,
                synthetic_count: 8,
                synthetic_size: 32,
                synthetic_seed: 0,
                patch: 32,
                augment: false,
                crop_reference: false,
            },
        }
    }

    pub fn full() -> Self {
        let w = LossWeights::default();
        RunConfig {
            profile: Profile::Full,
            output_dir: PathBuf::from("runs/full"),
            training: TrainingConfig {
                iterations: 255_000,
                batch: 9,
                lr: 1e-4,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                seed: 0,
                enable_rtrr: true,
                enable_pt: true,
                rtrr_gradient: RtrrGradient::Full,
                perturbation_lo: 5.0,
                perturbation_hi: 20.0,
                lr_decay_every: 0,
                lr_decay_gamma: 0.5,
                checkpoint_every: 5000,
                log_every: 100,
                critic_lr: 1e-4,
            },
            network: NetworkConfig::full(),
            losses: LossConfig {
                lambda_rec: w.lambda_rec,
                lambda_rtrr: w.lambda_rtrr,
                lambda_per: w.lambda_per,
                lambda_adv: w.lambda_adv,
                gp_weight: 10.0,
                critic_channels: 32,
                perceptual_weights: None,
            },
            data: DataConfig {
                source: DataSource::Pairs,
                root: None,
                manifest: None,
                synthetic_count: 8,
                synthetic_size: 160,
                synthetic_seed: 0,
                patch: 160,
                augment: true,
                crop_reference: true,
            },
        }
    }

    pub fn for_profile(p: Profile) -> Self {
        match p {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn perturbation(&self) -> Result<PerturbationRange> {
        PerturbationRange::new(self.training.perturbation_lo, self.training.perturbation_hi)
            .map_err(|e| Error::config("training.perturbation_lo", e.to_string()))
    }

    /// Field-level checks; the first failure is reported.
    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.iterations == 0 {
            return Err(Error::config("training.iterations", "must be at least 1"));
        }
        if t.batch == 0 {
            return Err(Error::config("training.batch", "must be at least 1"));
        }
        for (field, v) in [("training.lr", t.lr), ("training.critic_lr", t.critic_lr), ("training.adam_eps", t.adam_eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [("training.adam_beta1", t.adam_beta1), ("training.adam_beta2", t.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(t.lr_decay_gamma > 0.0 && t.lr_decay_gamma <= 1.0) {
            return Err(Error::config("training.lr_decay_gamma", "must lie in (0, 1]"));
        }
        if t.checkpoint_every == 0 {
            return Err(Error::config("training.checkpoint_every", "must be at least 1"));
        }
        if t.log_every == 0 {
            return Err(Error::config("training.log_every", "must be at least 1"));
        }
        self.perturbation()?;
        self.network.validate()?;
        self.losses.weights().validate()?;
        if self.losses.lambda_adv > 0.0 && self.losses.critic_channels == 0 {
            return Err(Error::config("losses.critic_channels", "must be at least 1"));
        }
        if !(self.losses.gp_weight >= 0.0) {
            return Err(Error::config("losses.gp_weight", "must be non-negative"));
        }
        if self.losses.lambda_per > 0.0 && self.losses.perceptual_weights.is_none() {
            return Err(Error::config(
                "losses.perceptual_weights",
                "required when losses.lambda_per > 0",
            ));
        }
        let d = &self.data;
        if d.patch == 0 || !d.patch.is_multiple_of(4) {
            return Err(Error::config("data.patch", "must be a positive multiple of 4"));
        }
        match d.source {
            DataSource::Synthetic => {
                if d.synthetic_count == 0 {
                    return Err(Error::config("data.synthetic_count", "must be at least 1"));
                }
                if d.synthetic_size < d.patch {
                    return Err(Error::config("data.synthetic_size", "must be at least data.patch"));
                }
            }
            DataSource::Pairs if d.root.is_none() => {
                return Err(Error::config("data.root", "a pair dataset needs a root directory"));
            }
            DataSource::Manifest if d.manifest.is_none() => {
                return Err(Error::config("data.manifest", "a manifest dataset needs a manifest path"));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses `a.b.c=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn parse_override(s: &str) -> Result<(Vec<String>, toml::Value)> {
    let (path, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::config(s, "override must look like `section.key=value`"))?;
    let path: Vec<String> = path.trim().split('.').map(str::to_owned).collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(s, "empty path segment"));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_owned()));
    Ok((path, value))
}

fn nest(path: &[String], value: toml::Value) -> toml::Value {
    path.iter().rev().fold(value, |acc, key| {
        let mut t = toml::Table::new();
        t.insert(key.clone(), acc);
        toml::Value::Table(t)
    })
}

fn deserialize(value: toml::Value) -> Result<RunConfig> {
    RunConfig::deserialize(value.clone()).map_err(|e| {
        let msg = e.message().to_owned();
        // toml reports unknown keys without a path; recover it by finding the
        // table that holds the key alongside only expected siblings
        let mut ticks = msg.split('`').skip(1).step_by(2);
        let field = match (msg.starts_with("unknown field"), ticks.next()) {
            (true, Some(key)) => {
                let expected: Vec<&str> = ticks.collect();
                locate(&value, key, &expected, "").unwrap_or_else(|| key.to_owned())
            }
            _ => "config".to_owned(),
        };
        Error::config(field, msg)
    })
}

fn locate(v: &toml::Value, key: &str, expected: &[&str], prefix: &str) -> Option<String> {
    let t = v.as_table()?;
    let join = |k: &str| if prefix.is_empty() { k.to_owned() } else { format!("{prefix}.{k}") };
    if t.contains_key(key) && t.keys().all(|k| k == key || expected.contains(&k.as_str())) {
        return Some(join(key));
    }
    t.iter().find_map(|(k, child)| locate(child, key, expected, &join(k)))
}

/// Layers `file` and then `overrides` over `base` (or over the
/// selected profile's defaults when `base` is `None`), then validates.
pub fn resolve(base: Option<RunConfig>, file: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let file_value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let t: toml::Table = toml::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
            Some(toml::Value::Table(t))
        }
        None => None,
    };
    let sets = overrides.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>>>()?;
    let mut value = match base {
        Some(b) => toml::Value::try_from(b).expect("config serializes"),
        None => {
            // the profile decides the defaults, so read it first
            let mut profile = Profile::Desk;
            let mut pick = |v: &toml::Value| -> Result<()> {
                if let Some(p) = v.get("profile") {
                    profile = Profile::deserialize(p.clone())
                        .map_err(|_| Error::config("profile", format!("unknown profile {p}; use desk or full")))?;
                }
                Ok(())
            };
            if let Some(f) = &file_value {
                pick(f)?;
            }
            for (path, v) in &sets {
                if path.len() == 1 && path[0] == "profile" {
                    pick(&nest(path, v.clone()))?;
                }
            }
            toml::Value::try_from(RunConfig::for_profile(profile)).expect("config serializes")
        }
    };
    if let Some(f) = file_value {
        merge(&mut value, f);
    }
    for (path, v) in sets {
        merge(&mut value, nest(&path, v));
    }
    let cfg = deserialize(value)?;
    cfg.validate()?;
    Ok(cfg)
}
