use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rtrr_step, stream, Adam, Batch, ConvCritic, Extras, FeatureExtractor, LossBundle, StepOptions};
use crate::checkpoint::Archive;
use crate::config::{DataSource, RunConfig};
use crate::data::{load_manifest, load_pair_dataset, make_train_sample, synthetic, PairPaths, TrainSample};
use crate::error::{Error, Result};
use crate::imaging::{load_png, ImageBuffer};
use crate::network::RefSr;
use crate::tensor::{Graph, ParamStore};

// RNG slots within one iteration
const SLOT_SAMPLES: u64 = 0;
const SLOT_WARP: u64 = 1;
const SLOT_CRITIC: u64 = 2;
const INIT_ITERATION: u64 = u64::MAX;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";
pub const LAST_CHECKPOINT: &str = "last.rrsr";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iter: u64,
    pub rec: f32,
    pub rtrr: f32,
    pub per: f32,
    pub adv: f32,
    pub total: f32,
    pub lr: f64,
    /// Wall time since the start of training, summed across resumes.
    pub seconds: f64,
    /// Collapse diagnostic: a sudden drop signals the auto-encoder shortcut.
    pub rtrr_rec_ratio: f32,
}

/// Training pairs, held in memory or read on demand.
pub enum TrainerData {
    Memory(Vec<(ImageBuffer, ImageBuffer)>),
    Files(Vec<PairPaths>),
}

impl TrainerData {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let d = &cfg.data;
        let data = match d.source {
            DataSource::Synthetic => {
                TrainerData::Memory(synthetic::desk_pairs(d.synthetic_count, d.synthetic_size, d.synthetic_seed))
            }
            DataSource::Pairs => TrainerData::Files(load_pair_dataset(d.root.as_ref().expect("validated"))?),
            DataSource::Manifest => TrainerData::Files(load_manifest(d.manifest.as_ref().expect("validated"))?),
        };
        if data.is_empty() {
            return Err(Error::MalformedDataset("the training set is empty".into()));
        }
        Ok(data)
    }

    pub fn len(&self) -> usize {
        match self {
            TrainerData::Memory(v) => v.len(),
            TrainerData::Files(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> Result<(ImageBuffer, ImageBuffer)> {
        match self {
            TrainerData::Memory(v) => Ok(v[i].clone()),
            TrainerData::Files(v) => Ok((load_png(&v[i].hr)?, load_png(&v[i].reference)?)),
        }
    }
}

struct CriticState {
    critic: ConvCritic,
    store: ParamStore<f32>,
    adam: Adam<f32>,
}

/// Owns the model, optimizer state and data for one run.
pub struct Trainer {
    cfg: RunConfig,
    model: RefSr,
    store: ParamStore<f32>,
    adam: Adam<f32>,
    critic: Option<CriticState>,
    extractor: Option<FeatureExtractor<f32>>,
    data: TrainerData,
    iteration: u64,
    elapsed: f64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let data = TrainerData::from_config(&cfg)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: TrainerData) -> Result<Self> {
        cfg.validate()?;
        let t = &cfg.training;
        let mut rng = stream(t.seed, INIT_ITERATION, 0);
        let mut store = ParamStore::new();
        let model = RefSr::new(&cfg.network, &mut store, &mut rng)?;
        let adam = Adam::new(&store, t.lr, t.adam_beta1, t.adam_beta2, t.adam_eps);
        let critic = (cfg.losses.lambda_adv > 0.0).then(|| {
            let mut cstore = ParamStore::new();
            let critic = ConvCritic::new(&mut cstore, cfg.losses.critic_channels, &mut rng);
            let adam = Adam::new(&cstore, t.critic_lr, 0.5, 0.9, t.adam_eps);
            CriticState {
                critic,
                store: cstore,
                adam,
            }
        });
        let extractor = match (&cfg.losses.perceptual_weights, cfg.losses.lambda_per > 0.0) {
            (Some(path), true) => Some(FeatureExtractor::load(path)?),
            (None, true) => {
                return Err(Error::FeatureExtractorMissing(
                    "losses.lambda_per > 0 needs losses.perceptual_weights".into(),
                ))
            }
            _ => None,
        };
        if data.is_empty() {
            return Err(Error::MalformedDataset("the training set is empty".into()));
        }
        Ok(Trainer {
            cfg,
            model,
            store,
            adam,
            critic,
            extractor,
            data,
            iteration: 0,
            elapsed: 0.0,
        })
    }

    /// Restores model, optimizer and schedule position from a checkpoint.
    /// `cfg` overrides the stored config (e.g. to extend `iterations`).
    pub fn resume(path: impl AsRef<Path>, cfg: Option<RunConfig>) -> Result<Self> {
        let archive = Archive::load(path.as_ref())?;
        let stored = stored_config(&archive)?;
        let cfg = cfg.unwrap_or(stored);
        let mut tr = Self::new(cfg)?;
        tr.restore(&archive)?;
        Ok(tr)
    }

    fn restore(&mut self, archive: &Archive) -> Result<()> {
        let m = &archive.manifest;
        let field = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{k}`")));
        let iteration = field("iteration")?.as_u64().ok_or_else(|| Error::Checkpoint("bad iteration".into()))?;
        let rng = field("rng")?;
        let seed = rng.get("seed").and_then(|v| v.as_u64());
        if seed != Some(self.cfg.training.seed) {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {seed:?} differs from configured seed {}",
                self.cfg.training.seed
            )));
        }
        archive.load_store("model", &mut self.store)?;
        let t = field("adam_t")?.as_u64().unwrap_or(0);
        self.adam.load_from(archive, "adam", &self.store, t)?;
        if let Some(c) = &mut self.critic {
            if archive.get(&format!("critic/{}", c.store.name(c.store.ids().next().expect("critic params")))).is_some() {
                archive.load_store("critic", &mut c.store)?;
                let ct = m.get("critic_adam_t").and_then(|v| v.as_u64()).unwrap_or(0);
                c.adam.load_from(archive, "critic_adam", &c.store, ct)?;
            }
        }
        self.iteration = iteration;
        self.elapsed = m.get("elapsed_seconds").and_then(|v| v.as_f64()).unwrap_or(0.0);
        Ok(())
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &RefSr {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<f32> {
        &self.store
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Learning rate in effect at (1-based) iteration `i`.
    pub fn lr_at(&self, i: u64) -> f64 {
        let t = &self.cfg.training;
        if t.lr_decay_every == 0 {
            return t.lr;
        }
        t.lr * t.lr_decay_gamma.powi(((i - 1) / t.lr_decay_every) as i32)
    }

    /// Samples of iteration `i`; depends on `(seed, i)` only.
    pub fn samples_at(&self, i: u64) -> Result<Vec<TrainSample>> {
        let mut rng = stream(self.cfg.training.seed, i, SLOT_SAMPLES);
        let opts = self.cfg.data.sample_options();
        (0..self.cfg.training.batch)
            .map(|_| {
                let idx = rng.gen_range(0..self.data.len());
                let (hr, reference) = self.data.get(idx)?;
                make_train_sample(&hr, &reference, &mut rng, opts)
            })
            .collect()
    }

    pub fn batch_at(&self, i: u64) -> Result<Batch<f32>> {
        let t = &self.cfg.training;
        let samples = self.samples_at(i)?;
        let warp = (t.enable_rtrr && t.enable_pt).then(|| self.cfg.perturbation()).transpose()?;
        Batch::build(&samples, warp, &mut stream(t.seed, i, SLOT_WARP))
    }

    pub fn step_options(&self) -> StepOptions {
        let t = &self.cfg.training;
        let mut weights = self.cfg.losses.weights();
        let enable_rtrr = t.enable_rtrr && weights.lambda_rtrr > 0.0;
        if !enable_rtrr {
            weights.lambda_rtrr = 0.0;
        }
        StepOptions {
            weights,
            enable_rtrr,
            gradient: t.rtrr_gradient,
        }
    }

    /// Runs one iteration and returns its losses.
    pub fn step(&mut self) -> Result<MetricsRecord> {
        let started = Instant::now();
        let i = self.iteration + 1;
        let batch = self.batch_at(i)?;
        let opts = self.step_options();
        let extras = Extras {
            perceptual: self.extractor.as_ref(),
            critic: self.critic.as_ref().map(|c| (&c.critic, &c.store)),
        };
        let out = rtrr_step(&self.model, &self.store, &batch, &opts, &extras, i)?;
        if out.grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                iteration: i,
                detail: "non-finite gradient".into(),
            });
        }
        let lr = self.lr_at(i);
        self.adam.lr = lr;
        self.adam.step(&mut self.store, &out.grads);

        if let Some(c) = &mut self.critic {
            let mut g = Graph::new();
            let mut rng = stream(self.cfg.training.seed, i, SLOT_CRITIC);
            let d = super::critic_loss(&c.critic, &mut g, &c.store, &out.x_sr, &batch.x_hr, self.cfg.losses.gp_weight, &mut rng);
            let dv = g.value(d).data()[0];
            if !dv.is_finite() {
                return Err(Error::Divergence {
                    iteration: i,
                    detail: format!("critic loss {dv}"),
                });
            }
            let grads = g.backward(d);
            let grads: Vec<_> = c.store.ids().map(|id| grads.param(&c.store, id).cloned()).collect();
            c.adam.step(&mut c.store, &grads);
        }

        self.iteration = i;
        self.elapsed += started.elapsed().as_secs_f64();
        Ok(record(i, &out.losses, lr, self.elapsed))
    }

    pub fn checkpoint(&self) -> Archive {
        let manifest = serde_json::json!({
            "format": 1,
            "config": self.cfg,
            "iteration": self.iteration,
            "rng": {"seed": self.cfg.training.seed, "next_iteration": self.iteration + 1},
            "adam_t": self.adam.steps(),
            "critic_adam_t": self.critic.as_ref().map(|c| c.adam.steps()),
            "elapsed_seconds": self.elapsed,
        });
        let mut a = Archive::new(manifest);
        a.push_store("model", &self.store);
        self.adam.save_into(&mut a, "adam", &self.store);
        if let Some(c) = &self.critic {
            a.push_store("critic", &c.store);
            c.adam.save_into(&mut a, "critic_adam", &c.store);
        }
        a
    }

    pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
        dir.join(format!("ckpt_{iteration:07}.rrsr"))
    }

    /// Trains to `training.iterations`, logging to `out_dir/metrics.jsonl`
    /// and checkpointing on cadence. On divergence the last good
    /// checkpoint is left in place and the error is returned.
    pub fn run(&mut self, out_dir: &Path, mut on_record: impl FnMut(&MetricsRecord)) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let echo = out_dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&echo, self.cfg.to_toml()).map_err(|e| Error::io(&echo, e))?;
        let log_path = out_dir.join(METRICS_FILE);
        let mut log = open_log(&log_path, self.iteration)?;
        let t = self.cfg.training.clone();
        while self.iteration < t.iterations {
            let rec = self.step()?;
            if rec.iter % t.log_every == 0 || rec.iter == t.iterations {
                let line = serde_json::to_string(&rec).expect("record serializes");
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                log.flush().map_err(|e| Error::io(&log_path, e))?;
                on_record(&rec);
            }
            if rec.iter % t.checkpoint_every == 0 || rec.iter == t.iterations {
                let ckpt = self.checkpoint();
                ckpt.save(Self::checkpoint_path(out_dir, rec.iter))?;
                ckpt.save(out_dir.join(LAST_CHECKPOINT))?;
            }
        }
        Ok(())
    }
}

fn record(iter: u64, l: &LossBundle, lr: f64, seconds: f64) -> MetricsRecord {
    MetricsRecord {
        iter,
        rec: l.rec,
        rtrr: l.rtrr,
        per: l.per,
        adv: l.adv,
        total: l.total,
        lr,
        seconds,
        rtrr_rec_ratio: if l.rec > 0.0 { l.rtrr / l.rec } else { 0.0 },
    }
}

/// Opens the log for appending after `iteration`, dropping any records
/// written past it by an interrupted run.
fn open_log(path: &Path, iteration: u64) -> Result<File> {
    if iteration == 0 || !path.exists() {
        return File::create(path).map_err(|e| Error::io(path, e));
    }
    let kept: Vec<String> = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .lines()
        .map_while(|l| l.ok())
        .filter(|l| {
            serde_json::from_str::<MetricsRecord>(l).is_ok_and(|r| r.iter <= iteration)
        })
        .collect();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    for l in kept {
        writeln!(f, "{l}").map_err(|e| Error::io(path, e))?;
    }
    drop(f);
    OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))
}

/// The run config stored in a checkpoint manifest.
pub fn stored_config(archive: &Archive) -> Result<RunConfig> {
    let v = archive
        .manifest
        .get("config")
        .ok_or_else(|| Error::Checkpoint("manifest lacks `config`".into()))?;
    serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("stored config: {e}")))
}

/// Model and weights from a checkpoint, for inference.
pub fn load_model(path: impl AsRef<Path>) -> Result<(RefSr, ParamStore<f32>, RunConfig)> {
    let archive = Archive::load(path.as_ref())?;
    let cfg = stored_config(&archive)?;
    let mut store = ParamStore::new();
    let mut rng = stream(cfg.training.seed, INIT_ITERATION, 0);
    let model = RefSr::new(&cfg.network, &mut store, &mut rng)?;
    archive.load_store("model", &mut store)?;
    Ok((model, store, cfg))
}

/// Parses a metrics log.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::MalformedDataset(format!("{}: {e}", path.display())))
        })
        .collect()
}
