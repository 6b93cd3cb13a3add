use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rrsr::checkpoint::Archive;
use rrsr::config::{resolve, RunConfig};
use rrsr::data::{degrade, EvalSample};
use rrsr::eval::{evaluate, BicubicUpscaler, Dataset, MetricsReport, ModelUpscaler, Upscaler};
use rrsr::geometry::{make_perspective_pair, PerturbationRange, SR_SCALE};
use rrsr::imaging::{load_png, save_png, ImageBuffer};
use rrsr::matching::{match_features, FeatureMap};
use rrsr::network::images_to_tensor;
use rrsr::training::{load_model, stored_config, Trainer, LAST_CHECKPOINT};
use rrsr::{selftest, Error, Result};

/// Reference-based 4x super-resolution toolkit.
#[derive(Parser)]
#[command(name = "rrsr", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics.jsonl and the resolved config.
    Train(TrainArgs),
    /// Score a checkpoint (or the bicubic baseline) on a dataset.
    Eval(EvalArgs),
    /// Super-resolve one image with a reference.
    Infer(InferArgs),
    /// Run the fast invariant checks.
    Selftest,
    /// Write the dense correspondence of an LR image against a reference.
    DumpOffsets(DumpOffsetsArgs),
    /// Write a randomly perspective-warped copy of an image.
    DumpWarp(DumpWarpArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config; unset fields take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted override such as `training.iterations=100`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from a checkpoint; its stored config is the base layer.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Only print the final summary.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Model checkpoint. Without one the bicubic baseline is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// cufed5, self-ref, random-ref, pairs or synthetic.
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    root: Option<PathBuf>,
    /// Synthetic image count.
    #[arg(long, default_value_t = 2)]
    count: usize,
    /// Synthetic image size.
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Seed for synthetic images and random references.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Border pixels excluded from the metrics.
    #[arg(long, default_value_t = 0)]
    shave: usize,
    /// Report path stem; `.json` and `.txt` are appended.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpOffsetsArgs {
    #[arg(long)]
    lr: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Use the matcher settings (and encoder) of this checkpoint instead of
    /// pixel matching.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Odd patch size for pixel matching.
    #[arg(long, default_value_t = 3)]
    patch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpWarpArgs {
    /// HR image; cropped to a multiple of 4.
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Smallest vertex displacement in HR pixels.
    #[arg(long, default_value_t = 5.0)]
    lo: f64,
    /// Largest vertex displacement in HR pixels.
    #[arg(long, default_value_t = 20.0)]
    hi: f64,
    /// Warped HR output.
    #[arg(long)]
    out: PathBuf,
    /// Optional warped LR output.
    #[arg(long)]
    lr_out: Option<PathBuf>,
}

fn train(a: TrainArgs) -> Result<()> {
    let base = match &a.resume {
        Some(p) => Some(stored_config(&Archive::load(p)?)?),
        None => None,
    };
    let mut cfg: RunConfig = resolve(base, a.config.as_deref(), &a.sets)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    println!("# resolved config\n{}", cfg.to_toml());
    let out_dir = cfg.output_dir.clone();
    let mut trainer = match &a.resume {
        Some(p) => Trainer::resume(p, Some(cfg))?,
        None => Trainer::new(cfg)?,
    };
    let quiet = a.quiet;
    trainer.run(&out_dir, |r| {
        if !quiet {
            eprintln!(
                "iter {:>7}  total {:.5}  rec {:.5}  rtrr {:.5}  lr {:.2e}  {:.1}s",
                r.iter, r.total, r.rec, r.rtrr, r.lr, r.seconds
            );
        }
    })?;
    println!(
        "trained to iteration {}; latest checkpoint {}",
        trainer.iteration(),
        out_dir.join(LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let dataset: Dataset = a.dataset.parse()?;
    let loaded = a.checkpoint.as_ref().map(load_model).transpose()?;
    let samples = dataset.load(a.root.as_deref(), a.count, a.size, a.seed)?;
    let report = match &loaded {
        Some((model, store, _)) => {
            let up = ModelUpscaler { model, store };
            run_eval(&up, &samples, dataset, a.checkpoint.as_deref(), a.shave)
        }
        None => run_eval(&BicubicUpscaler, &samples, dataset, None, a.shave),
    };
    report.write(&a.out)?;
    print!("{}", report.to_table());
    Ok(())
}

fn run_eval(up: &dyn Upscaler, samples: &[EvalSample], dataset: Dataset, ckpt: Option<&Path>, shave: usize) -> MetricsReport {
    let id = ckpt.map_or_else(|| "bicubic".to_owned(), |p| p.display().to_string());
    evaluate(up, samples, dataset.name(), &id, shave)
}

fn load_reference(path: &Path) -> Result<ImageBuffer> {
    Ok(load_png(path)?.pad_reflect_to_multiple(SR_SCALE))
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, store, _) = load_model(&a.checkpoint)?;
    let lr = load_png(&a.lr)?;
    let reference = load_reference(&a.reference)?;
    let sr = model.infer(&store, &lr, &reference)?;
    save_png(&a.out, &sr)?;
    println!("{}x{} -> {}x{}  {}", lr.height(), lr.width(), sr.height(), sr.width(), a.out.display());
    Ok(())
}

fn selftest() -> Result<bool> {
    let checks = selftest::run_all();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} passed, {failed} failed", checks.len() - failed);
    Ok(failed == 0)
}

fn dump_offsets(a: DumpOffsetsArgs) -> Result<()> {
    let lr = load_png(&a.lr)?;
    let reference = load_reference(&a.reference)?;
    let map = match &a.checkpoint {
        Some(p) => {
            let (model, store, _) = load_model(p)?;
            let x = images_to_tensor::<f32>(&[&lr])?;
            let y = images_to_tensor::<f32>(&[&reference])?;
            model.correspond(&store, &x, &y)?.remove(0)
        }
        None => {
            let small = degrade(&reference)?;
            match_features(&FeatureMap::from_image(&lr), &FeatureMap::from_image(&small), a.patch, None)?
        }
    };
    map.save(&a.out)?;
    println!("{}x{} offsets -> {}", lr.height(), lr.width(), a.out.display());
    Ok(())
}

fn dump_warp(a: DumpWarpArgs) -> Result<()> {
    let img = load_png(&a.image)?;
    let (h, w) = (img.height() / SR_SCALE * SR_SCALE, img.width() / SR_SCALE * SR_SCALE);
    let hr = img.crop(0, 0, h, w)?;
    let lr = degrade(&hr)?;
    let range = PerturbationRange::new(a.lo, a.hi)?;
    let pair = make_perspective_pair(&lr, &hr, &mut ChaCha8Rng::seed_from_u64(a.seed), range)?;
    save_png(&a.out, &pair.hr_warped)?;
    if let Some(p) = &a.lr_out {
        save_png(p, &pair.lr_warped)?;
    }
    let info = serde_json::json!({
        "offsets": pair.offsets,
        "homography": pair.h_hr.matrix(),
    });
    println!("{info}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Command::Train(a) => train(a).map(|_| true),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Infer(a) => infer(a).map(|_| true),
        Command::Selftest => selftest(),
        Command::DumpOffsets(a) => dump_offsets(a).map(|_| true),
        Command::DumpWarp(a) => dump_warp(a).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => report(&e),
    }
}

fn report(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code())
}
