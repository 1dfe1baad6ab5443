use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context as _, Result};
use clap::{Parser, Subcommand};

use phaseless::eval::{evaluate_split, psnr, PsnrConfig, DEFAULT_PEAK};
use phaseless::forward::ForwardSolver;
use phaseless::io::config::{parse_flat, parse_scene};
use phaseless::io::export::{export_image, Image, ImageFormat};
use phaseless::io::store::{loss_csv, StoredDataset};
use phaseless::io::{load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, Container, RunConfig};
use phaseless::learn::TrainReport;
use phaseless::methods::{context, train_model, trainer, training_samples, Method, Model};
use phaseless::scene::{build_dataset, rasterize_ground_truth, rasterize_permittivity, seeded_rng, DatasetOptions};

#[derive(Parser)]
#[command(name = "phaseless", version, about = "Phaseless inverse scattering: simulate, train, reconstruct, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a train/val/test dataset of random scenes.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate the measurements of one scene file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct an image from a measurement file.
    Invert {
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        measurements: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_ckpt: PathBuf,
    },
    /// Report per-sample and mean PSNR on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"])]
        split: String,
        #[arg(long, default_value_t = DEFAULT_PEAK.to_string())]
        psnr_peak: String,
        /// Method to evaluate; defaults to the checkpoint's own.
        #[arg(long, value_parser = parse_method)]
        method: Option<Method>,
    },
    /// Write an image record as PGM or CSV next to the input file.
    Export {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_parser = ["pgm", "csv"])]
        format: String,
    },
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).map_err(|e| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, count, seed, out } => gen_data(&config, count, seed, &out),
        Command::Simulate { config, scene, out } => simulate(&config, &scene, &out),
        Command::Invert { method, model, measurements, out } => invert(method, &model, &measurements, &out),
        Command::Train { config, data, epochs, seed, out_ckpt } => train(&config, &data, epochs, seed, &out_ckpt),
        Command::Eval { model, data, split, psnr_peak, method } => eval(&model, &data, &split, &psnr_peak, method),
        Command::Export { input, format } => export(&input, &format),
    }
}

fn pin_threads(config: &RunConfig) -> Result<()> {
    if config.reproducible {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring the single-threaded pool")?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    RunConfig::load(path).with_context(|| format!("reading configuration {}", path.display()))
}

fn gen_data(config_path: &Path, count: usize, seed: u64, out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    pin_threads(&config)?;
    let options = DatasetOptions {
        distribution: config.distribution(),
        split: config.split,
        noise_sigma_db: config.noise_sigma_db,
        solver: config.solver(),
    };
    let dataset = build_dataset(&config.scene, count, seed, &options)?;
    let (n_train, n_val, n_test) = (dataset.train.len(), dataset.val.len(), dataset.test.len());
    save_dataset(out, &StoredDataset { config, seed, dataset })?;
    println!("wrote {count} samples ({n_train} train / {n_val} val / {n_test} test) to {}", out.display());
    Ok(())
}

fn simulate(config_path: &Path, scene_path: &Path, out: &Path) -> Result<()> {
    let config = load_config(config_path)?;
    pin_threads(&config)?;
    let text = std::fs::read_to_string(scene_path).with_context(|| format!("reading scene {}", scene_path.display()))?;
    let objects = parse_scene(&text)?;
    let solver = ForwardSolver::new(config.scene.clone(), config.solver())?;
    let perm = rasterize_permittivity(&objects, &config.scene.forward())?;
    let truth = rasterize_ground_truth(&objects, &config.scene.inverse())?;
    let (meas, report) = solver.simulate(&perm, config.noise_sigma_db, &mut seeded_rng(0))?;
    let mut c = Container::new();
    c.set("kind", "measurements");
    for (k, v) in config.to_pairs() {
        c.set(format!("config.{k}"), v);
    }
    let (nx, ny) = config.scene.inverse_grid;
    c.push_f64("delta_p", vec![meas.delta_p.len()], meas.delta_p)?;
    c.push_f64("truth", vec![ny, nx], truth.values)?;
    c.write(out)?;
    let iterations: usize = report.iterations.iter().sum();
    println!("wrote {} links to {} ({iterations} solver iterations)", c.f64("delta_p")?.1.len(), out.display());
    Ok(())
}

fn invert(method: Method, model_path: &Path, meas_path: &Path, out: &Path) -> Result<()> {
    let (ckpt, ctx) = load_checkpoint(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let meas = Container::read(meas_path).with_context(|| format!("reading {}", meas_path.display()))?;
    let (_, dp) = meas.f64("delta_p")?;
    ensure!(
        dp.len() == ctx.system.links(),
        "measurements hold {} links, the model expects {}",
        dp.len(),
        ctx.system.links()
    );
    let estimate = ckpt.model.reconstruct(method, &ctx, &[dp])?.pop().expect("one sample");
    let (nx, ny) = ckpt.config.scene.inverse_grid;
    let mut c = Container::new();
    c.set("kind", "image");
    c.set("method", method);
    c.set("psnr_peak", ckpt.config.psnr_peak);
    if let Ok((_, truth)) = meas.f64("truth") {
        ensure!(truth.len() == estimate.len(), "ground truth does not match the model grid");
        let score = psnr(&estimate, truth, ckpt.config.psnr_peak)?;
        c.set("psnr_db", score);
        println!("psnr {score}");
    }
    c.push_f64("image", vec![ny, nx], estimate)?;
    c.write(out)?;
    println!("wrote {nx}x{ny} {method} reconstruction to {}", out.display());
    Ok(())
}

/// Training settings come from `--config` on top of the dataset's own
/// configuration; the scene itself must not change.
fn merged_config(path: &Path, stored: &StoredDataset) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading configuration {}", path.display()))?;
    let overrides = parse_flat(&text)?;
    let mut pairs: BTreeMap<String, String> = stored.config.to_pairs();
    pairs.extend(overrides);
    let config = RunConfig::from_pairs(&pairs)?;
    if config.scene != stored.config.scene {
        bail!("the configuration's scene differs from the dataset's; generate a new dataset instead");
    }
    Ok(config)
}

fn train(config_path: &Path, data: &Path, epochs: usize, seed: u64, out: &Path) -> Result<()> {
    let stored = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut config = merged_config(config_path, &stored)?;
    pin_threads(&config)?;
    config.epochs = epochs;
    config.model.seed = seed;
    let ctx = context(&config.scene)?;
    let mut model = Model::new(config.method, &ctx, config.model)?;
    let mut tr = trainer(&model, config.train_config(seed))?;
    let mut report = TrainReport::default();
    let samples = training_samples(&stored.dataset.train);
    train_model(&mut model, &mut tr, &ctx, &samples, epochs, &mut report, |e, loss| {
        eprintln!("epoch {e}: mean loss {loss:.6e}");
    })?;
    let ckpt = Checkpoint { config, model, trainer: tr, report };
    save_checkpoint(out, &ckpt)?;
    let mut csv = out.as_os_str().to_owned();
    csv.push(".loss.csv");
    std::fs::write(&csv, loss_csv(&ckpt.report))?;
    for (i, l) in ckpt.report.epoch_loss.iter().enumerate() {
        println!("epoch {} loss {l:e}", i + 1);
    }
    println!("wrote checkpoint {}", out.display());
    Ok(())
}

fn eval(model_path: &Path, data: &Path, split: &str, peak: &str, method: Option<Method>) -> Result<()> {
    let (ckpt, ctx) = load_checkpoint(model_path).with_context(|| format!("loading {}", model_path.display()))?;
    let stored = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    ensure!(stored.config.scene == ckpt.config.scene, "the dataset and the model were built for different scenes");
    let cfg = PsnrConfig::parse(peak)?;
    let method = method.unwrap_or(ckpt.model.method);
    let scores = evaluate_split(stored.split(split)?, cfg, |dp| {
        Ok(ckpt.model.reconstruct(method, &ctx, &[dp])?.pop().expect("one sample"))
    })?;
    for (index, p) in &scores.per_sample {
        println!("sample {index} {p}");
    }
    println!("mean {} ({method}, {split}, {} samples, peak {})", scores.mean, scores.per_sample.len(), scores.peak);
    Ok(())
}

fn export(input: &Path, format: &str) -> Result<()> {
    let c = Container::read(input).with_context(|| format!("reading {}", input.display()))?;
    let format = ImageFormat::parse(format)?;
    let name = ["image", "truth"]
        .into_iter()
        .find(|n| c.get(n).is_some())
        .context("the file has no image or truth record")?;
    let (shape, values) = c.f64(name)?;
    ensure!(shape.len() == 2, "record {name} is not two-dimensional");
    let peak = match c.manifest.get("psnr_peak").map(|p| PsnrConfig::parse(p)) {
        Some(Ok(PsnrConfig::Fixed(v))) => v,
        _ => DEFAULT_PEAK,
    };
    let out = input.with_extension(format.extension());
    export_image(&Image { nx: shape[1], ny: shape[0], values }, &out, format, peak)?;
    println!("wrote {}", out.display());
    Ok(())
}
