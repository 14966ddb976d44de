//! The `mhct` command line: training, evaluation, calibration, ablation and
//! augmentation previews. Every subcommand writes only under `--out`.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mhct_core::augment::{strong_augment, weak_augment};
use mhct_core::calibration::{calibration_report, CalibrationReport};
use mhct_core::checkpoint::{Checkpoint, CHECKPOINT_FORMAT_VERSION};
use mhct_core::config::DATA_ROOT_ENV;
use mhct_core::cotrain::{evaluate, train, EvalResult, TrainOutcome};
use mhct_core::{AblationVariant, DatasetConfig, Image, LabeledExample, TrainConfig};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "mhct", version, about = "Multi-head co-training for semi-supervised image classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, manifest and checkpoints.
    Train(TrainArgs),
    /// Report per-head and ensemble test error of a checkpoint.
    Eval(EvalArgs),
    /// Reliability statistics of a checkpoint before and after temperature scaling.
    Calibrate(CalibrateArgs),
    /// Train several ablation variants on the same data and seed.
    Ablate(AblateArgs),
    /// Write original, weak and strong augmentations of training images as PNG.
    DumpAugment(DumpAugmentArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON configuration; `preset` selects the base (`desk` or `cifar10-wrn28-2`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set total_iterations=10` or `--set model.width_factor=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    pub fn load(&self) -> Result<TrainConfig> {
        let config = match &self.config {
            Some(path) => TrainConfig::from_file(path, &self.overrides),
            None => TrainConfig::from_json_with_overrides("{}", &self.overrides),
        };
        Ok(config?)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
    /// Log pseudo-label accuracy against the hidden labels of the unlabeled pool.
    #[arg(long)]
    pub log_pseudo_acc: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// CIFAR-10 directory, overriding the one stored in the checkpoint.
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long, default_value_t = 2.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 10)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Comma-separated variants, run and reported in this order.
    #[arg(long, value_delimiter = ',', default_value = "none,one-head,one-strong,no-weak,same-init,no-ema")]
    pub variants: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DumpAugmentArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::Calibrate(a) => cmd_calibrate(&a).map(|_| ()),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| ()),
        Command::DumpAugment(a) => cmd_dump_augment(&a),
    }
}

/// Everything needed to reproduce a run, written before the first step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    /// SHA-256 over every train and test record (label byte then pixel bytes).
    pub dataset_fingerprint: String,
    pub version: String,
    pub seed: u64,
    pub out_dir: PathBuf,
}

pub fn version_string() -> String {
    format!("mhct {} (checkpoint format {CHECKPOINT_FORMAT_VERSION})", env!("CARGO_PKG_VERSION"))
}

pub fn dataset_fingerprint(train: &[LabeledExample], test: &[LabeledExample]) -> String {
    let mut hasher = Sha256::new();
    for (tag, set) in [(b"train", train), (b"test\0", test)] {
        hasher.update(tag);
        hasher.update((set.len() as u64).to_le_bytes());
        for ex in set {
            hasher.update((ex.label as u64).to_le_bytes());
            hasher.update((ex.image.height as u32).to_le_bytes());
            hasher.update((ex.image.width as u32).to_le_bytes());
            hasher.update(ex.image.to_bytes());
        }
    }
    hasher.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).with_context(|| format!("writing {}", path.display()))
}

fn load_data(dataset: &DatasetConfig, data_root: Option<&Path>) -> Result<(Vec<LabeledExample>, Vec<LabeledExample>)> {
    let dataset = match (dataset, data_root) {
        (DatasetConfig::Cifar10 { .. }, Some(root)) => DatasetConfig::Cifar10 {
            root: Some(root.to_owned()),
        },
        _ => dataset.clone(),
    };
    dataset
        .load()
        .with_context(|| format!("loading the dataset (the {DATA_ROOT_ENV} variable overrides the CIFAR-10 directory)"))
}

fn train_into(config: &TrainConfig, train_set: &[LabeledExample], test: &[LabeledExample], out: &Path) -> Result<TrainOutcome> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let manifest = RunManifest {
        config: config.clone(),
        dataset_fingerprint: dataset_fingerprint(train_set, test),
        version: version_string(),
        seed: config.seed,
        out_dir: out.to_owned(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(train(config, train_set, test, Some(out))?)
}

pub fn cmd_train(args: &TrainArgs) -> Result<TrainOutcome> {
    let mut config = args.config.load()?;
    config.log_pseudo_acc |= args.log_pseudo_acc;
    let (train_set, test) = load_data(&config.dataset, None)?;
    let outcome = train_into(&config, &train_set, &test, &args.out)?;
    let last = outcome.final_record();
    println!(
        "iteration {}: ensemble error {:.2}% (trainer {:.2}%), best at iteration {}",
        last.iteration,
        last.reported_error(),
        last.test_error,
        outcome.best_iteration
    );
    Ok(outcome)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: u64,
    pub trainer: EvalResult,
    pub ema: EvalResult,
}

fn print_eval(name: &str, r: &EvalResult) {
    let heads: Vec<String> = r.head_errors.iter().map(|e| format!("{e:.2}")).collect();
    println!(
        "{name:<8} heads [{}]  mean head {:.2}%  ensemble {:.2}%",
        heads.join(", "),
        r.mean_head_error(),
        r.ensemble_error
    );
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (_, test) = load_data(&ckpt.config.dataset, args.data_root.as_deref())?;
    let report = EvalReport {
        iteration: ckpt.iteration,
        trainer: evaluate(&mut ckpt.trainer_model()?, &test, &ckpt.normalization)?,
        ema: evaluate(&mut ckpt.ema_model()?, &test, &ckpt.normalization)?,
    };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("eval.json"), &report)?;
    println!("checkpoint at iteration {}", report.iteration);
    print_eval("trainer", &report.trainer);
    print_eval("ema", &report.ema);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub unscaled: CalibrationReport,
    pub scaled: CalibrationReport,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<CalibrationSummary> {
    if !(args.temperature > 0.0) {
        bail!("--temperature must be positive");
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let (_, test) = load_data(&ckpt.config.dataset, args.data_root.as_deref())?;
    let mut model = if ckpt.config.ablation_variant == AblationVariant::NoEma {
        ckpt.trainer_model()?
    } else {
        ckpt.ema_model()?
    };
    let stats = &ckpt.normalization;
    let summary = CalibrationSummary {
        unscaled: calibration_report(&mut model, &test, stats, args.bins, None)?,
        scaled: calibration_report(&mut model, &test, stats, args.bins, Some(args.temperature))?,
    };
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("calibration.json"), &summary)?;
    fs::write(args.out.join("reliability_unscaled.csv"), summary.unscaled.to_csv())?;
    fs::write(args.out.join("reliability.csv"), summary.scaled.to_csv())?;
    println!(
        "ECE {:.4} -> {:.4} at T={}  (accuracy {:.4}, confidence {:.4} -> {:.4})",
        summary.unscaled.ece,
        summary.scaled.ece,
        args.temperature,
        summary.unscaled.overall_accuracy,
        summary.unscaled.overall_avg_confidence,
        summary.scaled.overall_avg_confidence
    );
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub mean_head_error: f64,
    pub ensemble_error: f64,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<Vec<AblationRow>> {
    let variants = args
        .variants
        .iter()
        .map(|v| AblationVariant::parse(v.trim()))
        .collect::<Result<Vec<_>, _>>()?;
    let base = args.config.load()?;
    let (train_set, test) = load_data(&base.dataset, None)?;
    let mut rows = Vec::with_capacity(variants.len());
    for variant in variants {
        let mut config = base.clone();
        config.ablation_variant = variant;
        let config = config.resolved();
        config.validate()?;
        let outcome = train_into(&config, &train_set, &test, &args.out.join(variant.name()))?;
        let last = outcome.final_record();
        let row = AblationRow {
            variant,
            mean_head_error: last.head_errors.iter().sum::<f64>() / last.head_errors.len() as f64,
            ensemble_error: last.reported_error(),
        };
        println!("{:<12} {:>8.2} {:>8.2}", variant.name(), row.mean_head_error, row.ensemble_error);
        rows.push(row);
    }
    write_json(&args.out.join("ablation.json"), &rows)?;
    println!("\n{}", format_ablation_table(&rows));
    Ok(rows)
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = format!("{:<12} {:>10} {:>10}\n", "variant", "mean head", "ensemble");
    for r in rows {
        let _ = writeln!(out, "{:<12} {:>10.2} {:>10.2}", r.variant.name(), r.mean_head_error, r.ensemble_error);
    }
    out
}

/// 8-bit RGB PNG of an image with values in `[0, 1]`.
pub fn write_png(image: &Image, path: &Path) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let planar = image.to_bytes();
    let plane = image.plane();
    let interleaved: Vec<u8> = (0..plane)
        .flat_map(|i| (0..Image::CHANNELS).map(move |c| (c, i)))
        .map(|(c, i)| planar[c * plane + i])
        .collect();
    encoder.write_header()?.write_image_data(&interleaved)?;
    Ok(())
}

pub fn cmd_dump_augment(args: &DumpAugmentArgs) -> Result<()> {
    let config = args.config.load()?;
    let (train_set, _) = load_data(&config.dataset, None)?;
    fs::create_dir_all(&args.out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    for (i, ex) in train_set.iter().take(args.count).enumerate() {
        write_png(&ex.image, &args.out.join(format!("sample{i:03}_original.png")))?;
        let weak = weak_augment(&ex.image, &config.augment, &mut rng);
        write_png(&weak, &args.out.join(format!("sample{i:03}_weak.png")))?;
        let strong = strong_augment(&ex.image, &config.augment, &mut rng);
        write_png(&strong, &args.out.join(format!("sample{i:03}_strong.png")))?;
    }
    println!("wrote {} samples to {}", args.count.min(train_set.len()), args.out.display());
    Ok(())
}
