//! `irunet`: corrupt datasets, train, denoise, evaluate, count parameters and
//! check gradients.
//!
//! Exit codes: 0 success, 1 check failure, 2 usage or input error, 3 training
//! aborted on a non-finite loss.

mod config;

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use irunet_core::data::{
    build_manifest, corrupt, list_images, load_image, save_image, Dataset, DatasetManifest,
    NoiseSpec, RgbImage, Split,
};
use irunet_core::metrics::{evaluate, MetricDomain};
use irunet_core::model::checkpoint::{load_checkpoint, Checkpoint};
use irunet_core::model::{param_count, Irunet, REFERENCE_PARAM_COUNT, SPATIAL_MULTIPLE};
use irunet_core::parallel;
use irunet_core::train::{
    gradcheck, sweep, GradcheckLevel, GradcheckOptions, GradcheckTarget, SweepRow, Trainer,
};

use config::{parse_sigmas, RunConfig};

#[derive(Parser)]
#[command(name = "irunet", version, about = "Lightweight multiscale inception denoiser")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a directory of clean images with Gaussian noise and write a manifest.
    Corrupt(CorruptArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Denoise one image or every image in a directory.
    Denoise(DenoiseArgs),
    /// Score a checkpoint on a manifest split and write a per-sigma TSV report.
    Evaluate(EvaluateArgs),
    /// Print per-layer and total trainable parameter counts.
    Params(ConfigArgs),
    /// Compare backward gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Train several configurations in turn and tabulate test-split PSNR.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable); wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct CorruptArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory of clean PNG/PPM images.
    #[arg(long, value_name = "DIR")]
    input: PathBuf,
    /// Directory for the noisy images and manifest.csv.
    #[arg(long, value_name = "DIR")]
    output: PathBuf,
    /// Noise levels: an inclusive range such as 0..50 or a list such as
    /// 10,25,50 [config key: sigmas, default 0..50].
    #[arg(long)]
    sigmas: Option<String>,
    /// Base seed for noise and the train/test shuffle [config key: data_seed].
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of rows assigned to the train split [config key: split_ratio].
    #[arg(long)]
    split_ratio: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// Directory for checkpoints and train.log.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Continue from a training checkpoint; its model configuration is used.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct DenoiseArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output file, or directory when the input is a directory.
    #[arg(long, value_name = "PATH")]
    output: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    /// 8-bit quantized images, peak 255.
    Byte,
    /// Raw [0, 1] outputs, peak 1.
    Unit,
}

impl From<DomainArg> for MetricDomain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Byte => MetricDomain::Byte,
            DomainArg::Unit => MetricDomain::Unit,
        }
    }
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    #[arg(long, value_enum, default_value = "byte")]
    domain: DomainArg,
    /// Also write the report to this file.
    #[arg(long, value_name = "FILE")]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LevelArg {
    Layer,
    Block,
    Model,
    All,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value = "all")]
    level: LevelArg,
    #[arg(long, default_value_t = GradcheckOptions::default().seed)]
    seed: u64,
    /// Override the per-target tolerance.
    #[arg(long)]
    tolerance: Option<f64>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,
    /// One configuration file per run (repeatable).
    #[arg(long = "config", value_name = "FILE", required = true)]
    configs: Vec<PathBuf>,
    /// Override applied to every run (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, value_enum, default_value = "byte")]
    domain: DomainArg,
}

/// Why a command did not succeed.
enum Failure {
    Check(String),
    Input(anyhow::Error),
    Abort(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<irunet_core::Error>() {
            Some(irunet_core::Error::NonFiniteLoss { .. }) => Failure::Abort(e),
            _ => Failure::Input(e),
        }
    }
}

impl From<irunet_core::Error> for Failure {
    fn from(e: irunet_core::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Corrupt(a) => cmd_corrupt(a),
        Command::Train(a) => cmd_train(a),
        Command::Denoise(a) => cmd_denoise(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Abort(e)) => {
            eprintln!("aborted: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn noisy_name(clean: &Path, sigma: u32) -> String {
    let stem = clean.file_stem().unwrap_or_default().to_string_lossy();
    let ext = clean.extension().unwrap_or_default().to_string_lossy();
    format!("{stem}_s{sigma}.{ext}")
}

fn cmd_corrupt(a: CorruptArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.config.config.as_deref(), &a.config.overrides)?;
    if let Some(s) = &a.sigmas {
        cfg.sigmas = parse_sigmas(s)?;
    }
    cfg.data_seed = a.seed.unwrap_or(cfg.data_seed);
    cfg.split_ratio = a.split_ratio.unwrap_or(cfg.split_ratio);
    cfg.validate()?;
    let input = fs::canonicalize(&a.input)
        .with_context(|| format!("cannot read input directory {}", a.input.display()))?;
    let manifest = build_manifest(&input, &cfg.sigmas, cfg.data_seed, cfg.split_ratio)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    for row in &manifest.rows {
        let clean = load_image(&row.clean_path)?;
        let noisy = corrupt(&clean, &NoiseSpec::new(f64::from(row.sigma), row.seed)?);
        save_image(&noisy, a.output.join(noisy_name(&row.clean_path, row.sigma)))?;
    }
    let manifest_path = a.output.join("manifest.csv");
    manifest.save(&manifest_path)?;
    println!("sigma\tcount");
    for (sigma, count) in manifest.sigma_counts() {
        println!("{sigma}\t{count}");
    }
    println!(
        "wrote {} noisy images ({} train, {} test) and {}",
        manifest.rows.len(),
        manifest.split(Split::Train).count(),
        manifest.split(Split::Test).count(),
        manifest_path.display()
    );
    Ok(())
}

fn load_split(manifest: &Path, split: Split) -> anyhow::Result<Dataset> {
    let m = DatasetManifest::load(manifest)?;
    let data = Dataset::load(&m, split)?;
    if data.is_empty() {
        bail!("the {split} split of {} is empty", manifest.display());
    }
    Ok(data)
}

fn cmd_train(a: TrainArgs) -> Outcome {
    let mut cfg = RunConfig::load(a.config.config.as_deref(), &a.config.overrides)?;
    let data = load_split(&a.manifest, Split::Train)?;
    let resume = match &a.resume {
        Some(path) => {
            let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
            if ckpt.training.is_none() {
                eprintln!("note: {} has no optimizer state; Adam starts fresh", path.display());
            }
            cfg.model = ckpt.config.clone();
            Some(ckpt)
        }
        None => None,
    };
    parallel::set_enabled(cfg.parallel);
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let log_path = a.out.join("train.log");
    let file = File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    let mut log = BufWriter::new(file);
    let io_err = |e: io::Error| anyhow!("writing {}: {e}", log_path.display());
    for entry in cfg.entries() {
        writeln!(log, "# {entry}").map_err(io_err)?;
    }
    writeln!(log, "# manifest={}", a.manifest.display()).map_err(io_err)?;
    if let Some(r) = &a.resume {
        writeln!(log, "# resume={}", r.display()).map_err(io_err)?;
    }
    writeln!(log, "# step\tloss\tseconds").map_err(io_err)?;

    let mut trainer = match resume {
        Some(ckpt) => Trainer::from_checkpoint(ckpt, cfg.train.clone())?,
        None => Trainer::new(Irunet::new(cfg.model.clone(), cfg.train.init_seed)?, cfg.train.clone())?,
    };
    let start_step = trainer.step();
    let outcome = trainer.run(&data, &mut log, Some(&a.out))?;
    println!(
        "trained steps {}..{} on {} images; final loss {}",
        start_step,
        outcome.final_step,
        data.len(),
        outcome.losses.last().map_or("n/a".to_string(), |l| format!("{l:.6}"))
    );
    for c in &outcome.checkpoints {
        println!("checkpoint {}", c.display());
    }
    Ok(())
}

fn load_model(path: &Path) -> anyhow::Result<Irunet<f32>> {
    let ckpt: Checkpoint<f32> = load_checkpoint(path)?;
    Ok(Irunet::from_parts(ckpt.config, ckpt.params)?)
}

fn denoise_one(model: &Irunet<f32>, input: &Path, output: &Path) -> anyhow::Result<f64> {
    let img = load_image(input)?;
    let (w, h) = (img.width(), img.height());
    if w % SPATIAL_MULTIPLE != 0 || h % SPATIAL_MULTIPLE != 0 {
        let pad = |v: usize| v.div_ceil(SPATIAL_MULTIPLE) * SPATIAL_MULTIPLE;
        bail!(
            "{}: {w}x{h} is not divisible by {SPATIAL_MULTIPLE}; pad it to {}x{} first",
            input.display(),
            pad(w),
            pad(h)
        );
    }
    let start = Instant::now();
    let x = img.to_tensor::<f32>().reshape(vec![1, 3, h, w])?;
    let out = RgbImage::from_tensor(&model.predict(&x)?)?;
    let secs = start.elapsed().as_secs_f64();
    save_image(&out, output)?;
    Ok(secs)
}

fn cmd_denoise(a: DenoiseArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    if !a.input.is_dir() {
        let secs = denoise_one(&model, &a.input, &a.output)?;
        println!("{}\t{:.4} s", a.input.display(), secs);
        return Ok(());
    }
    let files = list_images(&a.input)?;
    fs::create_dir_all(&a.output).with_context(|| format!("creating {}", a.output.display()))?;
    let mut failures = Vec::new();
    let mut total = 0.0;
    for f in &files {
        let target = a.output.join(f.file_name().expect("listed files have names"));
        match denoise_one(&model, f, &target) {
            Ok(secs) => {
                total += secs;
                println!("{}\t{:.4} s", f.display(), secs);
            }
            Err(e) => failures.push(format!("{e:#}")),
        }
    }
    let done = files.len() - failures.len();
    println!(
        "denoised {done} of {} images, mean {:.4} s per image",
        files.len(),
        if done > 0 { total / done as f64 } else { 0.0 }
    );
    if !failures.is_empty() {
        return Err(Failure::Input(anyhow!(
            "{} image(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        )));
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Outcome {
    let model = load_model(&a.checkpoint)?;
    let data = load_split(&a.manifest, a.split.into())?;
    let report = evaluate(&model, &data, a.domain.into())?;
    let tsv = report.to_tsv();
    print!("{tsv}");
    if let Some(path) = &a.output {
        fs::write(path, &tsv).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn cmd_params(a: ConfigArgs) -> Outcome {
    let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
    println!("layer\tweight_shape\tparams");
    for (name, spec) in cfg.model.layer_specs() {
        let shape = spec.weight_shape().map(|d| d.to_string()).join("x");
        println!("{name}\t{shape}\t{}", spec.param_count());
    }
    println!("total\t\t{}", param_count(&cfg.model));
    println!("reference\t\t{REFERENCE_PARAM_COUNT}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Outcome {
    let levels = match a.level {
        LevelArg::Layer => vec![GradcheckLevel::Layer],
        LevelArg::Block => vec![GradcheckLevel::Block],
        LevelArg::Model => vec![GradcheckLevel::Model],
        LevelArg::All => vec![GradcheckLevel::Layer, GradcheckLevel::Block, GradcheckLevel::Model],
    };
    let options = GradcheckOptions {
        seed: a.seed,
        tolerance: a.tolerance,
        ..GradcheckOptions::default()
    };
    let (mut total, mut failed) = (0, 0);
    for level in levels {
        for target in GradcheckTarget::for_level(level) {
            for entry in gradcheck(target, &options)? {
                total += 1;
                if !entry.passed {
                    failed += 1;
                }
                println!("{entry}");
            }
        }
    }
    println!("{} of {total} parameter groups passed", total - failed);
    if failed > 0 {
        return Err(Failure::Check(format!("{failed} parameter group(s) exceeded tolerance")));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Outcome {
    let train_set = load_split(&a.manifest, Split::Train)?;
    let test_set = load_split(&a.manifest, Split::Test)?;
    let mut runs = Vec::new();
    for path in &a.configs {
        let cfg = RunConfig::load(Some(path), &a.overrides)?;
        let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        runs.push((name, cfg.model, cfg.train));
    }
    let rows = sweep(&runs, &train_set, &test_set, a.domain.into())?;
    println!("{}", SweepRow::tsv_header());
    for row in rows {
        println!("{}", row.to_tsv());
    }
    Ok(())
}
