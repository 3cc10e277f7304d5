//! dbmef command line: train the two models, calibrate the protector, and
//! run evaluations or parameter sweeps.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors. Every
//! output file is staged as a temporary sibling and renamed into place, so
//! an interrupted run never leaves a corrupt artifact behind.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use dbmef_core::{
    ablate, ablation_csv, calibrate_threshold, classifier_from_checkpoint,
    classifier_to_checkpoint, collect_correct_scores, confidence_score, evaluate,
    generate_gaussian_dataset, init_params, load_checkpoint, load_idx, logits,
    net_from_checkpoint, net_to_checkpoint, parse_config, save_checkpoint, splitmix64,
    train_base_classifier, train_denoiser, ClassifierParams, Dataset, Denoiser, GridSpec,
    ProtectorCalibration, RunConfig, ThresholdMode,
};

// Substream indices hung off the config seed, so one seed determines every
// dataset and initialization in a run.
const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_NET_INIT: u64 = 3;
const STREAM_BASE_INIT: u64 = 4;

#[derive(Parser)]
#[command(
    name = "dbmef",
    version,
    about = "Diffusion-backed re-evaluation of low-confidence predictions"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base classifier and write its checkpoint.
    TrainBase(TrainArgs),
    /// Train the diffusion noise predictor and write its checkpoint.
    TrainDiffusion(TrainArgs),
    /// Derive the protector threshold from base confidences on training data.
    Calibrate(ScoreArgs),
    /// Run the full pipeline on test data and write a JSON report.
    Evaluate(EvaluateArgs),
    /// Evaluate one swept parameter and write a CSV of per-point reports.
    Ablate(AblateArgs),
    /// Write per-example confidence scores and correctness flags as CSV.
    ExportScores(ScoreArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON run configuration; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed everywhere.
    #[arg(long)]
    seed: Option<u64>,
    /// IDX images; synthetic data from the config is used when absent.
    #[arg(long, requires = "data_labels")]
    data_images: Option<PathBuf>,
    /// IDX labels matching --data-images.
    #[arg(long, requires = "data_images")]
    data_labels: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Checkpoint destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Base classifier checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Base classifier checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Denoiser checkpoint.
    #[arg(long)]
    denoiser: PathBuf,
    /// Calibration JSON from `calibrate`. Without it the threshold comes
    /// straight from the config; quantile mode then needs synthetic data.
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// 1 = in-thread, 0 = shared thread pool, n = dedicated n-thread pool.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Report destination.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    eval: EvaluateArgs,
    /// Swept parameter, e.g. `--grid lambda=1.0,1.1,2.0`.
    #[arg(long)]
    grid: GridArg,
}

/// `name=v1,v2,...` as typed on the command line. Values stay raw strings
/// until the sweep is built, so bad numbers surface as runtime errors with
/// the offending token in the message.
#[derive(Clone)]
struct GridArg {
    name: String,
    values: Vec<String>,
}

impl FromStr for GridArg {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<GridArg, String> {
        let (name, rest) = s
            .split_once('=')
            .ok_or_else(|| format!("expected name=v1,v2,... but got {s:?}"))?;
        Ok(GridArg {
            name: name.to_string(),
            values: rest.split(',').map(str::to_string).collect(),
        })
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainBase(args) => train_base(&args),
        Command::TrainDiffusion(args) => train_diffusion(&args),
        Command::Calibrate(args) => calibrate(&args),
        Command::Evaluate(args) => run_evaluate(&args),
        Command::Ablate(args) => run_ablate(&args),
        Command::ExportScores(args) => export_scores(&args),
    }
}

fn load_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            parse_config(path).with_context(|| format!("loading config {}", path.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Test,
}

fn load_dataset(common: &CommonArgs, cfg: &RunConfig, split: Split) -> Result<Dataset> {
    if let (Some(images), Some(labels)) = (&common.data_images, &common.data_labels) {
        return load_idx(images, labels).with_context(|| {
            format!("loading IDX data {} / {}", images.display(), labels.display())
        });
    }
    let means = cfg.resolved_class_means();
    let (stream, n) = match split {
        Split::Train => (STREAM_TRAIN, cfg.n_train_per_class),
        Split::Test => (STREAM_TEST, cfg.n_test_per_class),
    };
    Ok(generate_gaussian_dataset(&means, cfg.sigma, n, splitmix64(cfg.seed, stream))?)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("staging a temporary file beside {}", path.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_classifier(path: &Path) -> Result<ClassifierParams> {
    let ck = load_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    Ok(classifier_from_checkpoint(&ck)
        .with_context(|| format!("decoding {}", path.display()))?)
}

/// Loads the denoiser and cross-checks any schedule parameters recorded in
/// its metadata against the active config; scoring with a different schedule
/// than the one trained against silently degrades, so mismatches are fatal.
fn load_denoiser(path: &Path, cfg: &RunConfig) -> Result<Denoiser> {
    let ck = load_checkpoint(path)
        .with_context(|| format!("reading checkpoint {}", path.display()))?;
    for (key, configured) in [
        ("t_max", cfg.t_max as f64),
        ("beta_start", cfg.beta_start),
        ("beta_end", cfg.beta_end),
    ] {
        if let Some(stored) = ck.meta.get(key).and_then(Value::as_f64) {
            if (stored - configured).abs() > 1e-12 {
                bail!(
                    "checkpoint {} was trained with {key}={stored} but the config says {configured}",
                    path.display()
                );
            }
        }
    }
    let params =
        net_from_checkpoint(&ck).with_context(|| format!("decoding {}", path.display()))?;
    Ok(Denoiser::network(params))
}

fn read_calibration(path: &Path) -> Result<ProtectorCalibration> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading calibration {}", path.display()))?;
    Ok(serde_json::from_str(&text)
        .with_context(|| format!("decoding calibration {}", path.display()))?)
}

fn resolve_calibration(
    explicit: &Option<PathBuf>,
    common: &CommonArgs,
    cfg: &RunConfig,
    classifier: &ClassifierParams,
) -> Result<ProtectorCalibration> {
    if let Some(path) = explicit {
        return read_calibration(path);
    }
    match cfg.threshold_mode {
        ThresholdMode::Absolute => Ok(calibrate_threshold(&[], cfg.prot, ThresholdMode::Absolute)?),
        ThresholdMode::Quantile => {
            if common.data_images.is_some() {
                bail!("quantile threshold mode needs --calibration when the data comes from IDX files");
            }
            let train = load_dataset(common, cfg, Split::Train)?;
            let scores = collect_correct_scores(classifier, &train)?;
            Ok(calibrate_threshold(&scores, cfg.prot, ThresholdMode::Quantile)?)
        }
    }
}

fn train_base(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let train = load_dataset(&args.common, &cfg, Split::Train)?;
    let num_classes = train.num_classes().max(cfg.num_classes);
    let mut params = if cfg.base_hidden_dim == 0 {
        ClassifierParams::linear(
            train.dim(),
            num_classes,
            vec![0.0; num_classes * train.dim()],
            vec![0.0; num_classes],
        )?
    } else {
        ClassifierParams::init(
            train.dim(),
            cfg.base_hidden_dim,
            num_classes,
            splitmix64(cfg.seed, STREAM_BASE_INIT),
        )?
    };
    let losses = train_base_classifier(&train, &mut params, &cfg.base_train_config())?;
    let meta = json!({
        "seed": cfg.seed,
        "epochs": cfg.base_epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "final_loss": losses.last().copied(),
    });
    let ck = classifier_to_checkpoint(&params, &meta)?;
    save_checkpoint(&args.out, &ck).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "trained base classifier on {} examples; checkpoint {}",
        train.len(),
        args.out.display()
    );
    Ok(())
}

fn train_diffusion(args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let train = load_dataset(&args.common, &cfg, Split::Train)?;
    let num_classes = train.num_classes().max(cfg.num_classes);
    let mut params = init_params(
        train.dim(),
        cfg.hidden_dim,
        cfg.time_embed_dim,
        cfg.class_embed_dim,
        num_classes,
        splitmix64(cfg.seed, STREAM_NET_INIT),
    )?;
    let schedule = cfg.schedule()?;
    let losses = train_denoiser(&train, &mut params, &schedule, &cfg.denoiser_train_config())?;
    let meta = json!({
        "seed": cfg.seed,
        "t_max": cfg.t_max,
        "beta_start": cfg.beta_start,
        "beta_end": cfg.beta_end,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate,
        "final_loss": losses.last().copied(),
    });
    let ck = net_to_checkpoint(&params, &meta)?;
    save_checkpoint(&args.out, &ck).with_context(|| format!("writing {}", args.out.display()))?;
    println!(
        "trained denoiser on {} examples; checkpoint {}",
        train.len(),
        args.out.display()
    );
    Ok(())
}

fn calibrate(args: &ScoreArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let classifier = load_classifier(&args.checkpoint)?;
    let train = load_dataset(&args.common, &cfg, Split::Train)?;
    let scores = collect_correct_scores(&classifier, &train)?;
    let cal = calibrate_threshold(&scores, cfg.prot, cfg.threshold_mode)?;
    let text = serde_json::to_string_pretty(&cal)?;
    write_atomic(&args.out, text.as_bytes())?;
    println!(
        "calibrated on {} correct of {} examples; threshold file {}",
        cal.correct_scores.len(),
        train.len(),
        args.out.display()
    );
    Ok(())
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let classifier = load_classifier(&args.checkpoint)?;
    let model = load_denoiser(&args.denoiser, &cfg)?;
    let calibration = resolve_calibration(&args.calibration, &args.common, &cfg, &classifier)?;
    let test = load_dataset(&args.common, &cfg, Split::Test)?;
    let schedule = cfg.schedule()?;
    let report = evaluate(&test, &classifier, &calibration, &model, &schedule, &cfg, args.workers)?;
    write_atomic(&args.out, report.to_json()?.as_bytes())?;
    println!(
        "evaluated {} examples: base {:.4}, final {:.4}, delta {:+.4}; report {}",
        report.n_total,
        report.base_accuracy,
        report.final_accuracy,
        report.delta,
        args.out.display()
    );
    Ok(())
}

fn run_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.eval.common)?;
    let classifier = load_classifier(&args.eval.checkpoint)?;
    let model = load_denoiser(&args.eval.denoiser, &cfg)?;
    let test = load_dataset(&args.eval.common, &cfg, Split::Test)?;
    let schedule = cfg.schedule()?;
    let grid = GridSpec::parse(&args.grid.name, &args.grid.values)?;
    // Each grid point recalibrates the protector, so the score pool comes
    // from an explicit calibration file when given, otherwise from the
    // synthetic training stream. With IDX data and no file the pool stays
    // empty, which only absolute-mode points accept.
    let correct_scores = match &args.eval.calibration {
        Some(path) => read_calibration(path)?.correct_scores,
        None if args.eval.common.data_images.is_some() => Vec::new(),
        None => {
            let train = load_dataset(&args.eval.common, &cfg, Split::Train)?;
            collect_correct_scores(&classifier, &train)?
        }
    };
    let reports = ablate(
        &test,
        &classifier,
        &correct_scores,
        &model,
        &schedule,
        &cfg,
        &grid,
        args.eval.workers,
    )?;
    write_atomic(&args.eval.out, ablation_csv(&grid, &reports).as_bytes())?;
    println!(
        "swept {} over {} points; table {}",
        grid.name(),
        grid.len(),
        args.eval.out.display()
    );
    Ok(())
}

fn export_scores(args: &ScoreArgs) -> Result<()> {
    let cfg = load_config(&args.common)?;
    let classifier = load_classifier(&args.checkpoint)?;
    let data = load_dataset(&args.common, &cfg, Split::Train)?;
    let mut csv = String::from("score,correct\n");
    for i in 0..data.len() {
        let x = data.example(i);
        let s = confidence_score(&classifier, x)?;
        let v = logits(&classifier, x)?;
        let mut best = 0;
        for c in 1..v.len() {
            if v[c] > v[best] {
                best = c;
            }
        }
        csv.push_str(&format!("{},{}\n", s, (best == data.label(i)) as u8));
    }
    write_atomic(&args.out, csv.as_bytes())?;
    println!("exported {} scores to {}", data.len(), args.out.display());
    Ok(())
}
