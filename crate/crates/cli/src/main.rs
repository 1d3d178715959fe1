use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use minmax_wsl::autodiff::Tensor;
use minmax_wsl::datagen::{self, DatasetManifest, EvaluationSet, GeneratorConfig, TrainingSet};
use minmax_wsl::evaluation::{self, MetricsReport};
use minmax_wsl::masking::DEFAULT_THRESHOLD;
use minmax_wsl::models::Checkpoint;
use minmax_wsl::objectives::Variant;
use minmax_wsl::pgm::GrayImage;
use minmax_wsl::trainer::{self, TrainConfig, Trainer};

const SNAPSHOT: &str = "config.json";
const METRICS: &str = "metrics.json";

#[derive(Parser)]
#[command(name = "minmax-wsl", version, about = "Weakly supervised segmentation with background uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/valid/test dataset.
    GenData(GenDataArgs),
    /// Train the localizer and classifier from image-level labels.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated split.
    Eval(EvalArgs),
    /// Score the all-foreground prediction on a split.
    Baseline(BaselineArgs),
    /// Predict the mask of a single PGM image.
    Infer(InferArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with any of: seed, n_per_class, height, width, difficulty.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Side length of the square images.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    difficulty: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file with training settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding train/manifest.json.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "train")]
    split: String,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    t_init: Option<f64>,
    #[arg(long)]
    t_growth: Option<f64>,
    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    split: String,
    threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// JSON file with split and threshold.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Directory for predicted masks, one PGM per image.
    #[arg(long)]
    export_masks: Option<PathBuf>,
    /// Directory for metrics.json and the config snapshot.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Output mask; white marks foreground.
    #[arg(long)]
    out: PathBuf,
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, serde_json::Value)> {
    let text = fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    let raw: serde_json::Value = serde_json::from_str(&text).with_context(|| format!("{}", path.display()))?;
    let parsed = serde_json::from_value(raw.clone()).with_context(|| format!("{}", path.display()))?;
    Ok((parsed, raw))
}

fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut entries = fs::read_dir(dir).with_context(|| format!("{}", dir.display()))?;
        if entries.next().is_some() && !force {
            bail!("{}: output directory is not empty (pass --force to overwrite)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("{}", dir.display()))
}

fn write_snapshot<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("{}", parent.display()))?;
    }
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    fs::write(path, json).with_context(|| format!("{}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => read_config::<GeneratorConfig>(path)?.0,
        None => GeneratorConfig::default(),
    };
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.n_per_class = args.n_per_class.unwrap_or(cfg.n_per_class);
    if let Some(size) = args.size {
        cfg.height = size;
        cfg.width = size;
    }
    cfg.difficulty = args.difficulty.unwrap_or(cfg.difficulty);
    cfg.validate()?;
    prepare_out_dir(&args.out, args.force)?;
    write_snapshot(&args.out.join(SNAPSHOT), &cfg)?;
    let manifests = datagen::generate(&args.out, &cfg)?;
    let counts: Vec<String> = manifests.iter().map(|m| format!("{}={}", m.split, m.len())).collect();
    println!(
        "wrote {} images ({}x{}, difficulty {}) to {}: {}",
        manifests.iter().map(|m| m.len()).sum::<usize>(),
        cfg.height,
        cfg.width,
        cfg.difficulty,
        args.out.display(),
        counts.join(" ")
    );
    Ok(())
}

/// Resolved training settings as written next to the checkpoint.
#[derive(Serialize)]
struct TrainSnapshot<'a> {
    data: &'a Path,
    split: &'a str,
    train: &'a TrainConfig,
}

fn resolve_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let (mut cfg, raw) = match &args.config {
        Some(path) => read_config::<TrainConfig>(path)?,
        None => (TrainConfig::default(), serde_json::Value::Null),
    };
    cfg.variant = args.variant.unwrap_or(cfg.variant);
    cfg.lambda = args.lambda.unwrap_or(cfg.lambda);
    cfg.t_init = args.t_init.unwrap_or(cfg.t_init);
    cfg.t_growth = args.t_growth.unwrap_or(cfg.t_growth);
    cfg.t_max = args.t_max.unwrap_or(cfg.t_max);
    cfg.epochs = args.epochs.unwrap_or(cfg.epochs);
    cfg.lr = args.lr.unwrap_or(cfg.lr);
    cfg.momentum = args.momentum.unwrap_or(cfg.momentum);
    cfg.batch_size = args.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = args.seed.unwrap_or(cfg.seed);
    cfg.checkpoint_every = args.checkpoint_every.unwrap_or(cfg.checkpoint_every);
    // a bare --t-init above the default cap means "hold t there"
    let t_max_given = args.t_max.is_some() || raw.get("t_max").is_some();
    if !t_max_given && cfg.t_init > cfg.t_max {
        cfg.t_max = cfg.t_init;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&args)?;
    let manifest = DatasetManifest::load_split(&args.data, &args.split)?;
    let data = TrainingSet::load(&manifest)?;
    prepare_out_dir(&args.out, args.force)?;
    write_snapshot(
        &args.out.join(SNAPSHOT),
        &TrainSnapshot {
            data: &args.data,
            split: &args.split,
            train: &cfg,
        },
    )?;
    println!(
        "training {} on {} images for {} epochs",
        cfg.variant,
        data.len(),
        cfg.epochs
    );
    let trainer = Trainer::new(&data, cfg)?;
    let outcome = trainer::run(trainer, Some(&args.out))?;
    for r in &outcome.log {
        println!(
            "epoch {:>4}  loss {:.5}  ce {:.5}  reg {:.5}  barrier {:.5}  fg {:.3}  t {:.3}  train_err {:.2}%",
            r.epoch, r.loss, r.cross_entropy, r.regularizer, r.barrier, r.fg_fraction, r.t, r.train_error_pct
        );
    }
    let path = outcome.checkpoint_path.expect("output directory given");
    println!("checkpoint: {}", path.display());
    Ok(())
}

fn load_eval_set(data: &Path, split: &str) -> Result<EvaluationSet> {
    let manifest = DatasetManifest::load_split(data, split)?;
    Ok(EvaluationSet::load(&manifest)?)
}

fn report(report: &MetricsReport, out: Option<&Path>) -> Result<()> {
    println!("{report}");
    if let Some(dir) = out {
        let path = dir.join(METRICS);
        report.save(&path)?;
        println!("metrics: {}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    checkpoint: &'a Path,
    data: &'a Path,
    export_masks: Option<&'a Path>,
    eval: &'a EvalConfig,
}

fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => read_config::<EvalConfig>(path)?.0,
        None => EvalConfig::default(),
    };
    if let Some(split) = &args.split {
        cfg.split = split.clone();
    }
    cfg.threshold = args.threshold.unwrap_or(cfg.threshold);
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let set = load_eval_set(&args.data, &cfg.split)?;
    let metrics = evaluation::evaluate(&checkpoint, &set, cfg.threshold, args.export_masks.as_deref())?;
    if let Some(dir) = &args.out {
        write_snapshot(
            &dir.join(SNAPSHOT),
            &EvalSnapshot {
                checkpoint: &args.checkpoint,
                data: &args.data,
                export_masks: args.export_masks.as_deref(),
                eval: &cfg,
            },
        )?;
    }
    report(&metrics, args.out.as_deref())
}

fn baseline(args: BaselineArgs) -> Result<()> {
    let set = load_eval_set(&args.data, &args.split)?;
    let metrics = evaluation::all_ones_baseline(&set)?;
    if let Some(dir) = &args.out {
        write_snapshot(
            &dir.join(SNAPSHOT),
            &serde_json::json!({ "data": args.data, "split": args.split }),
        )?;
    }
    report(&metrics, args.out.as_deref())
}

#[derive(Serialize)]
struct InferRecord<'a> {
    checkpoint: &'a Path,
    image: &'a Path,
    threshold: f64,
    predicted_class: usize,
    probabilities: &'a [f64],
    foreground_fraction: f64,
}

fn infer(args: InferArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let nets = checkpoint.networks()?;
    let img = GrayImage::read(&args.image)?;
    if nets.config.in_channels != 1 {
        bail!("checkpoint expects {} channels; PGM input has 1", nets.config.in_channels);
    }
    let x = Tensor::new(vec![1, img.height, img.width], img.to_unit())?;
    let pred = evaluation::predict(&nets, &x, args.threshold).with_context(|| format!("{}", args.image.display()))?;
    pred.mask.write_pgm(&args.out)?;
    let record = InferRecord {
        checkpoint: &args.checkpoint,
        image: &args.image,
        threshold: args.threshold,
        predicted_class: pred.predicted_class,
        probabilities: &pred.probabilities,
        foreground_fraction: pred.mask.foreground_fraction(),
    };
    write_snapshot(&args.out.with_extension("json"), &record)?;
    println!(
        "class {} (p = {:?}), foreground {:.1}%: {}",
        pred.predicted_class,
        pred.probabilities,
        100.0 * record.foreground_fraction,
        args.out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => baseline(a),
        Command::Infer(a) => infer(a),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Joins the error chain, skipping causes the outer messages already quote.
fn chain(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default();
            let msg = first.strip_prefix("error: ").unwrap_or(first);
            eprintln!("error: usage: {}", one_line(msg));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&chain(&e)));
            ExitCode::FAILURE
        }
    }
}
