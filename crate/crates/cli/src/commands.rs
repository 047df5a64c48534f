use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use pca_core::backbone::ATTENTION_SITES;
use pca_core::data::{load_manifest, prepare_splits, synth_dataset, DatasetManifest, Image, LoadedSet, Protocol, SynthConfig, DEFAULT_RATIOS};
use pca_core::explain::{export_overlay, grad_cam, overlay_file_name};
use pca_core::train::{evaluate, fit_with, load_checkpoint, save_checkpoint, CheckpointMeta, TrainConfig};
use pca_core::{BackboneSpec, Error, Model32};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Progressive class-wise attention: train, evaluate and explain image classifiers.
#[derive(Debug, Parser)]
#[command(name = "pca", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split, balance, train and evaluate on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest.
    Eval(EvalArgs),
    /// Write Grad-CAM overlays for images.
    Explain(ExplainArgs),
    /// Generate a synthetic imbalanced dataset.
    SynthData(SynthArgs),
    /// Print trainable parameter counts per module.
    ParamCount(ParamCountArgs),
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Backbone preset (toy, desk, densenet121) or a JSON spec file
    #[arg(long, default_value = "toy")]
    pub spec: String,
    /// Attention sites: all, none, or a comma list drawn from 2,3,4
    #[arg(long, default_value = "all")]
    pub attention: String,
    /// Channels per class in each attention block [default: preset value]
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// key = value file of flag defaults; explicit flags win
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Manifest CSV, or a directory containing manifest.csv
    #[arg(long)]
    pub data: PathBuf,
    /// Directory image paths are relative to [default: the manifest's directory]
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Output directory for checkpoint, logs and report
    #[arg(long, default_value = "pca-run")]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Focal loss exponent
    #[arg(long, default_value_t = 2.0)]
    pub gamma: f64,
    #[arg(long, default_value_t = 10)]
    pub early_stop_patience: usize,
    /// Images are resized to SIZE×SIZE
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    /// Up-sample before splitting, as in the original protocol
    #[arg(long)]
    pub paper_protocol: bool,
    /// Disable random augmentation
    #[arg(long)]
    pub no_augment: bool,
    /// Write 0 instead of wall-clock seconds in the log
    #[arg(long)]
    pub no_time: bool,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// key = value file of flag defaults; explicit flags win
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Checkpoint directory written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Manifest CSV, or a directory containing manifest.csv
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Records to evaluate: all, train, val or test
    #[arg(long, default_value = "all")]
    pub split: String,
    /// Split seed when --split is not `all`
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Reproduce the up-sample-then-split order when --split is not `all`
    #[arg(long)]
    pub paper_protocol: bool,
    /// JSON report path
    #[arg(long, default_value = "eval_report.json")]
    pub report: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ExplainArgs {
    /// key = value file of flag defaults; explicit flags win
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image files to explain
    #[arg(long, num_args = 1.., required = true)]
    pub images: Vec<PathBuf>,
    /// Target class name or index [default: predicted class]
    #[arg(long)]
    pub class: Option<String>,
    /// Activation to explain
    #[arg(long, default_value = "features")]
    pub layer: String,
    /// Output directory
    #[arg(long, default_value = "explain")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct SynthArgs {
    /// key = value file of flag defaults; explicit flags win
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Images per class, comma separated
    #[arg(long, default_value = "600,120,60,30")]
    pub counts: String,
    #[arg(long, default_value_t = 32)]
    pub image_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ParamCountArgs {
    /// key = value file of flag defaults; explicit flags win
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Print JSON instead of a table
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli) -> CliResult {
    threads()?;
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Explain(a) => cmd_explain(a),
        Command::SynthData(a) => cmd_synth_data(a),
        Command::ParamCount(a) => cmd_param_count(a),
    }
}

/// Worker cap from `PCA_NUM_THREADS`. Execution is single-threaded, so any cap is met.
fn threads() -> CliResult<usize> {
    match std::env::var("PCA_NUM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => usage(format!("PCA_NUM_THREADS must be a positive integer, got {v:?}")),
        },
        Err(_) => Ok(1),
    }
}

fn parse_sites(s: &str) -> CliResult<Vec<usize>> {
    match s.trim() {
        "all" => Ok(ATTENTION_SITES.to_vec()),
        "none" | "" => Ok(Vec::new()),
        list => list
            .split(',')
            .map(|p| match p.trim().parse::<usize>() {
                Ok(n) if ATTENTION_SITES.contains(&n) => Ok(n),
                _ => usage(format!("attention site {p:?} is not one of 2, 3, 4")),
            })
            .collect(),
    }
}

fn build_spec(args: &ModelArgs, num_classes: usize) -> CliResult<BackboneSpec> {
    let mut spec = match args.spec.as_str() {
        "toy" => BackboneSpec::toy(num_classes),
        "desk" => BackboneSpec::desk(num_classes),
        "densenet121" => BackboneSpec::densenet121(num_classes),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("spec {path:?} is not a preset and cannot be read: {e}")))?;
            let mut spec: BackboneSpec =
                serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("spec {path}: {e}")))?;
            spec.num_classes = num_classes;
            spec
        }
    };
    spec.attention_sites = parse_sites(&args.attention)?;
    if let Some(k) = args.k {
        spec.k = k;
    }
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(spec)
}

/// `(csv, image_root)` for a `--data` argument.
fn resolve_data(data: &Path, image_root: Option<&PathBuf>) -> CliResult<(PathBuf, PathBuf)> {
    let csv = if data.is_dir() { data.join("manifest.csv") } else { data.to_path_buf() };
    if !csv.is_file() {
        return usage(format!("manifest not found: {}", csv.display()));
    }
    let root = match image_root {
        Some(r) => r.clone(),
        None => csv.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    Ok((csv, root))
}

fn require_file(p: &Path, what: &str) -> CliResult {
    if p.exists() {
        Ok(())
    } else {
        usage(format!("{what} not found: {}", p.display()))
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn create_dir(path: &Path) -> CliResult {
    std::fs::create_dir_all(path).map_err(|e| CliError::Runtime(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn check_image_size(spec: &BackboneSpec, size: usize) -> CliResult {
    let m = spec.input_multiple();
    if size == 0 || !size.is_multiple_of(m) {
        return usage(format!("--image-size {size} must be a positive multiple of {m} for this spec"));
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> CliResult {
    let (csv, root) = resolve_data(&a.data, a.image_root.as_ref())?;
    let manifest = load_manifest(&csv, &root)?;
    let spec = build_spec(&a.model, manifest.num_classes())?;
    check_image_size(&spec, a.image_size)?;
    let protocol = if a.paper_protocol {
        Protocol::UpsampleThenSplit
    } else {
        Protocol::SplitThenUpsample
    };
    let config = TrainConfig {
        epochs: a.epochs,
        initial_lr: a.lr,
        early_stop_patience: a.early_stop_patience,
        batch_size: a.batch_size,
        seed: a.seed,
        gamma: a.gamma,
        augment: !a.no_augment,
        record_time: !a.no_time,
        ..TrainConfig::default()
    };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let splits = prepare_splits(&manifest, DEFAULT_RATIOS, a.seed, protocol)?;
    let size = a.image_size;
    let train = LoadedSet::load(&splits.train, size, size)?;
    let val = LoadedSet::load(&splits.val, size, size)?;
    let test = LoadedSet::load(&splits.test, size, size)?;
    let model = Model32::build(&spec, a.seed)?;

    eprintln!(
        "train {} / val {} / test {} ({}) | {} parameters",
        train.len(),
        val.len(),
        test.len(),
        protocol.label(),
        model.param_count().total
    );
    let result = fit_with(model, &train, &val, &config, |e| {
        eprintln!(
            "epoch {:>3}  train {:.5}  val {:.5}  acc {:.4}  f1 {:.4}  lr {:.2e}",
            e.epoch, e.train_loss, e.val_loss, e.val_acc, e.val_macro_f1, e.lr
        );
    })?;
    let mut log = result.log;
    log.header = vec![
        format!("protocol: {}", protocol.label()),
        format!("manifest: {}", csv.display()),
        format!("spec: {}", a.model.spec),
        format!("attention: {:?}", spec.attention_sites),
        format!("k: {}", spec.k),
        format!("seed: {}", a.seed),
        format!("image_size: {size}"),
        format!("split: train {} / val {} / test {}", train.len(), val.len(), test.len()),
        format!("train counts: {:?}", splits.train.counts()),
        format!("threads: 1 (cap {})", threads()?),
    ];

    create_dir(&a.out)?;
    let meta = CheckpointMeta {
        class_names: manifest.class_names.clone(),
        image_size: Some(size),
    };
    save_checkpoint(&result.model, &meta, &a.out.join("checkpoint"))?;
    log.write(&a.out, "train_log")?;
    let ev = evaluate(&result.model, &test, 64, config.gamma)?;
    write_text(&a.out.join("test_report.json"), &ev.report.to_json()?)?;
    let table = ev.report.to_table();
    write_text(&a.out.join("test_report.txt"), &table)?;
    println!("{table}");
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn select_split(manifest: &DatasetManifest, a: &EvalArgs) -> CliResult<DatasetManifest> {
    let protocol = if a.paper_protocol {
        Protocol::UpsampleThenSplit
    } else {
        Protocol::SplitThenUpsample
    };
    if a.split == "all" {
        return Ok(manifest.clone());
    }
    let s = prepare_splits(manifest, DEFAULT_RATIOS, a.seed, protocol)?;
    match a.split.as_str() {
        "train" => Ok(s.train),
        "val" => Ok(s.val),
        "test" => Ok(s.test),
        other => usage(format!("--split must be all, train, val or test, got {other:?}")),
    }
}

fn cmd_eval(a: EvalArgs) -> CliResult {
    require_file(&a.checkpoint, "checkpoint")?;
    let (csv, root) = resolve_data(&a.data, a.image_root.as_ref())?;
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    let manifest = load_manifest(&csv, &root)?.with_class_order(&meta.class_names)?;
    let subset = select_split(&manifest, &a)?;
    let size = meta.image_size.unwrap_or(32);
    let set = LoadedSet::load(&subset, size, size)?;
    let ev = evaluate(&model, &set, a.batch_size, pca_core::metrics::FOCAL_GAMMA)?;
    write_text(&a.report, &ev.report.to_json()?)?;
    println!("{}", ev.report.to_table());
    Ok(())
}

fn cmd_explain(a: ExplainArgs) -> CliResult {
    require_file(&a.checkpoint, "checkpoint")?;
    for p in &a.images {
        require_file(p, "image")?;
    }
    let (model, meta) = load_checkpoint::<f32>(&a.checkpoint)?;
    if !model.activation_names().contains(&a.layer) {
        return usage(format!(
            "unknown layer {:?}; available: {}",
            a.layer,
            model.activation_names().join(", ")
        ));
    }
    let names: Vec<String> = if meta.class_names.len() == model.num_classes() {
        meta.class_names.clone()
    } else {
        (0..model.num_classes()).map(|c| c.to_string()).collect()
    };
    let forced = match &a.class {
        None => None,
        Some(c) => Some(match names.iter().position(|n| n == c) {
            Some(i) => i,
            None => match c.parse::<usize>() {
                Ok(i) if i < names.len() => i,
                _ => return usage(format!("unknown class {c:?}; classes: {}", names.join(", "))),
            },
        }),
    };
    create_dir(&a.out)?;
    let size = meta.image_size.unwrap_or(32);
    for path in &a.images {
        let img = pca_core::data::resize(&Image::load(path)?, size, size)?;
        let target = match forced {
            Some(c) => c,
            None => {
                let x = pca_core::data::to_tensor::<f32>(&[&img])?;
                let logits = model.predict(&x, 1)?;
                pca_core::metrics::argmax_rows(&logits.data().iter().map(|&v| v as f64).collect::<Vec<_>>(), names.len())[0]
            }
        };
        let map = grad_cam(&model, &img, target, Some(&a.layer))?;
        let id = path.file_name().and_then(|s| s.to_str()).unwrap_or("image");
        let out = a.out.join(overlay_file_name(id, &names[target], &a.layer));
        export_overlay(&map, &img, &out)?;
        println!("{}", out.display());
    }
    Ok(())
}

fn cmd_synth_data(a: SynthArgs) -> CliResult {
    let counts: Vec<usize> = a
        .counts
        .split(',')
        .map(|c| c.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::Usage(format!("--counts must be comma-separated integers, got {:?}", a.counts)))?;
    let cfg = SynthConfig {
        num_classes: a.classes,
        counts,
        image_size: a.image_size,
        seed: a.seed,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let m = synth_dataset(&cfg, &a.out)?;
    for (name, n) in m.class_names.iter().zip(m.counts()) {
        println!("{name:<16} {n:>6}");
    }
    println!("{:<16} {:>6}", "total", m.len());
    Ok(())
}

fn cmd_param_count(a: ParamCountArgs) -> CliResult {
    let spec = build_spec(&a.model, a.classes)?;
    let model = Model32::build(&spec, 0)?;
    let pc = model.param_count();
    if a.json {
        println!("{}", serde_json::to_string_pretty(&pc).map_err(|e| CliError::Runtime(e.into()))?);
        return Ok(());
    }
    let mut out = String::new();
    for (name, n) in &pc.modules {
        let _ = writeln!(out, "{name:<12} {n:>12}");
    }
    let _ = writeln!(out, "{}", "-".repeat(25));
    let _ = writeln!(out, "{:<12} {:>12}", "baseline", pc.baseline);
    let _ = writeln!(out, "{:<12} {:>12}", "attention", pc.attention);
    let _ = writeln!(out, "{:<12} {:>12}", "total", pc.total);
    print!("{out}");
    Ok(())
}
