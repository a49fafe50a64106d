//! The `nlq` command line: `gen-data`, `train`, `predict`, `rerank`, `eval`.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::anchors::{build_lattice, AnchorConfig};
use crate::data::{generate_synthetic, prepare_samples, read_annotations, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions};
use crate::inference::{
    predict_samples, read_jsonl, rerank_predictions, write_jsonl, ChannelScores, PredictOptions, PredictionMode,
    QueryPrediction, DEFAULT_NMS_IOU, DEFAULT_TOP_K,
};
use crate::losses::BoxUnits;
use crate::nn::{load_checkpoint, EncoderConfig};
use crate::trainer::{train, CheckpointMeta, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nlq", version, about = "Natural language query localization over video features")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic planted-signal dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus metric logs.
    Train(TrainArgs),
    /// Rank proposals for every query of a dataset.
    Predict(PredictArgs),
    /// Add weighted external channel scores to predictions and re-sort.
    Rerank(RerankArgs),
    /// Compute R@n, IoU@m recall of predictions against annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub num_videos: usize,
    /// Raw feature steps per video (one per second).
    #[arg(long, default_value_t = 256)]
    pub frames: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 16)]
    pub text_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub tokens: usize,
    #[arg(long, default_value_t = 2)]
    pub queries_per_video: usize,
    #[arg(long, default_value_t = 0.5)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.01)]
    pub span_min: f64,
    #[arg(long, default_value_t = 0.08)]
    pub span_max: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Hold out the last `--val-videos` videos into this directory.
    #[arg(long, requires = "val_videos")]
    pub val_out: Option<PathBuf>,
    #[arg(long, requires = "val_out")]
    pub val_videos: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (JSON); flags given on the command line take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1000)]
    pub warmup: u64,
    #[arg(long, default_value_t = 1.0)]
    pub mu: f64,
    #[arg(long, value_enum, default_value_t = BoxUnits::Normalized)]
    pub box_units: BoxUnits,
    /// Sampled key frames per video.
    #[arg(long, default_value_t = 600)]
    pub frames: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.03])]
    pub scales: Vec<f64>,
    #[arg(long, value_enum, default_value_t = PredictionMode::Anchor)]
    pub mode: PredictionMode,
    #[arg(long, default_value_t = 512)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub intra_layers: usize,
    #[arg(long, default_value_t = 5)]
    pub cross_layers: usize,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    pub topk: usize,
    /// Suppression IoU threshold; 0 disables suppression.
    #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
    pub nms_iou: f64,
    /// Must match the mode the checkpoint was trained in; defaults to it.
    #[arg(long, value_enum)]
    pub mode: Option<PredictionMode>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub preds: PathBuf,
    /// Channel score file, optionally suffixed with `:WEIGHT` (default weight 1.0).
    #[arg(long = "channel", value_name = "FILE[:WEIGHT]")]
    pub channels: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Table,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5])]
    pub ranks: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.3, 0.5])]
    pub ious: Vec<f64>,
    /// Fail when an annotated query has no predictions.
    #[arg(long)]
    pub strict: bool,
    #[arg(long, value_enum, default_value_t = ReportFormat::Json)]
    pub format: ReportFormat,
    /// Write the report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub nms_iou: f64,
    pub prediction_mode: PredictionMode,
}

impl InferenceConfig {
    pub fn predict_options(&self) -> PredictOptions {
        PredictOptions {
            top_k: self.top_k,
            nms_iou: self.nms_iou,
            mode: self.prediction_mode,
        }
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            top_k: DEFAULT_TOP_K,
            nms_iou: DEFAULT_NMS_IOU,
            prediction_mode: PredictionMode::Anchor,
        }
    }
}

/// Everything a training run needs, as one JSON document.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub anchors: AnchorConfig,
    pub data: DataPaths,
    pub inference: InferenceConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Input(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        // input widths of zero are filled in from the data later
        let mut encoder = self.encoder.clone();
        encoder.video_input_dim = encoder.video_input_dim.max(1);
        encoder.text_input_dim = encoder.text_input_dim.max(1);
        encoder.num_scales = encoder.num_scales.max(1);
        encoder.validate()?;
        self.train.validate()?;
        self.anchors.validate()?;
        self.inference.predict_options().validate()?;
        for (what, path) in [("training data", &self.data.train), ("validation data", &self.data.val)] {
            match path {
                None => return Err(Error::InvalidArgument(format!("no {what} directory given"))),
                Some(p) if !p.is_dir() => {
                    return Err(Error::InvalidArgument(format!("{what} directory {} does not exist", p.display())))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

/// Config file (or defaults) with every explicitly given flag applied on top.
pub fn resolve_run_config(args: &TrainArgs, m: &ArgMatches) -> Result<RunConfig> {
    let mut c = match &args.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if args.data.is_some() {
        c.data.train = args.data.clone();
    }
    if args.val.is_some() {
        c.data.val = args.val.clone();
    }
    if given(m, "seed") {
        c.train.seed = args.seed;
    }
    if given(m, "epochs") {
        c.train.epochs = args.epochs;
    }
    if given(m, "batch_size") {
        c.train.batch_size = args.batch_size;
    }
    if given(m, "lr") {
        c.train.base_lr = args.lr;
    }
    if given(m, "warmup") {
        c.train.warmup_steps = args.warmup;
    }
    if given(m, "mu") {
        c.train.mu = args.mu;
    }
    if given(m, "box_units") {
        c.train.box_units = args.box_units;
    }
    if given(m, "frames") {
        c.anchors.num_frames = args.frames;
    }
    if given(m, "scales") {
        c.anchors.scales = args.scales.clone();
    }
    if given(m, "mode") {
        c.inference.prediction_mode = args.mode;
    }
    if given(m, "hidden") {
        c.encoder.hidden_dim = args.hidden;
    }
    if given(m, "heads") {
        c.encoder.num_heads = args.heads;
    }
    if given(m, "intra_layers") {
        c.encoder.intra_layers = args.intra_layers;
    }
    if given(m, "cross_layers") {
        c.encoder.cross_layers = args.cross_layers;
    }
    Ok(c)
}

fn ensure_exists(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} {} does not exist", path.display())))
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_videos: a.num_videos,
        frames_per_video: a.frames,
        feature_dim: a.dim,
        text_dim: a.text_dim,
        tokens_per_query: a.tokens,
        queries_per_video: a.queries_per_video,
        span_fraction_range: (a.span_min, a.span_max),
        noise_sigma: a.noise,
        seed: a.seed,
    };
    let ds = generate_synthetic(&spec)?;
    match (&a.val_out, a.val_videos) {
        (Some(val_dir), Some(n)) => {
            let (train, val) = ds.split_off_videos(n)?;
            train.save(&a.out)?;
            val.save(val_dir)?;
            log::info!(
                "wrote {} + {} queries to {} and {}",
                train.annotations.len(),
                val.annotations.len(),
                a.out.display(),
                val_dir.display()
            );
        }
        _ => {
            ds.save(&a.out)?;
            log::info!("wrote {} queries to {}", ds.annotations.len(), a.out.display());
        }
    }
    Ok(())
}

fn run_train(a: &TrainArgs, m: &ArgMatches) -> Result<()> {
    let config = resolve_run_config(a, m)?;
    config.validate()?;
    let train_dir = config.data.train.as_deref().expect("validated");
    let val_dir = config.data.val.as_deref().expect("validated");
    let t = config.anchors.num_frames;
    let train_samples = prepare_samples(&Dataset::load(train_dir)?, t)?;
    let val_samples = prepare_samples(&Dataset::load(val_dir)?, t)?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let resolved = a.out.join("run_config.json");
    fs::write(&resolved, serde_json::to_string_pretty(&config)?).map_err(|e| Error::io(&resolved, e))?;
    let outcome = train(
        &train_samples,
        &val_samples,
        &config.encoder,
        &config.train,
        &config.anchors,
        &config.inference.predict_options(),
        &a.out,
    )?;
    log::info!(
        "best epoch {} saved to {}",
        outcome.best_epoch,
        outcome.best_checkpoint.display()
    );
    Ok(())
}

fn run_predict(a: &PredictArgs) -> Result<()> {
    ensure_exists(&a.ckpt, "checkpoint")?;
    ensure_exists(&a.data, "data directory")?;
    let (model, meta) = load_checkpoint(&a.ckpt)?;
    let meta = CheckpointMeta::from_value(&meta)?;
    let mode = a.mode.unwrap_or(meta.prediction_mode);
    if mode != meta.prediction_mode {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained for {:?} prediction, not {mode:?}",
            meta.prediction_mode
        )));
    }
    let opts = PredictOptions {
        top_k: a.topk,
        nms_iou: a.nms_iou,
        mode,
    };
    opts.validate()?;
    let samples = prepare_samples(&Dataset::load(&a.data)?, meta.anchors.num_frames)?;
    let lattice = build_lattice(&meta.anchors)?;
    let preds = predict_samples(&model, &lattice, &samples, &opts)?;
    write_jsonl(&a.out, &preds)
}

/// Splits `FILE[:WEIGHT]`; a suffix that is not a number stays part of the path.
pub fn parse_channel_arg(arg: &str) -> (PathBuf, f64) {
    if let Some((path, w)) = arg.rsplit_once(':') {
        if let Ok(weight) = w.parse::<f64>() {
            return (PathBuf::from(path), weight);
        }
    }
    (PathBuf::from(arg), 1.0)
}

fn run_rerank(a: &RerankArgs) -> Result<()> {
    ensure_exists(&a.preds, "predictions file")?;
    let preds: Vec<QueryPrediction> = read_jsonl(&a.preds)?;
    let mut files = Vec::with_capacity(a.channels.len());
    for arg in &a.channels {
        let (path, weight) = parse_channel_arg(arg);
        ensure_exists(&path, "channel file")?;
        if !weight.is_finite() {
            return Err(Error::InvalidArgument(format!("channel weight in `{arg}` is not finite")));
        }
        files.push((read_jsonl::<ChannelScores>(&path)?, weight));
    }
    write_jsonl(&a.out, &rerank_predictions(&preds, &files)?)
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    ensure_exists(&a.preds, "predictions file")?;
    ensure_exists(&a.annotations, "annotations file")?;
    let preds: Vec<QueryPrediction> = read_jsonl(&a.preds)?;
    let anns = read_annotations(&a.annotations)?;
    let opts = EvalOptions {
        ranks: a.ranks.clone(),
        thresholds: a.ious.clone(),
        strict: a.strict,
    };
    let report = evaluate(&preds, &anns, &opts)?;
    let text = match a.format {
        ReportFormat::Json => serde_json::to_string_pretty(&report)? + "\n",
        ReportFormat::Table => report.to_table(),
    };
    match &a.out {
        Some(p) => fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn dispatch(cli: &Cli, matches: &ArgMatches) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => {
            let sub = matches.subcommand_matches("train").expect("train subcommand");
            run_train(a, sub)
        }
        Command::Predict(a) => run_predict(a),
        Command::Rerank(a) => run_rerank(a),
        Command::Eval(a) => run_eval(a),
    }
}

/// Parses `argv` (including the program name), runs the subcommand and
/// returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_VALIDATION;
        }
    };
    match dispatch(&cli, &matches) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                EXIT_VALIDATION
            } else {
                EXIT_RUNTIME
            }
        }
    }
}
