//! `trb` subcommands: `synth`, `train`, `eval`, `explain`, `score`.
//!
//! Every subcommand accepts `--config FILE`, a JSON object with optional
//! `synth`, `splits`, `model`, `train` and `explain` sections; flags override
//! the file. Usage errors exit with 2, failures of the pipeline itself with 1.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use trb_core::classifier::{
    evaluate, fit, load_checkpoint, save_checkpoint, ModelConfig, TrainConfig, VideoClassifier,
};
use trb_core::data::{
    default_splits, load_frames, load_split, render_overlay, synth_generate, SplitCounts, SynthSpec,
};
use trb_core::explain::{optimize_mask, saliency_from_mask, ExplainConfig};
use trb_core::metrics::{
    load_annotations, mean_normalized_score, score_time_series, write_score_rows, SaliencyVolume,
};
use trb_core::{Error, Result, Tensor};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub synth: SynthSpec,
    pub splits: Option<Vec<SplitCounts>>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub explain: ExplainConfig,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| io_error(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parameter(format!("config {}: {e}", path.display())))
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "trb",
    version,
    about = "Temporal reasoning blocks and perturbation saliency for video clips"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic cause-labelled dataset.
    Synth(SynthArgs),
    /// Train the classifier on a generated dataset.
    Train(TrainArgs),
    /// Clip accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Optimize a perturbation mask for one clip.
    Explain(ExplainArgs),
    /// Attention scores of annotated objects under a saliency volume.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding `train.json` and `val.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    /// Checkpoint directory.
    #[arg(long)]
    model: PathBuf,
    /// Clip frame directory.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long = "class")]
    class: Option<usize>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long = "lambda-s")]
    lambda_s: Option<f64>,
    #[arg(long = "lambda-t")]
    lambda_t: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Mask grid as `H,W,T`.
    #[arg(long = "mask-size", value_parser = parse_extents)]
    mask_size: Option<[usize; 3]>,
    /// Skip the overlay images.
    #[arg(long)]
    no_overlay: bool,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    /// Saliency tensor dump written by `explain`.
    #[arg(long)]
    saliency: PathBuf,
    /// Clip directory whose `annotations.json` is used.
    #[arg(long, required_unless_present = "annotations")]
    clip: Option<PathBuf>,
    #[arg(long)]
    annotations: Option<PathBuf>,
}

fn parse_extents(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let values: Vec<usize> = parts
        .iter()
        .map(|p| p.parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match values[..] {
        [h, w, t] if h > 0 && w > 0 && t > 0 => Ok([h, w, t]),
        _ => Err(format!("expected three positive extents H,W,T, got `{s}`")),
    }
}

fn io_error(context: String, source: std::io::Error) -> Error {
    Error::Io { context, source }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_error(format!("creating {}", dir.display()), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(format!("writing {}", path.display()), e))
}

fn write_json_lines<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| io_error(format!("writing {}", path.display()), e))
}

fn clip_geometry(config: &ModelConfig) -> [usize; 3] {
    [config.input[1], config.input[2], config.input[3]]
}

fn synth(args: SynthArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.common.config.as_deref())?;
    let mut spec = cfg.synth;
    if let Some(seed) = args.common.seed {
        spec.seed = seed;
    }
    let splits = cfg.splits.unwrap_or_else(default_splits);
    create_dir(&args.common.out)?;
    let report = synth_generate(&spec, &splits, &args.common.out)?;
    println!(
        "wrote {} splits to {} (nearest-centroid accuracy {:.3})",
        report.manifests.len(),
        args.common.out.display(),
        report.centroid_accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport {
    best_epoch: usize,
    best_val_accuracy: f64,
    epochs_run: usize,
    train: TrainConfig,
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = PipelineConfig::load(args.common.config.as_deref())?;
    let mut tcfg = cfg.train;
    if let Some(seed) = args.common.seed {
        tcfg.seed = seed;
    }
    if let Some(e) = args.epochs {
        tcfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        tcfg.lr = lr;
    }
    let geometry = clip_geometry(&cfg.model);
    let clips = |split: &str| -> Result<Vec<_>> {
        Ok(
            load_split(&args.data.join(format!("{split}.json")), geometry)?
                .into_iter()
                .map(|l| l.clip)
                .collect(),
        )
    };
    let (train_clips, val_clips) = (clips("train")?, clips("val")?);
    let model = VideoClassifier::new(cfg.model, tcfg.seed)?;
    let result = fit(&train_clips, &val_clips, model, &tcfg)?;
    let out = &args.common.out;
    create_dir(out)?;
    save_checkpoint(&result.model, &out.join("checkpoint"))?;
    write_json_lines(&out.join("history.jsonl"), &result.history)?;
    let best_val_accuracy = result
        .history
        .iter()
        .find(|r| r.epoch == result.best_epoch)
        .map_or(0.0, |r| r.val_accuracy);
    write_json(
        &out.join("train_report.json"),
        &TrainReport {
            best_epoch: result.best_epoch,
            best_val_accuracy,
            epochs_run: result.history.len(),
            train: tcfg,
        },
    )?;
    println!(
        "best epoch {} with validation accuracy {:.3}; checkpoint in {}",
        result.best_epoch,
        best_val_accuracy,
        out.join("checkpoint").display()
    );
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let split = load_split(
        &args.data.join(format!("{}.json", args.split)),
        clip_geometry(&model.config),
    )?;
    let clips: Vec<_> = split.into_iter().map(|l| l.clip).collect();
    let report = evaluate(&clips, &model)?;
    create_dir(&args.common.out)?;
    write_json(&args.common.out.join("eval.json"), &report)?;
    println!(
        "accuracy {:.4} ({}/{})",
        report.accuracy, report.correct, report.total
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainReport {
    target: usize,
    initial_score: f64,
    final_score: f64,
    mask_mean: f64,
    config: ExplainConfig,
}

fn explain(args: ExplainArgs) -> Result<()> {
    let model = load_checkpoint(&args.model)?;
    let cfg = PipelineConfig::load(args.common.config.as_deref())?;
    let mut ecfg = cfg.explain;
    if let Some(seed) = args.common.seed {
        ecfg.seed = seed;
    }
    if args.class.is_some() {
        ecfg.target_class = args.class;
    }
    for (slot, v) in [
        (&mut ecfg.lambda1, args.lambda1),
        (&mut ecfg.lambda_s, args.lambda_s),
        (&mut ecfg.lambda_t, args.lambda_t),
        (&mut ecfg.beta, args.beta),
        (&mut ecfg.lr, args.lr),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(n) = args.iters {
        ecfg.iterations = n;
    }
    if let Some(m) = args.mask_size {
        ecfg.mask_size = m;
    }
    let geometry = clip_geometry(&model.config);
    let clip = load_frames(&args.clip, geometry)?;
    let e = optimize_mask(&model, &clip, &ecfg)?;
    let saliency = SaliencyVolume::new(saliency_from_mask(&e.mask, geometry)?)?;

    let out = &args.common.out;
    create_dir(out)?;
    e.mask.values().save(out.join("mask.trbt"))?;
    saliency.values().save(out.join("saliency.trbt"))?;
    write_json_lines(&out.join("trace.jsonl"), &e.trace)?;
    write_json(
        &out.join("explanation.json"),
        &ExplainReport {
            target: e.target,
            initial_score: e.initial_score,
            final_score: e.final_score,
            mask_mean: e.mask.values().mean(),
            config: ecfg,
        },
    )?;
    if !args.no_overlay {
        render_overlay(&clip, &saliency, &out.join("overlay"))?;
    }
    println!(
        "class {}: probability {:.4} -> {:.4}",
        e.target, e.initial_score, e.final_score
    );
    Ok(())
}

#[derive(Serialize)]
struct ObjectScore {
    id: String,
    group: String,
    mean_score: f64,
}

fn score(args: ScoreArgs) -> Result<()> {
    let saliency = SaliencyVolume::new(Tensor::load(&args.saliency)?)?;
    let path = match (&args.annotations, &args.clip) {
        (Some(a), _) => a.clone(),
        (None, Some(c)) => c.join(trb_core::data::ANNOTATIONS_FILE),
        (None, None) => unreachable!("clap requires one of --clip or --annotations"),
    };
    let objects = load_annotations(&path)?;
    let rows = score_time_series(&saliency, &objects)?;
    let summary = objects
        .iter()
        .map(|o| {
            Ok(ObjectScore {
                id: o.id.clone(),
                group: o.group().to_string(),
                mean_score: mean_normalized_score(&saliency, o)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let out = &args.common.out;
    create_dir(out)?;
    write_score_rows(&rows, &out.join("scores.jsonl"))?;
    write_json(&out.join("object_scores.json"), &summary)?;
    for s in &summary {
        println!("{} ({}): {:.4}", s.id, s.group, s.mean_score);
    }
    Ok(())
}

/// Parses `argv` (program name first) and runs one subcommand; returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Explain(a) => explain(a),
        Command::Score(a) => score(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
