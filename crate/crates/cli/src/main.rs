//! Single-binary pipeline: dataset generation, two-stage training, gallery
//! construction, hierarchical inference, temporally consistent retrieval,
//! evaluation, plots, and an encoder throughput probe.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::*;
use config::FileConfig;
use crossview_core::adapter::AdapterVariant;
use crossview_core::geodata::FRAME_MATCH_THRESHOLD_M;
use crossview_core::training::{Stage, TrainSchedule};

#[derive(Parser)]
#[command(name = "crossview", version, about = "Cross-view video geo-localization pipeline")]
struct Cli {
    /// Optional key=value config file; CLI flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Train one stage: image encoders, adapters, or the retriever.
    Train(TrainCli),
    /// Build a small or large aerial gallery file.
    BuildGallery(BuildGalleryArgs),
    /// Sequence-to-image retrieval over the large gallery.
    InferSeq(InferSeqArgs),
    /// Per-frame candidate retrieval over a small gallery.
    InferFrames(InferFramesArgs),
    /// Decode one candidate file into a trajectory.
    Retrieve(RetrieveArgs),
    /// Recall metrics; JSON on stdout.
    Eval(EvalArgs),
    /// SVG plot of truth and predicted trajectories.
    Plot(PlotArgs),
    /// Encoder throughput probe; JSON on stdout.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    videos: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Small tile side in pixels.
    #[arg(long)]
    tile: Option<usize>,
    /// Small tiles per large-tile side.
    #[arg(long)]
    k: Option<usize>,
    /// Large-tile grid as COLSxROWS.
    #[arg(long)]
    grid: Option<String>,
    #[arg(long)]
    tile_m: Option<f64>,
    #[arg(long)]
    step_m: Option<f64>,
    #[arg(long)]
    jitter: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainCli {
    #[arg(long)]
    stage: String,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    models: PathBuf,
    /// Labeled candidate sequences (stage retriever).
    #[arg(long)]
    candidates_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    frame_stride: Option<usize>,
    /// Videos held out from training (taken from the end).
    #[arg(long)]
    holdout: Option<usize>,
    /// Adapter variant: cls or all.
    #[arg(long)]
    variant: Option<String>,
    /// Aerial-branch adapter variant override (asymmetric setup).
    #[arg(long)]
    aerial_variant: Option<String>,
    /// JSON-lines metrics output.
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
}

#[derive(Args)]
struct BuildGalleryArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    models: PathBuf,
    /// small | large
    #[arg(long)]
    level: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferSeqArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long)]
    top_t: Option<usize>,
    /// all | first:K | last:K | id,id,...
    #[arg(long, default_value = "all")]
    videos: String,
    #[arg(long)]
    frame_stride: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferFramesArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    small_gallery: PathBuf,
    /// Sequence results for hierarchical gallery construction.
    #[arg(long)]
    seq_results: Option<PathBuf>,
    #[arg(long)]
    large_gallery: Option<PathBuf>,
    #[arg(long)]
    top_t: Option<usize>,
    /// Candidates per frame.
    #[arg(long)]
    candidates: Option<usize>,
    #[arg(long, default_value = "all")]
    videos: String,
    /// Also write labeled sequences for retriever training.
    #[arg(long)]
    emit_labels: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    candidates: PathBuf,
    /// nn | ds | dp | transretriever
    #[arg(long)]
    method: String,
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// seq | frame
    #[arg(long)]
    mode: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    /// Sequence results file (seq mode).
    #[arg(long)]
    results: Option<PathBuf>,
    /// Per-video frame results directory (frame mode).
    #[arg(long)]
    results_dir: Option<PathBuf>,
    #[arg(long)]
    threshold_m: Option<f64>,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    video: String,
    /// Trajectory GeoJSON files, repeatable.
    #[arg(long)]
    pred: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    models: PathBuf,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_grid(raw: &str) -> anyhow::Result<(usize, usize)> {
    let (a, b) = raw
        .split_once('x')
        .ok_or_else(|| anyhow::anyhow!("grid must be COLSxROWS, got {raw}"))?;
    Ok((a.parse()?, b.parse()?))
}

fn run() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gen(a) => {
            let grid = parse_grid(&cfg.resolve(a.grid, "grid", "4x4".to_string())?)?;
            cmd_gen(
                &a.out,
                cfg.resolve(a.videos, "videos", 8)?,
                cfg.resolve(a.frames, "frames", 8)?,
                cfg.resolve(a.tile, "tile", 64)?,
                cfg.resolve(a.k, "k", 7)?,
                grid,
                cfg.resolve(a.tile_m, "tile-m", 40.0)?,
                cfg.resolve(a.step_m, "step-m", 16.0)?,
                cfg.resolve(a.jitter, "jitter", 0.12)?,
                cfg.resolve(a.seed, "seed", 0)?,
            )
        }
        Command::Train(a) => {
            let stage: Stage = cfg.resolve(Some(a.stage), "stage", "image".to_string())?.parse()?;
            let defaults = TrainSchedule::desk_default(stage);
            let schedule = TrainSchedule {
                stage,
                epochs: cfg.resolve(a.epochs, "epochs", defaults.epochs)?,
                batch: cfg.resolve(a.batch, "batch", defaults.batch)?,
                lr: cfg.resolve(a.lr, "lr", defaults.lr)?,
                alpha: cfg.resolve(a.alpha, "alpha", defaults.alpha)?,
                seed: cfg.resolve(a.seed, "seed", defaults.seed)?,
                frame_stride: cfg.resolve(a.frame_stride, "frame-stride", defaults.frame_stride)?,
            };
            let variant: AdapterVariant =
                cfg.resolve(a.variant, "variant", "cls".to_string())?.parse()?;
            let aerial_variant = match a.aerial_variant {
                Some(v) => Some(v.parse::<AdapterVariant>()?),
                None => None,
            };
            cmd_train(TrainArgs {
                stage,
                data: a.data,
                models: a.models,
                candidates_dir: a.candidates_dir,
                schedule,
                holdout: cfg.resolve(a.holdout, "holdout", 0)?,
                variant,
                aerial_variant,
                metrics: a.metrics,
                dim: cfg.resolve(a.dim, "dim", 64)?,
                depth: cfg.resolve(a.depth, "depth", 4)?,
                heads: cfg.resolve(a.heads, "heads", 4)?,
                embed_dim: cfg.resolve(a.embed_dim, "embed-dim", 64)?,
            })
        }
        Command::BuildGallery(a) => cmd_build_gallery(&a.data, &a.models, &a.level, &a.out),
        Command::InferSeq(a) => cmd_infer_seq(
            &a.data,
            &a.models,
            &a.gallery,
            cfg.resolve(a.top_t, "top-t", 10)?,
            &a.videos,
            cfg.resolve(a.frame_stride, "frame-stride", 1)?,
            &a.out,
        ),
        Command::InferFrames(a) => cmd_infer_frames(
            &a.data,
            &a.models,
            &a.small_gallery,
            a.seq_results.as_deref(),
            a.large_gallery.as_deref(),
            cfg.resolve(a.top_t, "top-t", 10)?,
            cfg.resolve(a.candidates, "candidates", 10)?,
            &a.videos,
            a.emit_labels,
            &a.out,
        ),
        Command::Retrieve(a) => cmd_retrieve(
            &a.candidates,
            &a.method,
            a.models.as_deref(),
            cfg.resolve(a.lambda, "lambda", crossview_core::consistent::dp::DEFAULT_LAMBDA)?,
            cfg.resolve(a.sigma, "sigma", crossview_core::consistent::baselines::DEFAULT_SIGMA)?,
            a.out.as_deref(),
            a.out_json.as_deref(),
        ),
        Command::Eval(a) => match a.mode.as_str() {
            "seq" => {
                let results =
                    a.results.ok_or_else(|| anyhow::anyhow!("--results required in seq mode"))?;
                cmd_eval_seq(&a.data, &results, &a.gallery, true)
            }
            "frame" => {
                let dir = a
                    .results_dir
                    .ok_or_else(|| anyhow::anyhow!("--results-dir required in frame mode"))?;
                cmd_eval_frames(
                    &a.data,
                    &dir,
                    &a.gallery,
                    cfg.resolve(a.threshold_m, "threshold-m", FRAME_MATCH_THRESHOLD_M)?,
                    true,
                )
            }
            other => anyhow::bail!("unknown eval mode {other} (seq|frame)"),
        },
        Command::Plot(a) => cmd_plot(&a.data, &a.video, &a.pred, &a.out),
        Command::Bench(a) => cmd_bench(
            &a.models,
            cfg.resolve(a.images, "images", 64)?,
            cfg.resolve(a.seed, "seed", 0)?,
        ),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("[crossview] error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
