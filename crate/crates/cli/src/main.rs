//! `depthsal` command line: train, evaluate, predict and synth.
//!
//! On failure the last line on stderr is `error: <Class>: <message>`, where
//! `<Class>` is one of the library error classes (e.g. `ConfigError`).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use depthsal::data::{load_clip, load_videos, manifest::frame_file, synth_depth_popout, Split, SynthOptions};
use depthsal::io::{heatmap, load_pretrained_backbone, overlay_frame, save_image, write_raw_map};
use depthsal::model::SaliencyModel;
use depthsal::training::{evaluate, load_model_weights, SaliencyPredictor, Trainer, BEST_CHECKPOINT};
use depthsal::{Error, RunConfig};
use log::info;

/// Name of the resolved configuration written next to run outputs.
const RESOLVED_CONFIG: &str = "resolved.cfg";

#[derive(Parser)]
#[command(name = "depthsal", version, about = "Depth-aware video saliency prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory for checkpoints, logs, reports and maps.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Overrides `train.seed` (and the dataset seed for `synth`).
    #[arg(long)]
    seed: Option<u64>,
    /// Configuration override `section.key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and a per-step log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on one split; prints CC, NSS, AUC-J, sAUC and SIM.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = BEST_CHECKPOINT)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Write a heatmap for every frame of one video.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = BEST_CHECKPOINT)]
        checkpoint: PathBuf,
        #[arg(long)]
        video_id: String,
        /// Also write the heatmap blended over the input frame.
        #[arg(long)]
        overlay: bool,
        /// Also write raw float maps.
        #[arg(long)]
        raw: bool,
    },
    /// Generate the synthetic depth pop-out dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8)]
        clips: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        frames: usize,
        /// Put every k-th clip in the test split.
        #[arg(long)]
        holdout_every: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let class = e.downcast_ref::<Error>().map_or("Error", Error::class);
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {class}: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Train { common, resume } => train(&common, resume.as_deref()),
        Command::Evaluate { common, checkpoint, split } => evaluate_cmd(&common, &checkpoint, split),
        Command::Predict { common, checkpoint, video_id, overlay, raw } => predict(&common, &checkpoint, &video_id, overlay, raw),
        Command::Synth { common, clips, out, frames, holdout_every } => {
            let opts = SynthOptions { clips, frames, holdout_every, seed: common.seed.unwrap_or(0), ..Default::default() };
            let records = synth_depth_popout(&out, &opts)?;
            println!("{} clips written; manifest {}", records.len(), depthsal::data::synth::manifest_path(&out).display());
            Ok(())
        }
    }
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let path = common.config.as_deref().ok_or_else(|| Error::config("--config", "a configuration file is required"))?;
    let mut cfg = RunConfig::load(path, &common.set)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn output_dir(common: &Common) -> anyhow::Result<PathBuf> {
    let dir = common.output_dir.clone().unwrap_or_else(|| PathBuf::from("output"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write_resolved(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.snapshot()).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// A checkpoint path as given, or relative to the output directory.
fn resolve_checkpoint(path: &Path, common: &Common) -> PathBuf {
    match &common.output_dir {
        Some(dir) if !path.exists() && path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> anyhow::Result<SaliencyModel<f32>> {
    let mut model = SaliencyModel::<f32>::new(cfg.model, cfg.train.seed)?;
    let meta = load_model_weights(&mut model, checkpoint)?;
    info!("loaded {} (epoch {}, {})", checkpoint.display(), meta.epoch, meta.variant);
    Ok(model)
}

fn train(common: &Common, resume: Option<&Path>) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dir = output_dir(common)?;
    write_resolved(&cfg, &dir)?;
    let videos = load_videos(&cfg.data.manifests)?;
    let mut model = SaliencyModel::<f32>::new(cfg.model, cfg.train.seed)?;
    if let Some(p) = &cfg.pretrained {
        let n = load_pretrained_backbone(&mut model.params, p)?;
        info!("loaded {n} pretrained backbone tensors from {}", p.display());
    }
    info!("{}: {} trainable tensors", cfg.model.variant(), model.params.trainable_count());
    let mut trainer = Trainer::new(cfg, model, videos, Some(dir.clone()))?;
    if let Some(ckpt) = resume {
        trainer.resume(ckpt)?;
        info!("resuming at epoch {}", trainer.next_epoch());
    }
    for e in trainer.run()? {
        let val = e.val_cc.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        println!("epoch {:03}  steps {}  loss {:.5}  val CC {val}", e.epoch, e.steps.len(), e.mean_loss);
    }
    let (best, epoch) = trainer.best();
    println!(
        "done: {} steps; best epoch {}; best validation CC {}; outputs in {}",
        trainer.step_count(),
        epoch.map_or("n/a".into(), |e| e.to_string()),
        best.map_or("n/a".into(), |v| format!("{v:.4}")),
        dir.display()
    );
    Ok(())
}

fn evaluate_cmd(common: &Common, checkpoint: &Path, split: Split) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let dir = output_dir(common)?;
    let videos = load_videos(&cfg.data.manifests)?;
    let model = load_model(&cfg, &resolve_checkpoint(checkpoint, common))?;
    let report = evaluate(&model, &videos, split, &cfg, cfg.train.micro_batch)?;
    let path = dir.join(format!("metrics_{split}.json"));
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    println!("{}", report.overall.table_line());
    info!("{} frames; report {}", report.frames.len(), path.display());
    Ok(())
}

fn predict(common: &Common, checkpoint: &Path, video_id: &str, with_overlay: bool, raw: bool) -> anyhow::Result<()> {
    let cfg = load_config(common)?;
    let videos = load_videos(&cfg.data.manifests)?;
    let video = videos
        .iter()
        .find(|v| v.id() == video_id)
        .ok_or_else(|| Error::Input(format!("video `{video_id}` is not in the configured manifests")))?;
    if cfg.model.streams.uses_depth() && video.record.depth_dir.is_none() {
        return Err(Error::Input(format!("{} requires depth maps, but video `{video_id}` has none", cfg.model.variant())).into());
    }
    let dir = output_dir(common)?;
    let model = load_model(&cfg, &resolve_checkpoint(checkpoint, common))?;
    let opts = cfg.clip_options();
    let size = opts.size;
    let frames: Vec<usize> = (0..video.frame_count).collect();
    for chunk in frames.chunks(cfg.train.micro_batch) {
        let samples = chunk.iter().map(|&f| load_clip::<f32>(video, f, &opts)).collect::<depthsal::Result<Vec<_>>>()?;
        let maps = model.predict_maps(&samples)?;
        for (&f, map) in chunk.iter().zip(maps) {
            let heat = heatmap(size, size, &map);
            if with_overlay {
                let blended = overlay_frame(&frame_file(&video.record.frames_dir, f), &heat)?;
                save_image(&dir.join(format!("overlay_{f:06}.png")), blended)?;
            }
            save_image(&dir.join(format!("sal_{f:06}.png")), heat)?;
            if raw {
                write_raw_map(&dir.join(format!("sal_{f:06}.vdsm")), size, size, &map)?;
            }
        }
    }
    println!("{} frames of {video_id} written to {}", frames.len(), dir.display());
    Ok(())
}
