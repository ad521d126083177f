#![allow(dead_code)]

use std::path::{Path, PathBuf};

use depthsal::data::{load_videos, synth_depth_popout, SynthOptions, Video};
use depthsal::model::{ModelConfig, SaliencyModel};
use depthsal::RunConfig;

/// Synthetic pop-out dataset in `dir`; returns the manifest path.
pub fn synth(dir: &Path, clips: usize, frames: usize, seed: u64, holdout_every: Option<usize>) -> PathBuf {
    synth_depth_popout(dir, &SynthOptions { clips, frames, seed, holdout_every, ..Default::default() }).unwrap();
    dir.join("manifest.tsv")
}

/// Small-width run configuration for fast tests.
pub fn small_config(variant: &str, width: usize, manifest: PathBuf) -> RunConfig {
    let mc: ModelConfig = variant.parse::<ModelConfig>().unwrap().with_base_width(width);
    let mut cfg = RunConfig::new(mc, vec![manifest]);
    cfg.data.frame_stride = 8;
    cfg.data.eval_frame_stride = 8;
    cfg.train.micro_batch = 2;
    cfg.train.effective_batch = 2;
    cfg.eval.sauc_splits = 4;
    cfg
}

pub fn videos(cfg: &RunConfig) -> Vec<Video> {
    load_videos(&cfg.data.manifests).unwrap()
}

pub fn model<S: depthsal::scalar::Scalar>(cfg: &RunConfig) -> SaliencyModel<S> {
    SaliencyModel::new(cfg.model, cfg.train.seed).unwrap()
}
