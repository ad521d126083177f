//! Optimization: learning-rate schedule, momentum SGD with gradient
//! accumulation, per-step logging, checkpoints and validation.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{augment_flip, load_clip, ClipSample, Split, Video};
use crate::error::{Error, Result};
use crate::io::{load_archive, restore_params, save_archive, store_tensors, TensorArchive};
use crate::losses::{total_loss, EpochClock, Reduction};
use crate::metrics::{evaluate_dataset, FrameKey, FrameTruth, MetricsReport, ShufflePool};
use crate::model::SaliencyModel;
use crate::nn::{BnMode, Forward, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    pub effective_batch: usize,
    pub micro_batch: usize,
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub seed: u64,
    pub flip_p: f64,
    /// Normalization statistics used while training.
    pub bn_mode: BnMode,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 60,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_backbone: 1e-3,
            lr_heads: 1e-4,
            effective_batch: 128,
            micro_batch: 4,
            lr_milestones: vec![30, 50],
            lr_gamma: 0.1,
            seed: 0,
            flip_p: 0.5,
            bn_mode: BnMode::Batch,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, msg: String| if ok { Ok(()) } else { Err(Error::config(format!("train.{field}"), msg)) };
        check(self.total_epochs >= 1, "total_epochs", "must be at least 1".into())?;
        check((0.0..1.0).contains(&self.momentum), "momentum", format!("must lie in [0, 1), got {}", self.momentum))?;
        check(self.weight_decay >= 0.0 && self.weight_decay.is_finite(), "weight_decay", format!("must be nonnegative, got {}", self.weight_decay))?;
        check(self.lr_backbone >= 0.0 && self.lr_backbone.is_finite(), "lr_backbone", format!("must be nonnegative, got {}", self.lr_backbone))?;
        check(self.lr_heads >= 0.0 && self.lr_heads.is_finite(), "lr_heads", format!("must be nonnegative, got {}", self.lr_heads))?;
        check(self.micro_batch >= 1, "micro_batch", "must be at least 1".into())?;
        check(
            self.effective_batch >= 1 && self.effective_batch.is_multiple_of(self.micro_batch),
            "effective_batch",
            format!("must be a positive multiple of micro_batch ({}), got {}", self.micro_batch, self.effective_batch),
        )?;
        check(
            self.lr_milestones.windows(2).all(|w| w[0] < w[1]) && self.lr_milestones.iter().all(|&m| m < self.total_epochs),
            "lr_milestones",
            format!("must be strictly increasing and below total_epochs, got {:?}", self.lr_milestones),
        )?;
        check(self.lr_gamma > 0.0 && self.lr_gamma.is_finite(), "lr_gamma", format!("must be positive, got {}", self.lr_gamma))?;
        check((0.0..=1.0).contains(&self.flip_p), "flip_p", format!("must lie in [0, 1], got {}", self.flip_p))?;
        check(self.max_steps != Some(0), "max_steps", "must be positive when set".into())
    }
}

/// Group learning rates at `epoch`: initial rates times `gamma^k`, with `k`
/// the number of milestones `≤ epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> (f64, f64) {
    let k = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
    let f = cfg.lr_gamma.powi(k as i32);
    (cfg.lr_backbone * f, cfg.lr_heads * f)
}

/// SGD with momentum and weight decay folded into the gradient:
/// `v ← μ v + g + λ p`, `p ← p − η v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(params: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd { momentum, weight_decay, buffers: vec![None; params] }
    }

    /// Apply one update; `lr` gives the rate of each parameter.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>], lr: impl Fn(ParamId) -> f64) {
        let (mu, wd) = (S::of(self.momentum), S::of(self.weight_decay));
        for id in store.trainable_ids().collect::<Vec<_>>() {
            let rate = S::of(lr(id));
            let p = store.value_mut(id);
            let buf = self.buffers[id.0].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let g = grads[id.0].as_ref();
            for (i, (v, w)) in buf.data_mut().iter_mut().zip(p.data_mut()).enumerate() {
                let gi = g.map_or(S::zero(), |g| g.data()[i]);
                *v = mu * *v + gi + wd * *w;
                *w -= rate * *v;
            }
        }
    }

    pub fn buffer(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.buffers[id.0].as_ref()
    }

    pub fn set_buffer(&mut self, id: ParamId, t: Tensor<S>) {
        self.buffers[id.0] = Some(t);
    }
}

/// One training window: video index and center frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct SampleRef {
    pub video: usize,
    pub center: usize,
}

/// Whether `frame` is on the sampling lattice of `stride` (centered in each stride).
pub fn on_stride(frame: usize, stride: usize) -> bool {
    frame % stride == stride / 2
}

/// Frames of `split` videos on the stride lattice that carry fixations.
pub fn training_samples(videos: &[Video], split: Split, stride: usize) -> Vec<SampleRef> {
    let mut out = Vec::new();
    for (vi, v) in videos.iter().enumerate().filter(|(_, v)| v.record.split == split) {
        for (&f, set) in &v.fixations {
            if !set.points.is_empty() && f < v.frame_count && on_stride(f, stride) {
                out.push(SampleRef { video: vi, center: f });
            }
        }
    }
    out
}

fn mix(a: u64, b: u64) -> u64 {
    let mut h = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(29);
    h ^= h >> 31;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Sample order of `epoch`, seeded by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(seed, epoch as u64)));
    order
}

fn flip_rng(seed: u64, epoch: usize, sample: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0x5eed, epoch as u64), sample as u64))
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr_backbone: f64,
    pub lr_heads: f64,
    /// Mean per-sample total objective.
    pub loss: f64,
    /// Mean final-map components.
    pub ce: f64,
    pub cc: f64,
    pub nss: f64,
    pub deep_sup_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: Vec<StepRecord>,
    pub mean_loss: f64,
    pub val_cc: Option<f64>,
}

impl EpochSummary {
    fn new(epoch: usize, steps: Vec<StepRecord>) -> Self {
        let mean_loss = steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64;
        EpochSummary { epoch, steps, mean_loss, val_cc: None }
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const BEST_CHECKPOINT: &str = "ckpt_best";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:03}")
}

pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .enumerate()
        .map(|(i, l)| {
            let l = l.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

/// Stack per-sample clips into model inputs.
pub fn batch_inputs<S: Scalar>(samples: &[ClipSample<S>], with_depth: bool) -> Result<(Tensor<S>, Option<Tensor<S>>)> {
    let rgb = Tensor::stack(&samples.iter().map(|s| &s.rgb).collect::<Vec<_>>())?;
    let depth = if with_depth {
        let parts = samples
            .iter()
            .map(|s| s.depth.as_ref().ok_or_else(|| Error::Input(format!("{}: sample has no depth clip", s.video_id))))
            .collect::<Result<Vec<_>>>()?;
        Some(Tensor::stack(&parts)?)
    } else {
        None
    };
    Ok((rgb, depth))
}

/// Anything that maps clip windows to saliency maps.
pub trait SaliencyPredictor<S: Scalar> {
    /// One row-major map per sample at the ground-truth resolution.
    fn predict_maps(&self, samples: &[ClipSample<S>]) -> Result<Vec<Vec<S>>>;
}

impl<S: Scalar> SaliencyPredictor<S> for SaliencyModel<S> {
    fn predict_maps(&self, samples: &[ClipSample<S>]) -> Result<Vec<Vec<S>>> {
        let (rgb, depth) = batch_inputs(samples, self.config().streams.uses_depth())?;
        let p = self.predict(Some(&rgb), depth.as_ref())?;
        Ok((0..samples.len()).map(|i| p.saliency.outer(i).to_vec()).collect())
    }
}

/// Evaluation-mode metrics over every stride-lattice frame of `split`.
pub fn evaluate<S: Scalar>(
    predictor: &dyn SaliencyPredictor<S>,
    videos: &[Video],
    split: Split,
    cfg: &RunConfig,
    batch: usize,
) -> Result<MetricsReport> {
    let clip_opts = cfg.clip_options();
    let size = clip_opts.size;
    let mut preds: BTreeMap<FrameKey, Vec<S>> = BTreeMap::new();
    let mut truths: BTreeMap<FrameKey, FrameTruth<S>> = BTreeMap::new();
    for v in videos.iter().filter(|v| v.record.split == split) {
        let pool = ShufflePool::new(v.id(), &v.fixations, (v.record.width, v.record.height), (size, size));
        let frames: Vec<usize> = (0..v.frame_count).filter(|&f| on_stride(f, cfg.data.eval_frame_stride)).collect();
        for chunk in frames.chunks(batch.max(1)) {
            let samples = chunk.iter().map(|&f| load_clip::<S>(v, f, &clip_opts)).collect::<Result<Vec<_>>>()?;
            let maps = predictor.predict_maps(&samples)?;
            for (s, map) in samples.into_iter().zip(maps) {
                let key = (v.id().to_string(), s.center_frame);
                truths.insert(key.clone(), FrameTruth { pool: pool.for_frame(s.center_frame), gt: s.gt });
                preds.insert(key, map);
            }
        }
    }
    if truths.is_empty() {
        return Err(Error::Input(format!("no {split} frames to evaluate")));
    }
    evaluate_dataset(&preds, &truths, &cfg.eval)
}

/// Training state persisted in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Last completed epoch.
    pub epoch: usize,
    pub step: usize,
    pub variant: String,
    pub dtype: String,
    pub best_val_cc: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Resolved configuration text.
    pub config: String,
}

/// Save parameters, optimizer buffers and training state.
pub fn save_checkpoint<S: Scalar>(path: &Path, model: &SaliencyModel<S>, opt: &Sgd<S>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = store_tensors(&model.params, "model.");
    for id in model.params.ids() {
        if let Some(b) = opt.buffer(id) {
            tensors.push((format!("optim.{}", model.params.entry(id).name), b));
        }
    }
    save_archive(path, &tensors, &serde_json::to_value(meta).expect("meta serializes"))
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<(TensorArchive<S>, CheckpointMeta)> {
    let archive = load_archive::<S>(path)?;
    let meta: CheckpointMeta = serde_json::from_value(archive.meta.clone())
        .map_err(|e| Error::Format { what: "checkpoint metadata", message: e.to_string() })?;
    Ok((archive, meta))
}

/// Load the parameters of a checkpoint into `model`, which must have the same architecture.
pub fn load_model_weights<S: Scalar>(model: &mut SaliencyModel<S>, path: &Path) -> Result<CheckpointMeta> {
    let (archive, meta) = read_checkpoint::<S>(path)?;
    restore_params(&mut model.params, &archive, "model.")?;
    Ok(meta)
}

pub struct Trainer<S: Scalar> {
    pub cfg: RunConfig,
    pub model: SaliencyModel<S>,
    pub opt: Sgd<S>,
    pub videos: Vec<Video>,
    samples: Vec<SampleRef>,
    output_dir: Option<PathBuf>,
    next_epoch: usize,
    step: usize,
    best_val_cc: Option<f64>,
    best_epoch: Option<usize>,
}

impl<S: Scalar> Trainer<S> {
    /// `output_dir`: where logs and checkpoints go (`None` keeps everything in memory).
    pub fn new(cfg: RunConfig, model: SaliencyModel<S>, videos: Vec<Video>, output_dir: Option<PathBuf>) -> Result<Self> {
        cfg.train.validate()?;
        if model.config().variant() != cfg.model.variant() || model.config().geometry != cfg.model.geometry {
            return Err(Error::config("model.variant", "model does not match the configuration"));
        }
        let samples = training_samples(&videos, Split::Train, cfg.data.frame_stride);
        if samples.is_empty() {
            return Err(Error::Input("no training-split frames with fixations".into()));
        }
        let needs_depth = cfg.model.streams.uses_depth();
        if let Some(v) = videos.iter().find(|v| needs_depth && v.record.depth_dir.is_none()) {
            return Err(Error::Input(format!("{} needs depth maps but video {} has none", cfg.model.variant(), v.id())));
        }
        if let Some(dir) = &output_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let opt = Sgd::new(model.params.len(), cfg.train.momentum, cfg.train.weight_decay);
        Ok(Trainer { cfg, model, opt, videos, samples, output_dir, next_epoch: 0, step: 0, best_val_cc: None, best_epoch: None })
    }

    pub fn samples(&self) -> &[SampleRef] {
        &self.samples
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    pub fn best(&self) -> (Option<f64>, Option<usize>) {
        (self.best_val_cc, self.best_epoch)
    }

    /// Continue from a checkpoint written by [`Trainer::run`].
    pub fn resume(&mut self, path: &Path) -> Result<()> {
        let (archive, meta) = read_checkpoint::<S>(path)?;
        if meta.variant != self.cfg.model.variant() {
            return Err(Error::Incompatible { mismatches: vec![format!("variant: expected {}, found {}", self.cfg.model.variant(), meta.variant)] });
        }
        restore_params(&mut self.model.params, &archive, "model.")?;
        for id in self.model.params.ids().collect::<Vec<_>>() {
            if let Some(b) = archive.get(&format!("optim.{}", self.model.params.entry(id).name)) {
                self.opt.set_buffer(id, b.clone());
            }
        }
        self.next_epoch = meta.epoch + 1;
        self.step = meta.step;
        self.best_val_cc = meta.best_val_cc;
        self.best_epoch = meta.best_epoch;
        Ok(())
    }

    fn budget_left(&self) -> bool {
        self.cfg.train.max_steps.is_none_or(|m| self.step < m)
    }

    /// Train through the remaining epochs, validating and checkpointing after each.
    pub fn run(&mut self) -> Result<Vec<EpochSummary>> {
        let mut out = Vec::new();
        while self.next_epoch < self.cfg.train.total_epochs && self.budget_left() {
            let epoch = self.next_epoch;
            let mut summary = self.train_epoch(epoch)?;
            summary.val_cc = self.finish_epoch(epoch)?;
            info!("epoch {epoch}: mean loss {:.5}, validation CC {:?}", summary.mean_loss, summary.val_cc);
            out.push(summary);
        }
        Ok(out)
    }

    fn finish_epoch(&mut self, epoch: usize) -> Result<Option<f64>> {
        let has_val = self.videos.iter().any(|v| v.record.split == Split::Val);
        let val_cc = if has_val {
            evaluate(&self.model, &self.videos, Split::Val, &self.cfg, self.cfg.train.micro_batch)?.overall.cc
        } else {
            None
        };
        let improved = match (val_cc, self.best_val_cc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            (None, _) => !has_val,
        };
        if improved {
            self.best_val_cc = val_cc;
            self.best_epoch = Some(epoch);
        }
        self.next_epoch = epoch + 1;
        if let Some(dir) = self.output_dir.clone() {
            let meta = self.checkpoint_meta(epoch);
            let path = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(&path, &self.model, &self.opt, &meta)?;
            if improved {
                fs::copy(&path, dir.join(BEST_CHECKPOINT)).map_err(|e| Error::io(dir.join(BEST_CHECKPOINT), e))?;
            }
        }
        Ok(val_cc)
    }

    pub fn checkpoint_meta(&self, epoch: usize) -> CheckpointMeta {
        CheckpointMeta {
            epoch,
            step: self.step,
            variant: self.cfg.model.variant(),
            dtype: S::DTYPE.to_string(),
            best_val_cc: self.best_val_cc,
            best_epoch: self.best_epoch,
            config: self.cfg.snapshot(),
        }
    }

    /// One pass over the training samples in the seeded order of `epoch`.
    pub fn train_epoch(&mut self, epoch: usize) -> Result<EpochSummary> {
        let order = epoch_order(self.samples.len(), self.cfg.train.seed, epoch);
        let mut steps = Vec::new();
        for batch in order.chunks(self.cfg.train.effective_batch) {
            if !self.budget_left() {
                break;
            }
            steps.push(self.optimizer_step(epoch, batch)?);
        }
        Ok(EpochSummary::new(epoch, steps))
    }

    fn load_sample(&self, epoch: usize, index: usize) -> Result<ClipSample<S>> {
        let r = self.samples[index];
        let clip = load_clip::<S>(&self.videos[r.video], r.center, &self.cfg.clip_options())?;
        Ok(augment_flip(clip, self.cfg.train.flip_p, &mut flip_rng(self.cfg.train.seed, epoch, index)))
    }

    /// Accumulate gradients over micro-batches of `batch` and apply one update.
    pub fn optimizer_step(&mut self, epoch: usize, batch: &[usize]) -> Result<StepRecord> {
        let clock = EpochClock::new(epoch, self.cfg.train.total_epochs)?;
        let tc = &self.cfg.train;
        let scale = 1.0 / batch.len() as f64;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.model.params.len()];
        let (mut loss, mut ce, mut cc, mut nss) = (0.0, 0.0, 0.0, 0.0);
        let with_depth = self.cfg.model.streams.uses_depth();
        for micro in batch.chunks(tc.micro_batch) {
            let samples = micro.iter().map(|&i| self.load_sample(epoch, i)).collect::<Result<Vec<_>>>()?;
            let describe = || samples.iter().map(|s| format!("{}:{}", s.video_id, s.center_frame)).collect::<Vec<_>>().join(", ");
            let (rgb, depth) = batch_inputs(&samples, with_depth)?;
            let mut ctx = Forward::new(&self.model.params, tc.bn_mode, true);
            let rgb_v = ctx.input(rgb);
            let depth_v = depth.map(|d| ctx.input(d));
            let out = self
                .model
                .forward(&mut ctx, Some(rgb_v), depth_v)
                .map_err(|e| annotate_numeric(e, &describe()))?;
            let gts: Vec<_> = samples.iter().map(|s| &s.gt).collect();
            let (rgb_a, depth_a) = (out.rgb_supervision(), out.depth_supervision());
            let terms = total_loss(&mut ctx.graph, out.saliency, &rgb_a, &depth_a, &gts, clock, &self.cfg.loss, Reduction::ScaledSum(scale))?;
            let Some(root) = terms.loss else { continue };
            let n = terms.valid_samples as f64;
            if !terms.mean_total.is_finite() {
                return Err(Error::Numeric { layer: format!("loss (batch {})", describe()) });
            }
            loss += terms.mean_total * n * scale;
            ce += terms.saliency_terms.ce * n * scale;
            cc += terms.saliency_terms.cc * n * scale;
            nss += terms.saliency_terms.nss * n * scale;
            let (graph, bn) = ctx.finish();
            let g = graph.backward(root);
            for id in g.param_ids() {
                if let Some(t) = g.param(id) {
                    if !t.all_finite() {
                        return Err(Error::Numeric { layer: format!("gradient of {} (batch {})", self.model.params.entry(id).name, describe()) });
                    }
                    match &mut grads[id.0] {
                        Some(acc) => acc.add_assign(t),
                        slot @ None => *slot = Some(t.clone()),
                    }
                }
            }
            bn.apply(&mut self.model.params);
        }
        let (lr_b, lr_h) = lr_at(epoch, &self.cfg.train);
        let params = &self.model.params;
        let groups: Vec<Option<ParamGroup>> = params.ids().map(|id| params.entry(id).group).collect();
        self.opt.step(&mut self.model.params, &grads, |id| match groups[id.0] {
            Some(ParamGroup::Backbone) => lr_b,
            _ => lr_h,
        });
        self.step += 1;
        let record = StepRecord {
            step: self.step,
            epoch,
            lr_backbone: lr_b,
            lr_heads: lr_h,
            loss,
            ce,
            cc,
            nss,
            deep_sup_weight: clock.deep_supervision_weight(),
        };
        if let Some(dir) = &self.output_dir {
            let path = dir.join(LOG_FILE);
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&record).expect("record serializes")).map_err(|e| Error::io(&path, e))?;
        }
        Ok(record)
    }
}

fn annotate_numeric(e: Error, batch: &str) -> Error {
    match e {
        Error::Numeric { layer } => Error::Numeric { layer: format!("{layer} (batch {batch})") },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_at_milestones() {
        let cfg = TrainConfig::default();
        let close = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).abs() < 1e-18 && (a.1 - b.1).abs() < 1e-18;
        assert_eq!(lr_at(0, &cfg), (1e-3, 1e-4));
        assert!(close(lr_at(29, &cfg), (1e-3, 1e-4)));
        assert!(close(lr_at(30, &cfg), (1e-4, 1e-5)));
        assert!(close(lr_at(59, &cfg), (1e-5, 1e-6)));
    }

    #[test]
    fn validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { effective_batch: 10, micro_batch: 4, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_milestones: vec![50, 30], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_milestones: vec![60], ..Default::default() }.validate().is_err());
        assert!(TrainConfig { flip_p: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn weight_decay_alone_shrinks_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w".into(), Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(), Some(ParamGroup::Heads), true);
        let mut opt = Sgd::new(1, 0.9, 1e-5);
        opt.step(&mut store, &[None], |_| 1e-3);
        let f = 1.0 - 1e-3 * 1e-5;
        for (a, b) in store.value(id).data().iter().zip([1.0, -2.0, 0.5]) {
            assert!((a - b * f).abs() < 1e-15);
        }
    }

    #[test]
    fn momentum_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.register("w".into(), Tensor::scalar(0.0), Some(ParamGroup::Heads), true);
        let mut opt = Sgd::new(1, 0.5, 0.0);
        let g = vec![Some(Tensor::scalar(1.0))];
        opt.step(&mut store, &g, |_| 0.1);
        opt.step(&mut store, &g, |_| 0.1);
        assert!((store.value(id).data()[0] + 0.25).abs() < 1e-15);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 1, 3);
        assert_eq!(a, epoch_order(50, 1, 3));
        assert_ne!(a, epoch_order(50, 1, 4));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn stride_lattice() {
        assert!((0..10).all(|f| on_stride(f, 1)));
        let picked: Vec<usize> = (0..12).filter(|&f| on_stride(f, 4)).collect();
        assert_eq!(picked, vec![2, 6, 10]);
    }
}
