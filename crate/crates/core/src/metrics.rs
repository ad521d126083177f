//! Saliency evaluation metrics and dataset-level aggregation.
//!
//! Every metric returns `None` when it is undefined for the frame (constant
//! map, no fixations, empty shuffle pool); such frames are left out of that
//! metric's means.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ground_truth::{fixation_cells, GroundTruth};
use crate::data::manifest::FixationSet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DEFAULT_SAUC_SPLITS: usize = 100;
const STD_EPS: f64 = 1e-12;

fn to_f64<S: Scalar>(v: &[S]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation over cells.
pub fn cc<S: Scalar>(pred: &[S], yc: &[S]) -> Option<f64> {
    assert_eq!(pred.len(), yc.len(), "map sizes differ");
    let (p, y) = (to_f64(pred), to_f64(yc));
    let (mp, sp) = mean_std(&p);
    let (my, sy) = mean_std(&y);
    if sp <= STD_EPS || sy <= STD_EPS {
        return None;
    }
    let cov = p.iter().zip(&y).map(|(a, b)| (a - mp) * (b - my)).sum::<f64>() / p.len() as f64;
    Some(cov / (sp * sy))
}

/// Mean z-scored prediction at fixated cells (population deviation).
pub fn nss<S: Scalar>(pred: &[S], yb: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), yb.len(), "map sizes differ");
    let p = to_f64(pred);
    let n_b = yb.iter().filter(|&&b| b).count();
    let (m, s) = mean_std(&p);
    if n_b == 0 || s <= STD_EPS {
        return None;
    }
    Some(p.iter().zip(yb).filter(|(_, &b)| b).map(|(v, _)| (v - m) / s).sum::<f64>() / n_b as f64)
}

/// Area under the ROC curve of `positives` against `negatives`, with the
/// threshold swept over every distinct value (`≥` convention) and
/// trapezoidal integration from (0,0) to (1,1). Equals the probability that
/// a positive outranks a negative, counting ties as one half.
pub fn roc_auc(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives.iter().map(|&v| (v, true)).chain(negatives.iter().map(|&v| (v, false))).collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut i = 0;
    while i < all.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            i += 1;
        }
        area += (fp - prev_fp) / nn * (tp + prev_tp) / (2.0 * np);
    }
    area
}

/// AUC with fixated cells as positives and all cells as the false-positive reference.
pub fn auc_judd<S: Scalar>(pred: &[S], yb: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), yb.len(), "map sizes differ");
    let p = to_f64(pred);
    let pos: Vec<f64> = p.iter().zip(yb).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    if pos.is_empty() {
        return None;
    }
    Some(roc_auc(&pos, &p))
}

/// Per-split shuffled-AUC values: each split draws `min(N_b, |pool|)` pool
/// cells without replacement as negatives.
pub fn sauc_splits<S: Scalar>(pred: &[S], yb: &[bool], pool: &[usize], n_splits: usize, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
    assert_eq!(pred.len(), yb.len(), "map sizes differ");
    let p = to_f64(pred);
    let pos: Vec<f64> = p.iter().zip(yb).filter(|(_, &b)| b).map(|(&v, _)| v).collect();
    if pos.is_empty() || pool.is_empty() || n_splits == 0 {
        return None;
    }
    let n = pos.len().min(pool.len());
    Some(
        (0..n_splits)
            .map(|_| {
                let neg: Vec<f64> = index::sample(rng, pool.len(), n).iter().map(|i| p[pool[i]]).collect();
                roc_auc(&pos, &neg)
            })
            .collect(),
    )
}

pub fn sauc<S: Scalar>(pred: &[S], yb: &[bool], pool: &[usize], n_splits: usize, rng: &mut ChaCha8Rng) -> Option<f64> {
    sauc_splits(pred, yb, pool, n_splits, rng).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Histogram intersection of the two sum-normalized maps.
pub fn sim<S: Scalar>(pred: &[S], yc: &[S]) -> Option<f64> {
    assert_eq!(pred.len(), yc.len(), "map sizes differ");
    let (p, y) = (to_f64(pred), to_f64(yc));
    let (sp, sy): (f64, f64) = (p.iter().sum(), y.iter().sum());
    if !(sp > 0.0 && sy > 0.0) {
        return None;
    }
    Some(p.iter().zip(&y).map(|(a, b)| (a / sp).min(b / sy)).sum())
}

/// Fixated cells of every annotated frame of one video, at prediction resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShufflePool {
    pub video_id: String,
    frames: BTreeMap<usize, BTreeSet<usize>>,
}

impl ShufflePool {
    pub fn new(video_id: &str, fixations: &BTreeMap<usize, FixationSet>, source: (u32, u32), size: (usize, usize)) -> Self {
        let frames = fixations
            .iter()
            .filter(|(_, set)| !set.points.is_empty())
            .map(|(&f, set)| (f, fixation_cells(set, source, size).into_iter().map(|(r, c)| r * size.1 + c).collect()))
            .collect();
        ShufflePool { video_id: video_id.to_string(), frames }
    }

    pub fn from_cells(video_id: &str, frames: BTreeMap<usize, BTreeSet<usize>>) -> Self {
        ShufflePool { video_id: video_id.to_string(), frames }
    }

    /// Union of the fixated cells of every frame other than `frame`, sorted.
    pub fn for_frame(&self, frame: usize) -> Vec<usize> {
        let mut cells = BTreeSet::new();
        for (_, set) in self.frames.iter().filter(|(&f, _)| f != frame) {
            cells.extend(set);
        }
        cells.into_iter().collect()
    }
}

/// 64-bit FNV-1a.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3))
}

/// Independent generator for one frame's negative sampling.
pub fn frame_rng(seed: u64, video_id: &str, frame: usize) -> ChaCha8Rng {
    let mut h = seed ^ fnv1a(video_id).rotate_left(17) ^ (frame as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    ChaCha8Rng::seed_from_u64(h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEval {
    pub video_id: String,
    pub frame_index: usize,
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub auc_j: Option<f64>,
    pub sauc: Option<f64>,
    pub sim: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricMeans {
    pub cc: Option<f64>,
    pub nss: Option<f64>,
    pub auc_j: Option<f64>,
    pub sauc: Option<f64>,
    pub sim: Option<f64>,
}

impl MetricMeans {
    pub fn of(frames: &[&FrameEval]) -> Self {
        let mean = |get: fn(&FrameEval) -> Option<f64>| {
            let v: Vec<f64> = frames.iter().filter_map(|f| get(f)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricMeans { cc: mean(|f| f.cc), nss: mean(|f| f.nss), auc_j: mean(|f| f.auc_j), sauc: mean(|f| f.sauc), sim: mean(|f| f.sim) }
    }

    /// Column order CC, NSS, AUC-J, sAUC, SIM.
    pub fn columns(&self) -> [Option<f64>; 5] {
        [self.cc, self.nss, self.auc_j, self.sauc, self.sim]
    }

    pub fn table_line(&self) -> String {
        let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "CC {}  NSS {}  AUC-J {}  sAUC {}  SIM {}",
            cell(self.cc),
            cell(self.nss),
            cell(self.auc_j),
            cell(self.sauc),
            cell(self.sim)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSummary {
    pub video_id: String,
    pub frames: usize,
    pub means: MetricMeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub sauc_seed: u64,
    pub sauc_splits: usize,
    /// Grid at which predictions and ground truth were compared.
    pub resolution: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub frames: Vec<FrameEval>,
    pub videos: Vec<VideoSummary>,
    pub overall: MetricMeans,
}

impl MetricsReport {
    pub fn from_frames(frames: Vec<FrameEval>, meta: ReportMeta) -> Self {
        let mut by_video: BTreeMap<&str, Vec<&FrameEval>> = BTreeMap::new();
        for f in &frames {
            by_video.entry(&f.video_id).or_default().push(f);
        }
        let videos = by_video
            .into_iter()
            .map(|(id, fs)| VideoSummary { video_id: id.to_string(), frames: fs.len(), means: MetricMeans::of(&fs) })
            .collect();
        let overall = MetricMeans::of(&frames.iter().collect::<Vec<_>>());
        MetricsReport { meta, frames, videos, overall }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format { what: "metrics report", message: e.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EvalOptions {
    pub sauc_splits: usize,
    pub sauc_seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { sauc_splits: DEFAULT_SAUC_SPLITS, sauc_seed: 0 }
    }
}

/// Ground truth plus shuffle-pool negatives for one frame.
#[derive(Clone, Debug)]
pub struct FrameTruth<S> {
    pub gt: GroundTruth<S>,
    pub pool: Vec<usize>,
}

pub type FrameKey = (String, usize);

/// All five metrics for one frame.
pub fn evaluate_frame<S: Scalar>(key: &FrameKey, pred: &[S], truth: &FrameTruth<S>, opts: &EvalOptions) -> Result<FrameEval> {
    let gt = &truth.gt;
    if pred.len() != gt.continuous.len() {
        return Err(Error::shape(format!("prediction for {}:{}", key.0, key.1), &[gt.height, gt.width], &[pred.len()]));
    }
    let mut rng = frame_rng(opts.sauc_seed, &key.0, key.1);
    Ok(FrameEval {
        video_id: key.0.clone(),
        frame_index: key.1,
        cc: cc(pred, &gt.continuous),
        nss: nss(pred, &gt.binary),
        auc_j: auc_judd(pred, &gt.binary),
        sauc: sauc(pred, &gt.binary, &truth.pool, opts.sauc_splits, &mut rng),
        sim: sim(pred, &gt.continuous),
    })
}

/// Evaluate keyed predictions against keyed ground truth. Both maps must
/// hold exactly the same keys.
pub fn evaluate_dataset<S: Scalar>(
    predictions: &BTreeMap<FrameKey, Vec<S>>,
    truths: &BTreeMap<FrameKey, FrameTruth<S>>,
    opts: &EvalOptions,
) -> Result<MetricsReport> {
    let mut missing: Vec<String> = truths.keys().filter(|k| !predictions.contains_key(*k)).map(|k| format!("prediction {}:{}", k.0, k.1)).collect();
    missing.extend(predictions.keys().filter(|k| !truths.contains_key(*k)).map(|k| format!("ground truth {}:{}", k.0, k.1)));
    if !missing.is_empty() {
        return Err(Error::KeyMismatch { missing });
    }
    let resolution = truths.values().next().map_or([0, 0], |t| [t.gt.height, t.gt.width]);
    let frames = truths.iter().map(|(k, t)| evaluate_frame(k, &predictions[k], t, opts)).collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::from_frames(frames, ReportMeta { sauc_seed: opts.sauc_seed, sauc_splits: opts.sauc_splits, resolution }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ground_truth::ground_truth_from_cells;
    use rand::Rng;

    #[test]
    fn cc_extremes_and_constant() {
        let y = [0.1, 0.5, 0.9, 0.3];
        assert!((cc(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        let inv: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        assert!((cc(&inv, &y).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cc(&[2.0; 4], &y), None);
    }

    #[test]
    fn nss_of_one_hot() {
        let mut p = [0.0; 64];
        p[10] = 1.0;
        let mut yb = [false; 64];
        yb[10] = true;
        assert!((nss(&p, &yb).unwrap() - 63f64.sqrt()).abs() < 1e-12);
        assert_eq!(nss(&p, &[false; 64]), None);
    }

    #[test]
    fn nss_of_random_maps_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for _ in 0..1000 {
            let p: Vec<f64> = (0..64).map(|_| rng.random()).collect();
            let yb: Vec<bool> = (0..64).map(|i| i == rng.random_range(0..64)).collect();
            if let Some(v) = nss(&p, &yb) {
                total += v;
            }
        }
        assert!((total / 1000.0).abs() < 0.1);
    }

    #[test]
    fn auc_constant_and_separable() {
        let mut yb = [false; 256];
        for i in [3, 100, 200] {
            yb[i] = true;
        }
        assert_eq!(auc_judd(&[0.7; 256], &yb), Some(0.5));
        let p: Vec<f64> = (0..256).map(|i| if yb[i] { 1.0 } else { 0.0 }).collect();
        assert!(auc_judd(&p, &yb).unwrap() > 0.99);
        assert_eq!(auc_judd(&p, &[false; 256]), None);
    }

    #[test]
    fn sauc_ties_and_separation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let yb = [true, false, false, false];
        assert_eq!(sauc(&[0.5; 4], &yb, &[1, 2, 3], 10, &mut rng), Some(0.5));
        assert_eq!(sauc(&[0.9, 0.1, 0.2, 0.3], &yb, &[1, 2, 3], 10, &mut rng), Some(1.0));
        assert_eq!(sauc(&[0.9, 0.1, 0.2, 0.3], &yb, &[], 10, &mut rng), None);
    }

    #[test]
    fn sim_identity_and_disjoint() {
        let y = [0.0, 0.2, 0.8, 0.0];
        assert!((sim(&y, &y).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sim(&[1.0, 0.0, 0.0, 0.0], &y), Some(0.0));
        assert_eq!(sim(&[0.0; 4], &y), None);
    }

    #[test]
    fn shuffle_pool_is_a_union_excluding_the_frame() {
        let frames: BTreeMap<usize, BTreeSet<usize>> = [(0, [5].into()), (1, [7].into()), (2, [9].into())].into();
        let pool = ShufflePool::from_cells("v", frames);
        assert_eq!(pool.for_frame(0), vec![7, 9]);
        let shared: BTreeMap<usize, BTreeSet<usize>> = [(0, [4].into()), (1, [4].into()), (2, [4].into())].into();
        assert_eq!(ShufflePool::from_cells("v", shared).for_frame(1), vec![4]);
        let single: BTreeMap<usize, BTreeSet<usize>> = [(0, [4].into())].into();
        assert!(ShufflePool::from_cells("v", single).for_frame(0).is_empty());
    }

    fn truth(cells: &[(usize, usize)], pool: Vec<usize>) -> FrameTruth<f64> {
        FrameTruth { gt: ground_truth_from_cells(cells, (8, 8), 1.5).unwrap(), pool }
    }

    #[test]
    fn dataset_aggregation_and_key_checks() {
        let mut preds = BTreeMap::new();
        let mut truths = BTreeMap::new();
        let t0 = truth(&[(2, 2)], vec![40, 50]);
        let t1 = truth(&[(5, 6), (1, 1)], vec![18]);
        preds.insert(("a".to_string(), 0), t0.gt.continuous.clone());
        preds.insert(("a".to_string(), 1), t1.gt.continuous.iter().map(|v| 1.0 - v).collect());
        truths.insert(("a".to_string(), 0), t0);
        truths.insert(("a".to_string(), 1), t1);
        let opts = EvalOptions::default();
        let r = evaluate_dataset(&preds, &truths, &opts).unwrap();
        assert!((r.frames[0].cc.unwrap() - 1.0).abs() < 1e-12);
        assert!((r.frames[0].sim.unwrap() - 1.0).abs() < 1e-12);
        assert!(r.frames[0].auc_j.unwrap() > 0.99);
        let want = (r.frames[0].nss.unwrap() + r.frames[1].nss.unwrap()) / 2.0;
        assert!((r.overall.nss.unwrap() - want).abs() < 1e-15);
        assert_eq!(r.videos[0].means, r.overall);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(evaluate_dataset(&preds, &truths, &opts).unwrap(), r);

        preds.remove(&("a".to_string(), 1));
        match evaluate_dataset(&preds, &truths, &opts) {
            Err(Error::KeyMismatch { missing }) => assert_eq!(missing, vec!["prediction a:1".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn absent_metrics_are_skipped_in_means() {
        let a = FrameEval { video_id: "v".into(), frame_index: 0, cc: Some(0.5), nss: None, auc_j: Some(0.7), sauc: None, sim: Some(0.2) };
        let b = FrameEval { frame_index: 1, cc: Some(0.1), nss: Some(2.0), ..a.clone() };
        let m = MetricMeans::of(&[&a, &b]);
        assert!((m.cc.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(m.nss, Some(2.0));
        assert_eq!(m.sauc, None);
    }
}
