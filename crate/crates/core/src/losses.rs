//! Training objective: cross-entropy, correlation and scanpath terms per map,
//! their weighted sum, and the epoch-decayed deep-supervision total.
//!
//! Every term is available as a plain function of pixel slices (value, and
//! value plus gradient) and, through [`total_loss`], as a node on the tape.

use log::warn;

use crate::data::GroundTruth;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probability maps are clamped to `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;
/// Standard deviations below this make the CC/NSS term contribute zero.
pub const STD_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub cc: f64,
    pub nss: f64,
}

impl LossWeights {
    pub fn new(ce: f64, cc: f64, nss: f64) -> Result<Self> {
        for (name, w) in [("w_ce", ce), ("w_cc", cc), ("w_nss", nss)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::config(name, format!("loss weight must be a nonnegative number, got {w}")));
            }
        }
        if ce == 0.0 && cc == 0.0 && nss == 0.0 {
            return Err(Error::config("loss weights", "at least one weight must be positive"));
        }
        Ok(LossWeights { ce, cc, nss })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { ce: 0.1, cc: 2.0, nss: 1.0 }
    }
}

/// Training progress driving the deep-supervision decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpochClock {
    pub current_epoch: usize,
    pub total_epochs: usize,
}

impl EpochClock {
    pub fn new(current_epoch: usize, total_epochs: usize) -> Result<Self> {
        if total_epochs == 0 || current_epoch > total_epochs {
            return Err(Error::config("epoch clock", format!("epoch {current_epoch} of {total_epochs}")));
        }
        Ok(EpochClock { current_epoch, total_epochs })
    }

    /// `ε = current / total`, in `[0, 1]`.
    pub fn epsilon(&self) -> f64 {
        self.current_epoch as f64 / self.total_epochs as f64
    }

    /// Multiplier `1 - ε` on the intermediate-map terms.
    pub fn deep_supervision_weight(&self) -> f64 {
        1.0 - self.epsilon()
    }
}

fn check_pair<S: Scalar>(what: &str, m: &[S], y: &[S]) -> Result<()> {
    if m.len() != y.len() || m.is_empty() {
        return Err(Error::shape(what, &[y.len()], &[m.len()]));
    }
    if !m.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::Input(format!("{what}: non-finite input")));
    }
    Ok(())
}

/// Mean binary cross-entropy between a probability map and `Y_c`.
pub fn ce_loss<S: Scalar>(m: &[S], yc: &[S]) -> Result<S> {
    ce_loss_grad(m, yc).map(|(v, _)| v)
}

pub fn ce_loss_grad<S: Scalar>(m: &[S], yc: &[S]) -> Result<(S, Vec<S>)> {
    check_pair("ce_loss", m, yc)?;
    let (lo, hi) = (S::of(PROB_EPS), S::of(1.0 - PROB_EPS));
    let n = S::of(m.len() as f64);
    let mut total = S::zero();
    let mut grad = Vec::with_capacity(m.len());
    for (&p, &y) in m.iter().zip(yc) {
        let q = p.max(lo).min(hi);
        total -= y * q.ln() + (S::one() - y) * (S::one() - q).ln();
        let inside = p > lo && p < hi;
        grad.push(if inside { -(y / q - (S::one() - y) / (S::one() - q)) / n } else { S::zero() });
    }
    Ok((total / n, grad))
}

struct Centered<S> {
    a: Vec<S>,
    sum_sq: S,
    std: S,
}

fn center<S: Scalar>(m: &[S]) -> Centered<S> {
    let n = S::of(m.len() as f64);
    let mean = m.iter().copied().sum::<S>() / n;
    let a: Vec<S> = m.iter().map(|&v| v - mean).collect();
    let sum_sq = a.iter().map(|&v| v * v).sum::<S>();
    Centered { std: (sum_sq / n).sqrt(), a, sum_sq }
}

/// Negative Pearson correlation between `M` and `Y_c`.
pub fn cc_loss<S: Scalar>(m: &[S], yc: &[S]) -> Result<S> {
    cc_loss_grad(m, yc).map(|(v, _)| v)
}

pub fn cc_loss_grad<S: Scalar>(m: &[S], yc: &[S]) -> Result<(S, Vec<S>)> {
    check_pair("cc_loss", m, yc)?;
    let cm = center(m);
    let cy = center(yc);
    if cm.std < S::of(STD_EPS) || cy.std < S::of(STD_EPS) {
        warn!("cc_loss: constant map (std below {STD_EPS}); term contributes 0");
        return Ok((S::zero(), vec![S::zero(); m.len()]));
    }
    let sab: S = cm.a.iter().zip(&cy.a).map(|(&a, &b)| a * b).sum();
    let denom = (cm.sum_sq * cy.sum_sq).sqrt();
    let r = sab / denom;
    let grad = cm.a.iter().zip(&cy.a).map(|(&a, &b)| -(b / denom - r * a / cm.sum_sq)).collect();
    Ok((-r, grad))
}

/// Negative mean of the standardized map over the `n_b` fixated cells.
pub fn nss_loss<S: Scalar>(m: &[S], yb: &[bool], n_b: usize) -> Result<S> {
    nss_loss_grad(m, yb, n_b).map(|(v, _)| v)
}

pub fn nss_loss_grad<S: Scalar>(m: &[S], yb: &[bool], n_b: usize) -> Result<(S, Vec<S>)> {
    if m.len() != yb.len() || m.is_empty() {
        return Err(Error::shape("nss_loss", &[yb.len()], &[m.len()]));
    }
    if n_b == 0 {
        return Err(Error::Input("nss_loss: no fixations (N_b = 0)".into()));
    }
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Input("nss_loss: non-finite input".into()));
    }
    let c = center(m);
    if c.std < S::of(STD_EPS) {
        warn!("nss_loss: constant map (std below {STD_EPS}); term contributes 0");
        return Ok((S::zero(), vec![S::zero(); m.len()]));
    }
    let n = S::of(m.len() as f64);
    let nb = S::of(n_b as f64);
    let sum_fix: S = c.a.iter().zip(yb).filter(|(_, &y)| y).map(|(&a, _)| a).sum();
    let value = -(sum_fix / c.std) / nb;
    let fix_fraction = S::of(yb.iter().filter(|&&y| y).count() as f64) / n;
    let std3 = c.std * c.std * c.std;
    let grad = c
        .a
        .iter()
        .zip(yb)
        .map(|(&a, &y)| {
            let ind = if y { S::one() } else { S::zero() };
            -((ind - fix_fraction) / c.std - sum_fix * a / (n * std3)) / nb
        })
        .collect();
    Ok((value, grad))
}

/// Component values of one weighted map loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub cc: f64,
    pub nss: f64,
    pub total: f64,
}

/// `w_ce·CE + w_cc·CC + w_nss·NSS` of one probability map against its ground truth.
pub fn composite_loss<S: Scalar>(m: &[S], gt: &GroundTruth<S>, w: &LossWeights) -> Result<LossTerms> {
    composite_loss_grad(m, gt, w).map(|(t, _)| t)
}

pub fn composite_loss_grad<S: Scalar>(m: &[S], gt: &GroundTruth<S>, w: &LossWeights) -> Result<(LossTerms, Vec<S>)> {
    let (ce, gce) = ce_loss_grad(m, &gt.continuous)?;
    let (cc, gcc) = cc_loss_grad(m, &gt.continuous)?;
    let (nss, gnss) = nss_loss_grad(m, &gt.binary, gt.fixation_count)?;
    let (w1, w2, w3) = (S::of(w.ce), S::of(w.cc), S::of(w.nss));
    let grad = gce.iter().zip(&gcc).zip(&gnss).map(|((&a, &b), &c)| w1 * a + w2 * b + w3 * c).collect();
    let total = w1 * ce + w2 * cc + w3 * nss;
    Ok((LossTerms { ce: ce.as_f64(), cc: cc.as_f64(), nss: nss.as_f64(), total: total.as_f64() }, grad))
}

/// Single-sample total objective on plain maps: final map plus the
/// `(1 - ε)`-weighted intermediate maps of each present stream.
pub fn total_loss_value<S: Scalar>(
    saliency: &[S],
    rgb_maps: &[&[S]],
    depth_maps: &[&[S]],
    gt: &GroundTruth<S>,
    clock: EpochClock,
    w: &LossWeights,
) -> Result<f64> {
    let mut total = composite_loss(saliency, gt, w)?.total;
    let decay = clock.deep_supervision_weight();
    for m in rgb_maps.iter().chain(depth_maps) {
        total += decay * composite_loss(m, gt, w)?.total;
    }
    Ok(total)
}

/// How per-sample totals are reduced to the scalar that is differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    /// Mean over samples that carry fixations.
    Mean,
    /// Sum over samples with fixations, times a fixed factor (used for
    /// gradient accumulation over micro-batches).
    ScaledSum(f64),
}

/// Scalar loss node plus logged components.
#[derive(Clone, Debug)]
pub struct TotalLoss {
    /// Scalar node to differentiate; `None` when no sample had fixations.
    pub loss: Option<Var>,
    /// Mean final-map components over valid samples.
    pub saliency_terms: LossTerms,
    /// Mean per-sample total objective over valid samples.
    pub mean_total: f64,
    pub deep_sup_weight: f64,
    pub valid_samples: usize,
}

fn map_terms<S: Scalar>(g: &mut Graph<S>, map: Var, gts: &[&GroundTruth<S>], valid: &[bool], w: &LossWeights) -> Result<(Var, Vec<LossTerms>)> {
    let shape = g.shape(map).to_vec();
    if shape.len() != 4 || shape[0] != gts.len() || shape[1] != 1 {
        return Err(Error::shape("loss map", &[gts.len(), 1, 0, 0], &shape));
    }
    let plane = shape[2] * shape[3];
    let mut jac = Tensor::zeros(&shape);
    let mut values = Vec::with_capacity(gts.len());
    let mut terms = Vec::with_capacity(gts.len());
    for (s, gt) in gts.iter().enumerate() {
        if gt.continuous.len() != plane {
            return Err(Error::shape("ground truth vs map", &[shape[2], shape[3]], &[gt.height, gt.width]));
        }
        if !valid[s] {
            values.push(S::zero());
            terms.push(LossTerms::default());
            continue;
        }
        let (t, grad) = composite_loss_grad(g.value(map).outer(s), gt, w)?;
        jac.outer_mut(s).copy_from_slice(&grad);
        values.push(S::of(t.total));
        terms.push(t);
    }
    Ok((g.per_sample(map, values, jac)?, terms))
}

/// Deep-supervision objective over a batch of `[N, 1, H, W]` probability maps.
///
/// Samples without fixations are excluded; absent streams pass empty slices.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    saliency: Var,
    rgb_maps: &[Var],
    depth_maps: &[Var],
    gts: &[&GroundTruth<S>],
    clock: EpochClock,
    w: &LossWeights,
    reduction: Reduction,
) -> Result<TotalLoss> {
    let valid: Vec<bool> = gts.iter().map(|gt| gt.fixation_count > 0).collect();
    let n_valid = valid.iter().filter(|&&v| v).count();
    let decay = clock.deep_supervision_weight();
    if n_valid == 0 {
        return Ok(TotalLoss { loss: None, saliency_terms: LossTerms::default(), mean_total: 0.0, deep_sup_weight: decay, valid_samples: 0 });
    }
    let (sal, sal_terms) = map_terms(g, saliency, gts, &valid, w)?;
    let mut combination = vec![(sal, S::one())];
    let mut per_sample: Vec<f64> = sal_terms.iter().map(|t| t.total).collect();
    for &m in rgb_maps.iter().chain(depth_maps) {
        let (v, terms) = map_terms(g, m, gts, &valid, w)?;
        combination.push((v, S::of(decay)));
        for (acc, t) in per_sample.iter_mut().zip(&terms) {
            *acc += decay * t.total;
        }
    }
    let per_sample_var = g.weighted_sum(&combination)?;
    let factor = match reduction {
        Reduction::Mean => 1.0 / n_valid as f64,
        Reduction::ScaledSum(f) => f,
    };
    let weights = valid.iter().map(|&v| if v { S::of(factor) } else { S::zero() }).collect();
    let loss = g.dot_const(per_sample_var, weights)?;

    let inv = 1.0 / n_valid as f64;
    let mut mean = LossTerms::default();
    for (t, _) in sal_terms.iter().zip(&valid).filter(|(_, &v)| v) {
        mean.ce += t.ce * inv;
        mean.cc += t.cc * inv;
        mean.nss += t.nss * inv;
        mean.total += t.total * inv;
    }
    let mean_total = per_sample.iter().zip(&valid).filter(|(_, &v)| v).map(|(t, _)| t * inv).sum();
    Ok(TotalLoss { loss: Some(loss), saliency_terms: mean, mean_total, deep_sup_weight: decay, valid_samples: n_valid })
}
