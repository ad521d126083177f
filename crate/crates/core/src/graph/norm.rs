use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Statistics source for batch normalization.
pub enum NormStats<'a, S> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) mean and variance.
    Fixed { mean: &'a [S], var: &'a [S] },
}

/// Per-channel batch statistics reported in [`NormStats::Batch`] mode:
/// mean and unbiased variance.
pub struct BatchMoments<S> {
    pub mean: Vec<S>,
    pub var: Vec<S>,
}

struct BatchNormOp<S> {
    mean: Vec<S>,
    inv_std: Vec<S>,
    batch_stats: bool,
}

impl<S: Scalar> Backward<S> for BatchNormOp<S> {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let (x, gamma) = (inputs[0], inputs[1]);
        let (n, c) = (x.dim(0), x.dim(1));
        let inner = x.numel() / (n * c);
        let count = S::of((n * inner) as f64);
        let mut sum_dy = vec![S::zero(); c];
        let mut sum_dy_xhat = vec![S::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                let xs = &x.data()[off..off + inner];
                let gs = &grad.data()[off..off + inner];
                let (m, is) = (self.mean[ch], self.inv_std[ch]);
                let mut a = S::zero();
                let mut b = S::zero();
                for (&xv, &gv) in xs.iter().zip(gs) {
                    a += gv;
                    b += gv * (xv - m) * is;
                }
                sum_dy[ch] += a;
                sum_dy_xhat[ch] += b;
            }
        }
        let gx = needs[0].then(|| {
            let mut gx = Tensor::zeros(x.shape());
            for s in 0..n {
                for ch in 0..c {
                    let off = (s * c + ch) * inner;
                    let (m, is, gm) = (self.mean[ch], self.inv_std[ch], gamma.data()[ch]);
                    let xs = &x.data()[off..off + inner];
                    let gs = &grad.data()[off..off + inner];
                    let dst = &mut gx.data_mut()[off..off + inner];
                    if self.batch_stats {
                        let k = gm * is / count;
                        let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                        for ((d, &xv), &gv) in dst.iter_mut().zip(xs).zip(gs) {
                            *d = k * (count * gv - sd - (xv - m) * is * sdx);
                        }
                    } else {
                        for (d, &gv) in dst.iter_mut().zip(gs) {
                            *d = gm * is * gv;
                        }
                    }
                }
            }
            gx
        });
        let gg = needs[1].then(|| Tensor::from_vec(&[c], sum_dy_xhat.clone()).expect("channel count"));
        let gb = needs[2].then(|| Tensor::from_vec(&[c], sum_dy.clone()).expect("channel count"));
        vec![gx, gg, gb]
    }
}

impl<S: Scalar> Graph<S> {
    /// Per-channel normalization of `[N, C, ...]` followed by the affine
    /// `gamma * x̂ + beta`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: NormStats<'_, S>) -> Result<(Var, Option<BatchMoments<S>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("batch_norm (rank)", &[4], &[shape.len()]));
        }
        let (n, c) = (shape[0], shape[1]);
        for (v, what) in [(gamma, "batch_norm gamma"), (beta, "batch_norm beta")] {
            if self.shape(v) != [c] {
                return Err(Error::shape(what, &[c], self.shape(v)));
            }
        }
        let inner = shape[2..].iter().product::<usize>();
        let count = n * inner;
        let eps = S::of(BN_EPS);
        let xv = self.value(x);
        let (mean, var, moments) = match stats {
            NormStats::Batch => {
                let mut mean = vec![S::zero(); c];
                let mut var = vec![S::zero(); c];
                for ch in 0..c {
                    let mut acc = S::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * inner;
                        acc += xv.data()[off..off + inner].iter().copied().sum::<S>();
                    }
                    let m = acc / S::of(count as f64);
                    let mut sq = S::zero();
                    for s in 0..n {
                        let off = (s * c + ch) * inner;
                        sq += xv.data()[off..off + inner].iter().map(|&v| (v - m) * (v - m)).sum::<S>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / S::of(count as f64);
                }
                let unbiased = if count > 1 {
                    var.iter().map(|&v| v * S::of(count as f64 / (count - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                let moments = BatchMoments { mean: mean.clone(), var: unbiased };
                (mean, var, Some(moments))
            }
            NormStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &[c], &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), None)
            }
        };
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(&shape);
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                let scale = gv[ch] * inv_std[ch];
                let shift = bv[ch] - mean[ch] * scale;
                for (o, &v) in out.data_mut()[off..off + inner].iter_mut().zip(&xv.data()[off..off + inner]) {
                    *o = v * scale + shift;
                }
            }
        }
        let batch_stats = moments.is_some();
        let op = BatchNormOp { mean, inv_std, batch_stats };
        Ok((self.push(out, vec![x, gamma, beta], Box::new(op)), moments))
    }
}
