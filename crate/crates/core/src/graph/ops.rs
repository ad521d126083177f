use super::{need_shape, Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

struct AddOp;

impl<S: Scalar> Backward<S> for AddOp {
    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        needs.iter().map(|&n| n.then(|| grad.clone())).collect()
    }
}

struct WeightedSumOp<S> {
    weights: Vec<S>,
}

impl<S: Scalar> Backward<S> for WeightedSumOp<S> {
    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        self.weights
            .iter()
            .zip(needs)
            .map(|(&w, &n)| n.then(|| grad.map(|g| g * w)))
            .collect()
    }
}

struct ReluOp;

impl<S: Scalar> Backward<S> for ReluOp {
    fn backward(&self, _: &[&Tensor<S>], out: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        vec![Some(out.zip_map(grad, |y, g| if y > S::zero() { g } else { S::zero() }))]
    }
}

struct SigmoidOp;

impl<S: Scalar> Backward<S> for SigmoidOp {
    fn backward(&self, _: &[&Tensor<S>], out: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        vec![Some(out.zip_map(grad, |y, g| g * y * (S::one() - y)))]
    }
}

/// Concatenation along axis 1 of `[N, C_i, ...]` tensors.
struct ConcatOp {
    channels: Vec<usize>,
    inner: usize,
}

impl<S: Scalar> Backward<S> for ConcatOp {
    fn backward(&self, _: &[&Tensor<S>], out: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let n = out.dim(0);
        let total: usize = self.channels.iter().sum();
        let mut offset = 0;
        let mut res = Vec::with_capacity(self.channels.len());
        for (&c, &need) in self.channels.iter().zip(needs) {
            if need {
                let mut shape = out.shape().to_vec();
                shape[1] = c;
                let mut g = Tensor::zeros(&shape);
                let block = c * self.inner;
                for s in 0..n {
                    let src = &grad.data()[(s * total + offset) * self.inner..][..block];
                    g.data_mut()[s * block..(s + 1) * block].copy_from_slice(src);
                }
                res.push(Some(g));
            } else {
                res.push(None);
            }
            offset += c;
        }
        res
    }
}

struct TemporalMeanOp {
    frames: usize,
}

impl<S: Scalar> Backward<S> for TemporalMeanOp {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let plane = x.dim(3) * x.dim(4);
        let inv = S::one() / S::of(self.frames as f64);
        let mut g = Tensor::zeros(x.shape());
        let groups = x.dim(0) * x.dim(1);
        for nc in 0..groups {
            let src = &grad.data()[nc * plane..(nc + 1) * plane];
            for t in 0..self.frames {
                let dst = &mut g.data_mut()[(nc * self.frames + t) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s * inv;
                }
            }
        }
        vec![Some(g)]
    }
}

struct SoftmaxOp {
    plane: usize,
}

impl<S: Scalar> Backward<S> for SoftmaxOp {
    fn backward(&self, _: &[&Tensor<S>], out: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let mut g = Tensor::zeros(out.shape());
        for ((y, dy), dx) in out
            .data()
            .chunks(self.plane)
            .zip(grad.data().chunks(self.plane))
            .zip(g.data_mut().chunks_mut(self.plane))
        {
            let dot: S = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
            for ((d, &yi), &gi) in dx.iter_mut().zip(y).zip(dy) {
                *d = yi * (gi - dot);
            }
        }
        vec![Some(g)]
    }
}

/// `(1 + m) * x` with `m: [N, 1, H, W]` broadcast over channels and time.
struct ModulateOp;

impl<S: Scalar> Backward<S> for ModulateOp {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let (x, m) = (inputs[0], inputs[1]);
        let n = x.dim(0);
        let plane = m.dim(2) * m.dim(3);
        let per_sample = x.numel() / n;
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gm = needs[1].then(|| Tensor::zeros(m.shape()));
        for s in 0..n {
            let ms = m.outer(s);
            let xs = x.outer(s);
            let gs = grad.outer(s);
            if let Some(gx) = gx.as_mut() {
                let dst = gx.outer_mut(s);
                for i in 0..per_sample {
                    dst[i] = gs[i] * (S::one() + ms[i % plane]);
                }
            }
            if let Some(gm) = gm.as_mut() {
                let dst = gm.outer_mut(s);
                for i in 0..per_sample {
                    dst[i % plane] += gs[i] * xs[i];
                }
            }
        }
        vec![gx, gm]
    }
}

/// Interpolation taps for one axis: `(lo, hi, weight_hi)` per output index.
#[derive(Clone)]
struct Taps(Vec<(usize, usize, f64)>);

impl Taps {
    /// Half-pixel-centre convention (corners not aligned).
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        Taps(
            (0..output)
                .map(|o| {
                    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                    let lo = (src.floor() as usize).min(input - 1);
                    let hi = if lo + 1 < input { lo + 1 } else { lo };
                    (lo, hi, src - lo as f64)
                })
                .collect(),
        )
    }
}

struct UpsampleOp {
    rows: Taps,
    cols: Taps,
}

impl<S: Scalar> Backward<S> for UpsampleOp {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let (h, w) = (x.dim(2), x.dim(3));
        let (oh, ow) = (self.rows.0.len(), self.cols.0.len());
        let mut g = Tensor::zeros(x.shape());
        let planes = x.dim(0) * x.dim(1);
        for p in 0..planes {
            let src = &grad.data()[p * oh * ow..(p + 1) * oh * ow];
            let dst = &mut g.data_mut()[p * h * w..(p + 1) * h * w];
            for (r, &(r0, r1, fr)) in self.rows.0.iter().enumerate() {
                let (fr1, fr0) = (S::of(fr), S::of(1.0 - fr));
                for (c, &(c0, c1, fc)) in self.cols.0.iter().enumerate() {
                    let (fc1, fc0) = (S::of(fc), S::of(1.0 - fc));
                    let gv = src[r * ow + c];
                    dst[r0 * w + c0] += gv * fr0 * fc0;
                    dst[r0 * w + c1] += gv * fr0 * fc1;
                    dst[r1 * w + c0] += gv * fr1 * fc0;
                    dst[r1 * w + c1] += gv * fr1 * fc1;
                }
            }
        }
        vec![Some(g)]
    }
}

struct MaxPoolOp {
    argmax: Vec<u32>,
}

impl<S: Scalar> Backward<S> for MaxPoolOp {
    fn backward(&self, inputs: &[&Tensor<S>], out: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let x = inputs[0];
        let n = x.dim(0) * x.dim(1);
        let in_block = x.numel() / n;
        let out_block = out.numel() / n;
        let mut g = Tensor::zeros(x.shape());
        for b in 0..n {
            let dst = &mut g.data_mut()[b * in_block..(b + 1) * in_block];
            for o in 0..out_block {
                let k = b * out_block + o;
                dst[self.argmax[k] as usize] += grad.data()[k];
            }
        }
        vec![Some(g)]
    }
}

/// Per-sample scalar function of a `[N, ...]` input whose local Jacobian
/// was computed together with the value.
struct PerSampleOp<S> {
    jacobian: Tensor<S>,
}

impl<S: Scalar> Backward<S> for PerSampleOp<S> {
    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let mut g = self.jacobian.clone();
        for s in 0..g.dim(0) {
            let w = grad.data()[s];
            for v in g.outer_mut(s) {
                *v *= w;
            }
        }
        vec![Some(g)]
    }
}

struct DotConstOp<S> {
    weights: Vec<S>,
}

impl<S: Scalar> Backward<S> for DotConstOp<S> {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let g0 = grad.data()[0];
        let data = self.weights.iter().map(|&w| w * g0).collect();
        vec![Some(Tensor::from_vec(inputs[0].shape(), data).expect("weights match input"))]
    }
}

impl<S: Scalar> Graph<S> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        need_shape("add", self.shape(a), self.shape(b))?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(out, vec![a, b], Box::new(AddOp)))
    }

    /// `Σ w_i · v_i` over equal-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, S)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::Input("empty weighted sum".into()))?;
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, w) in terms {
            need_shape("weighted_sum", out.shape(), self.shape(v))?;
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += w * x;
            }
        }
        let parents = terms.iter().map(|t| t.0).collect();
        let weights = terms.iter().map(|t| t.1).collect();
        Ok(self.push(out, parents, Box::new(WeightedSumOp { weights })))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        self.weighted_sum(&[(a, factor)]).expect("single term")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > S::zero() { x } else { S::zero() });
        self.push(out, vec![a], Box::new(ReluOp))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(logistic);
        self.push(out, vec![a], Box::new(SigmoidOp))
    }

    /// Concatenate `[N, C_i, ...]` inputs along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::Input("empty concat".into()))?).to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(Error::shape("concat_channels", &first, s));
            }
            channels.push(s[1]);
        }
        let total: usize = channels.iter().sum();
        let mut shape = first.clone();
        shape[1] = total;
        let mut data = Vec::with_capacity(n * total * inner);
        for s in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).outer(s));
            }
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, parts.to_vec(), Box::new(ConcatOp { channels, inner })))
    }

    /// Mean over the time axis: `[N, C, T, H, W] -> [N, C, H, W]`.
    pub fn temporal_mean(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("temporal_mean (rank)", &[5], &[s.len()]));
        }
        let (frames, plane) = (s[2], s[3] * s[4]);
        let inv = S::one() / S::of(frames as f64);
        let mut out = Tensor::zeros(&[s[0], s[1], s[3], s[4]]);
        let xv = self.value(x).data();
        for nc in 0..s[0] * s[1] {
            let dst = &mut out.data_mut()[nc * plane..(nc + 1) * plane];
            for t in 0..frames {
                let src = &xv[(nc * frames + t) * plane..][..plane];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
            for d in dst {
                *d *= inv;
            }
        }
        Ok(self.push(out, vec![x], Box::new(TemporalMeanOp { frames })))
    }

    /// Softmax over all spatial positions of each `[H, W]` plane.
    pub fn spatial_softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("spatial_softmax (rank)", &[4], &[s.len()]));
        }
        let plane = s[2] * s[3];
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(plane) {
            let max = chunk.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in chunk.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in chunk.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push(out, vec![x], Box::new(SoftmaxOp { plane })))
    }

    /// Residual attention refinement `(1 + m) ⊙ x`.
    pub fn modulate(&mut self, x: Var, m: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ms = self.shape(m).to_vec();
        if xs.len() != 5 || ms != [xs[0], 1, xs[3], xs[4]] {
            return Err(Error::shape("modulate (attention map)", &[xs[0], 1, xs[3], xs[4]], &ms));
        }
        let plane = ms[2] * ms[3];
        let mut out = self.value(x).clone();
        let mv = self.value(m);
        for s in 0..xs[0] {
            let ma = mv.outer(s);
            for (i, v) in out.outer_mut(s).iter_mut().enumerate() {
                *v *= S::one() + ma[i % plane];
            }
        }
        Ok(self.push(out, vec![x, m], Box::new(ModulateOp)))
    }

    /// Bilinear resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn upsample_bilinear(&mut self, x: Var, size: (usize, usize)) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("upsample_bilinear (rank)", &[4], &[s.len()]));
        }
        if (s[2], s[3]) == size {
            return Ok(x);
        }
        let (oh, ow) = size;
        let rows = Taps::new(s[2], oh);
        let cols = Taps::new(s[3], ow);
        let mut out = Tensor::zeros(&[s[0], s[1], oh, ow]);
        let (h, w) = (s[2], s[3]);
        let xv = self.value(x).data();
        for p in 0..s[0] * s[1] {
            let src = &xv[p * h * w..(p + 1) * h * w];
            let dst = &mut out.data_mut()[p * oh * ow..(p + 1) * oh * ow];
            for (r, &(r0, r1, fr)) in rows.0.iter().enumerate() {
                let (fr1, fr0) = (S::of(fr), S::of(1.0 - fr));
                for (c, &(c0, c1, fc)) in cols.0.iter().enumerate() {
                    let (fc1, fc0) = (S::of(fc), S::of(1.0 - fc));
                    dst[r * ow + c] = fr0 * (fc0 * src[r0 * w + c0] + fc1 * src[r0 * w + c1])
                        + fr1 * (fc0 * src[r1 * w + c0] + fc1 * src[r1 * w + c1]);
                }
            }
        }
        Ok(self.push(out, vec![x], Box::new(UpsampleOp { rows, cols })))
    }

    /// 3-D max pooling over `[N, C, D, H, W]`; padded cells never win.
    pub fn max_pool3d(&mut self, x: Var, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(Error::shape("max_pool3d (rank)", &[5], &[s.len()]));
        }
        let out_len = |n: usize| (n + 2 * padding - kernel) / stride + 1;
        let (d, h, w) = (s[2], s[3], s[4]);
        let (od, oh, ow) = (out_len(d), out_len(h), out_len(w));
        let mut out = Tensor::zeros(&[s[0], s[1], od, oh, ow]);
        let mut argmax = vec![0u32; out.numel()];
        let xv = self.value(x).data();
        let in_block = d * h * w;
        let out_block = od * oh * ow;
        let range = |o: usize, n: usize| {
            let start = (o * stride) as isize - padding as isize;
            let lo = start.max(0) as usize;
            let hi = ((start + kernel as isize).min(n as isize)) as usize;
            lo..hi
        };
        for b in 0..s[0] * s[1] {
            let src = &xv[b * in_block..(b + 1) * in_block];
            for zd in 0..od {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let mut best = S::neg_infinity();
                        let mut best_i = 0usize;
                        for id in range(zd, d) {
                            for ih in range(zh, h) {
                                for iw in range(zw, w) {
                                    let i = (id * h + ih) * w + iw;
                                    if src[i] > best {
                                        best = src[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let k = b * out_block + (zd * oh + zh) * ow + zw;
                        out.data_mut()[k] = best;
                        argmax[k] = best_i as u32;
                    }
                }
            }
        }
        Ok(self.push(out, vec![x], Box::new(MaxPoolOp { argmax })))
    }

    /// Attach a per-sample scalar function: `values[n]` is its value on sample
    /// `n`, `jacobian` its gradient w.r.t. `input` (same shape as `input`).
    pub fn per_sample(&mut self, input: Var, values: Vec<S>, jacobian: Tensor<S>) -> Result<Var> {
        need_shape("per_sample jacobian", self.shape(input), jacobian.shape())?;
        if values.len() != jacobian.dim(0) {
            return Err(Error::shape("per_sample values", &[jacobian.dim(0)], &[values.len()]));
        }
        let n = values.len();
        let out = Tensor::from_vec(&[n], values)?;
        Ok(self.push(out, vec![input], Box::new(PerSampleOp { jacobian })))
    }

    /// `Σ w_i · v_i` reducing a vector to a single element.
    pub fn dot_const(&mut self, v: Var, weights: Vec<S>) -> Result<Var> {
        if weights.len() != self.value(v).numel() {
            return Err(Error::shape("dot_const", &[self.value(v).numel()], &[weights.len()]));
        }
        let total = self.value(v).data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(total), vec![v], Box::new(DotConstOp { weights })))
    }

    pub fn sum(&mut self, v: Var) -> Var {
        let n = self.value(v).numel();
        self.dot_const(v, vec![S::one(); n]).expect("length matches")
    }
}

#[inline]
pub fn logistic<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
