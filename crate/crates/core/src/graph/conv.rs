//! Convolutions as im2col + GEMM.
//!
//! 2-D tensors `[N, C, H, W]` are handled as 3-D ones with a unit depth axis.
//! Column buffers are built a few output depth-planes at a time so the stem
//! convolution never materializes its full column matrix.

use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::{gemm, Layout, Scalar};
use crate::tensor::Tensor;

/// Largest column buffer (in elements) built at once.
const MAX_COL_ELEMS: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvSpec {
    pub fn cube(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { kernel: [kernel; 3], stride: [stride; 3], padding: [padding; 3] }
    }

    /// Spatial-only kernel for `[N, C, H, W]` tensors.
    pub fn planar(kernel: usize, stride: usize, padding: usize) -> Self {
        ConvSpec { kernel: [1, kernel, kernel], stride: [1, stride, stride], padding: [0, padding, padding] }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn output_len(&self, axis: usize, n: usize) -> Option<usize> {
        let padded = n + 2 * self.padding[axis];
        if padded < self.kernel[axis] {
            return None;
        }
        Some((padded - self.kernel[axis]) / self.stride[axis] + 1)
    }
}

/// Geometry of one sample: input volume and the output grid it maps to.
#[derive(Clone, Copy, Debug)]
struct Geom {
    channels: usize,
    input: [usize; 3],
    output: [usize; 3],
    spec: ConvSpec,
}

impl Geom {
    fn new(channels: usize, input: [usize; 3], spec: ConvSpec) -> Result<Self> {
        let mut output = [0; 3];
        for axis in 0..3 {
            output[axis] = spec
                .output_len(axis, input[axis])
                .ok_or_else(|| Error::shape("conv kernel larger than padded input", &spec.kernel, &input))?;
        }
        Ok(Geom { channels, input, output, spec })
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn positions(&self) -> usize {
        self.output[0] * self.plane()
    }

    fn rows(&self) -> usize {
        self.channels * self.spec.taps()
    }

    fn planes_per_chunk(&self) -> usize {
        (MAX_COL_ELEMS / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0])
    }

    /// Output indices `o` whose tap `k` lands inside `[0, n)`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let (s, p, n, o) = (self.spec.stride[axis], self.spec.padding[axis], self.input[axis], self.output[axis]);
        // o*s + k - p in [0, n)
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if n + p > k { ((n + p - k - 1) / s + 1).min(o) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfold output planes `d0..d1` of one sample into `col[rows, (d1-d0)*plane]`.
fn im2col<S: Scalar>(x: &[S], g: &Geom, d0: usize, d1: usize, col: &mut [S]) {
    let [kd, kh, kw] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    let ncols = (d1 - d0) * plane;
    let mut row = 0;
    for c in 0..g.channels {
        for i in 0..kd {
            for j in 0..kh {
                let (h_lo, h_hi) = g.valid(1, j);
                for l in 0..kw {
                    let (w_lo, w_hi) = g.valid(2, l);
                    let dst = &mut col[row * ncols..(row + 1) * ncols];
                    for od in d0..d1 {
                        let dp = &mut dst[(od - d0) * plane..(od - d0 + 1) * plane];
                        let id = (od * sd + i) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            dp.fill(S::zero());
                            continue;
                        }
                        let src = &x[(c * d + id as usize) * h * w..][..h * w];
                        dp[..h_lo * ow].fill(S::zero());
                        dp[h_hi * ow..].fill(S::zero());
                        for zh in h_lo..h_hi {
                            let ih = zh * sh + j - ph;
                            let srow = &src[ih * w..(ih + 1) * w];
                            let drow = &mut dp[zh * ow..(zh + 1) * ow];
                            drow[..w_lo].fill(S::zero());
                            drow[w_hi..].fill(S::zero());
                            if sw == 1 {
                                let start = w_lo + l - pw;
                                drow[w_lo..w_hi].copy_from_slice(&srow[start..start + (w_hi - w_lo)]);
                            } else {
                                for zw in w_lo..w_hi {
                                    drow[zw] = srow[zw * sw + l - pw];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into the sample volume `x`.
fn col2im<S: Scalar>(col: &[S], g: &Geom, d0: usize, d1: usize, x: &mut [S]) {
    let [kd, kh, kw] = g.spec.kernel;
    let [sd, sh, sw] = g.spec.stride;
    let [pd, ph, pw] = g.spec.padding;
    let [d, h, w] = g.input;
    let [_, oh, ow] = g.output;
    let plane = oh * ow;
    let ncols = (d1 - d0) * plane;
    let mut row = 0;
    for c in 0..g.channels {
        for i in 0..kd {
            for j in 0..kh {
                let (h_lo, h_hi) = g.valid(1, j);
                for l in 0..kw {
                    let (w_lo, w_hi) = g.valid(2, l);
                    let src = &col[row * ncols..(row + 1) * ncols];
                    for od in d0..d1 {
                        let id = (od * sd + i) as isize - pd as isize;
                        if id < 0 || id >= d as isize {
                            continue;
                        }
                        let sp = &src[(od - d0) * plane..(od - d0 + 1) * plane];
                        let dst = &mut x[(c * d + id as usize) * h * w..][..h * w];
                        for zh in h_lo..h_hi {
                            let ih = zh * sh + j - ph;
                            let drow = &mut dst[ih * w..(ih + 1) * w];
                            let srow = &sp[zh * ow..(zh + 1) * ow];
                            for zw in w_lo..w_hi {
                                drow[zw * sw + l - pw] += srow[zw];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

/// Views `[N, C, H, W]` or `[N, C, D, H, W]` as `(N, C, [D, H, W])`.
fn volume(shape: &[usize], context: &str) -> Result<(usize, usize, [usize; 3])> {
    match *shape {
        [n, c, h, w] => Ok((n, c, [1, h, w])),
        [n, c, d, h, w] => Ok((n, c, [d, h, w])),
        _ => Err(Error::shape(format!("{context} (rank)"), &[5], &[shape.len()])),
    }
}

fn output_shape(input_rank: usize, n: usize, c: usize, dims: [usize; 3]) -> Vec<usize> {
    if input_rank == 4 {
        vec![n, c, dims[1], dims[2]]
    } else {
        vec![n, c, dims[0], dims[1], dims[2]]
    }
}

struct ConvOp {
    geom: Geom,
    out_channels: usize,
}

impl<S: Scalar> Backward<S> for ConvOp {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let (n, rows, p, o) = (x.dim(0), g.rows(), g.positions(), self.out_channels);
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut gb = needs.get(2).copied().unwrap_or(false).then(|| Tensor::zeros(&[o]));
        let chunk = g.planes_per_chunk();
        let plane = g.plane();
        let mut col = Vec::new();
        let mut dcol = Vec::new();
        for s in 0..n {
            let xs = x.outer(s);
            let gs = grad.outer(s);
            if let Some(gb) = gb.as_mut() {
                for (oc, b) in gb.data_mut().iter_mut().enumerate() {
                    *b += gs[oc * p..(oc + 1) * p].iter().copied().sum::<S>();
                }
            }
            if g.spec.is_pointwise() {
                if let Some(gw) = gw.as_mut() {
                    gemm(S::one(), gs, Layout::row_major(o, p), xs, Layout::transposed(p, rows), S::one(), gw.data_mut(), Layout::row_major(o, rows));
                }
                if let Some(gx) = gx.as_mut() {
                    gemm(S::one(), w.data(), Layout::transposed(rows, o), gs, Layout::row_major(o, p), S::zero(), gx.outer_mut(s), Layout::row_major(rows, p));
                }
                continue;
            }
            let mut d0 = 0;
            while d0 < g.output[0] {
                let d1 = (d0 + chunk).min(g.output[0]);
                let ncols = (d1 - d0) * plane;
                let gy = &gs[d0 * plane..];
                let ly = Layout::with_row_stride(o, ncols, p);
                if let Some(gw) = gw.as_mut() {
                    col.resize(rows * ncols, S::zero());
                    im2col(xs, g, d0, d1, &mut col);
                    gemm(S::one(), gy, ly, &col, Layout::transposed(ncols, rows), S::one(), gw.data_mut(), Layout::row_major(o, rows));
                }
                if let Some(gx) = gx.as_mut() {
                    dcol.resize(rows * ncols, S::zero());
                    gemm(S::one(), w.data(), Layout::transposed(rows, o), gy, ly, S::zero(), &mut dcol, Layout::row_major(rows, ncols));
                    col2im(&dcol, g, d0, d1, gx.outer_mut(s));
                }
                d0 = d1;
            }
        }
        vec![gx, gw, gb]
    }
}

/// Transposed convolution, computed as the adjoint of a convolution whose
/// input is this op's output.
struct ConvTransposeOp {
    geom: Geom,
    in_channels: usize,
}

impl<S: Scalar> Backward<S> for ConvTransposeOp {
    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = &self.geom;
        let (n, rows, p, ci) = (x.dim(0), g.rows(), g.positions(), self.in_channels);
        let mut gx = needs[0].then(|| Tensor::zeros(x.shape()));
        let mut gw = needs[1].then(|| Tensor::zeros(w.shape()));
        let mut gb = needs.get(2).copied().unwrap_or(false).then(|| Tensor::zeros(&[g.channels]));
        let mut dcol = vec![S::zero(); rows * p];
        for s in 0..n {
            let gs = grad.outer(s);
            if let Some(gb) = gb.as_mut() {
                let block = gs.len() / g.channels;
                for (oc, b) in gb.data_mut().iter_mut().enumerate() {
                    *b += gs[oc * block..(oc + 1) * block].iter().copied().sum::<S>();
                }
            }
            im2col(gs, g, 0, g.output[0], &mut dcol);
            if let Some(gx) = gx.as_mut() {
                gemm(S::one(), w.data(), Layout::row_major(ci, rows), &dcol, Layout::row_major(rows, p), S::zero(), gx.outer_mut(s), Layout::row_major(ci, p));
            }
            if let Some(gw) = gw.as_mut() {
                gemm(S::one(), x.outer(s), Layout::row_major(ci, p), &dcol, Layout::transposed(p, rows), S::one(), gw.data_mut(), Layout::row_major(ci, rows));
            }
        }
        vec![gx, gw, gb]
    }
}

impl<S: Scalar> Graph<S> {
    /// Cross-correlation of `x` with `weight: [O, C, kd, kh, kw]` (`[O, C, kh, kw]`
    /// for 2-D input), plus an optional `bias: [O]`.
    pub fn conv(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        let (n, c, dims) = volume(&xshape, "conv input")?;
        let wshape = self.shape(weight).to_vec();
        let o = wshape[0];
        let mut expected_w = vec![o, c];
        if xshape.len() == 4 {
            if spec.kernel[0] != 1 || spec.stride[0] != 1 || spec.padding[0] != 0 {
                return Err(Error::Input("2-D convolution with a temporal kernel".into()));
            }
            expected_w.extend_from_slice(&spec.kernel[1..]);
        } else {
            expected_w.extend_from_slice(&spec.kernel);
        }
        if wshape != expected_w {
            return Err(Error::shape("conv weight", &expected_w, &wshape));
        }
        if let Some(b) = bias {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv bias", &[o], self.shape(b)));
            }
        }
        let geom = Geom::new(c, dims, spec)?;
        let (rows, p, plane) = (geom.rows(), geom.positions(), geom.plane());
        let mut out = Tensor::zeros(&output_shape(xshape.len(), n, o, geom.output));
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            let chunk = geom.planes_per_chunk();
            let mut col = Vec::new();
            for s in 0..n {
                let xs = xv.outer(s);
                let ys = out.outer_mut(s);
                if spec.is_pointwise() {
                    gemm(S::one(), wv, Layout::row_major(o, rows), xs, Layout::row_major(rows, p), S::zero(), ys, Layout::row_major(o, p));
                    continue;
                }
                let mut d0 = 0;
                while d0 < geom.output[0] {
                    let d1 = (d0 + chunk).min(geom.output[0]);
                    let ncols = (d1 - d0) * plane;
                    col.resize(rows * ncols, S::zero());
                    im2col(xs, &geom, d0, d1, &mut col);
                    gemm(
                        S::one(),
                        wv,
                        Layout::row_major(o, rows),
                        &col,
                        Layout::row_major(rows, ncols),
                        S::zero(),
                        &mut ys[d0 * plane..],
                        Layout::with_row_stride(o, ncols, p),
                    );
                    d0 = d1;
                }
            }
            if let Some(b) = bias {
                let bv = self.value(b).data().to_vec();
                for s in 0..n {
                    for (oc, chunk) in out.outer_mut(s).chunks_mut(p).enumerate() {
                        for v in chunk {
                            *v += bv[oc];
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, parents, Box::new(ConvOp { geom, out_channels: o })))
    }

    /// 2-D transposed convolution of `x: [N, Ci, H, W]` with
    /// `weight: [Ci, Co, k, k]`, producing `[N, Co, (H-1)s-2p+k, ...]`.
    pub fn conv_transpose2d(&mut self, x: Var, weight: Var, bias: Option<Var>, kernel: usize, stride: usize, padding: usize) -> Result<Var> {
        let xshape = self.shape(x).to_vec();
        let [n, ci, h, w] = xshape[..] else {
            return Err(Error::shape("conv_transpose2d input (rank)", &[4], &[xshape.len()]));
        };
        let wshape = self.shape(weight).to_vec();
        if wshape.len() != 4 || wshape[0] != ci || wshape[2] != kernel || wshape[3] != kernel {
            return Err(Error::shape("conv_transpose2d weight", &[ci, 0, kernel, kernel], &wshape));
        }
        let co = wshape[1];
        let grow = |len: usize| ((len - 1) * stride + kernel).checked_sub(2 * padding);
        let (oh, ow) = match (grow(h), grow(w)) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => return Err(Error::Input("transposed convolution output would be empty".into())),
        };
        let spec = ConvSpec::planar(kernel, stride, padding);
        let geom = Geom::new(co, [1, oh, ow], spec)?;
        debug_assert_eq!(geom.output, [1, h, w]);
        let (rows, p) = (geom.rows(), geom.positions());
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        {
            let xv = self.value(x);
            let wv = self.value(weight).data();
            let mut col = vec![S::zero(); rows * p];
            for s in 0..n {
                gemm(S::one(), wv, Layout::transposed(rows, ci), xv.outer(s), Layout::row_major(ci, p), S::zero(), &mut col, Layout::row_major(rows, p));
                col2im(&col, &geom, 0, 1, out.outer_mut(s));
            }
            if let Some(b) = bias {
                let bv = self.value(b).data().to_vec();
                for s in 0..n {
                    for (oc, chunk) in out.outer_mut(s).chunks_mut(oh * ow).enumerate() {
                        for v in chunk {
                            *v += bv[oc];
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, weight];
        parents.extend(bias);
        Ok(self.push(out, parents, Box::new(ConvTransposeOp { geom, in_channels: ci })))
    }
}

#[cfg(test)]
pub(super) mod reference {
    //! Direct-loop convolution used to check the GEMM path.
    use super::*;

    pub fn conv3d_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, spec: ConvSpec) -> Tensor<f64> {
        let (n, c, dims) = volume(x.shape(), "ref").unwrap();
        let g = Geom::new(c, dims, spec).unwrap();
        let o = w.dim(0);
        let [d, h, wd] = dims;
        let [od, oh, ow] = g.output;
        let [kd, kh, kw] = spec.kernel;
        let mut out = Tensor::zeros(&output_shape(x.rank(), n, o, g.output));
        for s in 0..n {
            for oc in 0..o {
                for zd in 0..od {
                    for zh in 0..oh {
                        for zw in 0..ow {
                            let mut acc = b.map_or(0.0, |b| b[oc]);
                            for ic in 0..c {
                                for i in 0..kd {
                                    for j in 0..kh {
                                        for l in 0..kw {
                                            let id = (zd * spec.stride[0] + i) as isize - spec.padding[0] as isize;
                                            let ih = (zh * spec.stride[1] + j) as isize - spec.padding[1] as isize;
                                            let iw = (zw * spec.stride[2] + l) as isize - spec.padding[2] as isize;
                                            if id < 0 || ih < 0 || iw < 0 || id >= d as isize || ih >= h as isize || iw >= wd as isize {
                                                continue;
                                            }
                                            let xi = (((s * c + ic) * d + id as usize) * h + ih as usize) * wd + iw as usize;
                                            let wi = (((oc * c + ic) * kd + i) * kh + j) * kw + l;
                                            acc += x.data()[xi] * w.data()[wi];
                                        }
                                    }
                                }
                            }
                            let oi = (((s * o + oc) * od + zd) * oh + zh) * ow + zw;
                            out.data_mut()[oi] = acc;
                        }
                    }
                }
            }
        }
        out
    }
}
