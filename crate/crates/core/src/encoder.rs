//! One spatio-temporal stream: a 50-layer 3-D residual backbone with an
//! attention module after each of its four stages.

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Var};
use crate::nn::{BatchNorm, Conv, ConvInit, ConvTranspose2d, Forward, Init, ParamGroup};
use crate::scalar::Scalar;

pub const EXPANSION: usize = 4;
/// Bottleneck blocks per stage.
pub const STAGE_DEPTHS: [usize; 4] = [3, 4, 6, 3];
pub const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];
pub const DEFAULT_BASE_WIDTH: usize = 64;

const STEM: ConvSpec = ConvSpec { kernel: [7, 7, 7], stride: [1, 2, 2], padding: [3, 3, 3] };

/// Input geometry and backbone width of a stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamGeometry {
    pub frames: usize,
    pub size: usize,
    /// Channel count of the stem; stage widths are `base × [1, 2, 4, 8] × 4`.
    pub base_width: usize,
}

impl Default for StreamGeometry {
    fn default() -> Self {
        StreamGeometry { frames: 16, size: 112, base_width: DEFAULT_BASE_WIDTH }
    }
}

impl StreamGeometry {
    pub fn stage_channels(&self, m: usize) -> usize {
        self.base_width * (1 << m) * EXPANSION
    }

    /// `[C, T, H, W]` of `X^{m+1}` (m is 0-based).
    pub fn stage_shape(&self, m: usize) -> Result<[usize; 4]> {
        let len = |spec: ConvSpec, axis: usize, n: usize| {
            spec.output_len(axis, n).ok_or_else(|| Error::Input(format!("input of {}x{}x{} frames is too small", self.frames, self.size, self.size)))
        };
        let pool = ConvSpec::cube(3, 2, 1);
        let mut t = len(pool, 0, len(STEM, 0, self.frames)?)?;
        let mut s = len(pool, 1, len(STEM, 1, self.size)?)?;
        for &stride in &STAGE_STRIDES[1..=m] {
            let spec = ConvSpec::cube(3, stride, 1);
            t = len(spec, 0, t)?;
            s = len(spec, 1, s)?;
        }
        Ok([self.stage_channels(m), t, s, s])
    }
}

#[derive(Clone, Debug)]
struct Bottleneck {
    conv1: Conv,
    bn1: BatchNorm,
    conv2: Conv,
    bn2: BatchNorm,
    conv3: Conv,
    bn3: BatchNorm,
    downsample: Option<(Conv, BatchNorm)>,
}

impl Bottleneck {
    fn new<S: Scalar>(init: &mut Init<'_, S>, cin: usize, planes: usize, stride: usize) -> Self {
        let cout = planes * EXPANSION;
        let downsample = (stride != 1 || cin != cout).then(|| {
            let mut ds = init.sub("downsample");
            (Conv::new(&mut ds, "0", cin, cout, ConvSpec::cube(1, stride, 0), false, false, ConvInit::He), BatchNorm::new(&mut ds, "1", cout))
        });
        Bottleneck {
            conv1: Conv::new(init, "conv1", cin, planes, ConvSpec::cube(1, 1, 0), false, false, ConvInit::He),
            bn1: BatchNorm::new(init, "bn1", planes),
            conv2: Conv::new(init, "conv2", planes, planes, ConvSpec::cube(3, stride, 1), false, false, ConvInit::He),
            bn2: BatchNorm::new(init, "bn2", planes),
            conv3: Conv::new(init, "conv3", planes, cout, ConvSpec::cube(1, 1, 0), false, false, ConvInit::He),
            bn3: BatchNorm::new(init, "bn3", cout),
            downsample,
        }
    }

    fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(ctx, x)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        let h = self.conv2.forward(ctx, h)?;
        let h = self.bn2.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        let h = self.conv3.forward(ctx, h)?;
        let h = self.bn3.forward(ctx, h)?;
        let shortcut = match &self.downsample {
            Some((conv, bn)) => {
                let s = conv.forward(ctx, x)?;
                bn.forward(ctx, s)?
            }
            None => x,
        };
        let y = ctx.graph.add(h, shortcut)?;
        Ok(ctx.graph.relu(y))
    }
}

/// Stem plus four residual stages. Parameter names follow the usual
/// `conv1`, `bn1`, `layerN.i.*` layout so pretrained weights map directly.
#[derive(Clone, Debug)]
pub struct Backbone {
    geometry: StreamGeometry,
    conv1: Conv,
    bn1: BatchNorm,
    stages: Vec<Vec<Bottleneck>>,
}

impl Backbone {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, geometry: StreamGeometry) -> Self {
        let base = geometry.base_width;
        let conv1 = Conv::new(init, "conv1", 3, base, STEM, false, false, ConvInit::He);
        let bn1 = BatchNorm::new(init, "bn1", base);
        let mut cin = base;
        let mut stages = Vec::with_capacity(4);
        for (m, (&depth, &stride)) in STAGE_DEPTHS.iter().zip(&STAGE_STRIDES).enumerate() {
            let planes = base << m;
            let mut layer = init.sub(&format!("layer{}", m + 1));
            let blocks = (0..depth)
                .map(|i| {
                    let b = Bottleneck::new(&mut layer.sub(&i.to_string()), cin, planes, if i == 0 { stride } else { 1 });
                    cin = planes * EXPANSION;
                    b
                })
                .collect();
            stages.push(blocks);
        }
        Backbone { geometry, conv1, bn1, stages }
    }

    pub fn geometry(&self) -> StreamGeometry {
        self.geometry
    }

    pub fn stem<S: Scalar>(&self, ctx: &mut Forward<'_, S>, clip: Var) -> Result<Var> {
        let shape = ctx.shape(clip);
        let want = [3, self.geometry.frames, self.geometry.size, self.geometry.size];
        if shape.len() != 5 || shape[1..] != want {
            return Err(Error::shape("stream input [N, 3, T, H, W]", &want, shape.get(1..).unwrap_or(shape)));
        }
        let h = self.conv1.forward(ctx, clip)?;
        let h = self.bn1.forward(ctx, h)?;
        let h = ctx.graph.relu(h);
        ctx.graph.max_pool3d(h, 3, 2, 1)
    }

    /// Stage `m` (0-based) applied to the stem output or the previous refined features.
    pub fn stage<S: Scalar>(&self, ctx: &mut Forward<'_, S>, m: usize, x: Var) -> Result<Var> {
        let expected_in = if m == 0 {
            let [_, t, h, w] = self.geometry.stage_shape(0)?;
            [self.geometry.base_width, t, h, w]
        } else {
            self.geometry.stage_shape(m - 1)?
        };
        let actual = ctx.shape(x);
        if actual.len() != 5 || actual[1..] != expected_in {
            return Err(Error::shape(format!("backbone block {}", m + 1), &expected_in, actual.get(1..).unwrap_or(actual)));
        }
        let mut h = x;
        for block in &self.stages[m] {
            h = block.forward(ctx, h)?;
        }
        Ok(h)
    }
}

/// Outputs of one attention module for a batch.
#[derive(Clone, Copy, Debug)]
pub struct DsamOutput {
    /// `S^m`: `[N, K, H_m, W_m]`.
    pub saliency: Var,
    /// Pre-softmax activation at feature resolution, `[N, 1, H_m, W_m]`.
    pub activation: Var,
    /// `M^m`: spatial softmax of the activation.
    pub attention: Var,
    /// Upsampled activation before squashing, `[N, 1, size, size]`.
    pub supervision_logits: Var,
    /// `A^m`: squashed supervision map in (0, 1).
    pub supervision: Var,
    /// `(1 + M^m) ⊙ X^m`, when requested.
    pub refined: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct Dsam {
    saliency: Conv,
    act1: Conv,
    act2: Conv,
    upsample: ConvTranspose2d,
}

impl Dsam {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, channels: usize, k: usize, feature_size: usize, input_size: usize) -> Result<Self> {
        let (kernel, stride) = ConvTranspose2d::exact_geometry(feature_size, input_size)?;
        let spec = ConvSpec::planar(3, 1, 1);
        Ok(Dsam {
            saliency: Conv::new(init, "saliency", channels, k, spec, true, true, ConvInit::FanIn),
            act1: Conv::new(init, "activation.0", channels, k, spec, true, true, ConvInit::FanIn),
            act2: Conv::new(init, "activation.1", k, 1, spec, true, true, ConvInit::FanIn),
            upsample: ConvTranspose2d::new(init, "upsample", 1, 1, kernel, stride),
        })
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, x: Var, refine: bool) -> Result<DsamOutput> {
        let pooled = ctx.graph.temporal_mean(x)?;
        let saliency = self.saliency.forward(ctx, pooled)?;
        let h = self.act1.forward(ctx, pooled)?;
        let h = ctx.graph.relu(h);
        let activation = self.act2.forward(ctx, h)?;
        let attention = ctx.graph.spatial_softmax(activation)?;
        let supervision_logits = self.upsample.forward(ctx, activation)?;
        let supervision = ctx.graph.sigmoid(supervision_logits);
        let refined = if refine { Some(ctx.graph.modulate(x, attention)?) } else { None };
        Ok(DsamOutput { saliency, activation, attention, supervision_logits, supervision, refined })
    }
}

/// Per-scale outputs of a stream encoder.
#[derive(Clone, Debug)]
pub struct StreamFeatures {
    /// `X^1..X^4` straight out of the backbone stages.
    pub stages: Vec<Var>,
    pub dsam: Vec<DsamOutput>,
}

impl StreamFeatures {
    pub fn saliency(&self) -> Vec<Var> {
        self.dsam.iter().map(|d| d.saliency).collect()
    }

    pub fn supervision(&self) -> Vec<Var> {
        self.dsam.iter().map(|d| d.supervision).collect()
    }

    pub fn attention(&self) -> Vec<Var> {
        self.dsam.iter().map(|d| d.attention).collect()
    }
}

#[derive(Clone, Debug)]
pub struct StreamEncoder {
    name: String,
    pub backbone: Backbone,
    dsam: Vec<Dsam>,
}

impl StreamEncoder {
    /// Registers `{name}.backbone.*` in the backbone group and
    /// `{name}.dsam{m}.*` in the head group.
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, geometry: StreamGeometry, k: usize) -> Result<Self> {
        let mut scope = init.sub(name);
        let backbone = Backbone::new(&mut scope.grouped("backbone", ParamGroup::Backbone), geometry);
        let mut dsam = Vec::with_capacity(4);
        for m in 0..4 {
            let [c, _, h, _] = geometry.stage_shape(m)?;
            dsam.push(Dsam::new(&mut scope.grouped(&format!("dsam{}", m + 1), ParamGroup::Heads), c, k, h, geometry.size)?);
        }
        Ok(StreamEncoder { name: name.to_string(), backbone, dsam })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// `clip`: `[N, 3, T, size, size]`.
    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, clip: Var) -> Result<StreamFeatures> {
        let mut x = self.backbone.stem(ctx, clip)?;
        ctx.graph.check_finite(x, &format!("{}.backbone.stem", self.name))?;
        let mut stages = Vec::with_capacity(4);
        let mut outs = Vec::with_capacity(4);
        for m in 0..4 {
            let xm = self.backbone.stage(ctx, m, x)?;
            ctx.graph.check_finite(xm, &format!("{}.backbone.layer{}", self.name, m + 1))?;
            let out = self.dsam[m].forward(ctx, xm, m < 3)?;
            ctx.graph.check_finite(out.supervision_logits, &format!("{}.dsam{}", self.name, m + 1))?;
            ctx.graph.check_finite(out.saliency, &format!("{}.dsam{}", self.name, m + 1))?;
            stages.push(xm);
            if let Some(r) = out.refined {
                x = r;
            }
            outs.push(out);
        }
        Ok(StreamFeatures { stages, dsam: outs })
    }
}
