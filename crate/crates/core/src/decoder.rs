//! Multi-scale decoder, stream fusion and output heads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvSpec, Var};
use crate::nn::{BatchNorm, Conv, ConvInit, Forward, Init};
use crate::scalar::Scalar;

/// U-Net style decoder over the four per-scale saliency features.
#[derive(Clone, Debug)]
pub struct Decoder {
    name: String,
    blocks: Vec<(Conv, BatchNorm)>,
}

impl Decoder {
    /// `in_channels` is the per-scale width of the features fed in (K, or 2K
    /// after channel concatenation of two streams); every block emits K.
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, in_channels: usize, k: usize) -> Self {
        let mut scope = init.sub(name);
        let blocks = (0..3)
            .map(|l| {
                let below = if l == 0 { in_channels } else { k };
                let mut block = scope.sub(&format!("block{}", l + 1));
                let conv = Conv::new(&mut block, "conv", in_channels + below, k, ConvSpec::planar(3, 1, 1), true, false, ConvInit::FanIn);
                let bn = BatchNorm::new(&mut block, "bn", k);
                (conv, bn)
            })
            .collect();
        Decoder { name: name.to_string(), blocks }
    }

    /// One block: upsample `below` to `skip`'s size, concatenate, convolve, normalize.
    pub fn block<S: Scalar>(&self, ctx: &mut Forward<'_, S>, l: usize, skip: Var, below: Var) -> Result<Var> {
        let (ss, bs) = (ctx.shape(skip).to_vec(), ctx.shape(below).to_vec());
        if ss.len() != 4 || bs.len() != 4 || ss[0] != bs[0] {
            return Err(Error::shape(format!("{} block {}: skip", self.name, l + 1), &ss, &bs));
        }
        if bs[2] >= ss[2] || bs[3] >= ss[3] {
            return Err(Error::shape(
                format!("{} block {}: the lower-resolution input must be strictly smaller than the skip input", self.name, l + 1),
                &ss[2..],
                &bs[2..],
            ));
        }
        let up = ctx.graph.upsample_bilinear(below, (ss[2], ss[3]))?;
        let cat = ctx.graph.concat_channels(&[skip, up])?;
        let (conv, bn) = &self.blocks[l];
        let h = conv.forward(ctx, cat)?;
        let d = bn.forward(ctx, h)?;
        ctx.graph.check_finite(d, &format!("{}.block{}", self.name, l + 1))?;
        Ok(d)
    }

    /// `S^1..S^4` (finest first) → `[D^1, D^2, D^3]`.
    pub fn decode<S: Scalar>(&self, ctx: &mut Forward<'_, S>, features: &[Var]) -> Result<Vec<Var>> {
        if features.len() != 4 {
            return Err(Error::Input(format!("decoder expects 4 scales, got {}", features.len())));
        }
        let mut below = features[3];
        let mut out = Vec::with_capacity(3);
        for l in 0..3 {
            below = self.block(ctx, l, features[2 - l], below)?;
            out.push(below);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fusion {
    /// Per-scale sum of the two streams' features, one shared decoder.
    Add,
    /// Per-scale channel concatenation, one shared decoder.
    Con,
    /// Two decoders whose outputs are concatenated and fused by the head.
    Cll,
}

impl Fusion {
    pub fn tag(self) -> &'static str {
        match self {
            Fusion::Add => "ADD",
            Fusion::Con => "CON",
            Fusion::Cll => "CLL",
        }
    }

    pub fn from_tag(s: &str) -> Option<Fusion> {
        match s {
            "ADD" => Some(Fusion::Add),
            "CON" => Some(Fusion::Con),
            "CLL" => Some(Fusion::Cll),
            _ => None,
        }
    }
}

/// Early per-scale fusion of two streams for the shared-decoder schemes.
pub fn fuse_multiscale<S: Scalar>(ctx: &mut Forward<'_, S>, scheme: Fusion, rgb: &[Var], depth: &[Var]) -> Result<Vec<Var>> {
    if rgb.len() != depth.len() {
        return Err(Error::Input(format!("stream scale counts differ: {} vs {}", rgb.len(), depth.len())));
    }
    rgb.iter()
        .zip(depth)
        .map(|(&a, &b)| match scheme {
            Fusion::Add => ctx.graph.add(a, b),
            Fusion::Con => ctx.graph.concat_channels(&[a, b]),
            Fusion::Cll => Err(Error::config("fusion", "late fusion does not merge encoder features")),
        })
        .collect()
}

/// Upsamples each decoded branch to the output size, concatenates them and
/// applies 3×3 conv → ReLU → 1×1 conv to one logit channel.
#[derive(Clone, Debug)]
pub struct FusionHead {
    conv1: Conv,
    conv2: Conv,
    size: usize,
}

impl FusionHead {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, branches: usize, k: usize, size: usize) -> Self {
        let mut scope = init.sub(name);
        FusionHead {
            conv1: Conv::new(&mut scope, "conv1", branches * k, k, ConvSpec::planar(3, 1, 1), true, true, ConvInit::He),
            conv2: Conv::new(&mut scope, "conv2", k, 1, ConvSpec::planar(1, 1, 0), true, true, ConvInit::FanIn),
            size,
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, branches: &[Var]) -> Result<Var> {
        if let Some(first) = branches.first() {
            let want = ctx.shape(*first).to_vec();
            for b in &branches[1..] {
                if ctx.shape(*b) != want.as_slice() {
                    return Err(Error::shape("fusion head branches", &want, ctx.shape(*b)));
                }
            }
        }
        let up = upsample_all(ctx, branches, self.size)?;
        let cat = ctx.graph.concat_channels(&up)?;
        let h = self.conv1.forward(ctx, cat)?;
        let h = ctx.graph.relu(h);
        self.conv2.forward(ctx, h)
    }
}

/// Upsamples every per-scale feature map to the output size, concatenates
/// them and reduces to one logit channel with a 1×1 convolution.
#[derive(Clone, Debug)]
pub struct ScHead {
    conv: Conv,
    size: usize,
}

impl ScHead {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, in_channels: usize, size: usize) -> Self {
        ScHead { conv: Conv::new(&mut init.sub(name), "conv", in_channels, 1, ConvSpec::planar(1, 1, 0), true, true, ConvInit::FanIn), size }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, features: &[Var]) -> Result<Var> {
        let up = upsample_all(ctx, features, self.size)?;
        let cat = ctx.graph.concat_channels(&up)?;
        self.conv.forward(ctx, cat)
    }
}

fn upsample_all<S: Scalar>(ctx: &mut Forward<'_, S>, maps: &[Var], size: usize) -> Result<Vec<Var>> {
    maps.iter().map(|&m| ctx.graph.upsample_bilinear(m, (size, size))).collect()
}
