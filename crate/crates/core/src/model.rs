//! Model variants and the assembled saliency network.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{fuse_multiscale, Decoder, Fusion, FusionHead, ScHead};
use crate::encoder::{StreamEncoder, StreamFeatures, StreamGeometry};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::nn::{BnMode, Forward, Init, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Streams {
    RgbOnly,
    DepthOnly,
    Rgbd,
}

impl Streams {
    pub fn uses_rgb(self) -> bool {
        self != Streams::DepthOnly
    }

    pub fn uses_depth(self) -> bool {
        self != Streams::RgbOnly
    }

    fn tag(self) -> &'static str {
        match self {
            Streams::RgbOnly => "RGB",
            Streams::DepthOnly => "Depth",
            Streams::Rgbd => "RGBD",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeadKind {
    /// Per-scale features concatenated and reduced, no decoder.
    Sc,
    /// Decoder(s) followed by the fusion head.
    Mf,
}

/// Informational tag naming the depth estimator that produced the depth maps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DepthSource {
    Mid,
    Meg,
    Dil,
}

impl DepthSource {
    fn tag(self) -> &'static str {
        match self {
            DepthSource::Mid => "MID",
            DepthSource::Meg => "MEG",
            DepthSource::Dil => "DIL",
        }
    }

    fn from_tag(s: &str) -> Option<Self> {
        match s {
            "MID" => Some(DepthSource::Mid),
            "MEG" => Some(DepthSource::Meg),
            "DIL" => Some(DepthSource::Dil),
            _ => None,
        }
    }
}

pub const CHANNEL_OPTIONS: [usize; 2] = [16, 64];

/// The architectural rows that the variant grammar must cover.
pub const TABLE_VARIANTS: [&str; 9] =
    ["RGB16SC", "Depth16SC", "RGBD16SC", "RGB16MF", "RGB64MF", "Depth64MF", "RGBD64MF_ADD", "RGBD64MF_CON", "RGBD64MF_CLL"];

/// Architecture switches. The variant string (e.g. `RGBD64MF_CLL`) is the
/// canonical serialization of the first five fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub streams: Streams,
    pub channels: usize,
    pub head: HeadKind,
    pub fusion: Option<Fusion>,
    pub depth_source: Option<DepthSource>,
    pub geometry: StreamGeometry,
}

impl ModelConfig {
    pub fn new(streams: Streams, channels: usize, head: HeadKind, fusion: Option<Fusion>) -> Result<Self> {
        let cfg = ModelConfig { streams, channels, head, fusion, depth_source: None, geometry: StreamGeometry::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_base_width(mut self, base_width: usize) -> Self {
        self.geometry.base_width = base_width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::config("model.variant", m));
        if !CHANNEL_OPTIONS.contains(&self.channels) {
            return err(format!("channel width must be 16 or 64, got {}", self.channels));
        }
        match (self.streams, self.head, self.fusion) {
            (Streams::Rgbd, HeadKind::Mf, None) => return err("two-stream MF variants need a fusion scheme (ADD, CON or CLL)".into()),
            (Streams::Rgbd, HeadKind::Sc, Some(f)) => {
                return err(format!("SC variants concatenate per-scale maps and take no fusion scheme, got {}", f.tag()))
            }
            (Streams::RgbOnly | Streams::DepthOnly, _, Some(f)) => {
                return err(format!("fusion scheme {} needs both streams", f.tag()))
            }
            _ => {}
        }
        if self.depth_source.is_some() && !self.streams.uses_depth() {
            return err("a depth-source tag needs a depth stream".into());
        }
        if self.geometry.base_width == 0 {
            return Err(Error::config("model.backbone_width", "must be positive"));
        }
        Ok(())
    }

    pub fn variant(&self) -> String {
        let mut s = format!("{}{}{}", self.streams.tag(), self.channels, if self.head == HeadKind::Sc { "SC" } else { "MF" });
        if let Some(f) = self.fusion {
            s.push('_');
            s.push_str(f.tag());
        }
        if let Some(d) = self.depth_source {
            s.push('_');
            s.push_str(d.tag());
        }
        s
    }

    pub fn input_size(&self) -> usize {
        self.geometry.size
    }

    fn stream_names(&self) -> Vec<&'static str> {
        match self.streams {
            Streams::RgbOnly => vec!["rgb"],
            Streams::DepthOnly => vec!["depth"],
            Streams::Rgbd => vec!["rgb", "depth"],
        }
    }
}

impl FromStr for ModelConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::config("model.variant", format!("unrecognized variant `{s}`"));
        let (streams, rest) = if let Some(r) = s.strip_prefix("RGBD") {
            (Streams::Rgbd, r)
        } else if let Some(r) = s.strip_prefix("RGB") {
            (Streams::RgbOnly, r)
        } else if let Some(r) = s.strip_prefix("Depth") {
            (Streams::DepthOnly, r)
        } else {
            return Err(bad());
        };
        let digits = rest.chars().take_while(|c| c.is_ascii_digit()).count();
        let channels: usize = rest[..digits].parse().map_err(|_| bad())?;
        let rest = &rest[digits..];
        let (head, rest) = if let Some(r) = rest.strip_prefix("SC") {
            (HeadKind::Sc, r)
        } else if let Some(r) = rest.strip_prefix("MF") {
            (HeadKind::Mf, r)
        } else {
            return Err(bad());
        };
        let mut fusion = None;
        let mut depth_source = None;
        if !rest.is_empty() {
            let parts: Vec<&str> = rest.strip_prefix('_').ok_or_else(bad)?.split('_').collect();
            let mut it = parts.into_iter().peekable();
            if let Some(f) = it.peek().and_then(|p| Fusion::from_tag(p)) {
                fusion = Some(f);
                it.next();
            }
            if let Some(p) = it.next() {
                depth_source = Some(DepthSource::from_tag(p).ok_or_else(bad)?);
            }
            if it.next().is_some() {
                return Err(bad());
            }
        }
        let cfg = ModelConfig { streams, channels, head, fusion, depth_source, geometry: StreamGeometry::default() };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.variant())
    }
}

#[derive(Clone, Debug)]
enum Head {
    Sc(ScHead),
    Mf(FusionHead),
}

/// Parameter-free layout of a configured network.
#[derive(Clone, Debug)]
pub struct Architecture {
    config: ModelConfig,
    rgb: Option<StreamEncoder>,
    depth: Option<StreamEncoder>,
    decoders: Vec<Decoder>,
    head: Head,
}

impl Architecture {
    pub fn new<S: Scalar>(config: ModelConfig, init: &mut Init<'_, S>) -> Result<Self> {
        config.validate()?;
        let (g, k) = (config.geometry, config.channels);
        let rgb = config.streams.uses_rgb().then(|| StreamEncoder::new(init, "rgb", g, k)).transpose()?;
        let depth = config.streams.uses_depth().then(|| StreamEncoder::new(init, "depth", g, k)).transpose()?;
        let mut heads = init.in_group(ParamGroup::Heads);
        let n_streams = config.stream_names().len();
        let (decoders, head) = match config.head {
            HeadKind::Sc => (Vec::new(), Head::Sc(ScHead::new(&mut heads, "head", 4 * k * n_streams, g.size))),
            HeadKind::Mf => match config.fusion {
                Some(Fusion::Cll) => (
                    vec![Decoder::new(&mut heads, "decoder_rgb", k, k), Decoder::new(&mut heads, "decoder_depth", k, k)],
                    Head::Mf(FusionHead::new(&mut heads, "head", 2, k, g.size)),
                ),
                Some(Fusion::Con) => (vec![Decoder::new(&mut heads, "decoder", 2 * k, k)], Head::Mf(FusionHead::new(&mut heads, "head", 1, k, g.size))),
                Some(Fusion::Add) | None => {
                    (vec![Decoder::new(&mut heads, "decoder", k, k)], Head::Mf(FusionHead::new(&mut heads, "head", 1, k, g.size)))
                }
            },
        };
        Ok(Architecture { config, rgb, depth, decoders, head })
    }
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub logits: Var,
    /// Final saliency map in (0, 1), `[N, 1, size, size]`.
    pub saliency: Var,
    pub rgb: Option<StreamFeatures>,
    pub depth: Option<StreamFeatures>,
    /// `D^3` of each decoder.
    pub decoded: Vec<Var>,
}

impl ModelOutput {
    pub fn rgb_supervision(&self) -> Vec<Var> {
        self.rgb.as_ref().map(|f| f.supervision()).unwrap_or_default()
    }

    pub fn depth_supervision(&self) -> Vec<Var> {
        self.depth.as_ref().map(|f| f.supervision()).unwrap_or_default()
    }
}

/// Concrete tensors of an evaluation-mode forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    pub logits: Tensor<S>,
    pub saliency: Tensor<S>,
    pub rgb_supervision: Vec<Tensor<S>>,
    pub depth_supervision: Vec<Tensor<S>>,
}

pub struct SaliencyModel<S: Scalar> {
    pub params: ParamStore<S>,
    arch: Architecture,
}

impl<S: Scalar> SaliencyModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::new(config, &mut Init::new(&mut params, &mut rng))?;
        let model = SaliencyModel { params, arch };
        model.parameter_groups()?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Trainable parameters split into (backbone, heads).
    pub fn parameter_groups(&self) -> Result<(Vec<ParamId>, Vec<ParamId>)> {
        let (mut backbone, mut heads) = (Vec::new(), Vec::new());
        for id in self.params.trainable_ids() {
            let e = self.params.entry(id);
            match e.group {
                Some(ParamGroup::Backbone) => backbone.push(id),
                Some(ParamGroup::Heads) => heads.push(id),
                None => return Err(Error::config("model", format!("parameter `{}` belongs to no learning-rate group", e.name))),
            }
        }
        Ok((backbone, heads))
    }

    /// `rgb`/`depth`: `[N, 3, T, size, size]`; each must be present when the
    /// configuration uses that stream.
    pub fn forward(&self, ctx: &mut Forward<'_, S>, rgb: Option<Var>, depth: Option<Var>) -> Result<ModelOutput> {
        let cfg = &self.arch.config;
        let missing = |what: &str| Error::Input(format!("{} requires {what} input", cfg.variant()));
        let rgb_f = match &self.arch.rgb {
            Some(enc) => Some(enc.forward(ctx, rgb.ok_or_else(|| missing("an RGB"))?)?),
            None => None,
        };
        let depth_f = match &self.arch.depth {
            Some(enc) => Some(enc.forward(ctx, depth.ok_or_else(|| missing("a depth"))?)?),
            None => None,
        };
        let streams: Vec<&StreamFeatures> = rgb_f.iter().chain(depth_f.iter()).collect();
        let mut decoded = Vec::new();
        let logits = match &self.arch.head {
            Head::Sc(head) => {
                let all: Vec<Var> = streams.iter().flat_map(|f| f.saliency()).collect();
                head.forward(ctx, &all)?
            }
            Head::Mf(head) => {
                match cfg.fusion {
                    Some(Fusion::Cll) => {
                        for (dec, f) in self.arch.decoders.iter().zip(&streams) {
                            decoded.push(*dec.decode(ctx, &f.saliency())?.last().expect("three levels"));
                        }
                    }
                    Some(scheme) => {
                        let fused = fuse_multiscale(ctx, scheme, &streams[0].saliency(), &streams[1].saliency())?;
                        decoded.push(*self.arch.decoders[0].decode(ctx, &fused)?.last().expect("three levels"));
                    }
                    None => decoded.push(*self.arch.decoders[0].decode(ctx, &streams[0].saliency())?.last().expect("three levels")),
                }
                head.forward(ctx, &decoded)?
            }
        };
        ctx.graph.check_finite(logits, "head")?;
        let saliency = ctx.graph.sigmoid(logits);
        Ok(ModelOutput { logits, saliency, rgb: rgb_f, depth: depth_f, decoded })
    }

    /// Evaluation-mode forward (running normalization statistics, no tape gradients).
    pub fn predict(&self, rgb: Option<&Tensor<S>>, depth: Option<&Tensor<S>>) -> Result<Prediction<S>> {
        self.predict_with(BnMode::Running, rgb, depth)
    }

    pub fn predict_with(&self, bn_mode: BnMode, rgb: Option<&Tensor<S>>, depth: Option<&Tensor<S>>) -> Result<Prediction<S>> {
        let mut ctx = Forward::new(&self.params, bn_mode, false);
        let rgb = if self.arch.config.streams.uses_rgb() { rgb.map(|t| ctx.input(t.clone())) } else { None };
        let depth = if self.arch.config.streams.uses_depth() { depth.map(|t| ctx.input(t.clone())) } else { None };
        let out = self.forward(&mut ctx, rgb, depth)?;
        let grab = |vars: Vec<Var>| vars.into_iter().map(|v| ctx.value(v).clone()).collect();
        Ok(Prediction {
            logits: ctx.value(out.logits).clone(),
            saliency: ctx.value(out.saliency).clone(),
            rgb_supervision: grab(out.rgb_supervision()),
            depth_supervision: grab(out.depth_supervision()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_strings_round_trip() {
        for v in TABLE_VARIANTS.iter().copied().chain(["RGBD64MF_CLL_MID", "Depth64MF_DIL", "RGBD16SC_MEG", "RGBD16MF_CLL"]) {
            let cfg: ModelConfig = v.parse().unwrap();
            assert_eq!(cfg.variant(), v);
        }
        let c: ModelConfig = "RGBD64MF_CLL".parse().unwrap();
        assert_eq!((c.streams, c.channels, c.head, c.fusion), (Streams::Rgbd, 64, HeadKind::Mf, Some(Fusion::Cll)));
        let c: ModelConfig = "RGB16SC".parse().unwrap();
        assert_eq!((c.streams, c.channels, c.head, c.fusion), (Streams::RgbOnly, 16, HeadKind::Sc, None));
    }

    #[test]
    fn invalid_variants_are_rejected() {
        for v in ["RGBD16SC_CLL", "RGBD64MF", "RGB64MF_ADD", "RGB32MF", "RGB64XX", "Gray16SC", "RGB16SC_MID", "RGBD64MF_CLL_MID_X", ""] {
            assert!(v.parse::<ModelConfig>().is_err(), "{v}");
        }
    }

    #[test]
    fn groups_partition_trainable_parameters() {
        let cfg: ModelConfig = "RGBD16MF_CLL".parse().unwrap();
        let model = SaliencyModel::<f32>::new(cfg.with_base_width(2), 0).unwrap();
        let (bb, heads) = model.parameter_groups().unwrap();
        assert_eq!(bb.len() + heads.len(), model.params.trainable_ids().count());
        for id in &bb {
            assert!(model.params.entry(*id).name.contains(".backbone."));
        }
        for id in &heads {
            assert!(!model.params.entry(*id).name.contains(".backbone."));
        }
        assert!(model.params.find("decoder_rgb.block1.conv.weight").is_some());
        assert!(model.params.find("head.conv1.weight").is_some());
        assert!(model.params.find("rgb.backbone.layer4.2.conv3.weight").is_some());
    }

    #[test]
    fn missing_depth_is_an_input_error() {
        let cfg: ModelConfig = "RGBD16MF_CLL".parse().unwrap();
        let model = SaliencyModel::<f32>::new(cfg.with_base_width(1), 0).unwrap();
        let rgb = Tensor::zeros(&[1, 3, 16, 112, 112]);
        assert!(matches!(model.predict(Some(&rgb), None), Err(Error::Input(_))));
    }
}
