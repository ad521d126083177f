//! Run configuration: a sectioned `key = value` file (TOML syntax) with
//! command-line overrides, validated field by field.
//!
//! ```text
//! [model]
//! variant = "RGBD64MF_CLL"
//! backbone_width = 64
//!
//! [data]
//! manifests = ["synth/manifest.tsv"]
//!
//! [train]
//! micro_batch = 2
//! ```
//!
//! Every key is optional except `model.variant` and `data.manifests`.
//! Relative paths resolve against the directory of the file.

use std::fs;
use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::data::clip::ClipOptions;
use crate::decoder::Fusion;
use crate::encoder::DEFAULT_BASE_WIDTH;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::{EvalOptions, DEFAULT_SAUC_SPLITS};
use crate::model::ModelConfig;
use crate::nn::BnMode;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub manifests: Vec<PathBuf>,
    /// Gaussian sigma as a fraction of the map width.
    pub sigma_fraction: f64,
    pub mean: f64,
    pub std: f64,
    /// Training windows are centered on frames `f` with `f % stride == stride / 2`.
    pub frame_stride: usize,
    /// Same lattice for validation and evaluation.
    pub eval_frame_stride: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let clip = ClipOptions::default();
        DataConfig {
            manifests: Vec::new(),
            sigma_fraction: clip.sigma_fraction,
            mean: clip.mean,
            std: clip.std,
            frame_stride: 1,
            eval_frame_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// Backbone weights loaded into every stream before training.
    pub pretrained: Option<PathBuf>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn new(model: ModelConfig, manifests: Vec<PathBuf>) -> Self {
        RunConfig {
            model,
            pretrained: None,
            data: DataConfig { manifests, ..Default::default() },
            train: TrainConfig::default(),
            loss: LossWeights::default(),
            eval: EvalOptions { sauc_splits: DEFAULT_SAUC_SPLITS, sauc_seed: 0 },
        }
    }

    /// Read `path` and apply `overrides` (`section.key=value`) on top.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let base = if base.as_os_str().is_empty() { Path::new(".") } else { base };
        Self::parse(&text, base, overrides).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse { path: path.to_path_buf(), line, message },
            other => other,
        })
    }

    /// Parse configuration text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
            Error::Parse { path: PathBuf::from("<config>"), line, message: e.message().to_string() }
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table, base)
    }

    fn from_table(mut table: Table, base: &Path) -> Result<Self> {
        let mut model = Section::take(&mut table, "model")?;
        let mut data = Section::take(&mut table, "data")?;
        let mut train = Section::take(&mut table, "train")?;
        let mut loss = Section::take(&mut table, "loss")?;
        let mut eval = Section::take(&mut table, "eval")?;
        if let Some(k) = table.keys().next() {
            return Err(Error::config(k.clone(), "unknown section or top-level key"));
        }

        let variant: String = model.req("variant", Section::string)?;
        let mut mc: ModelConfig = variant.parse()?;
        if let Some(f) = model.opt("fusion", Section::string)? {
            let f = Fusion::from_tag(&f).ok_or_else(|| Error::config("model.fusion", format!("unknown fusion scheme `{f}`")))?;
            if mc.fusion != Some(f) {
                return Err(Error::config("model.fusion", format!("`{}` does not match variant {variant}", f.tag())));
            }
        }
        let width = model.opt("backbone_width", Section::usize)?.unwrap_or(DEFAULT_BASE_WIDTH);
        if width == 0 || width % 4 != 0 {
            return Err(Error::config("model.backbone_width", format!("must be a positive multiple of 4, got {width}")));
        }
        mc = mc.with_base_width(width);
        let pretrained = model.opt("pretrained", Section::string)?.map(|p| absolute(base, &p));
        model.finish()?;

        let d = DataConfig::default();
        let manifests = data.req("manifests", Section::strings)?.iter().map(|p| absolute(base, p)).collect::<Vec<_>>();
        if manifests.is_empty() {
            return Err(Error::config("data.manifests", "at least one manifest is required"));
        }
        let dc = DataConfig {
            manifests,
            sigma_fraction: data.opt("sigma_fraction", Section::f64)?.unwrap_or(d.sigma_fraction),
            mean: data.opt("mean", Section::f64)?.unwrap_or(d.mean),
            std: data.opt("std", Section::f64)?.unwrap_or(d.std),
            frame_stride: data.opt("frame_stride", Section::usize)?.unwrap_or(d.frame_stride),
            eval_frame_stride: data.opt("eval_frame_stride", Section::usize)?.unwrap_or(d.eval_frame_stride),
        };
        data.finish()?;
        dc.validate()?;

        let t = TrainConfig::default();
        let tc = TrainConfig {
            total_epochs: train.opt("total_epochs", Section::usize)?.unwrap_or(t.total_epochs),
            momentum: train.opt("momentum", Section::f64)?.unwrap_or(t.momentum),
            weight_decay: train.opt("weight_decay", Section::f64)?.unwrap_or(t.weight_decay),
            lr_backbone: train.opt("lr_backbone", Section::f64)?.unwrap_or(t.lr_backbone),
            lr_heads: train.opt("lr_heads", Section::f64)?.unwrap_or(t.lr_heads),
            effective_batch: train.opt("effective_batch", Section::usize)?.unwrap_or(t.effective_batch),
            micro_batch: train.opt("micro_batch", Section::usize)?.unwrap_or(t.micro_batch),
            lr_milestones: train.opt("lr_milestones", Section::usizes)?.unwrap_or(t.lr_milestones),
            lr_gamma: train.opt("lr_gamma", Section::f64)?.unwrap_or(t.lr_gamma),
            seed: train.opt("seed", Section::u64)?.unwrap_or(t.seed),
            flip_p: train.opt("flip_p", Section::f64)?.unwrap_or(t.flip_p),
            bn_mode: train.opt("bn_mode", Section::bn_mode)?.unwrap_or(t.bn_mode),
            max_steps: train.opt("max_steps", Section::usize)?,
        };
        train.finish()?;
        tc.validate()?;

        let w = LossWeights::default();
        let lw = LossWeights::new(
            loss.opt("w_ce", Section::f64)?.unwrap_or(w.ce),
            loss.opt("w_cc", Section::f64)?.unwrap_or(w.cc),
            loss.opt("w_nss", Section::f64)?.unwrap_or(w.nss),
        )
        .map_err(|e| match e {
            Error::Config { field, message } if field.starts_with("w_") => Error::config(format!("loss.{field}"), message),
            other => other,
        })?;
        loss.finish()?;

        let ev = EvalOptions {
            sauc_splits: eval.opt("sauc_splits", Section::usize)?.unwrap_or(DEFAULT_SAUC_SPLITS),
            sauc_seed: eval.opt("sauc_seed", Section::u64)?.unwrap_or(0),
        };
        if ev.sauc_splits == 0 {
            return Err(Error::config("eval.sauc_splits", "must be at least 1"));
        }
        eval.finish()?;

        Ok(RunConfig { model: mc, pretrained, data: dc, train: tc, loss: lw, eval: ev })
    }

    /// Fully resolved configuration text; parsing it yields `self` again.
    pub fn snapshot(&self) -> String {
        let mut out = Table::new();
        let mut model = Table::new();
        model.insert("variant".into(), self.model.variant().into());
        model.insert("backbone_width".into(), int(self.model.geometry.base_width));
        if let Some(p) = &self.pretrained {
            model.insert("pretrained".into(), path_value(p));
        }
        out.insert("model".into(), model.into());

        let d = &self.data;
        let mut data = Table::new();
        data.insert("manifests".into(), Value::Array(d.manifests.iter().map(|p| path_value(p)).collect()));
        data.insert("sigma_fraction".into(), d.sigma_fraction.into());
        data.insert("mean".into(), d.mean.into());
        data.insert("std".into(), d.std.into());
        data.insert("frame_stride".into(), int(d.frame_stride));
        data.insert("eval_frame_stride".into(), int(d.eval_frame_stride));
        out.insert("data".into(), data.into());

        let t = &self.train;
        let mut train = Table::new();
        train.insert("total_epochs".into(), int(t.total_epochs));
        train.insert("momentum".into(), t.momentum.into());
        train.insert("weight_decay".into(), t.weight_decay.into());
        train.insert("lr_backbone".into(), t.lr_backbone.into());
        train.insert("lr_heads".into(), t.lr_heads.into());
        train.insert("effective_batch".into(), int(t.effective_batch));
        train.insert("micro_batch".into(), int(t.micro_batch));
        train.insert("lr_milestones".into(), Value::Array(t.lr_milestones.iter().map(|&m| int(m)).collect()));
        train.insert("lr_gamma".into(), t.lr_gamma.into());
        train.insert("seed".into(), int(t.seed as usize));
        train.insert("flip_p".into(), t.flip_p.into());
        train.insert("bn_mode".into(), if t.bn_mode == BnMode::Batch { "batch" } else { "running" }.into());
        if let Some(m) = t.max_steps {
            train.insert("max_steps".into(), int(m));
        }
        out.insert("train".into(), train.into());

        let mut loss = Table::new();
        loss.insert("w_ce".into(), self.loss.ce.into());
        loss.insert("w_cc".into(), self.loss.cc.into());
        loss.insert("w_nss".into(), self.loss.nss.into());
        out.insert("loss".into(), loss.into());

        let mut eval = Table::new();
        eval.insert("sauc_splits".into(), int(self.eval.sauc_splits));
        eval.insert("sauc_seed".into(), int(self.eval.sauc_seed as usize));
        out.insert("eval".into(), eval.into());

        toml::to_string(&out).expect("configuration tables serialize")
    }

    pub fn clip_options(&self) -> ClipOptions {
        ClipOptions {
            size: self.model.input_size(),
            mean: self.data.mean,
            std: self.data.std,
            sigma_fraction: self.data.sigma_fraction,
            load_depth: self.model.streams.uses_depth(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_fraction > 0.0 && self.sigma_fraction.is_finite()) {
            return Err(Error::config("data.sigma_fraction", format!("must be positive, got {}", self.sigma_fraction)));
        }
        if !self.mean.is_finite() {
            return Err(Error::config("data.mean", "must be finite"));
        }
        if !(self.std > 0.0 && self.std.is_finite()) {
            return Err(Error::config("data.std", format!("must be positive, got {}", self.std)));
        }
        if self.frame_stride == 0 {
            return Err(Error::config("data.frame_stride", "must be at least 1"));
        }
        if self.eval_frame_stride == 0 {
            return Err(Error::config("data.eval_frame_stride", "must be at least 1"));
        }
        Ok(())
    }
}

fn int(v: usize) -> Value {
    Value::Integer(v as i64)
}

fn path_value(p: &Path) -> Value {
    Value::String(p.to_string_lossy().into_owned())
}

fn absolute(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    std::path::absolute(&joined).unwrap_or(joined)
}

/// `section.key=value`; values use the file syntax, bare words are strings.
fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let (section, field) = key.trim().split_once('.').ok_or_else(|| Error::config(key.trim(), "override key must look like section.key"))?;
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let entry = table.entry(section.to_string()).or_insert_with(|| Value::Table(Table::new()));
    let Value::Table(t) = entry else {
        return Err(Error::config(section, "not a section"));
    };
    t.insert(field.to_string(), value);
    Ok(())
}

struct Section {
    name: &'static str,
    table: Table,
}

impl Section {
    fn take(root: &mut Table, name: &'static str) -> Result<Self> {
        match root.remove(name) {
            None => Ok(Section { name, table: Table::new() }),
            Some(Value::Table(table)) => Ok(Section { name, table }),
            Some(_) => Err(Error::config(name, "expected a [section]")),
        }
    }

    fn opt<T>(&mut self, key: &str, conv: fn(&Value) -> Option<T>) -> Result<Option<T>> {
        match self.table.remove(key) {
            None => Ok(None),
            Some(v) => conv(&v).map(Some).ok_or_else(|| Error::config(format!("{}.{key}", self.name), format!("invalid value {v}"))),
        }
    }

    fn req<T>(&mut self, key: &str, conv: fn(&Value) -> Option<T>) -> Result<T> {
        self.opt(key, conv)?.ok_or_else(|| Error::config(format!("{}.{key}", self.name), "missing required key"))
    }

    fn finish(self) -> Result<()> {
        match self.table.keys().next() {
            Some(k) => Err(Error::config(format!("{}.{k}", self.name), "unknown key")),
            None => Ok(()),
        }
    }

    fn string(v: &Value) -> Option<String> {
        v.as_str().map(str::to_string)
    }

    /// A list of strings, or one comma-separated string.
    fn strings(v: &Value) -> Option<Vec<String>> {
        match v {
            Value::String(s) => Some(s.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::to_string).collect()),
            Value::Array(a) => a.iter().map(|x| x.as_str().map(str::to_string)).collect(),
            _ => None,
        }
    }

    fn u64(v: &Value) -> Option<u64> {
        v.as_integer().and_then(|i| u64::try_from(i).ok())
    }

    fn usize(v: &Value) -> Option<usize> {
        v.as_integer().and_then(|i| usize::try_from(i).ok())
    }

    fn usizes(v: &Value) -> Option<Vec<usize>> {
        v.as_array()?.iter().map(Self::usize).collect()
    }

    fn f64(v: &Value) -> Option<f64> {
        v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
    }

    fn bn_mode(v: &Value) -> Option<BnMode> {
        match v.as_str()? {
            "batch" => Some(BnMode::Batch),
            "running" => Some(BnMode::Running),
            _ => None,
        }
    }
}
