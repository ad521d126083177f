//! Parameter storage and the layers the networks are assembled from.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchMoments, ConvSpec, Graph, NormStats, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// 3-D residual backbone of either stream.
    Backbone,
    /// Attention modules, decoders and output heads.
    Heads,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<S> {
    pub name: String,
    pub value: Arc<Tensor<S>>,
    pub group: Option<ParamGroup>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<S> {
    entries: Vec<ParamEntry<S>>,
    by_name: HashMap<String, ParamId>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: String, value: Tensor<S>, group: Option<ParamGroup>, trainable: bool) -> ParamId {
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry { name, value: Arc::new(value), group, trainable });
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<S> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<S> {
        &self.entries[id.0].value
    }

    pub fn shared(&self, id: ParamId) -> &Arc<Tensor<S>> {
        &self.entries[id.0].value
    }

    /// Mutable access; clones the tensor if a live graph still references it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.entries[id.0].trainable)
    }

    /// Replace a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<S>) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(Error::shape(entry.name.clone(), entry.value.shape(), value.shape()));
        }
        entry.value = Arc::new(value);
        Ok(())
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// Registers parameters under a dotted name prefix with a learning-rate group.
pub struct Init<'a, S: Scalar> {
    store: &'a mut ParamStore<S>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: Option<ParamGroup>,
}

impl<'a, S: Scalar> Init<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Init { store, rng, prefix: String::new(), group: None }
    }

    pub fn sub(&mut self, name: &str) -> Init<'_, S> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Init { store: self.store, rng: self.rng, prefix, group: self.group }
    }

    pub fn grouped(&mut self, name: &str, group: ParamGroup) -> Init<'_, S> {
        let mut sub = self.sub(name);
        sub.group = Some(group);
        sub
    }

    /// Same prefix, parameters assigned to `group`.
    pub fn in_group(&mut self, group: ParamGroup) -> Init<'_, S> {
        Init { store: self.store, rng: self.rng, prefix: self.prefix.clone(), group: Some(group) }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| S::of(self.rng.random_range(-bound..=bound))).collect();
        let t = Tensor::from_vec(shape, data).expect("shape product");
        self.store.register(self.full_name(name), t, self.group, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64, trainable: bool) -> ParamId {
        let t = Tensor::full(shape, S::of(value));
        self.store.register(self.full_name(name), t, self.group, trainable)
    }
}

/// How batch normalization obtains its statistics during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    /// Batch statistics; running averages are updated afterwards.
    Batch,
    /// Running statistics, not updated.
    Running,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// One forward evaluation: the tape plus read access to the parameters.
pub struct Forward<'a, S: Scalar> {
    pub graph: Graph<S>,
    store: &'a ParamStore<S>,
    bn_mode: BnMode,
    grad: bool,
    bn_updates: Vec<(ParamId, ParamId, BatchMoments<S>)>,
}

impl<'a, S: Scalar> Forward<'a, S> {
    pub fn new(store: &'a ParamStore<S>, bn_mode: BnMode, grad: bool) -> Self {
        Forward { graph: Graph::new(), store, bn_mode, grad, bn_updates: Vec::new() }
    }

    pub fn training(store: &'a ParamStore<S>) -> Self {
        Self::new(store, BnMode::Batch, true)
    }

    pub fn inference(store: &'a ParamStore<S>) -> Self {
        Self::new(store, BnMode::Running, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let trainable = self.grad && self.store.entry(id).trainable;
        self.graph.param(id, self.store.shared(id), trainable)
    }

    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        self.graph.value(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.graph.shape(v)
    }

    /// Split into the tape and the pending running-statistic updates.
    pub fn finish(self) -> (Graph<S>, BnUpdates<S>) {
        (self.graph, BnUpdates(self.bn_updates))
    }
}

/// Running-average updates collected from batch-statistic normalization.
pub struct BnUpdates<S>(Vec<(ParamId, ParamId, BatchMoments<S>)>);

impl<S: Scalar> BnUpdates<S> {
    pub fn apply(self, store: &mut ParamStore<S>) {
        let m = S::of(BN_MOMENTUM);
        for (mean_id, var_id, moments) in self.0 {
            for (dst, src) in [(mean_id, &moments.mean), (var_id, &moments.var)] {
                for (r, &b) in store.value_mut(dst).data_mut().iter_mut().zip(src) {
                    *r = (S::one() - m) * *r + m * b;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Convolution (3-D or, with a planar spec, 2-D) with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: ConvSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

/// Weight initialization scheme for [`Conv`].
#[derive(Clone, Copy, Debug)]
pub enum ConvInit {
    /// He-uniform, for layers followed by batch normalization and ReLU.
    He,
    /// Uniform in `±1/sqrt(fan_in)`.
    FanIn,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, cin: usize, cout: usize, spec: ConvSpec, planar: bool, bias: bool, scheme: ConvInit) -> Self {
        let mut shape = vec![cout, cin];
        if planar {
            shape.extend_from_slice(&spec.kernel[1..]);
        } else {
            shape.extend_from_slice(&spec.kernel);
        }
        let fan_in = (cin * spec.kernel.iter().product::<usize>()) as f64;
        let bound = match scheme {
            ConvInit::He => (6.0 / fan_in).sqrt(),
            ConvInit::FanIn => 1.0 / fan_in.sqrt(),
        };
        let mut scope = init.sub(name);
        let weight = scope.uniform("weight", &shape, bound);
        let bias = bias.then(|| scope.uniform("bias", &[cout], 1.0 / fan_in.sqrt()));
        Conv { weight, bias, spec, in_channels: cin, out_channels: cout }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = self.bias.map(|b| ctx.param(b));
        ctx.graph.conv(x, w, b, self.spec)
    }
}

/// Single-channel-capable 2-D transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvTranspose2d {
    /// Geometry mapping an `input`-sized plane to exactly `output`.
    pub fn exact_geometry(input: usize, output: usize) -> Result<(usize, usize)> {
        if input == 0 || output < input {
            return Err(Error::Input(format!("cannot upsample {input} to {output}")));
        }
        let stride = output / input;
        let kernel = output - (input - 1) * stride;
        Ok((kernel, stride))
    }

    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (cout * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut scope = init.sub(name);
        let weight = scope.uniform("weight", &[cin, cout, kernel, kernel], bound);
        let bias = scope.uniform("bias", &[cout], bound);
        ConvTranspose2d { weight, bias, kernel, stride }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.graph.conv_transpose2d(x, w, Some(b), self.kernel, self.stride, 0)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<S: Scalar>(init: &mut Init<'_, S>, name: &str, channels: usize) -> Self {
        let mut scope = init.sub(name);
        BatchNorm {
            gamma: scope.constant("weight", &[channels], 1.0, true),
            beta: scope.constant("bias", &[channels], 0.0, true),
            running_mean: scope.constant("running_mean", &[channels], 0.0, false),
            running_var: scope.constant("running_var", &[channels], 1.0, false),
        }
    }

    pub fn forward<S: Scalar>(&self, ctx: &mut Forward<'_, S>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        match ctx.bn_mode {
            BnMode::Batch => {
                let (y, moments) = ctx.graph.batch_norm(x, g, b, NormStats::Batch)?;
                if let Some(m) = moments {
                    ctx.bn_updates.push((self.running_mean, self.running_var, m));
                }
                Ok(y)
            }
            BnMode::Running => {
                let store = ctx.store;
                let mean = store.value(self.running_mean).data();
                let var = store.value(self.running_var).data();
                Ok(ctx.graph.batch_norm(x, g, b, NormStats::Fixed { mean, var })?.0)
            }
        }
    }
}
