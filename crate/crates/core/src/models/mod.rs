//! Micro-scale segmenters and classifiers built on the autograd graph.
//!
//! Parameters live in a [`ParamSet`] outside the graph. Every forward pass binds
//! them as fresh leaves ([`ParamSet::bind`]) so gradients can be read back by
//! parameter index after [`Graph::backward`].

mod params;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{config, invalid, shape, Error, Result};
use crate::store::ArrayFile;
use crate::tensor::Tensor;

pub use params::{Bound, ParamSet};

pub const CHECKPOINT_KIND: &str = "model_checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ConvUnet,
    WindowedAttention,
    ConvClassifier,
    AttentionClassifier,
}

impl Family {
    pub fn is_segmenter(self) -> bool {
        matches!(self, Self::ConvUnet | Self::WindowedAttention)
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Self::WindowedAttention | Self::AttentionClassifier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Train,
    Eval,
}

/// Architecture description. `depth` counts encoder stages for convolutional
/// families and transformer blocks for attention families.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub width: usize,
    pub depth: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    pub input_side: usize,
    pub patch: usize,
    pub window: usize,
    pub heads: usize,
}

/// Largest conventional window that tiles a `tokens`-wide feature grid.
pub fn default_window(tokens: usize) -> usize {
    [7, 4, 2].into_iter().find(|w| tokens.is_multiple_of(*w)).unwrap_or(1)
}

impl ModelSpec {
    /// Defaults: 3 conv stages or 2 attention blocks, RGB input at 224, patch 4, 2 heads.
    pub fn new(family: Family, width: usize, num_classes: usize) -> Self {
        let depth = if family.is_attention() { 2 } else { 3 };
        Self {
            family,
            width,
            depth,
            num_classes,
            in_channels: 3,
            input_side: 224,
            patch: 4,
            window: default_window(224 / 4),
            heads: 2,
        }
    }

    /// Re-targets the model spec to a square input of side `side`, choosing a window that fits.
    pub fn with_input_side(mut self, side: usize) -> Self {
        self.input_side = side;
        if self.patch > 0 && side.is_multiple_of(self.patch) {
            self.window = default_window(side / self.patch);
        }
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn with_in_channels(mut self, c: usize) -> Self {
        self.in_channels = c;
        self
    }

    /// Total spatial reduction between input and the coarsest feature map.
    pub fn downsampling(&self) -> usize {
        if self.family.is_attention() {
            self.patch
        } else {
            1 << self.depth.saturating_sub(1)
        }
    }

    /// Channels of the skip path in the attention segmenter.
    fn stem_width(&self) -> usize {
        (self.width / 2).max(4)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.in_channels == 0 {
            return Err(config("width, depth and in_channels must be positive"));
        }
        if self.num_classes < 2 && !self.family.is_segmenter() {
            return Err(config("classifiers need at least two classes"));
        }
        if self.num_classes == 0 {
            return Err(config("num_classes must be positive"));
        }
        if self.input_side == 0 || !self.input_side.is_multiple_of(self.downsampling()) {
            return Err(config(format!(
                "input side {} is not divisible by the downsampling factor {}",
                self.input_side,
                self.downsampling()
            )));
        }
        if self.family.is_attention() {
            if self.patch == 0 || self.window == 0 || self.heads == 0 {
                return Err(config("patch, window and heads must be positive"));
            }
            let tokens = self.input_side / self.patch;
            if !tokens.is_multiple_of(self.window) {
                return Err(config(format!(
                    "window {} does not tile the {tokens}×{tokens} token grid",
                    self.window
                )));
            }
            if !self.width.is_multiple_of(self.heads) {
                return Err(config(format!("{} heads do not divide width {}", self.heads, self.width)));
            }
        }
        Ok(())
    }
}

struct Init {
    rng: ChaCha8Rng,
    params: ParamSet,
}

impl Init {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let t = Tensor::from_fn(shape, |_| normal.sample(&mut self.rng));
        self.params.push(name, t);
    }

    fn conv(&mut self, name: &str, co: usize, ci: usize, k: usize) {
        self.he(format!("{name}.w"), &[co, ci, k, k], ci * k * k);
        self.params.push(format!("{name}.b"), Tensor::zeros(&[co]));
    }

    fn linear(&mut self, name: &str, o: usize, i: usize) {
        self.he(format!("{name}.w"), &[o, i], i);
        self.params.push(format!("{name}.b"), Tensor::zeros(&[o]));
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.params.push(format!("{name}.g"), Tensor::full(&[c], 1.0));
        self.params.push(format!("{name}.b"), Tensor::zeros(&[c]));
    }

    fn block(&mut self, name: &str, e: usize) {
        self.norm(&format!("{name}.ln1"), e);
        for p in ["q", "k", "v", "proj"] {
            self.conv(&format!("{name}.{p}"), e, e, 1);
        }
        self.norm(&format!("{name}.ln2"), e);
        self.conv(&format!("{name}.fc1"), 2 * e, e, 1);
        self.conv(&format!("{name}.fc2"), e, 2 * e, 1);
    }
}

fn conv_stage_width(width: usize, i: usize) -> usize {
    width << i
}

fn init_params(spec: &ModelSpec, seed: u64) -> ParamSet {
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: ParamSet::default(),
    };
    let (w, d, k, cin) = (spec.width, spec.depth, spec.num_classes, spec.in_channels);
    match spec.family {
        Family::ConvUnet => {
            let mut prev = cin;
            for i in 0..d {
                init.conv(&format!("enc{i}"), conv_stage_width(w, i), prev, 3);
                prev = conv_stage_width(w, i);
            }
            for i in (0..d - 1).rev() {
                let c = conv_stage_width(w, i);
                init.conv(&format!("dec{i}"), c, prev + c, 3);
                prev = c;
            }
            init.conv("head", k, prev, 1);
        }
        Family::ConvClassifier => {
            let mut prev = cin;
            for i in 0..d {
                init.conv(&format!("enc{i}"), conv_stage_width(w, i), prev, 3);
                prev = conv_stage_width(w, i);
            }
            init.linear("head", k, prev);
        }
        Family::WindowedAttention => {
            let s = spec.stem_width();
            init.conv("stem", s, cin, 3);
            init.conv("embed", w, s, spec.patch);
            for i in 0..d {
                init.block(&format!("blk{i}"), w);
            }
            init.conv("dec", s, w + s, 3);
            init.conv("head", k, s, 1);
        }
        Family::AttentionClassifier => {
            init.conv("embed", w, cin, spec.patch);
            for i in 0..d {
                init.block(&format!("blk{i}"), w);
            }
            init.norm("ln", w);
            init.linear("head", k, w);
        }
    }
    init.params
}

/// A segmenter or classifier with its parameters and train/eval mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    mode: Mode,
}

/// The contract trainers, metrics and saliency rely on.
pub trait DifferentiableModel {
    fn spec(&self) -> &ModelSpec;
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn mode(&self) -> Mode;
    fn set_mode(&mut self, mode: Mode);
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
    /// Gradient of `Σ seed ⊙ forward(input)` with respect to `input`.
    fn input_gradient(&self, input: &Tensor, seed: &Tensor) -> Result<Tensor>;
    fn is_differentiable(&self) -> bool {
        true
    }
}

pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    Ok(Model {
        spec: spec.clone(),
        params: init_params(spec, seed),
        mode: Mode::Train,
    })
}

pub fn parameter_count(model: &impl DifferentiableModel) -> usize {
    model.params().count()
}

/// Builds one conv and one attention segmenter, each within 20% of `budget` parameters,
/// by searching over width with the family defaults of [`ModelSpec::new`].
pub fn comparable_pair(budget: usize, num_classes: usize, input_side: usize, seed: u64) -> Result<(Model, Model)> {
    let mut out = Vec::new();
    for family in [Family::ConvUnet, Family::WindowedAttention] {
        let base = ModelSpec::new(family, 2, num_classes).with_input_side(input_side);
        let step = if family.is_attention() { base.heads } else { 1 };
        let mut best: Option<(usize, ModelSpec)> = None;
        for width in (step..=512).step_by(step) {
            let spec = ModelSpec { width, ..base.clone() };
            if spec.validate().is_err() {
                continue;
            }
            let n = spec_parameter_count(&spec);
            let gap = n.abs_diff(budget);
            if best.as_ref().is_none_or(|(g, _)| gap < *g) {
                best = Some((gap, spec));
            }
            if n > budget {
                break;
            }
        }
        let Some((gap, spec)) = best else {
            return Err(config(format!("no valid {family:?} spec for input side {input_side}")));
        };
        if gap as f64 >= 0.2 * budget as f64 {
            return Err(config(format!(
                "parameter budget {budget} is not reachable within 20% for {family:?}"
            )));
        }
        let s = if family.is_attention() { seed ^ 0x5eed_a77e } else { seed };
        out.push(build_model(&spec, s)?);
    }
    let attn = out.pop().expect("two models");
    let conv = out.pop().expect("two models");
    Ok((conv, attn))
}

/// Parameter count implied by a spec, without allocating.
pub fn spec_parameter_count(spec: &ModelSpec) -> usize {
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let (w, d, k, cin) = (spec.width, spec.depth, spec.num_classes, spec.in_channels);
    let block = |e: usize| 4 * e + 4 * conv(e, e, 1) + conv(2 * e, e, 1) + conv(e, 2 * e, 1);
    match spec.family {
        Family::ConvUnet => {
            let mut n = 0;
            let mut prev = cin;
            for i in 0..d {
                n += conv(w << i, prev, 3);
                prev = w << i;
            }
            for i in (0..d - 1).rev() {
                n += conv(w << i, prev + (w << i), 3);
                prev = w << i;
            }
            n + conv(k, prev, 1)
        }
        Family::ConvClassifier => {
            let mut n = 0;
            let mut prev = cin;
            for i in 0..d {
                n += conv(w << i, prev, 3);
                prev = w << i;
            }
            n + prev * k + k
        }
        Family::WindowedAttention => {
            let s = spec.stem_width();
            conv(s, cin, 3) + conv(w, s, spec.patch) + d * block(w) + conv(s, w + s, 3) + conv(k, s, 1)
        }
        Family::AttentionClassifier => conv(w, cin, spec.patch) + d * block(w) + 2 * w + w * k + k,
    }
}

fn conv_layer(g: &mut Graph, b: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = b.var(&format!("{name}.w"))?;
    let bias = b.var(&format!("{name}.b"))?;
    g.conv2d(x, w, Some(bias), stride, pad)
}

fn conv_relu(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = conv_layer(g, b, name, x, 1, 1)?;
    Ok(g.relu(y))
}

fn norm_layer(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Result<Var> {
    let gamma = b.var(&format!("{name}.g"))?;
    let beta = b.var(&format!("{name}.b"))?;
    g.layer_norm(x, gamma, beta)
}

fn attention_block(g: &mut Graph, b: &Bound, spec: &ModelSpec, name: &str, x: Var) -> Result<Var> {
    let n = norm_layer(g, b, &format!("{name}.ln1"), x)?;
    let q = conv_layer(g, b, &format!("{name}.q"), n, 1, 0)?;
    let k = conv_layer(g, b, &format!("{name}.k"), n, 1, 0)?;
    let v = conv_layer(g, b, &format!("{name}.v"), n, 1, 0)?;
    let a = g.window_attention(q, k, v, spec.window, spec.heads)?;
    let a = conv_layer(g, b, &format!("{name}.proj"), a, 1, 0)?;
    let x = g.add(x, a)?;
    let n = norm_layer(g, b, &format!("{name}.ln2"), x)?;
    let m = conv_layer(g, b, &format!("{name}.fc1"), n, 1, 0)?;
    let m = g.relu(m);
    let m = conv_layer(g, b, &format!("{name}.fc2"), m, 1, 0)?;
    g.add(x, m)
}

impl Model {
    /// Wraps externally produced parameters; names and shapes must match the model spec.
    pub fn from_parts(spec: ModelSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        let reference = init_params(&spec, 0);
        if reference.names() != params.names() {
            return Err(invalid("parameter names do not match the model spec"));
        }
        for (a, b) in reference.tensors().iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(shape(format!("parameter shape {:?} vs expected {:?}", b.shape(), a.shape())));
            }
        }
        Ok(Self {
            spec,
            params,
            mode: Mode::Train,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.count()
    }

    /// Width of the pooled representation fed to a classifier head.
    pub fn feature_dim(&self) -> usize {
        match self.spec.family {
            Family::ConvClassifier => conv_stage_width(self.spec.width, self.spec.depth - 1),
            Family::AttentionClassifier => self.spec.width,
            _ => self.spec.num_classes,
        }
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let (_, c, h, w) = g.value(x).dims4()?;
        let f = self.spec.downsampling();
        if c != self.spec.in_channels || h % f != 0 || w % f != 0 {
            return Err(shape(format!(
                "input {:?} incompatible with {} channels and downsampling {f}",
                g.value(x).shape(),
                self.spec.in_channels
            )));
        }
        if self.spec.family.is_attention() {
            let win = self.spec.window;
            if !(h / f).is_multiple_of(win) || !(w / f).is_multiple_of(win) {
                return Err(shape(format!("token grid {}×{} not tiled by window {win}", h / f, w / f)));
            }
        }
        Ok(())
    }

    /// Per-pixel logits for segmenters, pooled features for classifiers.
    pub fn features_with(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let spec = &self.spec;
        match spec.family {
            Family::ConvUnet => {
                let mut skips = Vec::with_capacity(spec.depth);
                let mut h = x;
                for i in 0..spec.depth {
                    if i > 0 {
                        h = g.max_pool2(h)?;
                    }
                    h = conv_relu(g, b, &format!("enc{i}"), h)?;
                    skips.push(h);
                }
                for i in (0..spec.depth - 1).rev() {
                    h = g.upsample(h, 2)?;
                    h = g.concat_channels(h, skips[i])?;
                    h = conv_relu(g, b, &format!("dec{i}"), h)?;
                }
                conv_layer(g, b, "head", h, 1, 0)
            }
            Family::WindowedAttention => {
                let skip = conv_relu(g, b, "stem", x)?;
                let mut t = conv_layer(g, b, "embed", skip, spec.patch, 0)?;
                for i in 0..spec.depth {
                    t = attention_block(g, b, spec, &format!("blk{i}"), t)?;
                }
                let u = g.upsample(t, spec.patch)?;
                let u = g.concat_channels(u, skip)?;
                let u = conv_relu(g, b, "dec", u)?;
                conv_layer(g, b, "head", u, 1, 0)
            }
            Family::ConvClassifier => {
                let mut h = x;
                for i in 0..spec.depth {
                    if i > 0 {
                        h = g.max_pool2(h)?;
                    }
                    h = conv_relu(g, b, &format!("enc{i}"), h)?;
                }
                g.global_avg_pool(h)
            }
            Family::AttentionClassifier => {
                let mut t = conv_layer(g, b, "embed", x, spec.patch, 0)?;
                for i in 0..spec.depth {
                    t = attention_block(g, b, spec, &format!("blk{i}"), t)?;
                }
                let t = norm_layer(g, b, "ln", t)?;
                g.global_avg_pool(t)
            }
        }
    }

    /// Logits: `B×K×H×W` for segmenters, `B×K` for classifiers.
    pub fn forward_with(&self, g: &mut Graph, b: &Bound, x: Var) -> Result<Var> {
        let f = self.features_with(g, b, x)?;
        if self.spec.family.is_segmenter() {
            return Ok(f);
        }
        self.head_with(g, b, f)
    }

    /// Applies the classifier head to pooled features.
    pub fn head_with(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        if self.spec.family.is_segmenter() {
            return Err(invalid("segmenters have no separate classification head"));
        }
        g.linear(features, b.var("head.w")?, b.var("head.b")?)
    }

    /// Replaces the classification head with a fresh `classes`-way linear layer.
    pub fn reset_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if self.spec.family.is_segmenter() {
            return Err(invalid("segmenters have no separate classification head"));
        }
        if classes < 2 {
            return Err(config("a classification head needs at least two outputs"));
        }
        let mut spec = self.spec.clone();
        spec.num_classes = classes;
        let fresh = init_params(&spec, seed);
        let mut params = ParamSet::default();
        for (name, t) in self.params.iter() {
            if name.starts_with("head.") {
                let idx = fresh.index_of(name).expect("fresh head");
                params.push(name.to_string(), fresh.tensors()[idx].clone());
            } else {
                params.push(name.to_string(), t.clone());
            }
        }
        self.spec = spec;
        self.params = params;
        Ok(())
    }

    /// Evaluates in chunks of `batch` images to bound memory.
    pub fn forward_batched(&self, input: &Tensor, batch: usize) -> Result<Tensor> {
        let n = input.dims4()?.0;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.max(1).min(n - start);
            parts.push(self.forward(&input.slice_batch(start, len)?)?);
            start += len;
        }
        Tensor::concat_batch(&parts.iter().collect::<Vec<_>>())
    }

    pub fn to_array_file(&self) -> ArrayFile {
        let meta = serde_json::json!({
            "version": CHECKPOINT_VERSION,
            "spec": self.spec,
        });
        let mut file = ArrayFile::new(CHECKPOINT_KIND, meta);
        for (name, t) in self.params.iter() {
            file.push_f64(name, t.shape().to_vec(), t.data().to_vec());
        }
        file
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_array_file().save(path)
    }

    pub fn from_array_file(file: &ArrayFile) -> Result<Self> {
        if file.kind != CHECKPOINT_KIND {
            return Err(Error::Format(format!("expected a model checkpoint, found {:?}", file.kind)));
        }
        let version = file.meta.get("version").and_then(|v| v.as_u64());
        if version != Some(u64::from(CHECKPOINT_VERSION)) {
            return Err(Error::Format(format!("unsupported checkpoint version {version:?}")));
        }
        let spec: ModelSpec = serde_json::from_value(file.meta["spec"].clone())?;
        let mut model = build_model(&spec, 0)?;
        let loaded = model.load_named(file)?;
        if loaded != model.params.len() {
            return Err(Error::Format(format!(
                "checkpoint covers {loaded} of {} parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_array_file(&ArrayFile::load(path)?)
    }

    /// Copies every array whose name matches a parameter; returns how many matched.
    /// Arrays with unknown names are ignored; a matching name with the wrong shape is an error.
    pub fn load_named(&mut self, file: &ArrayFile) -> Result<usize> {
        let mut n = 0;
        for arr in &file.arrays {
            let Some(idx) = self.params.index_of(&arr.name) else {
                continue;
            };
            let crate::store::ArrayData::F64(data) = &arr.data else {
                return Err(Error::Format(format!("parameter {} is not f64", arr.name)));
            };
            let target = &mut self.params.tensors_mut()[idx];
            if target.shape() != arr.shape.as_slice() {
                return Err(shape(format!(
                    "parameter {} has shape {:?}, file has {:?}",
                    arr.name,
                    target.shape(),
                    arr.shape
                )));
            }
            target.data_mut().copy_from_slice(data);
            n += 1;
        }
        Ok(n)
    }
}

impl DifferentiableModel for Model {
    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn mode(&self) -> Mode {
        self.mode
    }

    fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let x = g.constant(input.clone());
        let y = self.forward_with(&mut g, &b, x)?;
        Ok(g.value(y).clone())
    }

    fn input_gradient(&self, input: &Tensor, seed: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = self.params.bind_constant(&mut g);
        let x = g.leaf(input.clone());
        let y = self.forward_with(&mut g, &b, x)?;
        let mut grads = g.backward(y, seed.clone())?;
        Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(input.shape())))
    }
}

/// Linear, batch norm, ReLU, linear: embeds pooled features during self-supervised pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    params: ParamSet,
    pub in_dim: usize,
    pub dim: usize,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, dim: usize, seed: u64) -> Self {
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: ParamSet::default(),
        };
        init.linear("proj1", dim, in_dim);
        init.linear("proj2", dim, dim);
        Self {
            params: init.params,
            in_dim,
            dim,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn forward_with(&self, g: &mut Graph, b: &Bound, features: Var) -> Result<Var> {
        let h = g.linear(features, b.var("proj1.w")?, b.var("proj1.b")?)?;
        let h = g.batch_norm(h)?;
        let h = g.relu(h);
        g.linear(h, b.var("proj2.w")?, b.var("proj2.b")?)
    }
}

#[cfg(test)]
mod tests;
