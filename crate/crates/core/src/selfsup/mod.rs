//! Label-free joint-embedding pretraining and labeled fine-tuning of classifiers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::data::geometry::GeometricTransform;
use crate::data::{interpolate_bilinear, subsample_labels, ColorJitter, Dataset, Image};
use crate::error::{config, invalid, shape, Error, Result};
use crate::losses::{classification_cross_entropy, multilabel_bce, LossValue};
use crate::metrics::{multiclass_f1, multilabel_f1, Averaging};
use crate::models::{DifferentiableModel, Model, Mode, ProjectionHead};
use crate::optim::{Optimizer, OptimizerConfig, ScheduleConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// Two augmented views through one backbone.
    AugmentationAsymmetric,
    /// The same image through a conv and an attention backbone.
    ArchitectureAsymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewAugment {
    /// Smallest crop side as a fraction of the image side.
    pub min_crop: f64,
    pub flip_prob: f64,
    pub jitter: ColorJitter,
}

impl Default for ViewAugment {
    fn default() -> Self {
        Self {
            min_crop: 0.6,
            flip_prob: 0.5,
            jitter: ColorJitter::default(),
        }
    }
}

/// Crop window, flip and colour factors used to produce one view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewRecipe {
    pub crop_y: usize,
    pub crop_x: usize,
    pub crop_h: usize,
    pub crop_w: usize,
    pub hflip: bool,
    pub jitter: crate::data::JitterDraw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPair {
    pub view_a: Image,
    pub view_b: Image,
    pub provenance: Regime,
    /// Recipes of the two views; empty for the architecture regime.
    pub recipes: Vec<ViewRecipe>,
}

fn draw_recipe(image: &Image, aug: &ViewAugment, rng: &mut ChaCha8Rng) -> ViewRecipe {
    let (h, w, _) = image.dims();
    let scale = rng.random_range(aug.min_crop.clamp(0.05, 1.0)..=1.0);
    let crop_h = ((h as f64 * scale).round() as usize).clamp(1, h);
    let crop_w = ((w as f64 * scale).round() as usize).clamp(1, w);
    ViewRecipe {
        crop_y: rng.random_range(0..=h - crop_h),
        crop_x: rng.random_range(0..=w - crop_w),
        crop_h,
        crop_w,
        hflip: rng.random_bool(aug.flip_prob.clamp(0.0, 1.0)),
        jitter: aug.jitter.draw(rng),
    }
}

/// Crops, resizes back to the source size, flips and colour-jitters.
pub fn apply_recipe(image: &Image, r: &ViewRecipe) -> Result<Image> {
    let (h, w, c) = image.dims();
    if r.crop_y + r.crop_h > h || r.crop_x + r.crop_w > w || r.crop_h == 0 || r.crop_w == 0 {
        return Err(shape("crop window outside the image"));
    }
    let crop = Image::from_fn(r.crop_h, r.crop_w, c, |y, x, ch| image.get(r.crop_y + y, r.crop_x + x, ch));
    let mut view = interpolate_bilinear(&crop, h, w)?;
    if r.hflip {
        view = GeometricTransform::Hflip.apply_plane(&view);
    }
    Ok(r.jitter.apply(&view))
}

pub fn make_view_pair(image: &Image, regime: Regime, seed: u64) -> Result<ViewPair> {
    make_view_pair_with(image, regime, &ViewAugment::default(), seed)
}

pub fn make_view_pair_with(image: &Image, regime: Regime, aug: &ViewAugment, seed: u64) -> Result<ViewPair> {
    match regime {
        Regime::ArchitectureAsymmetric => Ok(ViewPair {
            view_a: image.clone(),
            view_b: image.clone(),
            provenance: regime,
            recipes: Vec::new(),
        }),
        Regime::AugmentationAsymmetric => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ra = draw_recipe(image, aug, &mut rng);
            let rb = draw_recipe(image, aug, &mut rng);
            Ok(ViewPair {
                view_a: apply_recipe(image, &ra)?,
                view_b: apply_recipe(image, &rb)?,
                provenance: regime,
                recipes: vec![ra, rb],
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub producer: String,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(invalid("cosine similarity of a zero-norm or non-finite embedding"));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// `½[(1 − cos(e1, sg e2)) + (1 − cos(e2, sg e1))]`, in `[0, 2]`.
pub fn similarity_loss(e1: &Embedding, e2: &Embedding) -> Result<LossValue> {
    if e1.vector.len() != e2.vector.len() {
        return Err(shape(format!("embedding dims {} vs {}", e1.vector.len(), e2.vector.len())));
    }
    let c = cosine(&e1.vector, &e2.vector)?;
    let mut v = LossValue::single("similarity", 1.0 - c);
    v.components.insert("cosine".into(), c);
    Ok(v)
}

/// Batch similarity loss with gradients for the two online branches.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub value: LossValue,
    pub grad_a: Tensor,
    pub grad_b: Tensor,
}

/// Mean over rows of `½[(1 − cos(a, sg b̄)) + (1 − cos(b, sg ā))]`, where `ā`, `b̄` are
/// the stop-gradient copies. Gradients flow only into the online `a` and `b`.
pub fn similarity_loss_sg(a: &Tensor, b: &Tensor, a_target: &Tensor, b_target: &Tensor) -> Result<PairLoss> {
    let (n, d) = a.dims2()?;
    for t in [b, a_target, b_target] {
        if t.shape() != a.shape() {
            return Err(shape(format!("embedding batch {:?} vs {:?}", t.shape(), a.shape())));
        }
    }
    if n == 0 || d == 0 {
        return Err(invalid("empty embedding batch"));
    }
    let mut grad_a = Tensor::zeros(a.shape());
    let mut grad_b = Tensor::zeros(a.shape());
    let mut total = 0.0;
    // d/dx (1 − cos(x, t)) = −(t̂ − cos·x̂)/|x|
    let term = |x: &[f64], t: &[f64], g: &mut [f64]| -> Result<f64> {
        let c = cosine(x, t)?;
        let (nx, nt) = (norm(x), norm(t));
        for j in 0..d {
            g[j] = -0.5 * (t[j] / nt - c * x[j] / nx) / nx / n as f64;
        }
        Ok(1.0 - c)
    };
    for i in 0..n {
        let r = i * d..(i + 1) * d;
        total += 0.5 * term(&a.data()[r.clone()], &b_target.data()[r.clone()], &mut grad_a.data_mut()[r.clone()])?;
        total += 0.5 * term(&b.data()[r.clone()], &a_target.data()[r.clone()], &mut grad_b.data_mut()[r])?;
    }
    Ok(PairLoss {
        value: LossValue::single("similarity", total / n as f64),
        grad_a,
        grad_b,
    })
}

/// Mean over dimensions of the across-batch variance of L2-normalized embeddings.
pub fn embedding_variance(z: &Tensor) -> Result<f64> {
    let (n, d) = z.dims2()?;
    if n < 2 {
        return Ok(f64::INFINITY);
    }
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let r = &z.data()[i * d..(i + 1) * d];
            let nr = norm(r).max(1e-300);
            r.iter().map(|v| v / nr).collect()
        })
        .collect();
    let mut var = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        var += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
    }
    Ok(var / d as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub projection_dim: usize,
    pub augment: ViewAugment,
    pub collapse_threshold: f64,
    /// Images in the fixed probe batch used to track the objective.
    pub probe_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(),
            schedule: ScheduleConfig::cosine(),
            epochs: 100,
            batch_size: 16,
            projection_dim: 64,
            augment: ViewAugment::default(),
            collapse_threshold: 1e-6,
            probe_size: 16,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate(self.optimizer.lr)?;
        if self.batch_size < 2 || self.projection_dim == 0 {
            return Err(config("pretraining needs batch size ≥ 2 and a positive projection dim"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainHistory {
    /// Objective on the fixed probe batch; entry 0 is before training, entry `e` after epoch `e`.
    pub probe_loss: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub embedding_variance: Vec<f64>,
    pub lr: Vec<f64>,
}

/// A backbone with its projection head.
#[derive(Debug, Clone)]
pub struct Branch {
    pub backbone: Model,
    pub head: ProjectionHead,
}

impl Branch {
    pub fn new(backbone: Model, projection_dim: usize, seed: u64) -> Result<Self> {
        if backbone.spec().family.is_segmenter() {
            return Err(invalid("pretraining expects a classification backbone"));
        }
        let head = ProjectionHead::new(backbone.feature_dim(), projection_dim, seed);
        Ok(Self { backbone, head })
    }
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    /// One branch for the augmentation regime, conv then attention for the architecture regime.
    pub branches: Vec<Branch>,
    pub history: PretrainHistory,
}

struct BranchState {
    branch: Branch,
    opt_backbone: Optimizer,
    opt_head: Optimizer,
}

/// Embeds each input batch through one branch; returns embeddings and, when `grads`
/// holds a seed per input, applies the update at `lr`.
fn branch_pass(state: &mut BranchState, inputs: &[&Tensor], seeds: Option<(&[Tensor], f64)>) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let bb = state.branch.backbone.params().bind(&mut g);
    let bh = state.branch.head.params().bind(&mut g);
    let mut outs = Vec::new();
    for x in inputs {
        let xv = g.constant((*x).clone());
        let f = state.branch.backbone.features_with(&mut g, &bb, xv)?;
        outs.push(state.branch.head.forward_with(&mut g, &bh, f)?);
    }
    let values = outs.iter().map(|&v| g.value(v).clone()).collect();
    if let Some((seeds, lr)) = seeds {
        let mut grads = g.backward_many(outs.iter().copied().zip(seeds.iter().cloned()).collect())?;
        let gb = bb.grads(&mut grads, state.branch.backbone.params());
        let gh = bh.grads(&mut grads, state.branch.head.params());
        state.opt_backbone.step(state.branch.backbone.params_mut(), &gb, lr)?;
        state.opt_head.step(state.branch.head.params_mut(), &gh, lr)?;
    }
    Ok(values)
}

fn view_batches(images: &Dataset, idx: &[usize], regime: Regime, aug: &ViewAugment, seed: u64) -> Result<(Tensor, Tensor)> {
    let mut a = Vec::with_capacity(idx.len());
    let mut b = Vec::with_capacity(idx.len());
    for (slot, &i) in idx.iter().enumerate() {
        let pair = make_view_pair_with(images.image(i), regime, aug, seed ^ ((slot as u64) << 32))?;
        a.push(pair.view_a);
        b.push(pair.view_b);
    }
    Ok((
        Image::batch_tensor(&a.iter().collect::<Vec<_>>())?,
        Image::batch_tensor(&b.iter().collect::<Vec<_>>())?,
    ))
}

/// Evaluates (and optionally trains on) one batch; returns `(loss, variance)`.
fn pair_step(states: &mut [BranchState], xa: &Tensor, xb: &Tensor, lr: Option<f64>) -> Result<(f64, f64)> {
    let (za, zb) = if states.len() == 1 {
        let z = branch_pass(&mut states[0], &[xa, xb], None)?;
        (z[0].clone(), z[1].clone())
    } else {
        let za = branch_pass(&mut states[0], &[xa], None)?.remove(0);
        let zb = branch_pass(&mut states[1], &[xb], None)?.remove(0);
        (za, zb)
    };
    let loss = similarity_loss_sg(&za, &zb, &za, &zb)?;
    let var = embedding_variance(&za)?.min(embedding_variance(&zb)?);
    if let Some(lr) = lr {
        if states.len() == 1 {
            branch_pass(&mut states[0], &[xa, xb], Some((&[loss.grad_a.clone(), loss.grad_b.clone()], lr)))?;
        } else {
            branch_pass(&mut states[0], &[xa], Some((std::slice::from_ref(&loss.grad_a), lr)))?;
            branch_pass(&mut states[1], &[xb], Some((std::slice::from_ref(&loss.grad_b), lr)))?;
        }
    }
    Ok((loss.value.value, var))
}

/// Joint-embedding pretraining. `branches` holds one branch for the augmentation regime
/// or a conv and an attention branch for the architecture regime. Only images are read.
pub fn pretrain(branches: Vec<Branch>, images: &Dataset, regime: Regime, cfg: &PretrainConfig, seed: u64) -> Result<PretrainRun> {
    cfg.validate()?;
    let expected = match regime {
        Regime::AugmentationAsymmetric => 1,
        Regime::ArchitectureAsymmetric => 2,
    };
    if branches.len() != expected {
        return Err(invalid(format!("{regime:?} needs {expected} branch(es), got {}", branches.len())));
    }
    if regime == Regime::ArchitectureAsymmetric
        && branches[0].backbone.spec().family.is_attention() == branches[1].backbone.spec().family.is_attention()
    {
        return Err(invalid("architecture regime needs one conv and one attention backbone"));
    }
    if images.len() < 2 {
        return Err(invalid("pretraining needs at least two images"));
    }
    let mut states = branches
        .into_iter()
        .map(|mut branch| {
            branch.backbone.set_mode(Mode::Train);
            Ok(BranchState {
                opt_backbone: Optimizer::new(cfg.optimizer, branch.backbone.params())?,
                opt_head: Optimizer::new(cfg.optimizer, branch.head.params())?,
                branch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe: Vec<usize> = (0..images.len().min(cfg.probe_size.max(2))).collect();
    let (pa, pb) = view_batches(images, &probe, regime, &cfg.augment, seed ^ 0x0bad_cafe)?;
    let mut history = PretrainHistory::default();
    history.probe_loss.push(pair_step(&mut states, &pa, &pb, None)?.0);
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        order.shuffle(&mut rng);
        let (mut sum, mut steps, mut min_var) = (0.0, 0, f64::INFINITY);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            if idx.len() < 2 {
                continue;
            }
            let bseed = rng.random::<u64>();
            let (xa, xb) = view_batches(images, idx, regime, &cfg.augment, bseed)?;
            let (loss, var) = pair_step(&mut states, &xa, &xb, Some(lr))?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("similarity loss at epoch {epoch}, step {step}")));
            }
            if var < cfg.collapse_threshold {
                return Err(Error::Collapse(format!(
                    "embedding variance {var:.3e} below {:.1e} at epoch {epoch}, step {step}",
                    cfg.collapse_threshold
                )));
            }
            sum += loss;
            steps += 1;
            min_var = min_var.min(var);
        }
        history.lr.push(lr);
        history.train_loss.push(sum / steps.max(1) as f64);
        history.embedding_variance.push(min_var);
        history.probe_loss.push(pair_step(&mut states, &pa, &pb, None)?.0);
    }
    let branches = states
        .into_iter()
        .map(|mut s| {
            s.branch.backbone.set_mode(Mode::Eval);
            s.branch
        })
        .collect();
    Ok(PretrainRun { branches, history })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ClassTask {
    /// One class id per image (the first entry of its labels).
    SingleLabel { classes: usize },
    /// Any subset of classes per image, listed as ids.
    MultiLabel { classes: usize },
}

impl ClassTask {
    pub fn classes(self) -> usize {
        match self {
            Self::SingleLabel { classes } | Self::MultiLabel { classes } => classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub task: ClassTask,
    pub averaging: Averaging,
    /// Train only the head.
    pub freeze_backbone: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(),
            schedule: ScheduleConfig::cosine(),
            epochs: 50,
            batch_size: 16,
            task: ClassTask::SingleLabel { classes: 2 },
            averaging: Averaging::Macro,
            freeze_backbone: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub model: Model,
    pub labeled_ids: Vec<String>,
    pub history: Vec<FinetuneEpoch>,
    pub components: BTreeMap<String, f64>,
}

fn targets(data: &Dataset, idx: &[usize], task: ClassTask) -> Result<(Vec<usize>, Vec<Vec<u8>>)> {
    let k = task.classes();
    let mut single = Vec::new();
    let mut multi = Vec::new();
    for &i in idx {
        let labels = data.class_labels(i);
        if labels.iter().any(|&l| l as usize >= k) {
            return Err(invalid(format!("sample {i}: class id outside {k} classes")));
        }
        match task {
            ClassTask::SingleLabel { .. } => {
                let &first = labels
                    .first()
                    .ok_or_else(|| invalid(format!("sample {i} has no class label")))?;
                single.push(first as usize);
            }
            ClassTask::MultiLabel { .. } => {
                let mut row = vec![0u8; k];
                for &l in labels {
                    row[l as usize] = 1;
                }
                multi.push(row);
            }
        }
    }
    Ok((single, multi))
}

/// Per-image class probabilities: softmax rows, or independent sigmoids in multilabel mode.
pub fn predict_probabilities(model: &Model, images: &[&Image], task: ClassTask) -> Result<Tensor> {
    let logits = model.forward(&Image::batch_tensor(images)?)?;
    let (b, k) = logits.dims2()?;
    let mut out = logits.clone();
    match task {
        ClassTask::MultiLabel { .. } => {
            for v in out.data_mut() {
                *v = 1.0 / (1.0 + (-*v).exp());
            }
        }
        ClassTask::SingleLabel { .. } => {
            for r in 0..b {
                let row = &mut out.data_mut()[r * k..(r + 1) * k];
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for v in row.iter_mut() {
                    *v = (*v - m).exp() / z;
                }
            }
        }
    }
    Ok(out)
}

/// F1 of `model` on every sample of `data` (reads labels).
pub fn evaluate_f1(model: &Model, data: &Dataset, task: ClassTask, averaging: Averaging) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let imgs: Vec<&Image> = idx.iter().map(|&i| data.image(i)).collect();
    let probs = predict_probabilities(model, &imgs, task)?;
    let (single, multi) = targets(data, &idx, task)?;
    let k = task.classes();
    match task {
        ClassTask::SingleLabel { .. } => {
            let pred: Vec<usize> = probs
                .data()
                .chunks(k)
                .map(|r| {
                    let mut best = 0;
                    for j in 1..k {
                        if r[j] > r[best] {
                            best = j;
                        }
                    }
                    best
                })
                .collect();
            multiclass_f1(&pred, &single, k, averaging)
        }
        ClassTask::MultiLabel { .. } => {
            let pred: Vec<Vec<u8>> = probs.data().chunks(k).map(|r| r.iter().map(|&p| u8::from(p >= 0.5)).collect()).collect();
            multilabel_f1(&pred, &multi, averaging)
        }
    }
}

/// Attaches a fresh head and trains on `round(fraction·N)` labeled images of `train`.
pub fn finetune(
    backbone: Model,
    train: &Dataset,
    fraction: f64,
    val: Option<&Dataset>,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneRun> {
    cfg.optimizer.validate()?;
    cfg.schedule.validate(cfg.optimizer.lr)?;
    let split = subsample_labels(&train.ids(), fraction, seed)?;
    if split.labeled.is_empty() {
        return Err(invalid("label fraction selects no images"));
    }
    let labeled = train.subset(&split.labeled)?;
    let mut model = backbone;
    model.reset_head(cfg.task.classes(), seed ^ 0x4ead)?;
    model.set_mode(Mode::Train);
    let mut opt = Optimizer::new(cfg.optimizer, model.params())?;
    let head_mask: Vec<bool> = model.params().names().iter().map(|n| n.starts_with("head.")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut history = Vec::new();
    let mut last = LossValue::default();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        order.shuffle(&mut rng);
        let (mut sum, mut steps) = (0.0, 0);
        for idx in order.chunks(cfg.batch_size) {
            let imgs: Vec<&Image> = idx.iter().map(|&i| labeled.image(i)).collect();
            let (single, multi) = targets(&labeled, idx, cfg.task)?;
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let x = g.constant(Image::batch_tensor(&imgs)?);
            let y = model.forward_with(&mut g, &bound, x)?;
            let loss = match cfg.task {
                ClassTask::SingleLabel { .. } => classification_cross_entropy(g.value(y), &single)?,
                ClassTask::MultiLabel { .. } => multilabel_bce(g.value(y), &multi)?,
            };
            if !loss.value.value.is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at epoch {epoch}")));
            }
            let mut grads = g.backward(y, loss.grad)?;
            let mut per = bound.grads(&mut grads, model.params());
            if cfg.freeze_backbone {
                for (gt, &is_head) in per.iter_mut().zip(&head_mask) {
                    if !is_head {
                        gt.scale(0.0);
                    }
                }
            }
            opt.step(model.params_mut(), &per, lr)?;
            sum += loss.value.value;
            steps += 1;
            last = loss.value;
        }
        let val_f1 = match val {
            Some(v) => Some(evaluate_f1(&model, v, cfg.task, cfg.averaging)?),
            None => None,
        };
        history.push(FinetuneEpoch {
            epoch,
            lr,
            loss: sum / steps.max(1) as f64,
            val_f1,
        });
    }
    model.set_mode(Mode::Eval);
    Ok(FinetuneRun {
        model,
        labeled_ids: split.labeled,
        history,
        components: last.components,
    })
}

#[cfg(test)]
mod tests;
