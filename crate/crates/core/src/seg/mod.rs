//! Supervised and cross-teaching segmentation trainers.

use std::collections::BTreeMap;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::class_weights::ClassWeights;
use crate::data::{AugmentDraw, Dataset, Image, Mask};
use crate::error::{config, invalid, Error, Result};
use crate::losses::{
    cross_teach_unsup_loss, pseudo_label, softmax_channels, supervised_loss, total_semi_loss_weighted, PseudoMask,
    SegTarget,
};
use crate::metrics::iou_labels;
use crate::models::{Bound, DifferentiableModel, Model, Mode};
use crate::optim::{Optimizer, OptimizerConfig, ScheduleConfig};
use crate::tensor::Tensor;

/// Which network (or their averaged probabilities) is scored for cross-teaching runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalTarget {
    #[default]
    Conv,
    Attention,
    Ensemble,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Class weights for the cross-entropy term; uniform when absent.
    pub class_weights: Option<Vec<f64>>,
    pub num_classes: usize,
    pub augment: bool,
    /// Fraction of training images that carry labels; selects the batch composition rule.
    pub label_fraction: f64,
    /// Use the `(batch−1) + 1` composition at full labels. When disabled and the
    /// unlabeled pool is empty, batches are purely labeled.
    pub full_label_rule: bool,
    /// Multiplier on the unsupervised term; 1 gives the plain sum.
    pub unsup_weight: f64,
    pub eval_target: EvalTarget,
    /// Chunk size for validation forward passes.
    pub eval_batch: usize,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::adam(),
            schedule: ScheduleConfig::cosine(),
            epochs: 50,
            batch_size: 16,
            class_weights: None,
            num_classes: 2,
            augment: true,
            label_fraction: 0.1,
            full_label_rule: true,
            unsup_weight: 1.0,
            eval_target: EvalTarget::Conv,
            eval_batch: 32,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.schedule.validate(self.optimizer.lr)?;
        if self.batch_size < 2 {
            return Err(config("batch size must be at least 2"));
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(config("label fraction must lie in (0, 1]"));
        }
        if self.num_classes < 2 {
            return Err(config("segmentation needs at least two classes"));
        }
        if !(self.unsup_weight >= 0.0) {
            return Err(config("unsupervised weight must be non-negative"));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.num_classes || w.iter().any(|v| !(*v > 0.0)) {
                return Err(config("class weights need one positive value per class"));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> ClassWeights {
        match &self.class_weights {
            Some(w) => ClassWeights {
                weights: w.clone(),
                scheme: crate::class_weights::WeightScheme::PixelRatio,
            },
            None => ClassWeights::uniform(self.num_classes),
        }
    }
}

/// Indices into the labeled and unlabeled pools for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// `(labeled, unlabeled)` counts: half/half below full labels, `(batch−1) + 1` at full labels.
pub fn semi_composition(fraction: f64, batch_size: usize) -> Result<(usize, usize)> {
    if batch_size < 2 {
        return Err(invalid("batch size must be at least 2"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(invalid(format!("label fraction {fraction} outside (0, 1]")));
    }
    if fraction >= 1.0 {
        Ok((batch_size - 1, 1))
    } else {
        Ok((batch_size / 2, batch_size - batch_size / 2))
    }
}

/// Draws a batch without replacement from each pool.
pub fn compose_semi_batch(
    labeled_pool: usize,
    unlabeled_pool: usize,
    fraction: f64,
    batch_size: usize,
    seed: u64,
) -> Result<SemiBatch> {
    let (nl, nu) = semi_composition(fraction, batch_size)?;
    compose_with(labeled_pool, unlabeled_pool, nl, nu, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn compose_with(labeled_pool: usize, unlabeled_pool: usize, nl: usize, nu: usize, rng: &mut ChaCha8Rng) -> Result<SemiBatch> {
    if labeled_pool < nl || unlabeled_pool < nu {
        return Err(invalid(format!(
            "pools of {labeled_pool} labeled / {unlabeled_pool} unlabeled cannot fill {nl} + {nu}"
        )));
    }
    Ok(SemiBatch {
        labeled: sample_indices(rng, labeled_pool, nl).into_vec(),
        unlabeled: sample_indices(rng, unlabeled_pool, nu).into_vec(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's steps, by loss component.
    pub losses: BTreeMap<String, f64>,
    /// Validation IoU by model key, measured after the epoch.
    pub val_iou: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Validation IoU of the initial parameters, by model key.
    pub initial_val_iou: BTreeMap<String, f64>,
    /// Epoch (1-based count of completed epochs) whose parameters were kept; 0 = initial.
    pub best_epoch: usize,
    pub best_val_iou: Option<f64>,
}

impl TrainHistory {
    pub fn lr_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.lr).collect()
    }

    pub fn loss_trace(&self, key: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.losses.get(key).copied()).collect()
    }

    pub fn val_trace(&self, key: &str) -> Vec<f64> {
        self.epochs.iter().filter_map(|e| e.val_iou.get(key).copied()).collect()
    }
}

/// Images (and masks) of a validation or test set.
pub struct EvalSet<'a> {
    pub images: Vec<&'a Image>,
    pub masks: Vec<&'a Mask>,
}

impl<'a> EvalSet<'a> {
    /// Reads every mask of `data`; samples without masks are skipped.
    pub fn from_dataset(data: &'a Dataset) -> Self {
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for i in 0..data.len() {
            if let Some(m) = data.mask(i) {
                images.push(data.image(i));
                masks.push(m);
            }
        }
        Self { images, masks }
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Per-pixel argmax of `B×K×H×W` logits or probabilities, flattened per image.
pub fn argmax_masks(scores: &Tensor) -> Result<Vec<Vec<u8>>> {
    let (b, k, h, w) = scores.dims4()?;
    let hw = h * w;
    let d = scores.data();
    Ok((0..b)
        .map(|bi| {
            (0..hw)
                .map(|px| {
                    let mut best = 0;
                    for c in 1..k {
                        if d[(bi * k + c) * hw + px] > d[(bi * k + best) * hw + px] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect())
}

/// Mean per-image foreground IoU of argmax predictions from `probs_fn`.
fn eval_iou_with(set: &EvalSet, chunk: usize, mut probs_fn: impl FnMut(&Tensor) -> Result<Tensor>) -> Result<f64> {
    if set.is_empty() {
        return Err(invalid("empty evaluation set"));
    }
    let mut total = 0.0;
    for (imgs, masks) in set.images.chunks(chunk.max(1)).zip(set.masks.chunks(chunk.max(1))) {
        let x = Image::batch_tensor(imgs)?;
        let preds = argmax_masks(&probs_fn(&x)?)?;
        for (p, m) in preds.iter().zip(masks) {
            total += iou_labels(p, m.data())?;
        }
    }
    Ok(total / set.images.len() as f64)
}

pub fn evaluate_iou(model: &Model, set: &EvalSet, chunk: usize) -> Result<f64> {
    eval_iou_with(set, chunk, |x| model.forward(x))
}

/// IoU of the averaged softmax of two segmenters.
pub fn evaluate_iou_ensemble(a: &Model, b: &Model, set: &EvalSet, chunk: usize) -> Result<f64> {
    eval_iou_with(set, chunk, |x| {
        let mut pa = softmax_channels(&a.forward(x)?)?;
        pa.add_assign(&softmax_channels(&b.forward(x)?)?);
        Ok(pa)
    })
}

pub fn predict_masks(model: &Model, images: &[&Image], chunk: usize) -> Result<Vec<Mask>> {
    let mut out = Vec::new();
    for imgs in images.chunks(chunk.max(1)) {
        let x = Image::batch_tensor(imgs)?;
        for (p, img) in argmax_masks(&model.forward(&x)?)?.into_iter().zip(imgs) {
            out.push(Mask::new(img.height(), img.width(), 1, p)?);
        }
    }
    Ok(out)
}

fn batch_seed(seed: u64, epoch: usize, step: usize, slot: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ ((epoch as u64) << 40)
        ^ ((step as u64) << 20)
        ^ slot as u64
}

/// Stacks (optionally augmented) images and their masks for one step.
fn labeled_tensors(data: &Dataset, idx: &[usize], augment: bool, seed: u64) -> Result<(Tensor, SegTarget)> {
    let mut imgs = Vec::with_capacity(idx.len());
    let mut labels = Vec::new();
    for (slot, &i) in idx.iter().enumerate() {
        let mask = data
            .mask(i)
            .ok_or_else(|| invalid(format!("labeled sample {i} has no mask")))?;
        let (img, mask) = if augment {
            let d = AugmentDraw::from_seed(seed ^ slot as u64);
            (d.apply(data.image(i)), d.apply(mask))
        } else {
            (data.image(i).clone(), mask.clone())
        };
        labels.extend_from_slice(mask.data());
        imgs.push(img);
    }
    let x = Image::batch_tensor(&imgs.iter().collect::<Vec<_>>())?;
    let (b, _, h, w) = x.dims4()?;
    Ok((x, SegTarget::new(b, h, w, labels)?))
}

fn unlabeled_tensor(data: &Dataset, idx: &[usize], augment: bool, seed: u64) -> Result<Tensor> {
    let imgs: Vec<Image> = idx
        .iter()
        .enumerate()
        .map(|(slot, &i)| {
            if augment {
                AugmentDraw::from_seed(seed ^ (1 << 16) ^ slot as u64).apply(data.image(i))
            } else {
                data.image(i).clone()
            }
        })
        .collect();
    Image::batch_tensor(&imgs.iter().collect::<Vec<_>>())
}

fn check_finite(value: f64, what: &str, epoch: usize, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} loss at epoch {epoch}, step {step}")))
    }
}

fn add_parts(acc: &mut BTreeMap<String, f64>, parts: &BTreeMap<String, f64>) {
    for (k, v) in parts {
        *acc.entry(k.clone()).or_default() += v;
    }
}

fn mean_parts(acc: BTreeMap<String, f64>, steps: usize) -> BTreeMap<String, f64> {
    acc.into_iter().map(|(k, v)| (k, v / steps.max(1) as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct SupervisedRun {
    /// Parameters with the best validation IoU (the final ones when no validation set is given).
    pub model: Model,
    pub final_model: Model,
    pub history: TrainHistory,
}

/// Adam + schedule on `supervised_loss` over every labeled sample of `train`.
pub fn train_supervised(
    model: Model,
    train: &Dataset,
    val: Option<&EvalSet>,
    cfg: &SegTrainConfig,
    seed: u64,
) -> Result<SupervisedRun> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(invalid("supervised training needs labeled data"));
    }
    let mut model = model;
    model.set_mode(Mode::Train);
    let weights = cfg.weights();
    let mut opt = Optimizer::new(cfg.optimizer, model.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = TrainHistory::default();
    let mut best = model.clone();
    if let Some(v) = val {
        let iou = evaluate_iou(&model, v, cfg.eval_batch)?;
        history.initial_val_iou.insert("model".into(), iou);
        history.best_val_iou = Some(iou);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        order.shuffle(&mut rng);
        let mut acc = BTreeMap::new();
        let chunks: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (step, idx) in chunks.iter().enumerate() {
            let (x, target) = labeled_tensors(train, idx, cfg.augment, batch_seed(seed, epoch, step, 0))?;
            let mut g = Graph::new();
            let bound = model.params().bind(&mut g);
            let xv = g.constant(x);
            let y = model.forward_with(&mut g, &bound, xv)?;
            let loss = supervised_loss(g.value(y), &target, &weights)?;
            check_finite(loss.value.value, "supervised", epoch, step)?;
            let mut grads = g.backward(y, loss.grad)?;
            let per = bound.grads(&mut grads, model.params());
            opt.step(model.params_mut(), &per, lr)?;
            let mut parts = loss.value.components.clone();
            parts.insert("total".into(), loss.value.value);
            add_parts(&mut acc, &parts);
        }
        if !model.params().all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            losses: mean_parts(acc, chunks.len()),
            val_iou: BTreeMap::new(),
        };
        if let Some(v) = val {
            let iou = evaluate_iou(&model, v, cfg.eval_batch)?;
            rec.val_iou.insert("model".into(), iou);
            if history.best_val_iou.is_none_or(|b| iou > b) {
                history.best_val_iou = Some(iou);
                history.best_epoch = epoch + 1;
                best = model.clone();
            }
        }
        history.epochs.push(rec);
    }
    if val.is_none() {
        best = model.clone();
        history.best_epoch = cfg.epochs;
    }
    best.set_mode(Mode::Eval);
    model.set_mode(Mode::Eval);
    Ok(SupervisedRun {
        model: best,
        final_model: model,
        history,
    })
}

/// Everything one cross-teaching step computes, before any parameter update.
#[derive(Debug, Clone)]
pub struct CrossTeachStep {
    /// Targets the conv model was trained against (argmax of the attention model).
    pub pseudo_for_conv: Option<PseudoMask>,
    pub pseudo_for_attn: Option<PseudoMask>,
    pub conv_logits_unlabeled: Option<Tensor>,
    pub attn_logits_unlabeled: Option<Tensor>,
    pub conv_losses: BTreeMap<String, f64>,
    pub attn_losses: BTreeMap<String, f64>,
    pub conv_grads: Vec<Tensor>,
    pub attn_grads: Vec<Tensor>,
}

type BoundForward = (Graph, Bound, Var, Option<Var>);

/// Forward passes over the labeled and unlabeled halves sharing one parameter binding.
fn model_step(model: &Model, xl: &Tensor, xu: Option<&Tensor>) -> Result<BoundForward> {
    let mut g = Graph::new();
    let bound = model.params().bind(&mut g);
    let l = g.constant(xl.clone());
    let yl = model.forward_with(&mut g, &bound, l)?;
    let yu = match xu {
        Some(xu) => {
            let u = g.constant(xu.clone());
            Some(model.forward_with(&mut g, &bound, u)?)
        }
        None => None,
    };
    Ok((g, bound, yl, yu))
}

/// Both models score the labeled half with the supervised loss and each other's
/// argmax on the unlabeled half with the Dice loss; gradients are returned unapplied.
pub fn cross_teach_step(
    conv: &Model,
    attn: &Model,
    xl: &Tensor,
    target: &SegTarget,
    xu: Option<&Tensor>,
    weights: &ClassWeights,
    unsup_weight: f64,
) -> Result<CrossTeachStep> {
    let (gc, bc, ylc, yuc) = model_step(conv, xl, xu)?;
    let (ga, ba, yla, yua) = model_step(attn, xl, xu)?;
    let sup_c = supervised_loss(gc.value(ylc), target, weights)?;
    let sup_a = supervised_loss(ga.value(yla), target, weights)?;
    let mut out = CrossTeachStep {
        pseudo_for_conv: None,
        pseudo_for_attn: None,
        conv_logits_unlabeled: yuc.map(|v| gc.value(v).clone()),
        attn_logits_unlabeled: yua.map(|v| ga.value(v).clone()),
        conv_losses: BTreeMap::new(),
        attn_losses: BTreeMap::new(),
        conv_grads: Vec::new(),
        attn_grads: Vec::new(),
    };
    let mut seeds_c = vec![(ylc, sup_c.grad.clone())];
    let mut seeds_a = vec![(yla, sup_a.grad.clone())];
    let (unsup_c, unsup_a) = match (yuc, yua) {
        (Some(yuc), Some(yua)) => {
            let for_conv = pseudo_label(ga.value(yua), "attention")?;
            let for_attn = pseudo_label(gc.value(yuc), "conv")?;
            let uc = cross_teach_unsup_loss(gc.value(yuc), &for_conv)?;
            let ua = cross_teach_unsup_loss(ga.value(yua), &for_attn)?;
            seeds_c.push((yuc, scaled(&uc.grad, unsup_weight)));
            seeds_a.push((yua, scaled(&ua.grad, unsup_weight)));
            out.pseudo_for_conv = Some(for_conv);
            out.pseudo_for_attn = Some(for_attn);
            (uc.value, ua.value)
        }
        _ => (Default::default(), Default::default()),
    };
    let total_c = total_semi_loss_weighted(&sup_c.value, &unsup_c, unsup_weight)?;
    let total_a = total_semi_loss_weighted(&sup_a.value, &unsup_a, unsup_weight)?;
    out.conv_losses = loss_parts(&sup_c.value.value, &unsup_c.value, &total_c.value);
    out.attn_losses = loss_parts(&sup_a.value.value, &unsup_a.value, &total_a.value);
    let mut grads_c = gc.backward_many(seeds_c)?;
    let mut grads_a = ga.backward_many(seeds_a)?;
    out.conv_grads = bc.grads(&mut grads_c, conv.params());
    out.attn_grads = ba.grads(&mut grads_a, attn.params());
    Ok(out)
}

fn scaled(t: &Tensor, w: f64) -> Tensor {
    let mut t = t.clone();
    if w != 1.0 {
        t.scale(w);
    }
    t
}

fn loss_parts(sup: &f64, unsup: &f64, total: &f64) -> BTreeMap<String, f64> {
    BTreeMap::from([
        ("supervised".to_string(), *sup),
        ("unsupervised".to_string(), *unsup),
        ("total".to_string(), *total),
    ])
}

#[derive(Debug, Clone)]
pub struct CrossTeachRun {
    /// Best-validation snapshot of each network (final ones without validation).
    pub conv: Model,
    pub attn: Model,
    pub final_conv: Model,
    pub final_attn: Model,
    pub history: TrainHistory,
}

impl CrossTeachRun {
    /// IoU of the configured evaluation target on `set`, using the best snapshots.
    pub fn evaluate(&self, target: EvalTarget, set: &EvalSet, chunk: usize) -> Result<f64> {
        match target {
            EvalTarget::Conv => evaluate_iou(&self.conv, set, chunk),
            EvalTarget::Attention => evaluate_iou(&self.attn, set, chunk),
            EvalTarget::Ensemble => evaluate_iou_ensemble(&self.conv, &self.attn, set, chunk),
        }
    }
}

const TARGET_KEY: &str = "target";

fn val_scores(conv: &Model, attn: &Model, val: &EvalSet, cfg: &SegTrainConfig) -> Result<BTreeMap<String, f64>> {
    let c = evaluate_iou(conv, val, cfg.eval_batch)?;
    let a = evaluate_iou(attn, val, cfg.eval_batch)?;
    let t = match cfg.eval_target {
        EvalTarget::Conv => c,
        EvalTarget::Attention => a,
        EvalTarget::Ensemble => evaluate_iou_ensemble(conv, attn, val, cfg.eval_batch)?,
    };
    Ok(BTreeMap::from([
        ("conv".to_string(), c),
        ("attn".to_string(), a),
        (TARGET_KEY.to_string(), t),
    ]))
}

/// Joint training of a conv and an attention segmenter that teach each other on unlabeled images.
///
/// One epoch is `ceil((labeled + unlabeled) / batch_size)` steps. At full labels with
/// the composition rule on, the single unlabeled slot is drawn from the labeled images
/// with their masks ignored.
pub fn train_cross_teaching(
    conv: Model,
    attn: Model,
    labeled: &Dataset,
    unlabeled: &Dataset,
    val: Option<&EvalSet>,
    cfg: &SegTrainConfig,
    seed: u64,
) -> Result<CrossTeachRun> {
    cfg.validate()?;
    if !conv.spec().family.is_segmenter() || !attn.spec().family.is_segmenter() {
        return Err(invalid("cross-teaching needs two segmenters"));
    }
    if labeled.is_empty() {
        return Err(invalid("cross-teaching needs labeled data"));
    }
    let (nl, nu) = if unlabeled.is_empty() && !cfg.full_label_rule {
        (cfg.batch_size, 0)
    } else {
        semi_composition(cfg.label_fraction, cfg.batch_size)?
    };
    let reuse_labeled = unlabeled.is_empty() && nu > 0;
    let unlabeled_pool = if reuse_labeled { labeled } else { unlabeled };
    let nl = nl.min(labeled.len());
    let weights = cfg.weights();
    let (mut conv, mut attn) = (conv, attn);
    conv.set_mode(Mode::Train);
    attn.set_mode(Mode::Train);
    let mut opt_c = Optimizer::new(cfg.optimizer, conv.params())?;
    let mut opt_a = Optimizer::new(cfg.optimizer, attn.params())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = TrainHistory::default();
    let (mut best_c, mut best_a) = (conv.clone(), attn.clone());
    if let Some(v) = val {
        history.initial_val_iou = val_scores(&conv, &attn, v, cfg)?;
        history.best_val_iou = history.initial_val_iou.get(TARGET_KEY).copied();
    }
    let pool = labeled.len() + if reuse_labeled { 0 } else { unlabeled.len() };
    let steps = pool.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        let lr = cfg.schedule.lr_at(epoch, cfg.optimizer.lr);
        let mut acc = BTreeMap::new();
        for step in 0..steps {
            let batch = compose_with(labeled.len(), unlabeled_pool.len(), nl, nu, &mut rng)?;
            let bseed = batch_seed(seed, epoch, step, 0);
            let (xl, target) = labeled_tensors(labeled, &batch.labeled, cfg.augment, bseed)?;
            let xu = if batch.unlabeled.is_empty() {
                None
            } else {
                Some(unlabeled_tensor(unlabeled_pool, &batch.unlabeled, cfg.augment, bseed)?)
            };
            let out = cross_teach_step(&conv, &attn, &xl, &target, xu.as_ref(), &weights, cfg.unsup_weight)?;
            check_finite(out.conv_losses["total"], "conv", epoch, step)?;
            check_finite(out.attn_losses["total"], "attention", epoch, step)?;
            opt_c.step(conv.params_mut(), &out.conv_grads, lr)?;
            opt_a.step(attn.params_mut(), &out.attn_grads, lr)?;
            let prefixed = out
                .conv_losses
                .iter()
                .map(|(k, v)| (format!("conv.{k}"), *v))
                .chain(out.attn_losses.iter().map(|(k, v)| (format!("attn.{k}"), *v)))
                .collect();
            add_parts(&mut acc, &prefixed);
        }
        if !conv.params().all_finite() || !attn.params().all_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            losses: mean_parts(acc, steps),
            val_iou: BTreeMap::new(),
        };
        if let Some(v) = val {
            rec.val_iou = val_scores(&conv, &attn, v, cfg)?;
            let t = rec.val_iou[TARGET_KEY];
            if history.best_val_iou.is_none_or(|b| t > b) {
                history.best_val_iou = Some(t);
                history.best_epoch = epoch + 1;
                best_c = conv.clone();
                best_a = attn.clone();
            }
        }
        history.epochs.push(rec);
    }
    if val.is_none() {
        best_c = conv.clone();
        best_a = attn.clone();
        history.best_epoch = cfg.epochs;
    }
    for m in [&mut best_c, &mut best_a, &mut conv, &mut attn] {
        m.set_mode(Mode::Eval);
    }
    Ok(CrossTeachRun {
        conv: best_c,
        attn: best_a,
        final_conv: conv,
        final_attn: attn,
        history,
    })
}
