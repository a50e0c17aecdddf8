//! Overlap and classification scores, seed aggregation, cluster matching and saliency.

mod hungarian;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{Image, Mask};
use crate::error::{invalid, shape, Error, Result};
use crate::models::{DifferentiableModel, Mode};
use crate::tensor::Tensor;

pub use hungarian::{brute_force_assignment, hungarian_max};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub r#fn: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.r#fn + self.tn
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            r#fn: self.r#fn + other.r#fn,
            tn: self.tn + other.tn,
        }
    }
}

/// A ratio score; `defined` is false when its denominator was zero and the value fell back to 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub value: f64,
    pub defined: bool,
}

fn ratio(num: u64, den: u64) -> Score {
    if den == 0 {
        Score {
            value: 0.0,
            defined: false,
        }
    } else {
        Score {
            value: num as f64 / den as f64,
            defined: true,
        }
    }
}

/// Counts for `positive_class` over flat label arrays.
pub fn confusion_from_labels(pred: &[u8], gt: &[u8], positive_class: u8) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(shape(format!("prediction has {} labels, ground truth {}", pred.len(), gt.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == positive_class, g == positive_class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn same_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape(format!("mask {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

pub fn confusion_counts(pred: &Mask, gt: &Mask, positive_class: u8) -> Result<ConfusionCounts> {
    same_dims(pred, gt)?;
    confusion_from_labels(pred.data(), gt.data(), positive_class)
}

/// Jaccard index of the non-zero pixels of two flat masks; two empty masks score 1.
pub fn iou_labels(pred: &[u8], gt: &[u8]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(shape(format!("prediction has {} labels, ground truth {}", pred.len(), gt.len())));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &g) in pred.iter().zip(gt) {
        let (p, g) = (p != 0, g != 0);
        inter += u64::from(p && g);
        union += u64::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn iou(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims(pred, gt)?;
    iou_labels(pred.data(), gt.data())
}

/// Dice coefficient `2|A∩B|/(|A|+|B|)` of the non-zero pixels; two empty masks score 1.
pub fn dice_coefficient(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims(pred, gt)?;
    let bin = |m: &Mask| m.data().iter().map(|&v| u8::from(v != 0)).collect::<Vec<_>>();
    let c = confusion_from_labels(&bin(pred), &bin(gt), 1)?;
    let den = 2 * c.tp + c.fp + c.r#fn;
    Ok(if den == 0 { 1.0 } else { 2.0 * c.tp as f64 / den as f64 })
}

pub fn f1(c: &ConfusionCounts) -> Score {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.r#fn)
}

pub fn recall(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.r#fn)
}

pub fn precision(c: &ConfusionCounts) -> Score {
    ratio(c.tp, c.tp + c.fp)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

/// F1 over multilabel 0/1 targets, averaged across label columns.
pub fn multilabel_f1(pred: &[Vec<u8>], gt: &[Vec<u8>], averaging: Averaging) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(shape("multilabel prediction and truth need equal, non-zero row counts"));
    }
    let k = gt[0].len();
    if pred.iter().chain(gt).any(|r| r.len() != k) {
        return Err(shape("ragged multilabel rows"));
    }
    let per: Vec<ConfusionCounts> = (0..k)
        .map(|j| {
            let p: Vec<u8> = pred.iter().map(|r| r[j]).collect();
            let g: Vec<u8> = gt.iter().map(|r| r[j]).collect();
            confusion_from_labels(&p, &g, 1)
        })
        .collect::<Result<_>>()?;
    Ok(average_f1(&per, averaging))
}

/// One-vs-rest F1 for single-label classification over `k` classes.
pub fn multiclass_f1(pred: &[usize], gt: &[usize], k: usize, averaging: Averaging) -> Result<f64> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(shape("prediction and truth need equal, non-zero lengths"));
    }
    if pred.iter().chain(gt).any(|&v| v >= k) {
        return Err(invalid(format!("class id out of range for {k} classes")));
    }
    let per: Vec<ConfusionCounts> = (0..k)
        .map(|j| {
            let p: Vec<u8> = pred.iter().map(|&v| u8::from(v == j)).collect();
            let g: Vec<u8> = gt.iter().map(|&v| u8::from(v == j)).collect();
            confusion_from_labels(&p, &g, 1)
        })
        .collect::<Result<_>>()?;
    Ok(average_f1(&per, averaging))
}

fn average_f1(per: &[ConfusionCounts], averaging: Averaging) -> f64 {
    match averaging {
        Averaging::Macro => per.iter().map(|c| f1(c).value).sum::<f64>() / per.len() as f64,
        Averaging::Micro => {
            let total = per.iter().fold(ConfusionCounts::default(), |a, c| a.merge(c));
            f1(&total).value
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMethod {
    /// Normal approximation, multiplier 1.96.
    #[default]
    Normal,
    StudentT,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedAggregate {
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci_halfwidth: f64,
    pub confidence: f64,
}

pub fn aggregate_seeds(values: &[f64]) -> Result<SeedAggregate> {
    aggregate_seeds_with(values, CiMethod::Normal)
}

pub fn aggregate_seeds_with(values: &[f64], method: CiMethod) -> Result<SeedAggregate> {
    let n = values.len();
    if n < 2 {
        return Err(invalid(format!("confidence interval needs at least 2 values, got {n}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("seed values".into()));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let multiplier = match method {
        CiMethod::Normal => 1.96,
        CiMethod::StudentT => StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .map_err(|e| invalid(e.to_string()))?
            .inverse_cdf(0.975),
    };
    Ok(SeedAggregate {
        values: values.to_vec(),
        mean,
        ci_halfwidth: multiplier * var.sqrt() / (n as f64).sqrt(),
        confidence: 0.95,
    })
}

/// Result of matching cluster ids to ground-truth classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMatch {
    /// `mapping[cluster] = Some(class)`; clusters left over when `k > classes` map to `None`.
    pub mapping: Vec<Option<usize>>,
    pub per_class_iou: Vec<f64>,
    pub miou: f64,
}

/// `table[cluster][class]` pixel co-occurrence counts.
pub fn cooccurrence(pred: &[u8], gt: &[u8], k: usize, classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != gt.len() {
        return Err(shape(format!("prediction has {} labels, ground truth {}", pred.len(), gt.len())));
    }
    let mut table = vec![vec![0u64; classes]; k];
    for (&p, &g) in pred.iter().zip(gt) {
        if p as usize >= k || g as usize >= classes {
            return Err(invalid(format!("label pair ({p}, {g}) outside {k} clusters × {classes} classes")));
        }
        table[p as usize][g as usize] += 1;
    }
    Ok(table)
}

/// Assigns clusters to classes one-to-one maximizing total intersection, then scores mean IoU.
pub fn hungarian_miou(pred: &[u8], gt: &[u8], k: usize, classes: usize) -> Result<ClusterMatch> {
    if k == 0 || classes == 0 {
        return Err(invalid("need at least one cluster and one class"));
    }
    let table = cooccurrence(pred, gt, k, classes)?;
    let n = k.max(classes);
    let mut square = vec![vec![0.0; n]; n];
    for (i, row) in table.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            square[i][j] = v as f64;
        }
    }
    let assign = hungarian_max(&square)?;
    let mapping: Vec<Option<usize>> = (0..k).map(|c| Some(assign[c]).filter(|&j| j < classes)).collect();
    let relabeled: Vec<u8> = pred
        .iter()
        .map(|&p| mapping[p as usize].map_or(u8::MAX, |c| c as u8))
        .collect();
    let per_class_iou: Vec<f64> = (0..classes)
        .map(|c| {
            let (mut inter, mut union) = (0u64, 0u64);
            for (&p, &g) in relabeled.iter().zip(gt) {
                let (p, g) = (p as usize == c, g as usize == c);
                inter += u64::from(p && g);
                union += u64::from(p || g);
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    let miou = per_class_iou.iter().sum::<f64>() / classes as f64;
    Ok(ClusterMatch {
        mapping,
        per_class_iou,
        miou,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    /// Row-major, non-negative.
    pub values: Vec<f64>,
    pub class_index: usize,
}

impl SaliencyMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `|∂ score_class / ∂ pixel|`, max over channels, without normalization.
pub fn saliency_raw(model: &dyn DifferentiableModel, image: &Image, class_index: usize) -> Result<SaliencyMap> {
    if !model.is_differentiable() {
        return Err(Error::NotDifferentiable("saliency needs input gradients".into()));
    }
    if model.mode() != Mode::Eval {
        return Err(invalid("saliency must be computed in eval mode"));
    }
    let x = Image::batch_tensor(&[image])?;
    let out = model.forward(&x)?;
    let (b, k) = out.dims2()?;
    if b != 1 || class_index >= k {
        return Err(invalid(format!("class {class_index} outside {k} scores")));
    }
    let mut seed = Tensor::zeros(&[1, k]);
    seed.data_mut()[class_index] = 1.0;
    let grad = model.input_gradient(&x, &seed)?;
    let (_, c, h, w) = grad.dims4()?;
    let gd = grad.data();
    let values = (0..h * w)
        .map(|px| (0..c).map(|ch| gd[ch * h * w + px].abs()).fold(0.0, f64::max))
        .collect();
    Ok(SaliencyMap {
        height: h,
        width: w,
        values,
        class_index,
    })
}

/// Raw saliency scaled into `[0, 1]` by its maximum; an all-zero map stays zero.
pub fn saliency_map(model: &dyn DifferentiableModel, image: &Image, class_index: usize) -> Result<SaliencyMap> {
    let mut map = saliency_raw(model, image, class_index)?;
    let mx = map.max();
    if mx > 0.0 {
        for v in &mut map.values {
            *v /= mx;
        }
    }
    Ok(map)
}
