//! Segmentation and classification training losses with analytic gradients.
//!
//! Every differentiable loss returns a [`Loss`]: the scalar value with its named
//! components plus the gradient with respect to the loss input (logits, or
//! probabilities for [`dice_loss`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::class_weights::ClassWeights;
use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Tensor;

/// Default Dice smoothing.
pub const DICE_EPS: f64 = 1e-5;

/// Per-pixel class ids for a `B×H×W` batch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegTarget {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl SegTarget {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(shape(format!(
                "target {batch}×{height}×{width} needs {} labels, got {}",
                batch * height * width,
                labels.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    fn check_against(&self, t: &Tensor) -> Result<(usize, usize, usize, usize)> {
        let (b, c, h, w) = t.dims4()?;
        if (b, h, w) != (self.batch, self.height, self.width) {
            return Err(shape(format!(
                "prediction {:?} vs target {}×{}×{}",
                t.shape(),
                self.batch,
                self.height,
                self.width
            )));
        }
        if c < 2 {
            return Err(invalid("segmentation needs at least two classes"));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l as usize >= c) {
            return Err(invalid(format!("label {bad} out of range for {c} classes")));
        }
        Ok((b, c, h, w))
    }
}

/// Argmax class map of one network, used as a constant target for its peer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoMask {
    pub target: SegTarget,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LossValue {
    pub value: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossValue {
    pub fn single(name: &str, value: f64) -> Self {
        Self {
            value,
            components: BTreeMap::from([(name.to_string(), value)]),
        }
    }
}

/// A loss value and its gradient with respect to the loss input.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub value: LossValue,
    pub grad: Tensor,
}

fn ensure_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("{what} contain non-finite entries")))
    }
}

/// Softmax over the channel axis of a `B×C×H×W` tensor.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    let hw = h * w;
    let src = logits.data();
    let mut out = Tensor::zeros(logits.shape());
    let dst = out.data_mut();
    for bi in 0..b {
        let base = bi * c * hw;
        for p in 0..hw {
            let mx = (0..c).map(|k| src[base + k * hw + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..c {
                let e = (src[base + k * hw + p] - mx).exp();
                dst[base + k * hw + p] = e;
                z += e;
            }
            for k in 0..c {
                dst[base + k * hw + p] /= z;
            }
        }
    }
    Ok(out)
}

/// Pulls a gradient with respect to softmax probabilities back to the logits.
pub fn softmax_backward(probs: &Tensor, dprobs: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = probs.dims4()?;
    let hw = h * w;
    let (p, dp) = (probs.data(), dprobs.data());
    let mut out = Tensor::zeros(probs.shape());
    let dz = out.data_mut();
    for bi in 0..b {
        let base = bi * c * hw;
        for px in 0..hw {
            let dot: f64 = (0..c).map(|k| p[base + k * hw + px] * dp[base + k * hw + px]).sum();
            for k in 0..c {
                let i = base + k * hw + px;
                dz[i] = p[i] * (dp[i] - dot);
            }
        }
    }
    Ok(out)
}

/// Soft Dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)` per class and image, averaged over both.
///
/// The gradient is with respect to `probs`.
pub fn dice_loss(probs: &Tensor, target: &SegTarget, eps: f64) -> Result<Loss> {
    let (b, c, h, w) = target.check_against(probs)?;
    ensure_finite(probs, "probabilities")?;
    let hw = h * w;
    let p = probs.data();
    for bi in 0..b {
        for px in 0..hw {
            let s: f64 = (0..c).map(|k| p[bi * c * hw + k * hw + px]).sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(invalid(format!("probabilities at pixel {px} of image {bi} sum to {s}")));
            }
        }
    }
    let norm = 1.0 / (b * c) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(probs.shape());
    for bi in 0..b {
        let labels = &target.labels[bi * hw..(bi + 1) * hw];
        for k in 0..c {
            let plane = &p[bi * c * hw + k * hw..bi * c * hw + (k + 1) * hw];
            let mut inter = 0.0;
            let mut psum = 0.0;
            let mut gsum = 0.0;
            for (&pv, &l) in plane.iter().zip(labels) {
                let g = if l as usize == k { 1.0 } else { 0.0 };
                inter += pv * g;
                psum += pv;
                gsum += g;
            }
            let num = 2.0 * inter + eps;
            let den = psum + gsum + eps;
            total += 1.0 - num / den;
            let gplane = &mut grad.data_mut()[bi * c * hw + k * hw..bi * c * hw + (k + 1) * hw];
            for (gv, &l) in gplane.iter_mut().zip(labels) {
                let g = if l as usize == k { 1.0 } else { 0.0 };
                *gv = -norm * (2.0 * g * den - num) / (den * den);
            }
        }
    }
    Ok(Loss {
        value: LossValue::single("dice", total * norm),
        grad,
    })
}

/// Dice loss on `softmax(logits)`, with the gradient taken through the softmax.
pub fn dice_loss_logits(logits: &Tensor, target: &SegTarget, eps: f64) -> Result<Loss> {
    ensure_finite(logits, "logits")?;
    let probs = softmax_channels(logits)?;
    let d = dice_loss(&probs, target, eps)?;
    Ok(Loss {
        grad: softmax_backward(&probs, &d.grad)?,
        value: d.value,
    })
}

/// Class-weighted cross-entropy, normalized by the total applied weight.
pub fn weighted_cross_entropy(logits: &Tensor, target: &SegTarget, weights: &ClassWeights) -> Result<Loss> {
    let (b, c, h, w) = target.check_against(logits)?;
    if weights.len() != c {
        return Err(invalid(format!("{} class weights for {c} classes", weights.len())));
    }
    ensure_finite(logits, "logits")?;
    let hw = h * w;
    let probs = softmax_channels(logits)?;
    let p = probs.data();
    let mut wsum = 0.0;
    let mut nll = 0.0;
    let mut grad = Tensor::zeros(logits.shape());
    for bi in 0..b {
        for px in 0..hw {
            let y = target.labels[bi * hw + px] as usize;
            let wy = weights.weights[y];
            let py = p[bi * c * hw + y * hw + px];
            nll += wy * -(py.max(f64::MIN_POSITIVE)).ln();
            wsum += wy;
            for k in 0..c {
                let i = bi * c * hw + k * hw + px;
                grad.data_mut()[i] = wy * (p[i] - if k == y { 1.0 } else { 0.0 });
            }
        }
    }
    grad.scale(1.0 / wsum);
    Ok(Loss {
        value: LossValue::single("ce", nll / wsum),
        grad,
    })
}

/// Average of Dice (on softmax probabilities) and weighted cross-entropy.
pub fn supervised_loss(logits: &Tensor, target: &SegTarget, weights: &ClassWeights) -> Result<Loss> {
    let dice = dice_loss_logits(logits, target, DICE_EPS)?;
    let ce = weighted_cross_entropy(logits, target, weights)?;
    let (d, e) = (dice.value.value, ce.value.value);
    let mut grad = dice.grad;
    grad.add_assign(&ce.grad);
    grad.scale(0.5);
    Ok(Loss {
        value: LossValue {
            value: 0.5 * (d + e),
            components: BTreeMap::from([("dice".to_string(), d), ("ce".to_string(), e)]),
        },
        grad,
    })
}

/// Per-pixel argmax over classes; ties go to the lowest class index.
pub fn pseudo_label(logits: &Tensor, source: &str) -> Result<PseudoMask> {
    let (b, c, h, w) = logits.dims4()?;
    ensure_finite(logits, "logits")?;
    let hw = h * w;
    let z = logits.data();
    let mut labels = Vec::with_capacity(b * hw);
    for bi in 0..b {
        for px in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if z[bi * c * hw + k * hw + px] > z[bi * c * hw + best * hw + px] {
                    best = k;
                }
            }
            labels.push(best as u8);
        }
    }
    Ok(PseudoMask {
        target: SegTarget::new(b, h, w, labels)?,
        source: source.to_string(),
    })
}

/// Unweighted Dice of this network's softmax against the peer's pseudo mask.
///
/// The pseudo mask is a constant; the gradient only reaches `logits_self`.
pub fn cross_teach_unsup_loss(logits_self: &Tensor, pseudo_other: &PseudoMask) -> Result<Loss> {
    let mut l = dice_loss_logits(logits_self, &pseudo_other.target, DICE_EPS)?;
    l.value.components = BTreeMap::from([("dice".to_string(), l.value.value)]);
    Ok(l)
}

/// `sup + unsup`.
pub fn total_semi_loss(sup: &LossValue, unsup: &LossValue) -> Result<LossValue> {
    total_semi_loss_weighted(sup, unsup, 1.0)
}

/// `sup + weight·unsup`; the weight defaults to 1 everywhere in the trainers.
pub fn total_semi_loss_weighted(sup: &LossValue, unsup: &LossValue, weight: f64) -> Result<LossValue> {
    if sup.value < 0.0 || unsup.value < 0.0 || weight < 0.0 {
        return Err(invalid("semi-supervised loss terms must be non-negative"));
    }
    let mut components = BTreeMap::from([
        ("supervised".to_string(), sup.value),
        ("unsupervised".to_string(), unsup.value),
    ]);
    for (k, v) in &sup.components {
        components.insert(format!("supervised.{k}"), *v);
    }
    Ok(LossValue {
        value: sup.value + weight * unsup.value,
        components,
    })
}

/// Mean softmax cross-entropy for `B×K` image-level logits.
pub fn classification_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    let (b, k) = logits.dims2()?;
    if labels.len() != b {
        return Err(shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    ensure_finite(logits, "logits")?;
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(invalid(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        total += -(row[y] - mx - z.ln());
        for (j, &v) in row.iter().enumerate() {
            let p = (v - mx).exp() / z;
            grad.data_mut()[i * k + j] = (p - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok(Loss {
        value: LossValue::single("ce", total / b as f64),
        grad,
    })
}

/// Mean per-class sigmoid binary cross-entropy for multilabel targets (`B×K` of 0/1).
pub fn multilabel_bce(logits: &Tensor, targets: &[Vec<u8>]) -> Result<Loss> {
    let (b, k) = logits.dims2()?;
    if targets.len() != b || targets.iter().any(|t| t.len() != k) {
        return Err(shape(format!("multilabel targets must be {b}×{k}")));
    }
    ensure_finite(logits, "logits")?;
    let n = (b * k) as f64;
    let mut grad = Tensor::zeros(&[b, k]);
    let mut total = 0.0;
    for (i, t) in targets.iter().enumerate() {
        for (j, &y) in t.iter().enumerate() {
            let z = logits.data()[i * k + j];
            let y = y as f64;
            // log(1 + e^z) computed stably
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let s = 1.0 / (1.0 + (-z).exp());
            grad.data_mut()[i * k + j] = (s - y) / n;
        }
    }
    Ok(Loss {
        value: LossValue::single("bce", total / n),
        grad,
    })
}

#[cfg(test)]
mod tests;
