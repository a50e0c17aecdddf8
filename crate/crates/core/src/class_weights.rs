//! Pixel-frequency statistics and the two cross-entropy weight initializations.

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::error::{invalid, Result};

/// Per-class share of all labelled pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassFrequencies {
    pub freqs: Vec<f64>,
}

impl ClassFrequencies {
    pub fn new(freqs: Vec<f64>) -> Result<Self> {
        if freqs.is_empty() || freqs.iter().any(|f| !f.is_finite() || *f < 0.0) {
            return Err(invalid(format!("frequencies must be non-negative: {freqs:?}")));
        }
        if (freqs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("frequencies must sum to 1: {freqs:?}")));
        }
        Ok(Self { freqs })
    }

    pub fn num_classes(&self) -> usize {
        self.freqs.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    PixelRatio,
    MedianFrequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: Vec<f64>,
    pub scheme: WeightScheme,
}

impl ClassWeights {
    pub fn uniform(num_classes: usize) -> Self {
        Self {
            weights: vec![1.0; num_classes],
            scheme: WeightScheme::PixelRatio,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Which mass a pixel-ratio weight reflects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioOrientation {
    /// `1 − freq_c`: frequent classes (background) get the small weight.
    #[default]
    Complement,
    /// `freq_c` as-is.
    Direct,
}

pub fn pixel_class_frequencies(masks: &[&Mask], num_classes: usize) -> Result<ClassFrequencies> {
    if masks.is_empty() {
        return Err(invalid("no masks to count"));
    }
    if num_classes == 0 {
        return Err(invalid("need at least one class"));
    }
    let mut counts = vec![0u64; num_classes];
    for m in masks {
        for &v in m.data() {
            let v = v as usize;
            if v >= num_classes {
                return Err(invalid(format!("mask class {v} out of range for {num_classes} classes")));
            }
            counts[v] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    ClassFrequencies::new(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

const RATIO_FLOOR: f64 = 1e-6;

/// Pixel-ratio weights renormalized to sum to the number of classes.
pub fn pixel_ratio_weights(freqs: &ClassFrequencies, orientation: RatioOrientation) -> ClassWeights {
    let raw: Vec<f64> = freqs
        .freqs
        .iter()
        .map(|&f| match orientation {
            RatioOrientation::Complement => 1.0 - f,
            RatioOrientation::Direct => f,
        })
        .map(|w| w.max(RATIO_FLOOR))
        .collect();
    let k = raw.len() as f64;
    let total: f64 = raw.iter().sum();
    ClassWeights {
        weights: raw.iter().map(|w| w * k / total).collect(),
        scheme: WeightScheme::PixelRatio,
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// `median(freqs) / freq_c` for every class.
pub fn median_frequency_weights(freqs: &ClassFrequencies) -> Result<ClassWeights> {
    if let Some(c) = freqs.freqs.iter().position(|&f| f <= 0.0) {
        return Err(invalid(format!("class {c} has zero frequency; its weight is undefined")));
    }
    let med = median(&freqs.freqs);
    Ok(ClassWeights {
        weights: freqs.freqs.iter().map(|f| med / f).collect(),
        scheme: WeightScheme::MedianFrequency,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn fr(v: &[f64]) -> ClassFrequencies {
        ClassFrequencies::new(v.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn frequencies_by_count() {
        let m = Mask::new(2, 2, 1, vec![0, 0, 0, 1]).unwrap();
        assert_eq!(pixel_class_frequencies(&[&m], 2).unwrap().freqs, vec![0.75, 0.25]);
        let bg = Mask::filled(3, 3, 1, 0);
        assert_eq!(pixel_class_frequencies(&[&bg, &bg], 2).unwrap().freqs, vec![1.0, 0.0]);
        assert!(pixel_class_frequencies(&[], 2).is_err());
        assert!(pixel_class_frequencies(&[&m], 1).is_err());
    }

    #[test]
    fn pixel_ratio_cases() {
        let w = pixel_ratio_weights(&fr(&[0.5, 0.5]), RatioOrientation::Complement);
        assert_eq!(w.weights, vec![1.0, 1.0]);
        let w = pixel_ratio_weights(&fr(&[0.8521, 0.1479]), RatioOrientation::Complement);
        assert!(close(&w.weights, &[0.2958, 1.7042], 1e-12));
        let w = pixel_ratio_weights(&fr(&[1.0, 0.0]), RatioOrientation::Complement);
        assert!(w.weights.iter().all(|x| x.is_finite() && *x > 0.0));
        let w = pixel_ratio_weights(&fr(&[0.8521, 0.1479]), RatioOrientation::Direct);
        assert!(close(&w.weights, &[1.7042, 0.2958], 1e-12));
    }

    #[test]
    fn median_frequency_cases() {
        let w = median_frequency_weights(&fr(&[0.25; 4])).unwrap();
        assert_eq!(w.weights, vec![1.0; 4]);
        // independent hand evaluation: median of two = 0.5
        let w = median_frequency_weights(&fr(&[0.8521, 0.1479])).unwrap();
        assert!(close(&w.weights, &[0.5 / 0.8521, 0.5 / 0.1479], 1e-15));
        assert!(close(&w.weights, &[0.5868, 3.3807], 1e-4));
        let w = median_frequency_weights(&fr(&[0.5, 0.25, 0.25])).unwrap();
        assert_eq!(w.weights, vec![0.5, 1.0, 1.0]);
        assert!(median_frequency_weights(&fr(&[1.0, 0.0])).is_err());
    }

    fn freqs_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, 2..6).prop_map(|v| {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn permutation_equivariant(f in freqs_strategy(), rot in 0usize..5) {
            let r = rot % f.len();
            let mut p = f.clone();
            p.rotate_left(r);
            let mut wf = median_frequency_weights(&fr(&f)).unwrap().weights;
            wf.rotate_left(r);
            prop_assert!(close(&wf, &median_frequency_weights(&fr(&p)).unwrap().weights, 1e-12));
            let mut pf = pixel_ratio_weights(&fr(&f), RatioOrientation::Complement).weights;
            pf.rotate_left(r);
            prop_assert!(close(&pf, &pixel_ratio_weights(&fr(&p), RatioOrientation::Complement).weights, 1e-12));
        }

        #[test]
        fn rarest_class_heaviest(f in freqs_strategy()) {
            let rare = (0..f.len()).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            if f.iter().filter(|&&x| x == f[rare]).count() == 1 {
                for w in [
                    median_frequency_weights(&fr(&f)).unwrap().weights,
                    pixel_ratio_weights(&fr(&f), RatioOrientation::Complement).weights,
                ] {
                    let heavy = (0..w.len()).max_by(|&a, &b| w[a].total_cmp(&w[b])).unwrap();
                    prop_assert_eq!(heavy, rare);
                }
            }
        }

        #[test]
        fn median_class_weight_is_one(f in freqs_strategy().prop_filter("odd", |v| v.len() % 2 == 1)) {
            let med = median(&f);
            let w = median_frequency_weights(&fr(&f)).unwrap();
            let i = f.iter().position(|&x| x == med).unwrap();
            prop_assert_eq!(w.weights[i], 1.0);
        }
    }
}
