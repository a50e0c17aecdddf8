use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::harness::synthetic::{synthetic_dataset, SyntheticSpec};
use crate::models::{build_model, Family, ModelSpec};

fn corpus(n: usize, side: usize, seed: u64) -> Dataset {
    synthetic_dataset(&SyntheticSpec {
        n_images: n,
        image_size: side,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap()
}

fn classifier(family: Family, width: usize, side: usize, seed: u64) -> Model {
    build_model(&ModelSpec::new(family, width, 2).with_input_side(side).with_depth(1), seed).unwrap()
}

fn fast(epochs: usize) -> PretrainConfig {
    PretrainConfig {
        epochs,
        batch_size: 8,
        projection_dim: 16,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            ..OptimizerConfig::adam()
        },
        probe_size: 8,
        ..PretrainConfig::default()
    }
}

fn emb(v: &[f64]) -> Embedding {
    Embedding {
        vector: v.to_vec(),
        producer: "test".into(),
    }
}

#[test]
fn view_pairs() {
    let img = corpus(1, 16, 3).image(0).clone();
    let a = make_view_pair(&img, Regime::AugmentationAsymmetric, 9).unwrap();
    assert_eq!(a, make_view_pair(&img, Regime::AugmentationAsymmetric, 9).unwrap());
    assert_eq!(a.view_a.dims(), img.dims());
    assert_eq!(a.view_b.dims(), img.dims());
    assert_ne!(a.view_a, a.view_b);
    assert_eq!(a.recipes.len(), 2);
    assert!(a.view_a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let r = make_view_pair(&img, Regime::ArchitectureAsymmetric, 9).unwrap();
    assert_eq!((&r.view_a, &r.view_b), (&img, &img));
    assert!(r.recipes.is_empty());
}

#[test]
fn full_crop_without_jitter_is_identity() {
    let img = corpus(1, 12, 4).image(0).clone();
    let aug = ViewAugment {
        min_crop: 1.0,
        flip_prob: 0.0,
        jitter: ColorJitter::NONE,
    };
    let p = make_view_pair_with(&img, Regime::AugmentationAsymmetric, &aug, 1).unwrap();
    assert_eq!(p.view_a, img);
    let flipped = ViewAugment { flip_prob: 1.0, ..aug };
    let p = make_view_pair_with(&img, Regime::AugmentationAsymmetric, &flipped, 1).unwrap();
    assert_eq!(p.view_a.get(2, 0, 1), img.get(2, 11, 1));
}

#[test]
fn similarity_hand_cases() {
    let v = |a, b| similarity_loss(&emb(a), &emb(b)).unwrap().value;
    assert!(v(&[1.0, 2.0], &[2.0, 4.0]).abs() < 1e-15);
    assert!((v(&[1.0, 0.0], &[-3.0, 0.0]) - 2.0).abs() < 1e-15);
    assert!((v(&[1.0, 0.0], &[0.0, 5.0]) - 1.0).abs() < 1e-15);
    // cos 60° = 1/2
    assert!((v(&[1.0, 0.0], &[0.5, 0.75f64.sqrt()]) - 0.5).abs() < 1e-12);
    assert!(similarity_loss(&emb(&[0.0, 0.0]), &emb(&[1.0, 0.0])).is_err());
    assert!(similarity_loss(&emb(&[1.0]), &emb(&[1.0, 0.0])).is_err());
}

/// Objective over the online branches with the stop-gradient copies held fixed.
fn online_objective(a: &Tensor, b: &Tensor, at: &Tensor, bt: &Tensor) -> f64 {
    let (n, d) = a.dims2().unwrap();
    let cos = |x: &[f64], y: &[f64]| {
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        dot / (x.iter().map(|p| p * p).sum::<f64>().sqrt() * y.iter().map(|q| q * q).sum::<f64>().sqrt())
    };
    (0..n)
        .map(|i| {
            let r = i * d..(i + 1) * d;
            0.5 * (1.0 - cos(&a.data()[r.clone()], &bt.data()[r.clone()])) + 0.5 * (1.0 - cos(&b.data()[r.clone()], &at.data()[r]))
        })
        .sum::<f64>()
        / n as f64
}

#[test]
fn stop_gradient_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut t = || Tensor::from_fn(&[3, 5], |_| rng.random_range(-1.0..1.0));
    let (a, b, at, bt) = (t(), t(), t(), t());
    let l = similarity_loss_sg(&a, &b, &at, &bt).unwrap();
    assert!((l.value.value - online_objective(&a, &b, &at, &bt)).abs() < 1e-14);
    let h = 1e-6;
    for (which, grad) in [(0, &l.grad_a), (1, &l.grad_b)] {
        for i in 0..a.len() {
            let bump = |s: f64| {
                let (mut a2, mut b2) = (a.clone(), b.clone());
                if which == 0 {
                    a2.data_mut()[i] += s;
                } else {
                    b2.data_mut()[i] += s;
                }
                online_objective(&a2, &b2, &at, &bt)
            };
            let fd = (bump(h) - bump(-h)) / (2.0 * h);
            assert!((fd - grad.data()[i]).abs() < 1e-8, "branch {which} entry {i}: {fd} vs {}", grad.data()[i]);
        }
    }
}

#[test]
fn variance_detects_identical_rows() {
    let z = Tensor::from_fn(&[4, 3], |i| [1.0, 2.0, 3.0][i % 3]);
    assert!(embedding_variance(&z).unwrap() < 1e-15);
    let spread = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    // normalized rows e1, e2: per-dim variance 1/4
    assert!((embedding_variance(&spread).unwrap() - 0.25).abs() < 1e-15);
}

#[test]
fn pretrain_aug_regime_reduces_probe_loss_without_labels() {
    let data = corpus(16, 16, 7);
    let branch = Branch::new(classifier(Family::ConvClassifier, 4, 16, 1), 16, 2).unwrap();
    let run = pretrain(vec![branch], &data, Regime::AugmentationAsymmetric, &fast(6), 11).unwrap();
    let p = &run.history.probe_loss;
    assert_eq!(p.len(), 7);
    assert!(p.iter().all(|v| (0.0..=2.0).contains(v)));
    assert!(p[6] < p[0], "probe loss {p:?}");
    assert_eq!(data.label_reads(), 0);
    assert_eq!(run.branches[0].backbone.mode(), Mode::Eval);
}

#[test]
fn pretrain_arch_regime_runs_and_is_reproducible() {
    let data = corpus(8, 16, 8);
    let mk = || {
        vec![
            Branch::new(classifier(Family::ConvClassifier, 4, 16, 1), 16, 2).unwrap(),
            Branch::new(classifier(Family::AttentionClassifier, 8, 16, 3), 16, 4).unwrap(),
        ]
    };
    let r1 = pretrain(mk(), &data, Regime::ArchitectureAsymmetric, &fast(2), 3).unwrap();
    let r2 = pretrain(mk(), &data, Regime::ArchitectureAsymmetric, &fast(2), 3).unwrap();
    assert_eq!(r1.history, r2.history);
    assert_eq!(r1.branches.len(), 2);
    assert_eq!(data.label_reads(), 0);
    let same = vec![
        Branch::new(classifier(Family::ConvClassifier, 4, 16, 1), 16, 2).unwrap(),
        Branch::new(classifier(Family::ConvClassifier, 4, 16, 5), 16, 6).unwrap(),
    ];
    assert!(pretrain(same, &data, Regime::ArchitectureAsymmetric, &fast(1), 3).is_err());
    assert!(pretrain(mk(), &data, Regime::AugmentationAsymmetric, &fast(1), 3).is_err());
}

#[test]
fn constant_inputs_trip_the_collapse_guard() {
    let img = corpus(1, 16, 2).image(0).clone();
    let samples = (0..8)
        .map(|i| crate::data::ProcessedSample {
            id: format!("c{i}"),
            image: img.clone(),
            mask: None,
            class_labels: vec![0],
            steps: Vec::new(),
        })
        .collect();
    let data = Dataset::new(samples);
    let mk = || {
        vec![
            Branch::new(classifier(Family::ConvClassifier, 4, 16, 1), 16, 2).unwrap(),
            Branch::new(classifier(Family::AttentionClassifier, 8, 16, 3), 16, 4).unwrap(),
        ]
    };
    let err = pretrain(mk(), &data, Regime::ArchitectureAsymmetric, &fast(1), 0).unwrap_err();
    assert!(matches!(err, Error::Collapse(_)), "{err}");
}

#[test]
fn finetune_uses_the_requested_label_count() {
    let data = corpus(20, 16, 9);
    let val = corpus(8, 16, 10);
    let cfg = FinetuneConfig {
        epochs: 3,
        batch_size: 4,
        optimizer: OptimizerConfig {
            lr: 3e-3,
            ..OptimizerConfig::adam()
        },
        ..FinetuneConfig::default()
    };
    let run = finetune(classifier(Family::ConvClassifier, 4, 16, 1), &data, 0.3, Some(&val), &cfg, 4).unwrap();
    assert_eq!(run.labeled_ids.len(), 6);
    assert_eq!(run.history.len(), 3);
    assert!(run.history.iter().all(|e| e.val_f1.is_some_and(|f| (0.0..=1.0).contains(&f))));
    assert!(finetune(classifier(Family::ConvClassifier, 4, 16, 1), &data, 0.0, None, &cfg, 4).is_err());
}

#[test]
fn multilabel_outputs_are_independent_probabilities() {
    let data = corpus(8, 16, 11);
    let cfg = FinetuneConfig {
        epochs: 1,
        batch_size: 4,
        task: ClassTask::MultiLabel { classes: 3 },
        ..FinetuneConfig::default()
    };
    let run = finetune(classifier(Family::ConvClassifier, 4, 16, 1), &data, 1.0, None, &cfg, 2).unwrap();
    let imgs: Vec<&Image> = (0..4).map(|i| data.image(i)).collect();
    let p = predict_probabilities(&run.model, &imgs, cfg.task).unwrap();
    assert_eq!(p.shape(), &[4, 3]);
    assert!(p.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let f1 = evaluate_f1(&run.model, &data, cfg.task, Averaging::Macro).unwrap();
    assert!((0.0..=1.0).contains(&f1));
}

proptest! {
    #[test]
    fn similarity_bounded_and_scale_invariant(
        a in prop::collection::vec(-5.0f64..5.0, 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
        s in 0.1f64..10.0,
    ) {
        prop_assume!(norm(&a) > 1e-3 && norm(&b) > 1e-3);
        let l = similarity_loss(&emb(&a), &emb(&b)).unwrap().value;
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
        let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
        prop_assert!((similarity_loss(&emb(&scaled), &emb(&b)).unwrap().value - l).abs() < 1e-12);
        prop_assert!((similarity_loss(&emb(&b), &emb(&a)).unwrap().value - l).abs() < 1e-12);
    }
}
