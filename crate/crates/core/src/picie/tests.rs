use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

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

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn pointwise(seed: u64) -> PointwiseExtractor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointwiseExtractor {
        weight: (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
        bias: (0..4).map(|_| rng.random_range(-0.1..0.1)).collect(),
    }
}

fn fmap(t: Tensor) -> PixelFeatureMap {
    PixelFeatureMap::new(t, None).unwrap()
}

#[test]
fn photometric_properties() {
    let img = corpus(1, 16, 1).image(0).clone();
    assert_eq!(photometric_transform(&img, &ColorJitter::NONE, 5), img);
    for seed in 0..20 {
        let out = photometric_transform(&img, &ColorJitter::default(), seed);
        assert_eq!(out.dims(), img.dims());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    let shift = ColorJitter {
        brightness: 0.3,
        ..ColorJitter::NONE
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..20 {
        let out = photometric_transform(&img, &shift, seed);
        for _ in 0..200 {
            let (y1, x1, y2, x2) = (rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16), rng.random_range(0..16));
            let c = rng.random_range(0..3);
            if img.get(y1, x1, c) < img.get(y2, x2, c) {
                assert!(out.get(y1, x1, c) <= out.get(y2, x2, c));
            }
        }
    }
}

#[test]
fn geometric_transforms_invert_on_images_and_features() {
    let img = corpus(1, 12, 2).image(0).clone();
    let feats = random_tensor(&[2, 5, 12, 12], 1);
    assert_eq!(apply_geometric(GeometricTransform::Identity, &img).unwrap(), img);
    let h = GeometricTransform::Hflip;
    assert_eq!(apply_geometric(h, &apply_geometric(h, &feats).unwrap()).unwrap(), feats);
    for t in GeometricTransform::ALL {
        let back = apply_geometric(t.inverse(), &apply_geometric(t, &img).unwrap()).unwrap();
        assert_eq!(back, img);
        let back = apply_geometric(t.inverse(), &apply_geometric(t, &feats).unwrap()).unwrap();
        assert_eq!(back, feats);
    }
    assert!(apply_geometric(GeometricTransform::Rot90, &random_tensor(&[1, 2, 3, 4], 0)).is_err());
}

#[test]
fn pointwise_extractor_commutes_with_transforms() {
    let img = corpus(1, 10, 3).image(0).clone();
    let ex = pointwise(4);
    for t in GeometricTransform::ALL {
        let a = ex.pixel_features(&Image::batch_tensor(&[&t.apply_plane(&img)]).unwrap()).unwrap();
        let b = t.apply_tensor(&ex.pixel_features(&Image::batch_tensor(&[&img]).unwrap()).unwrap()).unwrap();
        assert_eq!(a, b, "{t:?}");
    }
}

fn blobs(seed: u64) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut pts = Vec::new();
    let mut origin = Vec::new();
    for i in 0..200 {
        let c = i % 2;
        let centre = if c == 0 { [-5.0, 0.0, 2.0] } else { [5.0, 1.0, -2.0] };
        pts.push(centre.iter().map(|m| m + noise.sample(&mut rng)).collect());
        origin.push(c);
    }
    (pts, origin)
}

fn partition(model: &ClusterModel, pts: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); model.k];
    for (i, p) in pts.iter().enumerate() {
        groups[model.assign(p)].push(i);
    }
    groups.sort();
    groups
}

#[test]
fn kmeans_single_cluster_is_the_mean() {
    let (pts, _) = blobs(1);
    let m = minibatch_kmeans(&pts, 1, 3, 32, 9).unwrap();
    for d in 0..3 {
        let mean = pts.iter().map(|p| p[d]).sum::<f64>() / pts.len() as f64;
        assert!((m.centroids[0][d] - mean).abs() < 1e-6);
    }
}

#[test]
fn kmeans_separates_blobs_like_full_lloyd() {
    let (pts, origin) = blobs(2);
    let m = minibatch_kmeans(&pts, 2, 5, 32, 4).unwrap();
    let init = ClusterModel::new(vec![pts[0].clone(), pts[1].clone()]).unwrap();
    let (full, trace) = lloyd(&pts, &init, 20).unwrap();
    assert_eq!(partition(&m, &pts), partition(&full, &pts));
    for (i, p) in pts.iter().enumerate() {
        assert_eq!(m.assign(p) == m.assign(&pts[0]), origin[i] == origin[0]);
    }
    assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-9));
}

#[test]
fn kmeans_input_order_only_relabels() {
    let (pts, _) = blobs(3);
    let mut shuffled = pts.clone();
    shuffled.reverse();
    let a = minibatch_kmeans(&pts, 2, 5, 32, 1).unwrap();
    let b = minibatch_kmeans(&shuffled, 2, 5, 32, 8).unwrap();
    assert_eq!(partition(&a, &pts), partition(&b, &pts));
}

#[test]
fn kmeans_needs_k_distinct_points() {
    let pts = vec![vec![1.0, 2.0]; 10];
    assert!(minibatch_kmeans(&pts, 2, 1, 4, 0).is_err());
    assert!(ClusterModel::new(vec![vec![0.0, 1.0], vec![0.0, 1.0]]).is_err());
}

fn clusters_d(d: usize, seed: u64) -> ClusterModel {
    let t = random_tensor(&[3, d], seed);
    ClusterModel::new(t.data().chunks(d).map(<[f64]>::to_vec).collect()).unwrap()
}

#[test]
fn identical_maps_at_centroids_give_equal_terms() {
    let c = clusters_d(4, 1);
    // 2×2 map whose pixels sit exactly on centroids 0, 1, 2, 0
    let ids = [0, 1, 2, 0];
    let f = Tensor::from_fn(&[1, 4, 2, 2], |i| c.centroids[ids[i % 4]][i / 4]);
    let l = picie_step_loss(&fmap(f.clone()), &fmap(f), &c, GeometricTransform::Identity).unwrap();
    let k = &l.value.components;
    assert_eq!(k["cross_12"], k["within_1"]);
    assert_eq!(k["cross_21"], k["within_2"]);
    assert_eq!(l.labels_1, vec![0, 1, 2, 0]);
}

#[test]
fn loss_is_the_sum_of_its_terms() {
    let c = clusters_d(8, 2);
    let l = picie_step_loss(
        &fmap(random_tensor(&[2, 8, 3, 3], 3)),
        &fmap(random_tensor(&[2, 8, 3, 3], 4)),
        &c,
        GeometricTransform::Identity,
    )
    .unwrap();
    let k = &l.value.components;
    let resum = k["within_1"] + k["within_2"] + k["cross_12"] + k["cross_21"];
    assert!((l.value.value - resum).abs() < 1e-12);
    assert!(l.value.value > 0.0);
}

#[test]
fn moving_toward_the_assigned_centroid_lowers_loss() {
    // logits −‖f − μ‖² make the margin linear in f, so the probe moves each pixel
    // along the centroid axis, towards its own centroid and away from the other
    let c = ClusterModel::new(vec![random_tensor(&[8], 11).into_data(), random_tensor(&[8], 12).into_data()]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..50 {
        let s: f64 = rng.random_range(0.05..0.95);
        let f = Tensor::from_fn(&[1, 8, 1, 1], |d| c.centroids[0][d] * (1.0 - s) + c.centroids[1][d] * s);
        let base = picie_step_loss(&fmap(f.clone()), &fmap(f.clone()), &c, GeometricTransform::Identity).unwrap();
        let y = base.labels_1[0] as usize;
        let moved = Tensor::from_fn(&[1, 8, 1, 1], |d| f.data()[d] + 0.02 * (c.centroids[y][d] - f.data()[d]));
        let after = picie_step_loss(&fmap(moved.clone()), &fmap(moved), &c, GeometricTransform::Identity).unwrap();
        assert_eq!(after.labels_1[0] as usize, y);
        assert!(after.value.value < base.value.value, "s = {s}");
    }
}

#[test]
fn step_loss_gradient_matches_finite_differences() {
    let c = clusters_d(8, 7);
    let f1 = random_tensor(&[1, 8, 4, 4], 8);
    let f2 = random_tensor(&[1, 8, 4, 4], 9);
    let t = GeometricTransform::Identity;
    let l = picie_step_loss(&fmap(f1.clone()), &fmap(f2.clone()), &c, t).unwrap();
    let h = 1e-6;
    for (which, grad) in [(0, &l.grad_f1), (1, &l.grad_f2)] {
        let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..f1.len() {
            let at = |s: f64| {
                let (mut a, mut b) = (f1.clone(), f2.clone());
                if which == 0 {
                    a.data_mut()[i] += s;
                } else {
                    b.data_mut()[i] += s;
                }
                picie_step_loss(&fmap(a), &fmap(b), &c, t).unwrap().value.value
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let g = grad.data()[i];
            assert!((fd - g).abs() / g.abs().max(1e-3 * scale) < 1e-3, "map {which} entry {i}: {fd} vs {g}");
        }
    }
}

#[test]
fn step_loss_rejects_misaligned_maps() {
    let c = clusters_d(8, 1);
    let a = fmap(random_tensor(&[1, 8, 4, 4], 1));
    let b = fmap(random_tensor(&[1, 8, 4, 2], 2));
    assert!(picie_step_loss(&a, &b, &c, GeometricTransform::Identity).is_err());
    let tagged = PixelFeatureMap::new(random_tensor(&[1, 8, 4, 4], 3), Some(GeometricTransform::Vflip)).unwrap();
    assert!(picie_step_loss(&a, &tagged, &c, GeometricTransform::Hflip).is_err());
}

fn extractor(side: usize, seed: u64) -> Model {
    build_model(&ModelSpec::new(Family::ConvUnet, 4, 8).with_input_side(side).with_depth(2), seed).unwrap()
}

fn quick(epochs: usize) -> PicieConfig {
    PicieConfig {
        epochs,
        batch_size: 4,
        pixels_per_image: 32,
        ..PicieConfig::default()
    }
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = corpus(6, 16, 4);
    let model = extractor(16, 1);
    let run = train_picie(model.clone(), &data, &quick(0), 2).unwrap();
    assert_eq!(run.extractor.model.params(), model.params());
    assert!(run.history.is_empty());
    assert_eq!(run.clusters.k, 2);
    assert_eq!(data.label_reads(), 0);
}

#[test]
fn training_reads_no_labels_and_is_reproducible() {
    let data = corpus(6, 16, 5);
    let a = train_picie(extractor(16, 1), &data, &quick(2), 7).unwrap();
    let b = train_picie(extractor(16, 1), &data, &quick(2), 7).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.clusters, b.clusters);
    assert_eq!(a.history.len(), 2);
    assert_eq!(a.history[1].lr, 1e-4);
    assert_eq!(data.label_reads(), 0);
}

#[test]
fn uniform_images_abort_with_collapse() {
    let samples = (0..4)
        .map(|i| crate::data::ProcessedSample {
            id: format!("u{i}"),
            image: Image::filled(16, 16, 3, 0.5),
            mask: None,
            class_labels: Vec::new(),
            steps: Vec::new(),
        })
        .collect();
    let cfg = PicieConfig {
        jitter: ColorJitter::NONE,
        ..quick(1)
    };
    let err = train_picie(extractor(16, 1), &Dataset::new(samples), &cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Collapse(_)), "{err}");
}

#[test]
fn segmentation_is_deterministic_and_flip_equivariant() {
    let img = corpus(1, 12, 6).image(0).clone();
    let ex = pointwise(2);
    let c = ClusterModel::new(vec![vec![0.0; 4], vec![0.3, -0.2, 0.1, 0.4], vec![-0.5, 0.2, 0.3, -0.1]]).unwrap();
    let m = segment_unsupervised(&ex, &c, &img).unwrap();
    assert_eq!(m, segment_unsupervised(&ex, &c, &img).unwrap());
    assert!(m.data().iter().all(|&v| (v as usize) < c.k));
    let h = GeometricTransform::Hflip;
    assert_eq!(segment_unsupervised(&ex, &c, &h.apply_plane(&img)).unwrap(), h.apply_plane(&m));
    let model = extractor(16, 3);
    let cm = ClusterModel::new(vec![vec![0.0; 8], vec![0.1; 8]]).unwrap();
    let img16 = corpus(1, 16, 7).image(0).clone();
    let mm = segment_unsupervised(&model, &cm, &img16).unwrap();
    assert_eq!(mm.dims(), (16, 16, 1));
}

proptest! {
    #[test]
    fn lloyd_objective_never_increases(seed in 0u64..1000, k in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let init = kmeans_plus_plus(&pts, k, &mut rng).unwrap();
        let (_, trace) = lloyd(&pts, &init, 10).unwrap();
        prop_assert!(trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn transforms_are_bijections(side in 1usize..9, c in 1usize..4, seed in 0u64..100) {
        let t = random_tensor(&[1, c, side, side], seed);
        for g in GeometricTransform::ALL {
            let once = g.apply_tensor(&t).unwrap();
            let mut a = once.data().to_vec();
            let mut b = t.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
            prop_assert_eq!(g.inverse().apply_tensor(&once).unwrap(), t.clone());
        }
    }
}

#[test]
fn reflect_pad_round_trips_and_commutes_with_transforms() {
    let t = random_tensor(&[2, 3, 6, 6], 21);
    let p = reflect_pad(&t, 2).unwrap();
    assert_eq!(p.shape(), &[2, 3, 10, 10]);
    assert_eq!(crop(&p, 2).unwrap(), t);
    // mirror without edge repeat: padded column 1 equals source column 1
    assert_eq!(p.data()[2 * 10 + 1], t.data()[1]);
    for g in GeometricTransform::ALL {
        assert_eq!(reflect_pad(&g.apply_tensor(&t).unwrap(), 2).unwrap(), g.apply_tensor(&p).unwrap());
    }
    assert!(reflect_pad(&t, 6).is_err());
    let big = random_tensor(&[2, 3, 10, 10], 22);
    let lhs: f64 = crop(&big, 2).unwrap().data().iter().zip(t.data()).map(|(a, b)| a * b).sum();
    let rhs: f64 = big.data().iter().zip(uncrop(&t, 2).unwrap().data()).map(|(a, b)| a * b).sum();
    assert!((lhs - rhs).abs() < 1e-12);
}

#[test]
fn standardized_images_ignore_brightness_and_contrast() {
    let t = Tensor::from_fn(&[1, 3, 4, 4], |i| 0.2 + ((i * 37) % 11) as f64 / 20.0);
    let shifted = t.map(|v| 1.5 * v + 0.1);
    let (a, b) = (standardize_images(&t).unwrap(), standardize_images(&shifted).unwrap());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-12));
    assert!(standardize_images(&Tensor::full(&[1, 1, 2, 2], 0.7)).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalization_gradient_matches_finite_differences() {
    let x = random_tensor(&[1, 4, 2, 3], 23);
    let w = random_tensor(&[1, 4, 2, 3], 24);
    let f = |x: &Tensor| normalize_pixels(x).unwrap().0.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
    let (u, norms) = normalize_pixels(&x).unwrap();
    let g = normalize_backward(&u, &norms, &w).unwrap();
    let h = 1e-6;
    for i in 0..x.len() {
        let (mut a, mut b) = (x.clone(), x.clone());
        a.data_mut()[i] += h;
        b.data_mut()[i] -= h;
        assert!(((f(&a) - f(&b)) / (2.0 * h) - g.data()[i]).abs() < 1e-7);
    }
}
