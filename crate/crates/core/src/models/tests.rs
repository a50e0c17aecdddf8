use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::class_weights::ClassWeights;
use crate::losses::{supervised_loss, SegTarget};

fn random_input(b: usize, c: usize, side: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[b, c, side, side], |_| rng.random_range(0.0..1.0))
}

fn all_specs(side: usize) -> Vec<ModelSpec> {
    vec![
        ModelSpec::new(Family::ConvUnet, 4, 2).with_input_side(side),
        ModelSpec::new(Family::WindowedAttention, 8, 2).with_input_side(side),
        ModelSpec::new(Family::ConvClassifier, 4, 3).with_input_side(side),
        ModelSpec::new(Family::AttentionClassifier, 8, 3).with_input_side(side),
    ]
}

#[test]
fn same_seed_same_parameters() {
    for spec in all_specs(32) {
        let a = build_model(&spec, 11).unwrap();
        let b = build_model(&spec, 11).unwrap();
        assert_eq!(a, b);
        let c = build_model(&spec, 12).unwrap();
        assert_ne!(a.params(), c.params());
    }
}

#[test]
fn conv_unet_full_resolution_shape() {
    let m = build_model(&ModelSpec::new(Family::ConvUnet, 4, 2), 0).unwrap();
    let y = m.forward(&random_input(1, 3, 224, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 224, 224]);
}

#[test]
fn attention_segmenter_full_resolution_shape() {
    let spec = ModelSpec::new(Family::WindowedAttention, 8, 2);
    assert_eq!(spec.window, 7);
    let m = build_model(&spec, 0).unwrap();
    let y = m.forward(&random_input(1, 3, 224, 1)).unwrap();
    assert_eq!(y.shape(), &[1, 2, 224, 224]);
}

#[test]
fn output_shapes_for_every_family() {
    for spec in all_specs(32) {
        let m = build_model(&spec, 3).unwrap();
        let y = m.forward(&random_input(2, 3, 32, 4)).unwrap();
        if spec.family.is_segmenter() {
            assert_eq!(y.shape(), &[2, spec.num_classes, 32, 32]);
        } else {
            assert_eq!(y.shape(), &[2, spec.num_classes]);
        }
    }
}

#[test]
fn spec_validation() {
    let mut spec = ModelSpec::new(Family::WindowedAttention, 8, 2);
    spec.window = 5;
    assert!(matches!(build_model(&spec, 0), Err(Error::Config(_))));
    let mut spec = ModelSpec::new(Family::ConvUnet, 8, 2).with_depth(4);
    spec.input_side = 36;
    assert!(matches!(build_model(&spec, 0), Err(Error::Config(_))));
    let mut spec = ModelSpec::new(Family::AttentionClassifier, 7, 2);
    spec.heads = 2;
    assert!(build_model(&spec, 0).is_err());
    assert_eq!(ModelSpec::new(Family::WindowedAttention, 8, 2).with_input_side(64).window, 4);
}

#[test]
fn parameter_count_matches_hand_count() {
    // conv_unet width 8, depth 3, RGB, K=2
    let conv = |co: usize, ci: usize, k: usize| co * ci * k * k + co;
    let expected = conv(8, 3, 3) + conv(16, 8, 3) + conv(32, 16, 3) + conv(16, 48, 3) + conv(8, 24, 3) + conv(2, 8, 1);
    let m = build_model(&ModelSpec::new(Family::ConvUnet, 8, 2), 0).unwrap();
    assert_eq!(parameter_count(&m), expected);
    let head = m.params().get("head.w").unwrap().len() + m.params().get("head.b").unwrap().len();
    assert_eq!(head, 2 * 8 + 2);
    for spec in all_specs(32) {
        let m = build_model(&spec, 0).unwrap();
        assert_eq!(spec_parameter_count(&spec), m.parameter_count());
    }
}

#[test]
fn doubling_width_quadruples_dominant_layers() {
    let small = build_model(&ModelSpec::new(Family::ConvUnet, 8, 2), 0).unwrap();
    let large = build_model(&ModelSpec::new(Family::ConvUnet, 16, 2), 0).unwrap();
    for name in ["enc1.w", "enc2.w", "dec1.w", "dec0.w"] {
        let ratio = large.params().get(name).unwrap().len() as f64 / small.params().get(name).unwrap().len() as f64;
        assert!((ratio - 4.0).abs() / 4.0 < 0.1, "{name}: {ratio}");
    }
}

#[test]
fn mode_switch_keeps_count() {
    let mut m = build_model(&ModelSpec::new(Family::ConvClassifier, 4, 2), 0).unwrap();
    let n = parameter_count(&m);
    m.set_mode(Mode::Eval);
    assert_eq!(m.mode(), Mode::Eval);
    assert_eq!(parameter_count(&m), n);
}

#[test]
fn comparable_pair_within_budget() {
    let (conv, attn) = comparable_pair(50_000, 2, 224, 7).unwrap();
    for m in [&conv, &attn] {
        let n = parameter_count(m) as f64;
        assert!((n - 50_000.0).abs() / 50_000.0 < 0.2, "{n}");
    }
    assert_eq!(conv.spec().family, Family::ConvUnet);
    assert_eq!(attn.spec().family, Family::WindowedAttention);
    let (c2, a2) = comparable_pair(50_000, 2, 224, 7).unwrap();
    assert_eq!((conv, attn), (c2, a2));
    assert!(matches!(comparable_pair(10, 2, 224, 7), Err(Error::Config(_))));
}

#[test]
fn every_parameter_receives_gradient() {
    for spec in all_specs(16).into_iter().filter(|s| s.family.is_segmenter()) {
        let m = build_model(&spec, 5).unwrap();
        let mut g = Graph::new();
        let b = m.params().bind(&mut g);
        let x = g.constant(random_input(2, 3, 16, 6));
        let y = m.forward_with(&mut g, &b, x).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = SegTarget::new(2, 16, 16, (0..512).map(|_| rng.random_range(0..2u8)).collect()).unwrap();
        let loss = supervised_loss(g.value(y), &t, &ClassWeights::uniform(2)).unwrap();
        let mut grads = g.backward(y, loss.grad).unwrap();
        let per = b.grads(&mut grads, m.params());
        for (name, gt) in m.params().names().iter().zip(&per) {
            assert!(gt.sq_norm() > 0.0, "{:?}: dead parameter {name}", spec.family);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_named_loading() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.s4ma");
    let m = build_model(&ModelSpec::new(Family::AttentionClassifier, 8, 3).with_input_side(32), 9).unwrap();
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.params(), m.params());
    assert_eq!(back.spec(), m.spec());

    let mut other = build_model(m.spec(), 10).unwrap();
    assert_eq!(other.load_named(&m.to_array_file()).unwrap(), m.params().len());
    assert_eq!(other.params(), m.params());

    let mut wrong = build_model(&ModelSpec::new(Family::AttentionClassifier, 16, 3).with_input_side(32), 0).unwrap();
    assert!(wrong.load_named(&m.to_array_file()).is_err());
}

#[test]
fn reset_head_keeps_backbone() {
    let mut m = build_model(&ModelSpec::new(Family::ConvClassifier, 4, 2).with_input_side(16), 1).unwrap();
    let before = m.params().get("enc0.w").unwrap().clone();
    m.reset_head(5, 2).unwrap();
    assert_eq!(m.params().get("enc0.w").unwrap(), &before);
    assert_eq!(m.params().get("head.w").unwrap().shape(), &[5, m.feature_dim()]);
    assert_eq!(m.forward(&random_input(1, 3, 16, 0)).unwrap().shape(), &[1, 5]);
}
