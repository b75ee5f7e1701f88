use atnf_core::attention::{AttentionConfig, AttentionKind};
use atnf_core::model::{kl_l2_loss, ConvBlockSpec, LossConfig, Model, ModelSpec};
use atnf_core::rng::SeededRng;
use atnf_core::{Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

fn no_l2() -> LossConfig {
    LossConfig {
        lambda: 0.0,
        batch_size: 1,
    }
}

fn loss_value(pred: &Tensor, target: &Tensor, theta: &[Tensor], cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    let theta: Vec<_> = theta.iter().map(|t| tape.leaf(t)).collect();
    kl_l2_loss(tape.leaf(pred), target, &theta, cfg).unwrap().value_f64()[0]
}

fn simplex_rows(rows: usize, cols: usize, rng: &mut SeededRng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let raw: Vec<f64> = (0..cols).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = raw.iter().sum();
        data.extend(raw.iter().map(|v| (v / s) as f32));
    }
    Tensor::new([rows, cols], data).unwrap()
}

#[test]
fn kl_of_a_distribution_with_itself_is_zero() {
    let mut rng = SeededRng::seed_from(1);
    for _ in 0..50 {
        let p = simplex_rows(rng.random_range(1..6), rng.random_range(2..8), &mut rng);
        assert!(loss_value(&p, &p, &[], &no_l2()).abs() < 1e-9);
    }
}

#[test]
fn one_hot_against_uniform_is_ln_two() {
    let pred = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
    let target = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let l = loss_value(&pred, &target, &[], &no_l2());
    assert!((l - std::f64::consts::LN_2).abs() <= 1e-6, "{l}");
}

#[test]
fn l2_term_is_half_lambda_squared_norm() {
    let p = Tensor::new([1, 2], vec![0.25, 0.75]).unwrap();
    let cfg = LossConfig::default();
    assert_eq!(cfg.lambda, 1e-4);
    let l = loss_value(&p, &p, &[Tensor::scalar(2.0)], &cfg);
    assert!((l - 0.0002).abs() < 1e-12);

    let mut rng = SeededRng::seed_from(3);
    let theta: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_fn([i + 1, 3], |_| rng.random_range(-2.0f32..2.0)))
        .collect();
    let sq: f64 = theta.iter().flat_map(|t| t.data()).map(|&v| (v as f64).powi(2)).sum();
    let l = loss_value(&p, &p, &theta, &cfg);
    assert!((l - 1e-4 / 2.0 * sq).abs() < 1e-12);
}

#[test]
fn zero_probability_is_clamped() {
    let pred = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
    let target = Tensor::new([1, 2], vec![0.0, 1.0]).unwrap();
    let l = loss_value(&pred, &target, &[], &no_l2());
    assert!(l.is_finite() && l > 20.0);
}

proptest! {
    #[test]
    fn kl_is_non_negative(rows in 1usize..5, cols in 2usize..7, seed in any::<u64>()) {
        let mut rng = SeededRng::seed_from(seed);
        let p = simplex_rows(rows, cols, &mut rng);
        let q = simplex_rows(rows, cols, &mut rng);
        prop_assert!(loss_value(&q, &p, &[], &no_l2()) >= -1e-9);
    }
}

fn one_block(out_channels: usize, head_hidden: usize) -> ModelSpec {
    ModelSpec {
        input_size: [8, 8],
        input_channels: 3,
        blocks: vec![ConvBlockSpec::new(out_channels)],
        taps: vec![1],
        attention: None,
        attention_config: AttentionConfig::default(),
        head_hidden,
        dropout_rate: 0.0,
        num_classes: 2,
    }
}

#[test]
fn parameter_counts_match_closed_forms() {
    let c = Model::new(one_block(8, 4), 0).unwrap().param_count();
    assert_eq!(c.backbone, 224);

    let spec = ModelSpec::standard(6, Some(AttentionKind::Cbam));
    assert_eq!(spec.head_input(), 112);
    let m = Model::new(spec, 0).unwrap();
    let w = m.params().by_name("head.fc1.weight").unwrap().tensor.numel();
    let b = m.params().by_name("head.fc1.bias").unwrap().tensor.numel();
    assert_eq!(w + b, 57856);
}

#[test]
fn every_attention_kind_plugs_into_the_same_backbone() {
    let base = Model::new(ModelSpec::standard(6, None), 0).unwrap();
    let x = Tensor::from_fn([2, 32, 32, 3], |i| (i % 17) as f32 / 17.0);
    for kind in AttentionKind::ALL {
        let m = Model::new(ModelSpec::standard(6, Some(kind)), 0).unwrap();
        assert_eq!(m.param_count().backbone, base.param_count().backbone);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[2, 6]);
        for row in y.data().chunks(6) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = one_block(8, 4);
    s.taps = vec![2];
    assert!(Model::new(s, 0).is_err());
    let mut s = one_block(8, 4);
    s.num_classes = 0;
    assert!(Model::new(s, 0).is_err());
}

#[test]
fn same_seed_same_initialisation() {
    let spec = ModelSpec::standard(6, Some(AttentionKind::TriAxis));
    assert_eq!(Model::new(spec.clone(), 7).unwrap(), Model::new(spec.clone(), 7).unwrap());
    assert_ne!(Model::new(spec.clone(), 7).unwrap(), Model::new(spec, 8).unwrap());
}
