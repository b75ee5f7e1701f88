use atnf_core::attention::{AttentionConfig, AttentionKind};
use atnf_core::augment::AugmentConfig;
use atnf_core::model::{kl_l2_loss, ConvBlockSpec, LossConfig, Model, ModelSpec};
use atnf_core::params::ParamGroup;
use atnf_core::rng::SeededRng;
use atnf_core::train::{self, adam_step, evaluate_predictions, AdamConfig, Dataset, OptimizerState, TrainConfig};
use atnf_core::{Tape, Tensor};
use rand::Rng;

fn small_spec(attention: Option<AttentionKind>, classes: usize) -> ModelSpec {
    ModelSpec {
        input_size: [12, 12],
        input_channels: 3,
        blocks: vec![ConvBlockSpec::new(4), ConvBlockSpec::new(8)],
        taps: vec![1, 2],
        attention,
        attention_config: AttentionConfig {
            num_heads: 2,
            key_dim: 2,
            ..AttentionConfig::default()
        },
        head_hidden: 16,
        dropout_rate: 0.3,
        num_classes: classes,
    }
}

/// Class `k` is a bright square in quadrant `k` on a noisy background.
fn quadrant_data(n: usize, seed: u64) -> Dataset {
    let mut rng = SeededRng::seed_from(seed);
    let labels: Vec<usize> = (0..n).map(|i| i % 4).collect();
    let mut data = Vec::with_capacity(n * 12 * 12 * 3);
    for &k in &labels {
        let (qy, qx) = (k / 2 * 6, k % 2 * 6);
        for y in 0..12 {
            for x in 0..12 {
                let inside = (qy..qy + 6).contains(&y) && (qx..qx + 6).contains(&x);
                for _ in 0..3 {
                    let base = if inside { 0.8 } else { 0.2 };
                    data.push(base + rng.random_range(-0.1f32..0.1));
                }
            }
        }
    }
    Dataset::new(Tensor::new([n, 12, 12, 3], data).unwrap(), labels, 4).unwrap()
}

fn small_augment() -> AugmentConfig {
    AugmentConfig {
        crop_reduction: 2,
        erase_extent: 3,
        ..AugmentConfig::default()
    }
}

fn quick(phase1: usize, phase2: usize) -> TrainConfig {
    TrainConfig {
        phase1_epochs: phase1,
        phase2_epochs: phase2,
        batch_size: 8,
        ..TrainConfig::desk()
    }
}

#[test]
fn adam_does_not_depend_on_partitioning() {
    let mut rng = SeededRng::seed_from(1);
    let a = Tensor::from_fn([3, 4], |_| rng.random_range(-1.0f32..1.0));
    let b = Tensor::from_fn([5], |_| rng.random_range(-1.0f32..1.0));
    let joined = |x: &Tensor, y: &Tensor| Tensor::new([17], x.data().iter().chain(y.data()).copied().collect()).unwrap();
    let (mut pa, mut pb, mut pj) = (a.clone(), b.clone(), joined(&a, &b));
    let (mut split_state, mut joined_state) = (OptimizerState::default(), OptimizerState::default());
    let cfg = AdamConfig::default();
    for step in 0..10 {
        let ga = Tensor::from_fn([3, 4], |i| ((i + step) as f32 * 0.37).sin());
        let gb = Tensor::from_fn([5], |i| ((i + 12 + step) as f32 * 0.37).sin());
        let gj = joined(&ga, &gb);
        adam_step([(&mut pa, Some(&ga)), (&mut pb, Some(&gb))], &mut split_state, 0.01, &cfg).unwrap();
        adam_step([(&mut pj, Some(&gj))], &mut joined_state, 0.01, &cfg).unwrap();
        assert_eq!(joined(&pa, &pb), pj);
    }
}

#[test]
fn zero_epochs_leave_the_model_alone() {
    let data = quadrant_data(16, 2);
    let mut model = Model::new(small_spec(None, 4), 3).unwrap();
    let before = model.clone();
    let report = train::train(&mut model, &data, &quick(0, 0), &small_augment()).unwrap();
    assert_eq!(model, before);
    assert!(report.history.is_empty());
    assert_eq!(report.steps, 0);
}

#[test]
fn phase_two_consumes_no_augmentation_draws() {
    let data = quadrant_data(16, 3);
    let mut model = Model::new(small_spec(None, 4), 4).unwrap();
    let report = train::train(&mut model, &data, &quick(2, 3), &small_augment()).unwrap();
    assert!(report.online_aug_draws[0] > 0);
    assert_eq!(report.online_aug_draws[1], 0);
    assert_eq!(report.history.iter().map(|r| r.phase).collect::<Vec<_>>(), [1, 1, 2, 2, 2]);
    // Phase 1 sees three samples per input through mixup, phase 2 one.
    assert_eq!(report.history[0].samples, 48);
    assert_eq!(report.history[4].samples, 16);
    let lr: Vec<f64> = report.history.iter().map(|r| r.lr).collect();
    assert_eq!(lr, [2e-3, 2e-3, 2e-5, 2e-5, 2e-5]);
}

fn fixed_batch_loss(model: &Model, data: &Dataset) -> f64 {
    let rows: Vec<usize> = (0..data.len()).collect();
    let batch = data.batch(&rows).unwrap();
    let tape = Tape::new();
    let p = model.params().bind_constant(&tape);
    let pred = model
        .forward(tape.constant(&batch.images), &p, false, &mut SeededRng::seed_from(0))
        .unwrap();
    kl_l2_loss(pred, &batch.labels, p.vars(), &LossConfig::default())
        .unwrap()
        .value_f64()[0]
}

#[test]
fn loss_falls_over_fifty_phase_one_steps() {
    let data = quadrant_data(8, 5);
    let mut model = Model::new(small_spec(Some(AttentionKind::Se), 4), 5).unwrap();
    let start = fixed_batch_loss(&model, &data);
    let report = train::train(&mut model, &data, &quick(50, 0), &small_augment()).unwrap();
    assert_eq!(report.steps, 50);
    let end = fixed_batch_loss(&model, &data);
    assert!(end < start, "loss {start} -> {end}");
}

#[test]
fn training_is_bit_reproducible() {
    let data = quadrant_data(16, 6);
    let run = || {
        let mut model = Model::new(small_spec(Some(AttentionKind::TriAxis), 4), 6).unwrap();
        let report = train::train(&mut model, &data, &quick(2, 1), &small_augment()).unwrap();
        (model, report)
    };
    let (m1, r1) = run();
    let (m2, r2) = run();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
}

#[test]
fn frozen_backbone_stays_fixed() {
    let data = quadrant_data(16, 7);
    let mut model = Model::new(small_spec(Some(AttentionKind::Se), 4), 7).unwrap();
    let before = model.clone();
    let cfg = TrainConfig {
        freeze_backbone: true,
        ..quick(2, 0)
    };
    train::train(&mut model, &data, &cfg, &small_augment()).unwrap();
    for (a, b) in model.params().iter().zip(before.params().iter()) {
        match a.group {
            ParamGroup::Backbone => assert_eq!(a.tensor, b.tensor, "{}", a.name),
            _ if a.name.ends_with("weight") => assert_ne!(a.tensor, b.tensor, "{}", a.name),
            _ => {}
        }
    }
}

#[test]
fn transfer_copies_backbone_and_refreshes_head() {
    let up = Model::new(small_spec(Some(AttentionKind::Cbam), 10), 11).unwrap();
    for downstream in [small_spec(Some(AttentionKind::Cbam), 4), small_spec(Some(AttentionKind::Cbam), 10)] {
        let down = train::transfer(&up, downstream, 12).unwrap();
        for p in down.params().iter() {
            let src = up.params().by_name(&p.name).unwrap();
            match p.group {
                ParamGroup::Backbone | ParamGroup::Attention => assert_eq!(p.tensor, src.tensor, "{}", p.name),
                ParamGroup::Head if p.name.ends_with("weight") => assert_ne!(p.tensor, src.tensor, "{}", p.name),
                ParamGroup::Head => {}
            }
        }
    }
    let mut wider = small_spec(None, 4);
    wider.blocks[0] = ConvBlockSpec::new(5);
    assert!(train::transfer(&up, wider, 0).is_err());
}

#[test]
fn uniform_predictions_score_the_class_zero_share() {
    let labels = [0, 1, 0, 2, 2, 0, 1];
    let pred = Tensor::full([7, 3], 1.0 / 3.0);
    let e = evaluate_predictions(&pred, &labels, 3).unwrap();
    assert!((e.accuracy - 3.0 / 7.0).abs() < 1e-12);
    assert_eq!(e.confusion, vec![vec![3, 0, 0], vec![2, 0, 0], vec![2, 0, 0]]);
    assert_eq!(e.total, 7);
    assert!(evaluate_predictions(&pred, &labels[..6], 3).is_err());
}
