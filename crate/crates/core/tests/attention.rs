mod common;

use atnf_core::attention::{self, AttentionConfig, AttentionKind, AttentionLayer, MsaConfig, MsaLayer};
use atnf_core::params::ParamSet;
use atnf_core::rng::SeededRng;
use atnf_core::Tensor;
use common::checks::{self, SUBJECTS};
use common::oracle::{self, Msa};
use proptest::prelude::*;
use rand::seq::SliceRandom;

#[test]
fn layers_match_loop_references() {
    for (i, subject) in SUBJECTS.into_iter().enumerate() {
        let err = checks::oracle_max_error(subject, 120, 100 + i as u64);
        assert!(err < 1e-5, "{subject:?}: max error {err:e}");
    }
}

#[test]
fn zeroed_parameters_give_the_trivial_gates() {
    assert!(checks::trivial_cases_hold(20, 5));
}

#[test]
fn shapes_are_preserved() {
    assert!(checks::shape_contract_holds(200, 6));
}

#[test]
fn triaxis_two_cube_with_one_head() {
    let f = [2, 2, 2];
    let cfg = AttentionConfig {
        num_heads: 1,
        key_dim: 1,
        ..AttentionConfig::default()
    };
    let mut ps = ParamSet::new();
    let mut rng = SeededRng::seed_from(17);
    let layer = AttentionLayer::build(AttentionKind::TriAxis, f, &cfg, &mut ps, "a", &mut rng).unwrap();
    let x = Tensor::new(f, vec![0.3, -1.2, 0.8, 2.0, -0.4, 0.1, 1.5, -0.9]).unwrap();
    let y = layer.apply(&ps, &x).unwrap();
    let msa = |axis: &str| Msa::from_params(&ps, &format!("a.triaxis.{axis}"), 1, 1);
    let want = oracle::triaxis(&oracle::to_f64(&x), f, &msa("hw"), &msa("hc"), &msa("wc"));
    for (a, b) in y.data().iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
}

#[test]
fn msa_single_token_sums_value_rows() {
    let mut ps = ParamSet::new();
    let cfg = MsaConfig {
        num_heads: 3,
        key_dim: 2,
        token_dim: 4,
    };
    let layer = MsaLayer::new(&mut ps, "m", cfg, &mut SeededRng::seed_from(2)).unwrap();
    let m = Tensor::new([1, 4], vec![0.5, -1.0, 2.0, 0.25]).unwrap();
    let y = attention::msa_scores(&layer, &ps, &m).unwrap();
    let wv = oracle::weights(&ps, "m.wv");
    for col in 0..4 {
        let want: f64 = (0..3)
            .map(|n| (0..4).map(|e| m.data()[e] as f64 * wv[e * 12 + n * 4 + col]).sum::<f64>())
            .sum();
        assert!((y.data()[col] as f64 - want).abs() < 1e-5);
    }
}

#[test]
fn cbam_is_exactly_ca_then_sa() {
    let f = [5, 4, 6];
    let mut ps = ParamSet::new();
    let mut rng = SeededRng::seed_from(8);
    let AttentionLayer::Cbam(cbam) =
        AttentionLayer::build(AttentionKind::Cbam, f, &AttentionConfig::default(), &mut ps, "a", &mut rng).unwrap()
    else {
        unreachable!()
    };
    let x = Tensor::from_fn(f, |i| ((i * 37) % 23) as f32 / 7.0 - 1.5);
    let tape = atnf_core::Tape::new();
    let p = ps.bind_constant(&tape);
    let whole = cbam.forward(tape.constant(&x), &p).unwrap().value();
    let ca = cbam.ca.forward(tape.constant(&x), &p).unwrap().value();
    let manual = cbam.sa.forward(tape.constant(&ca), &p).unwrap().value();
    assert_eq!(whole, manual);
}

fn layer_with(kind: AttentionKind, f: [usize; 3], seed: u64) -> (AttentionLayer, ParamSet) {
    let mut ps = ParamSet::new();
    let cfg = AttentionConfig {
        num_heads: 4,
        key_dim: 3,
        ..AttentionConfig::default()
    };
    let layer = AttentionLayer::build(kind, f, &cfg, &mut ps, "a", &mut SeededRng::seed_from(seed)).unwrap();
    (layer, ps)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gates_never_amplify(h in 1usize..7, w in 1usize..7, c in 1usize..9, seed in any::<u64>()) {
        let f = [h, w, c];
        let x = Tensor::from_fn(f, |i| ((i as u64).wrapping_mul(seed | 1) % 1000) as f32 / 250.0 - 2.0);
        for kind in [AttentionKind::Se, AttentionKind::Ca, AttentionKind::Sa, AttentionKind::Cbam] {
            let (layer, ps) = layer_with(kind, f, seed);
            let y = layer.apply(&ps, &x).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                prop_assert!(a.abs() <= b.abs());
            }
        }
    }

    #[test]
    fn msa_is_permutation_equivariant(t in 1usize..8, d in 1usize..7, seed in any::<u64>(), perm_seed in any::<u64>()) {
        let mut ps = ParamSet::new();
        let cfg = MsaConfig { num_heads: 3, key_dim: 2, token_dim: d };
        let layer = MsaLayer::new(&mut ps, "m", cfg, &mut SeededRng::seed_from(seed)).unwrap();
        let m = Tensor::from_fn([t, d], |i| (((i as u64 + 1).wrapping_mul(seed | 1) >> 7) % 997) as f32 / 300.0 - 1.6);
        let mut perm: Vec<usize> = (0..t).collect();
        perm.shuffle(&mut SeededRng::seed_from(perm_seed));
        let permuted = Tensor::from_fn([t, d], |i| m.data()[perm[i / d] * d + i % d]);
        let y = attention::msa_scores(&layer, &ps, &m).unwrap();
        let yp = attention::msa_scores(&layer, &ps, &permuted).unwrap();
        for (row, &src) in perm.iter().enumerate() {
            for col in 0..d {
                prop_assert!((yp.data()[row * d + col] - y.data()[src * d + col]).abs() < 1e-5);
            }
        }
    }
}
