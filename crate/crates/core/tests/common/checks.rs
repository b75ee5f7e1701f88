//! Drivers that compare the attention layers against the loop references.

#![allow(dead_code)]

use atnf_core::attention::{self, AttentionConfig, AttentionKind, AttentionLayer, MsaConfig, MsaLayer};
use atnf_core::params::ParamSet;
use atnf_core::rng::{RngKey, SeededRng};
use atnf_core::Tensor;
use rand::Rng;

use super::oracle::{self, Mlp, Msa};

/// Layers checked against a loop reference; `Msa` is the bare score head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subject {
    Layer(AttentionKind),
    Msa,
}

pub const SUBJECTS: [Subject; 6] = [
    Subject::Layer(AttentionKind::Se),
    Subject::Layer(AttentionKind::Ca),
    Subject::Layer(AttentionKind::Sa),
    Subject::Layer(AttentionKind::Cbam),
    Subject::Msa,
    Subject::Layer(AttentionKind::TriAxis),
];

fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut SeededRng) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

fn randomize(ps: &mut ParamSet, rng: &mut SeededRng) {
    for p in ps.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5f32..0.5));
    }
}

/// A random `[H, W, C]` with at most 200 elements.
pub fn small_feature(rng: &mut SeededRng) -> [usize; 3] {
    loop {
        let f = [rng.random_range(1..8), rng.random_range(1..8), rng.random_range(1..10)];
        if f.iter().product::<usize>() <= 200 {
            return f;
        }
    }
}

fn max_abs_diff(got: &Tensor, want: &[f64]) -> f64 {
    assert_eq!(got.numel(), want.len());
    got.data().iter().zip(want).map(|(&a, &b)| (a as f64 - b).abs()).fold(0.0, f64::max)
}

fn layer_reference(kind: AttentionKind, ps: &ParamSet, cfg: &AttentionConfig, x: &[f64], f: [usize; 3]) -> Vec<f64> {
    let p = format!("a.{}", kind.name());
    let sa = |x: &[f64], prefix: &str| {
        let k = oracle::weights(ps, &format!("{prefix}.conv.weight"));
        let b = oracle::weights(ps, &format!("{prefix}.conv.bias"))[0];
        oracle::sa(x, f, &k, b, cfg.sa_kernel)
    };
    match kind {
        AttentionKind::Se => oracle::se(x, f, &Mlp::from_params(ps, &format!("{p}.mlp"))),
        AttentionKind::Ca => oracle::ca(x, f, &Mlp::from_params(ps, &format!("{p}.mlp"))),
        AttentionKind::Sa => sa(x, &p),
        AttentionKind::Cbam => {
            let y = oracle::ca(x, f, &Mlp::from_params(ps, &format!("{p}.ca.mlp")));
            sa(&y, &format!("{p}.sa"))
        }
        AttentionKind::TriAxis => {
            let msa = |axis: &str| Msa::from_params(ps, &format!("{p}.{axis}"), cfg.num_heads, cfg.key_dim);
            oracle::triaxis(x, f, &msa("hw"), &msa("hc"), &msa("wc"))
        }
    }
}

/// Largest absolute deviation from the loop reference over `cases` random
/// inputs and parameter draws.
pub fn oracle_max_error(subject: Subject, cases: usize, seed: u64) -> f64 {
    let mut rng = RngKey::new(seed).rng();
    let mut worst = 0.0f64;
    for _ in 0..cases {
        match subject {
            Subject::Layer(kind) => {
                let f = small_feature(&mut rng);
                let cfg = AttentionConfig {
                    se_reduction: rng.random_range(1..5),
                    sa_kernel: [1, 3, 5, 7][rng.random_range(0..4)],
                    num_heads: rng.random_range(1..5),
                    key_dim: rng.random_range(1..5),
                };
                let mut ps = ParamSet::new();
                let layer = AttentionLayer::build(kind, f, &cfg, &mut ps, "a", &mut rng).unwrap();
                randomize(&mut ps, &mut rng);
                let batch = rng.random_range(1..3);
                let x = uniform(&[batch, f[0], f[1], f[2]], -2.0, 2.0, &mut rng);
                let y = layer.apply(&ps, &x).unwrap();
                let per = f.iter().product::<usize>();
                let xs = oracle::to_f64(&x);
                for b in 0..batch {
                    let want = layer_reference(kind, &ps, &cfg, &xs[b * per..(b + 1) * per], f);
                    worst = worst.max(max_abs_diff(&y.slice_outer(b, b + 1).unwrap(), &want));
                }
            }
            Subject::Msa => {
                let (t, d) = (rng.random_range(1..9), rng.random_range(1..9));
                let (heads, key_dim) = (rng.random_range(1..5), rng.random_range(1..5));
                let mut ps = ParamSet::new();
                let cfg = MsaConfig {
                    num_heads: heads,
                    key_dim,
                    token_dim: d,
                };
                let layer = MsaLayer::new(&mut ps, "m", cfg, &mut rng).unwrap();
                randomize(&mut ps, &mut rng);
                let m = uniform(&[t, d], -2.0, 2.0, &mut rng);
                let y = attention::msa_scores(&layer, &ps, &m).unwrap();
                let want = Msa::from_params(&ps, "m", heads, key_dim).scores(&oracle::to_f64(&m), t, d);
                worst = worst.max(max_abs_diff(&y, &want));
            }
        }
    }
    worst
}

/// Zeroed parameters: SE/CA/SA halve the input, CBAM quarters it and both
/// multihead forms return zeros, all exactly.
pub fn trivial_cases_hold(cases: usize, seed: u64) -> bool {
    let mut rng = RngKey::new(seed).rng();
    let cfg = AttentionConfig::default();
    for _ in 0..cases {
        let f = small_feature(&mut rng);
        let x = uniform(&[f[0], f[1], f[2]], -3.0, 3.0, &mut rng);
        for kind in AttentionKind::ALL {
            let mut ps = ParamSet::new();
            let layer = AttentionLayer::build(kind, f, &cfg, &mut ps, "a", &mut rng).unwrap();
            attention::zero_params(&mut ps);
            let y = layer.apply(&ps, &x).unwrap();
            let factor = match kind {
                AttentionKind::Se | AttentionKind::Ca | AttentionKind::Sa => 0.5,
                AttentionKind::Cbam => 0.25,
                AttentionKind::TriAxis => 0.0,
            };
            if y.shape() != x.shape() || y.data().iter().zip(x.data()).any(|(&a, &b)| a != b * factor) {
                return false;
            }
        }
        let mut ps = ParamSet::new();
        let msa_cfg = MsaConfig {
            num_heads: cfg.num_heads,
            key_dim: cfg.key_dim,
            token_dim: f[1],
        };
        let layer = MsaLayer::new(&mut ps, "m", msa_cfg, &mut rng).unwrap();
        attention::zero_params(&mut ps);
        let m = uniform(&[f[0], f[1]], -3.0, 3.0, &mut rng);
        if attention::msa_scores(&layer, &ps, &m).unwrap().data().iter().any(|&v| v != 0.0) {
            return false;
        }
    }
    true
}

/// Output shape equals input shape for `cases` random feature maps under
/// every attention kind, batched or not.
pub fn shape_contract_holds(cases: usize, seed: u64) -> bool {
    let mut rng = RngKey::new(seed).rng();
    for case in 0..cases {
        let f = [rng.random_range(1..10), rng.random_range(1..10), rng.random_range(1..17)];
        let cfg = AttentionConfig {
            se_reduction: rng.random_range(1..9),
            sa_kernel: [1, 3, 5, 7][rng.random_range(0..4)],
            num_heads: rng.random_range(1..33),
            key_dim: rng.random_range(1..9),
        };
        let shape: Vec<usize> = if case % 2 == 0 {
            f.to_vec()
        } else {
            vec![rng.random_range(1..4), f[0], f[1], f[2]]
        };
        let x = uniform(&shape, -1.0, 1.0, &mut rng);
        for kind in AttentionKind::ALL {
            let mut ps = ParamSet::new();
            let layer = AttentionLayer::build(kind, f, &cfg, &mut ps, "a", &mut rng).unwrap();
            if layer.apply(&ps, &x).unwrap().shape() != x.shape() {
                return false;
            }
        }
    }
    true
}
