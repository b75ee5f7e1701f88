//! Tape-free loop references for the attention layers, in f64.
//!
//! Feature maps are `[H, W, C]` row-major; weight matrices are `[in, out]`
//! row-major, matching the layer parameter layout.

#![allow(dead_code, clippy::needless_range_loop)]

use atnf_core::params::ParamSet;
use atnf_core::Tensor;

pub fn weights(ps: &ParamSet, name: &str) -> Vec<f64> {
    ps.by_name(name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .tensor
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect()
}

pub fn to_f64(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `C → hidden → C` bottleneck with ReLU.
pub struct Mlp {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn from_params(ps: &ParamSet, prefix: &str) -> Self {
        Self {
            w1: weights(ps, &format!("{prefix}.fc1.weight")),
            b1: weights(ps, &format!("{prefix}.fc1.bias")),
            w2: weights(ps, &format!("{prefix}.fc2.weight")),
            b2: weights(ps, &format!("{prefix}.fc2.bias")),
        }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let c = v.len();
        let hidden = self.b1.len();
        let mut h = vec![0.0; hidden];
        for m in 0..hidden {
            let mut acc = self.b1[m];
            for k in 0..c {
                acc += v[k] * self.w1[k * hidden + m];
            }
            h[m] = acc.max(0.0);
        }
        let mut out = vec![0.0; c];
        for k in 0..c {
            let mut acc = self.b2[k];
            for m in 0..hidden {
                acc += h[m] * self.w2[m * c + k];
            }
            out[k] = acc;
        }
        out
    }
}

fn channel_pools(x: &[f64], h: usize, w: usize, c: usize) -> (Vec<f64>, Vec<f64>) {
    let mut avg = vec![0.0; c];
    let mut max = vec![f64::NEG_INFINITY; c];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let v = x[(i * w + j) * c + k];
                avg[k] += v / (h * w) as f64;
                max[k] = max[k].max(v);
            }
        }
    }
    (avg, max)
}

fn gate_channels(x: &[f64], c: usize, gate: &[f64]) -> Vec<f64> {
    x.iter().enumerate().map(|(i, &v)| v * gate[i % c]).collect()
}

pub fn se(x: &[f64], [h, w, c]: [usize; 3], mlp: &Mlp) -> Vec<f64> {
    let (avg, _) = channel_pools(x, h, w, c);
    let gate: Vec<f64> = mlp.apply(&avg).into_iter().map(sigmoid).collect();
    gate_channels(x, c, &gate)
}

pub fn ca(x: &[f64], [h, w, c]: [usize; 3], mlp: &Mlp) -> Vec<f64> {
    let (avg, max) = channel_pools(x, h, w, c);
    let (a, m) = (mlp.apply(&avg), mlp.apply(&max));
    let gate: Vec<f64> = a.iter().zip(&m).map(|(p, q)| sigmoid(p + q)).collect();
    gate_channels(x, c, &gate)
}

/// `kernel` is `[k, k, 2, 1]`: input channel 0 is the channel mean, 1 the max.
pub fn sa(x: &[f64], [h, w, c]: [usize; 3], kernel: &[f64], bias: f64, k: usize) -> Vec<f64> {
    let mut pooled = vec![[0.0f64; 2]; h * w];
    for p in 0..h * w {
        let px = &x[p * c..(p + 1) * c];
        pooled[p][0] = px.iter().sum::<f64>() / c as f64;
        pooled[p][1] = px.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            let mut acc = bias;
            for ky in 0..k {
                for kx in 0..k {
                    let (yi, xj) = (i as isize + ky as isize - pad as isize, j as isize + kx as isize - pad as isize);
                    if yi < 0 || xj < 0 || yi >= h as isize || xj >= w as isize {
                        continue;
                    }
                    let p = pooled[yi as usize * w + xj as usize];
                    acc += p[0] * kernel[(ky * k + kx) * 2] + p[1] * kernel[(ky * k + kx) * 2 + 1];
                }
            }
            let g = sigmoid(acc);
            for ch in 0..c {
                out[(i * w + j) * c + ch] = x[(i * w + j) * c + ch] * g;
            }
        }
    }
    out
}

/// Multihead weights with heads laid out along the columns.
pub struct Msa {
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    pub wv: Vec<f64>,
    pub heads: usize,
    pub key_dim: usize,
}

impl Msa {
    pub fn from_params(ps: &ParamSet, prefix: &str, heads: usize, key_dim: usize) -> Self {
        Self {
            wq: weights(ps, &format!("{prefix}.wq")),
            wk: weights(ps, &format!("{prefix}.wk")),
            wv: weights(ps, &format!("{prefix}.wv")),
            heads,
            key_dim,
        }
    }

    /// `Σ_heads softmax(Q Kᵀ / √d_k) V` for a `[t, d]` token matrix.
    pub fn scores(&self, m: &[f64], t: usize, d: usize) -> Vec<f64> {
        let (nh, dk) = (self.heads, self.key_dim);
        let project = |wt: &[f64], width: usize, head: usize, row: usize, col: usize| -> f64 {
            (0..d).map(|e| m[row * d + e] * wt[e * nh * width + head * width + col]).sum()
        };
        let mut out = vec![0.0; t * d];
        for n in 0..nh {
            for a in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|b| {
                        (0..dk)
                            .map(|j| project(&self.wq, dk, n, a, j) * project(&self.wk, dk, n, b, j))
                            .sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                let z: f64 = e.iter().sum();
                for b in 0..t {
                    for col in 0..d {
                        out[a * d + col] += e[b] / z * project(&self.wv, d, n, b, col);
                    }
                }
            }
        }
        out
    }
}

pub fn triaxis(x: &[f64], [h, w, c]: [usize; 3], hw: &Msa, hc: &Msa, wc: &Msa) -> Vec<f64> {
    let at = |i: usize, j: usize, k: usize| x[(i * w + j) * c + k];
    let combine = |vals: &mut dyn Iterator<Item = f64>, n: usize| {
        let (mut s, mut m) = (0.0, f64::NEG_INFINITY);
        for v in vals {
            s += v;
            m = m.max(v);
        }
        0.5 * (s / n as f64 + m)
    };
    let mut s_hw = vec![0.0; h * w];
    let mut s_hc = vec![0.0; h * c];
    let mut s_wc = vec![0.0; w * c];
    for i in 0..h {
        for j in 0..w {
            s_hw[i * w + j] = combine(&mut (0..c).map(|k| at(i, j, k)), c);
        }
        for k in 0..c {
            s_hc[i * c + k] = combine(&mut (0..w).map(|j| at(i, j, k)), w);
        }
    }
    for j in 0..w {
        for k in 0..c {
            s_wc[j * c + k] = combine(&mut (0..h).map(|i| at(i, j, k)), h);
        }
    }
    let (a_hw, a_hc, a_wc) = (hw.scores(&s_hw, h, w), hc.scores(&s_hc, h, c), wc.scores(&s_wc, w, c));
    let mut out = vec![0.0; x.len()];
    for i in 0..h {
        for j in 0..w {
            for k in 0..c {
                let v = at(i, j, k);
                out[(i * w + j) * c + k] = (v * a_hw[i * w + j] + v * a_hc[i * c + k] + v * a_wc[j * c + k]) / 3.0;
            }
        }
    }
    out
}
