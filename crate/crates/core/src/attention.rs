//! Shape-preserving attention layers for `[H, W, C]` feature maps.
//!
//! Every layer accepts either a single feature map `[H, W, C]` or a batch
//! `[N, H, W, C]` and returns a tensor of the same shape.
//!
//! * [`SeLayer`]: `sigmoid(mlp(GAP(x))) ⊙ x`
//! * [`CaLayer`]: `sigmoid(mlp(GAP(x)) + mlp(GMP(x))) ⊙ x`, one shared MLP
//! * [`SaLayer`]: `sigmoid(conv([mean_c(x), max_c(x)])) ⊙ x`
//! * [`CbamLayer`]: `sa(ca(x))`, channel gate then spatial gate
//! * [`MsaLayer`]: sum over heads of `softmax(QKᵀ/√d_k)·V` on a token matrix
//! * [`TriAxisLayer`]: multihead attention on the three pooled 2-D views of
//!   the feature map, broadcast back over `x` and averaged

use alloc::format;
use alloc::string::String;

use serde::{Deserialize, Serialize};

use crate::params::{Bound, ParamGroup, ParamId, ParamSet};
use crate::rng::SeededRng;
use crate::tape::{Padding, ReduceMode};
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Se,
    Ca,
    Sa,
    Cbam,
    #[serde(rename = "triaxis")]
    TriAxis,
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 5] = [
        AttentionKind::Se,
        AttentionKind::Ca,
        AttentionKind::Sa,
        AttentionKind::Cbam,
        AttentionKind::TriAxis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Se => "se",
            AttentionKind::Ca => "ca",
            AttentionKind::Sa => "sa",
            AttentionKind::Cbam => "cbam",
            AttentionKind::TriAxis => "triaxis",
        }
    }
}

impl core::str::FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttentionKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::arg(format!("unknown attention kind `{s}`")))
    }
}

/// Hyperparameters shared by all attention layers of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttentionConfig {
    /// SE/CA bottleneck: hidden width is `ceil(C / se_reduction)`.
    pub se_reduction: usize,
    /// Side of the square spatial-attention kernel.
    pub sa_kernel: usize,
    pub num_heads: usize,
    pub key_dim: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            se_reduction: 4,
            sa_kernel: 7,
            num_heads: 32,
            key_dim: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeConfig {
    pub channels: usize,
    pub reduction: usize,
}

impl SeConfig {
    pub fn hidden(&self) -> usize {
        self.channels.div_ceil(self.reduction).max(1)
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.reduction == 0 {
            return Err(Error::arg("SE channels and reduction must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MsaConfig {
    pub num_heads: usize,
    pub key_dim: usize,
    /// Width of each token (columns of the input matrix).
    pub token_dim: usize,
}

/// Lifts `[H, W, C]` to `[1, H, W, C]`; the flag records whether to undo it.
fn batched(x: Var<'_>) -> Result<(Var<'_>, bool)> {
    match x.shape().len() {
        3 => {
            let s = x.shape();
            Ok((x.reshape(&[1, s[0], s[1], s[2]])?, true))
        }
        4 => Ok((x, false)),
        _ => Err(Error::InvalidShape {
            shape: x.shape(),
            reason: "attention expects [H, W, C] or [N, H, W, C]",
        }),
    }
}

fn unbatched<'t>(y: Var<'t>, lifted: bool) -> Result<Var<'t>> {
    if lifted {
        let s = y.shape();
        y.reshape(&s[1..])
    } else {
        Ok(y)
    }
}

fn check_channels(x: &Var<'_>, channels: usize) -> Result<()> {
    let s = x.shape();
    if s[s.len() - 1] != channels {
        return Err(Error::shape("attention channels", &s, &[channels]));
    }
    Ok(())
}

/// Two-layer bottleneck `C → hidden → C` with ReLU in between.
#[derive(Clone, Debug)]
struct Mlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Mlp {
    fn new(ps: &mut ParamSet, prefix: &str, cfg: SeConfig, rng: &mut SeededRng) -> Self {
        let (c, h) = (cfg.channels, cfg.hidden());
        let g = ParamGroup::Attention;
        Self {
            w1: ps.glorot(format!("{prefix}.fc1.weight"), g, &[c, h], c, h, rng),
            b1: ps.zeros(format!("{prefix}.fc1.bias"), g, &[h]),
            w2: ps.glorot(format!("{prefix}.fc2.weight"), g, &[h, c], h, c, rng),
            b2: ps.zeros(format!("{prefix}.fc2.bias"), g, &[c]),
        }
    }

    fn forward<'t>(&self, v: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let h = v.matmul(p[self.w1])?.add(p[self.b1])?.relu();
        h.matmul(p[self.w2])?.add(p[self.b2])
    }
}

/// Squeeze-and-excitation channel gate.
#[derive(Clone, Debug)]
pub struct SeLayer {
    cfg: SeConfig,
    mlp: Mlp,
}

impl SeLayer {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: SeConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), cfg, rng),
        })
    }

    pub fn config(&self) -> SeConfig {
        self.cfg
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (x, lifted) = batched(x)?;
        check_channels(&x, self.cfg.channels)?;
        let n = x.shape()[0];
        let gap = x.reduce(&[1, 2], ReduceMode::Mean, false)?;
        let gate = self.mlp.forward(gap, p)?.sigmoid().reshape(&[n, 1, 1, self.cfg.channels])?;
        unbatched(x.mul(gate)?, lifted)
    }
}

/// Channel attention: SE with an extra max-pooled branch through the same MLP.
#[derive(Clone, Debug)]
pub struct CaLayer {
    cfg: SeConfig,
    mlp: Mlp,
}

impl CaLayer {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: SeConfig, rng: &mut SeededRng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            mlp: Mlp::new(ps, &format!("{prefix}.mlp"), cfg, rng),
        })
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (x, lifted) = batched(x)?;
        check_channels(&x, self.cfg.channels)?;
        let n = x.shape()[0];
        let gap = x.reduce(&[1, 2], ReduceMode::Mean, false)?;
        let gmp = x.reduce(&[1, 2], ReduceMode::Max, false)?;
        let logits = self.mlp.forward(gap, p)?.add(self.mlp.forward(gmp, p)?)?;
        let gate = logits.sigmoid().reshape(&[n, 1, 1, self.cfg.channels])?;
        unbatched(x.mul(gate)?, lifted)
    }
}

/// Spatial attention: a `k×k`, 2→1 channel convolution over the channel-wise
/// mean and max maps.
#[derive(Clone, Debug)]
pub struct SaLayer {
    kernel: usize,
    w: ParamId,
    b: ParamId,
}

impl SaLayer {
    pub fn new(ps: &mut ParamSet, prefix: &str, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        if kernel == 0 {
            return Err(Error::arg("spatial attention kernel must be positive"));
        }
        let g = ParamGroup::Attention;
        let k2 = kernel * kernel;
        Ok(Self {
            kernel,
            w: ps.glorot(format!("{prefix}.conv.weight"), g, &[kernel, kernel, 2, 1], 2 * k2, k2, rng),
            b: ps.zeros(format!("{prefix}.conv.bias"), g, &[1]),
        })
    }

    pub fn kernel(&self) -> usize {
        self.kernel
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (x, lifted) = batched(x)?;
        let avg = x.reduce(&[3], ReduceMode::Mean, true)?;
        let max = x.reduce(&[3], ReduceMode::Max, true)?;
        let stacked = x.tape().concat(&[avg, max], 3)?;
        let gate = stacked.conv2d(p[self.w], p[self.b], 1, Padding::Same)?.sigmoid();
        unbatched(x.mul(gate)?, lifted)
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct CbamLayer {
    pub ca: CaLayer,
    pub sa: SaLayer,
}

impl CbamLayer {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: SeConfig, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        Ok(Self {
            ca: CaLayer::new(ps, &format!("{prefix}.ca"), cfg, rng)?,
            sa: SaLayer::new(ps, &format!("{prefix}.sa"), kernel, rng)?,
        })
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        self.sa.forward(self.ca.forward(x, p)?, p)
    }
}

/// Multihead self-attention scores over a token matrix `[T, d]` (or a batch
/// `[B, T, d]`). Heads are summed; the `⊙ x` step is left to the caller.
///
/// Weights are stored head-major along the columns: `wq` and `wk` are
/// `[d, heads·d_k]`, `wv` is `[d, heads·d]`, and head `n` owns columns
/// `n·d_k .. (n+1)·d_k` (resp. `n·d .. (n+1)·d`).
#[derive(Clone, Debug)]
pub struct MsaLayer {
    cfg: MsaConfig,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

impl MsaLayer {
    pub fn new(ps: &mut ParamSet, prefix: &str, cfg: MsaConfig, rng: &mut SeededRng) -> Result<Self> {
        let MsaConfig {
            num_heads: h,
            key_dim: dk,
            token_dim: d,
        } = cfg;
        if h == 0 || dk == 0 || d == 0 {
            return Err(Error::arg("MSA heads, key_dim and token_dim must be positive"));
        }
        let g = ParamGroup::Attention;
        // fan-in/out per head, as if each head were its own matrix
        Ok(Self {
            cfg,
            wq: ps.glorot(format!("{prefix}.wq"), g, &[d, h * dk], d, dk, rng),
            wk: ps.glorot(format!("{prefix}.wk"), g, &[d, h * dk], d, dk, rng),
            wv: ps.glorot(format!("{prefix}.wv"), g, &[d, h * d], d, d, rng),
        })
    }

    pub fn config(&self) -> MsaConfig {
        self.cfg
    }

    pub fn forward<'t>(&self, m: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let shape = m.shape();
        let (m, lifted) = match shape.len() {
            2 => (m.reshape(&[1, shape[0], shape[1]])?, true),
            3 => (m, false),
            _ => {
                return Err(Error::InvalidShape {
                    shape,
                    reason: "multihead attention expects [T, d] or [B, T, d]",
                })
            }
        };
        let s = m.shape();
        let (b, t, d) = (s[0], s[1], s[2]);
        if d != self.cfg.token_dim {
            return Err(Error::shape("msa token width", &s, &[self.cfg.token_dim]));
        }
        let (h, dk) = (self.cfg.num_heads, self.cfg.key_dim);
        let heads =
            |w: ParamId, width: usize, perm: &[usize]| -> Result<Var<'t>> { m.matmul(p[w])?.reshape(&[b, t, h, width])?.permute(perm) };
        let q = heads(self.wq, dk, &[0, 2, 1, 3])?; // [B, H, T, dk]
        let kt = heads(self.wk, dk, &[0, 2, 3, 1])?; // [B, H, dk, T]
        let scores = q.matmul(kt)?.mul_scalar(1.0 / libm::sqrt(dk as f64)).softmax(3)?;
        // Σ_h scores_h · V_h as one product: scores laid out [B, T, (S, H)]
        // against the projection viewed as [B, (S, H), d].
        let scores = scores.permute(&[0, 2, 3, 1])?.reshape(&[b, t, t * h])?;
        let v = m.matmul(p[self.wv])?.reshape(&[b, t * h, d])?;
        let out = scores.matmul(v)?; // [B, T, d]
        if lifted {
            out.reshape(&[t, d])
        } else {
            Ok(out)
        }
    }
}

/// Multihead attention over the `[H×W]`, `[H×C]` and `[W×C]` reductions of a
/// feature map. Each reduction is the mean of average- and max-pooling over
/// the dropped axis; the score matrices are broadcast against the input and
/// the three products are averaged.
#[derive(Clone, Debug)]
pub struct TriAxisLayer {
    feature: [usize; 3],
    pub hw: MsaLayer,
    pub hc: MsaLayer,
    pub wc: MsaLayer,
}

impl TriAxisLayer {
    /// `feature` is the `[H, W, C]` shape the layer will be applied to.
    pub fn new(
        ps: &mut ParamSet,
        prefix: &str,
        feature: [usize; 3],
        num_heads: usize,
        key_dim: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let [_, w, c] = feature;
        let cfg = |token_dim| MsaConfig {
            num_heads,
            key_dim,
            token_dim,
        };
        Ok(Self {
            feature,
            hw: MsaLayer::new(ps, &format!("{prefix}.hw"), cfg(w), rng)?,
            hc: MsaLayer::new(ps, &format!("{prefix}.hc"), cfg(c), rng)?,
            wc: MsaLayer::new(ps, &format!("{prefix}.wc"), cfg(c), rng)?,
        })
    }

    pub fn feature_shape(&self) -> [usize; 3] {
        self.feature
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        let (x, lifted) = batched(x)?;
        let s = x.shape();
        if s[1..] != self.feature {
            return Err(Error::shape("triaxis feature map", &s, &self.feature));
        }
        let [h, w, c] = self.feature;
        let n = s[0];
        let pool = |axis: usize| -> Result<Var<'t>> {
            let avg = x.reduce(&[axis], ReduceMode::Mean, false)?;
            let max = x.reduce(&[axis], ReduceMode::Max, false)?;
            Ok(avg.add(max)?.mul_scalar(0.5))
        };
        let a_hw = self.hw.forward(pool(3)?, p)?.reshape(&[n, h, w, 1])?;
        let a_hc = self.hc.forward(pool(2)?, p)?.reshape(&[n, h, 1, c])?;
        let a_wc = self.wc.forward(pool(1)?, p)?.reshape(&[n, 1, w, c])?;
        let y = x.mul(a_hw)?.add(x.mul(a_hc)?)?.add(x.mul(a_wc)?)?.mul_scalar(1.0 / 3.0);
        unbatched(y, lifted)
    }
}

#[derive(Clone, Debug)]
pub enum AttentionLayer {
    Se(SeLayer),
    Ca(CaLayer),
    Sa(SaLayer),
    Cbam(CbamLayer),
    TriAxis(TriAxisLayer),
}

impl AttentionLayer {
    /// Builds the layer of `kind` for feature maps of shape `[H, W, C]`,
    /// registering its parameters under `prefix`.
    pub fn build(
        kind: AttentionKind,
        feature: [usize; 3],
        cfg: &AttentionConfig,
        ps: &mut ParamSet,
        prefix: &str,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let se = SeConfig {
            channels: feature[2],
            reduction: cfg.se_reduction,
        };
        let prefix: String = format!("{prefix}.{}", kind.name());
        Ok(match kind {
            AttentionKind::Se => AttentionLayer::Se(SeLayer::new(ps, &prefix, se, rng)?),
            AttentionKind::Ca => AttentionLayer::Ca(CaLayer::new(ps, &prefix, se, rng)?),
            AttentionKind::Sa => AttentionLayer::Sa(SaLayer::new(ps, &prefix, cfg.sa_kernel, rng)?),
            AttentionKind::Cbam => AttentionLayer::Cbam(CbamLayer::new(ps, &prefix, se, cfg.sa_kernel, rng)?),
            AttentionKind::TriAxis => AttentionLayer::TriAxis(TriAxisLayer::new(ps, &prefix, feature, cfg.num_heads, cfg.key_dim, rng)?),
        })
    }

    pub fn kind(&self) -> AttentionKind {
        match self {
            AttentionLayer::Se(_) => AttentionKind::Se,
            AttentionLayer::Ca(_) => AttentionKind::Ca,
            AttentionLayer::Sa(_) => AttentionKind::Sa,
            AttentionLayer::Cbam(_) => AttentionKind::Cbam,
            AttentionLayer::TriAxis(_) => AttentionKind::TriAxis,
        }
    }

    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        match self {
            AttentionLayer::Se(l) => l.forward(x, p),
            AttentionLayer::Ca(l) => l.forward(x, p),
            AttentionLayer::Sa(l) => l.forward(x, p),
            AttentionLayer::Cbam(l) => l.forward(x, p),
            AttentionLayer::TriAxis(l) => l.forward(x, p),
        }
    }

    /// Untracked evaluation on a plain tensor.
    pub fn apply(&self, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = ps.bind_constant(&tape);
        Ok(self.forward(tape.constant(x), &p)?.value())
    }
}

/// Untracked multihead scores for a single token matrix.
pub fn msa_scores(layer: &MsaLayer, ps: &ParamSet, m: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let p = ps.bind_constant(&tape);
    Ok(layer.forward(tape.constant(m), &p)?.value())
}

/// Zeroes every parameter in `ps` (used for the trivial-gate checks).
pub fn zero_params(ps: &mut ParamSet) {
    for p in ps.iter_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
}
