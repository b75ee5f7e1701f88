//! Tapped-block CNN classifier with per-tap attention, and its loss.
//!
//! ```text
//! images ─ block1 ─ block2 ─ … ─ blockB
//!                     │             │
//!               attention_t     attention_t      (one per tap, independent)
//!                     │             │
//!                    GAP           GAP
//!                     └──── concat ─┘
//!                           │
//!              dense(hidden) + ReLU + dropout
//!                           │
//!                 dense(classes) + softmax
//! ```
//!
//! Each block is a 3×3 stride-2 `same` convolution followed by ReLU, so it
//! halves the spatial size (rounding up).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionKind, AttentionLayer};
use crate::params::{Bound, ParamGroup, ParamId, ParamSet};
use crate::rng::RngKey;
use crate::tape::{Padding, ReduceMode};
use crate::{Error, Result, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub out_channels: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_kernel() -> usize {
    3
}

fn default_stride() -> usize {
    2
}

impl ConvBlockSpec {
    pub fn new(out_channels: usize) -> Self {
        Self {
            out_channels,
            kernel: 3,
            stride: 2,
        }
    }
}

fn default_input_size() -> [usize; 2] {
    [32, 32]
}

fn default_input_channels() -> usize {
    3
}

fn default_head_hidden() -> usize {
    512
}

fn default_dropout() -> f64 {
    0.3
}

/// Declarative model description. Taps are 1-based block indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
    #[serde(default = "default_input_channels")]
    pub input_channels: usize,
    pub blocks: Vec<ConvBlockSpec>,
    pub taps: Vec<usize>,
    #[serde(default)]
    pub attention: Option<AttentionKind>,
    #[serde(default)]
    pub attention_config: AttentionConfig,
    #[serde(default = "default_head_hidden")]
    pub head_hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    pub num_classes: usize,
}

impl ModelSpec {
    /// Four blocks with (8, 16, 32, 64) channels on 32×32 RGB input. With
    /// attention the taps are blocks 2–4; without, only the last block feeds
    /// the head.
    pub fn standard(num_classes: usize, attention: Option<AttentionKind>) -> Self {
        Self {
            input_size: [32, 32],
            input_channels: 3,
            blocks: [8, 16, 32, 64].into_iter().map(ConvBlockSpec::new).collect(),
            taps: if attention.is_some() { vec![2, 3, 4] } else { vec![4] },
            attention,
            attention_config: AttentionConfig::default(),
            head_hidden: 512,
            dropout_rate: 0.3,
            num_classes,
        }
    }

    /// `[H, W, C]` output of every block.
    pub fn feature_shapes(&self) -> Result<Vec<[usize; 3]>> {
        let [mut h, mut w] = self.input_size;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.kernel == 0 || b.stride == 0 {
                return Err(Error::arg(format!("block {} has a zero-sized parameter", i + 1)));
            }
            if b.stride > 1 && (h < 2 || w < 2) {
                return Err(Error::arg(format!(
                    "spatial size {h}×{w} cannot be downsampled further at block {}",
                    i + 1
                )));
            }
            h = h.div_ceil(b.stride);
            w = w.div_ceil(b.stride);
            out.push([h, w, b.out_channels]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::arg("model needs at least one block"));
        }
        if self.num_classes < 2 {
            return Err(Error::arg("num_classes must be at least 2"));
        }
        if self.taps.is_empty() {
            return Err(Error::arg("at least one tap is required"));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::arg("taps must be strictly increasing"));
        }
        if self.taps.iter().any(|&t| t == 0 || t > self.blocks.len()) {
            return Err(Error::arg("tap refers to a block that does not exist"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::arg("dropout_rate must lie in [0, 1)"));
        }
        if self.head_hidden == 0 || self.input_channels == 0 || self.input_size.contains(&0) {
            return Err(Error::arg("zero-sized input or head"));
        }
        self.feature_shapes().map(|_| ())
    }

    /// Width of the concatenated GAP vector fed to the head.
    pub fn head_input(&self) -> usize {
        self.taps.iter().map(|&t| self.blocks[t - 1].out_channels).sum()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub backbone: usize,
    pub attention: usize,
    pub head: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// L2 coefficient λ.
    pub lambda: f64,
    pub batch_size: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            batch_size: 60,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    w: ParamId,
    b: ParamId,
    stride: usize,
}

#[derive(Clone, Debug)]
struct Tap {
    block: usize,
    attention: Option<AttentionLayer>,
}

#[derive(Clone, Debug)]
struct Dense {
    w: ParamId,
    b: ParamId,
}

impl Dense {
    fn new(ps: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut crate::rng::SeededRng) -> Self {
        let g = ParamGroup::Head;
        Self {
            w: ps.glorot(format!("{name}.weight"), g, &[fan_in, fan_out], fan_in, fan_out, rng),
            b: ps.zeros(format!("{name}.bias"), g, &[fan_out]),
        }
    }

    fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<Var<'t>> {
        x.matmul(p[self.w])?.add(p[self.b])
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    params: ParamSet,
    blocks: Vec<ConvBlock>,
    taps: Vec<Tap>,
    hidden: Dense,
    out: Dense,
}

/// Layer bookkeeping is a function of the spec, so equal specs and
/// parameters mean equal models.
impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.params == other.params
    }
}

impl Model {
    /// Builds the model with Glorot-uniform weights and zero biases.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.feature_shapes()?;
        let mut rng = RngKey::new(seed).derive_tag("init").rng();
        let mut ps = ParamSet::new();
        let mut cin = spec.input_channels;
        let mut blocks = Vec::with_capacity(spec.blocks.len());
        for (i, b) in spec.blocks.iter().enumerate() {
            let k = b.kernel;
            let g = ParamGroup::Backbone;
            let w = ps.glorot(
                format!("block{}.conv.weight", i + 1),
                g,
                &[k, k, cin, b.out_channels],
                k * k * cin,
                k * k * b.out_channels,
                &mut rng,
            );
            let bias = ps.zeros(format!("block{}.conv.bias", i + 1), g, &[b.out_channels]);
            blocks.push(ConvBlock {
                w,
                b: bias,
                stride: b.stride,
            });
            cin = b.out_channels;
        }
        let mut taps = Vec::with_capacity(spec.taps.len());
        for &t in &spec.taps {
            let attention = match spec.attention {
                Some(kind) => Some(AttentionLayer::build(
                    kind,
                    shapes[t - 1],
                    &spec.attention_config,
                    &mut ps,
                    &format!("tap{t}"),
                    &mut rng,
                )?),
                None => None,
            };
            taps.push(Tap { block: t - 1, attention });
        }
        let hidden = Dense::new(&mut ps, "head.fc1", spec.head_input(), spec.head_hidden, &mut rng);
        let out = Dense::new(&mut ps, "head.fc2", spec.head_hidden, spec.num_classes, &mut rng);
        Ok(Self {
            spec,
            params: ps,
            blocks,
            taps,
            hidden,
            out,
        })
    }

    /// Rebuilds a model from named tensors, which must match the layout of
    /// `spec` exactly (same names, order and shapes).
    pub fn from_params(spec: ModelSpec, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if tensors.len() != model.params.len() {
            let name = model
                .params
                .iter()
                .map(|p| p.name.clone())
                .nth(tensors.len().min(model.params.len()))
                .unwrap_or_else(|| tensors[model.params.len()].0.clone());
            return Err(Error::ArchitectureMismatch {
                name,
                detail: format!("expected {} tensors, found {}", model.params.len(), tensors.len()),
            });
        }
        for (p, (name, t)) in model.params.iter_mut().zip(tensors) {
            if p.name != name {
                return Err(Error::ArchitectureMismatch {
                    name: p.name.clone(),
                    detail: format!("found `{name}` in its place"),
                });
            }
            if p.tensor.shape() != t.shape() {
                return Err(Error::ArchitectureMismatch {
                    name,
                    detail: format!("shape {:?} != expected {:?}", t.shape(), p.tensor.shape()),
                });
            }
            p.tensor = t;
        }
        Ok(model)
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|p| (p.name.clone(), p.tensor.clone())).collect()
    }

    pub fn param_count(&self) -> ParamCount {
        let mut c = ParamCount::default();
        for p in self.params.iter() {
            let n = p.tensor.numel();
            match p.group {
                ParamGroup::Backbone => c.backbone += n,
                ParamGroup::Attention => c.attention += n,
                ParamGroup::Head => c.head += n,
            }
            c.total += n;
        }
        c
    }

    /// Class probabilities `[N, C]` for images `[N, H, W, Cin]`.
    pub fn forward<'t>(&self, images: Var<'t>, p: &Bound<'t>, training: bool, rng: &mut impl RngCore) -> Result<Var<'t>> {
        let s = images.shape();
        let [h, w] = self.spec.input_size;
        if s.len() != 4 || s[1] != h || s[2] != w || s[3] != self.spec.input_channels {
            return Err(Error::shape("model input", &s, &[0, h, w, self.spec.input_channels]));
        }
        let mut x = images;
        let mut features = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = x.conv2d(p[b.w], p[b.b], b.stride, Padding::Same)?.relu();
            features.push(x);
        }
        let mut pooled = Vec::with_capacity(self.taps.len());
        for tap in &self.taps {
            let mut f = features[tap.block];
            if let Some(att) = &tap.attention {
                f = att.forward(f, p)?;
            }
            pooled.push(f.reduce(&[1, 2], ReduceMode::Mean, false)?);
        }
        let v = if pooled.len() == 1 {
            pooled[0]
        } else {
            images.tape().concat(&pooled, 1)?
        };
        let hdn = self.hidden.forward(v, p)?.relu().dropout(self.spec.dropout_rate, training, rng)?;
        self.out.forward(hdn, p)?.softmax(1)
    }

    /// Inference-mode probabilities, evaluated in chunks of 64 images.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        if images.rank() != 4 {
            return Err(Error::shape("model input", images.shape(), &[]));
        }
        let n = images.shape()[0];
        let mut data = Vec::with_capacity(n * self.spec.num_classes);
        let mut rng = RngKey::new(0).rng();
        for start in (0..n).step_by(64) {
            let chunk = images.slice_outer(start, (start + 64).min(n))?;
            let tape = Tape::new();
            let p = self.params.bind_constant(&tape);
            let y = self.forward(tape.constant(&chunk), &p, false, &mut rng)?;
            data.extend_from_slice(y.value().data());
        }
        Tensor::new([n, self.spec.num_classes], data)
    }
}

/// `Σₙ Σ_c y·ln(y / max(ŷ, 1e-12)) + (λ/2)·Σ θ²`, with `0·ln 0 = 0`.
pub fn kl_l2_loss<'t>(pred: Var<'t>, target: &Tensor, theta: &[Var<'t>], cfg: &LossConfig) -> Result<Var<'t>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("kl loss", &pred.shape(), target.shape()));
    }
    if !(cfg.lambda >= 0.0) {
        return Err(Error::arg("lambda must be non-negative"));
    }
    let tape = pred.tape();
    let entropy: f64 = target
        .data()
        .iter()
        .filter(|&&y| y > 0.0)
        .map(|&y| y as f64 * libm::log(y as f64))
        .sum();
    let cross = tape.constant(target).mul(pred.log())?.sum_all();
    let mut loss = tape.leaf_f64(&[1], vec![entropy], false)?.sub(cross)?;
    if cfg.lambda > 0.0 && !theta.is_empty() {
        let mut sq = Vec::with_capacity(theta.len());
        for &t in theta {
            sq.push(t.mul(t)?.sum_all());
        }
        let l2 = tape.concat(&sq, 0)?.sum_all().mul_scalar(cfg.lambda / 2.0);
        loss = loss.add(l2)?;
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(attention: Option<AttentionKind>) -> ModelSpec {
        ModelSpec {
            input_size: [8, 8],
            input_channels: 3,
            blocks: vec![ConvBlockSpec::new(4), ConvBlockSpec::new(6)],
            taps: vec![1, 2],
            attention,
            attention_config: AttentionConfig {
                num_heads: 2,
                key_dim: 2,
                ..Default::default()
            },
            head_hidden: 5,
            dropout_rate: 0.3,
            num_classes: 3,
        }
    }

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::standard(6, Some(AttentionKind::TriAxis)).validate().is_ok());
        let mut s = tiny(None);
        s.taps = vec![3];
        assert!(s.validate().is_err());
        s.taps = vec![];
        assert!(s.validate().is_err());
        let mut s = tiny(None);
        s.num_classes = 1;
        assert!(s.validate().is_err());
        let mut s = tiny(None);
        s.input_size = [2, 2];
        s.blocks.push(ConvBlockSpec::new(2));
        assert!(s.validate().is_err());
    }

    #[test]
    fn output_rows_on_simplex() {
        let m = Model::new(tiny(Some(AttentionKind::Cbam)), 1).unwrap();
        let x = Tensor::from_fn([3, 8, 8, 3], |i| (i % 17) as f32 / 17.0);
        let y = m.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 3]);
        for row in y.data().chunks(3) {
            assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn standard_head_widths() {
        let s = ModelSpec::standard(6, Some(AttentionKind::Se));
        assert_eq!(s.head_input(), 16 + 32 + 64);
        let none = ModelSpec::standard(6, None);
        assert_eq!(none.head_input(), 64);
    }

    #[test]
    fn param_count_closed_forms() {
        let spec = ModelSpec {
            input_size: [8, 8],
            input_channels: 3,
            blocks: vec![ConvBlockSpec::new(8)],
            taps: vec![1],
            attention: None,
            attention_config: AttentionConfig::default(),
            head_hidden: 4,
            dropout_rate: 0.0,
            num_classes: 2,
        };
        let c = Model::new(spec, 0).unwrap().param_count();
        assert_eq!(c.backbone, 3 * 3 * 3 * 8 + 8);
        assert_eq!(c.head, 8 * 4 + 4 + 4 * 2 + 2);
        assert_eq!(c.total, c.backbone + c.attention + c.head);

        let s = ModelSpec::standard(6, Some(AttentionKind::Se));
        let c = Model::new(s, 0).unwrap().param_count();
        assert_eq!(c.head, 112 * 512 + 512 + 512 * 6 + 6);
    }

    #[test]
    fn attention_grows_param_count() {
        let base = Model::new(ModelSpec::standard(6, None), 0).unwrap().param_count();
        let tri = Model::new(ModelSpec::standard(6, Some(AttentionKind::TriAxis)), 0)
            .unwrap()
            .param_count();
        assert!(tri.total > base.total);
        assert_eq!(tri.backbone, base.backbone);
    }

    #[test]
    fn kl_examples() {
        let tape = Tape::new();
        let p = Tensor::new([1, 2], vec![0.3, 0.7]).unwrap();
        let l = kl_l2_loss(
            tape.leaf(&p),
            &p,
            &[],
            &LossConfig {
                lambda: 0.0,
                batch_size: 1,
            },
        )
        .unwrap();
        assert!(l.value_f64()[0].abs() < 1e-12);

        let pred = Tensor::new([1, 2], vec![0.5, 0.5]).unwrap();
        let target = Tensor::new([1, 2], vec![1.0, 0.0]).unwrap();
        let l = kl_l2_loss(
            tape.leaf(&pred),
            &target,
            &[],
            &LossConfig {
                lambda: 0.0,
                batch_size: 1,
            },
        )
        .unwrap();
        assert!((l.value_f64()[0] - core::f64::consts::LN_2).abs() < 1e-12);

        let theta = tape.leaf(&Tensor::scalar(2.0));
        let l = kl_l2_loss(tape.leaf(&p), &p, &[theta], &LossConfig::default()).unwrap();
        assert!((l.value_f64()[0] - 0.0002).abs() < 1e-12);

        let bad = Tensor::zeros([1, 3]);
        assert!(kl_l2_loss(tape.leaf(&p), &bad, &[], &LossConfig::default()).is_err());
    }

    #[test]
    fn from_params_round_trip_and_mismatch() {
        let m = Model::new(tiny(Some(AttentionKind::Se)), 4).unwrap();
        let back = Model::from_params(m.spec().clone(), m.named_tensors()).unwrap();
        assert_eq!(back.params(), m.params());
        let mut t = m.named_tensors();
        t[1].1 = Tensor::zeros([7]);
        match Model::from_params(m.spec().clone(), t) {
            Err(Error::ArchitectureMismatch { name, .. }) => assert_eq!(name, "block1.conv.bias"),
            other => panic!("{other:?}"),
        }
    }
}
