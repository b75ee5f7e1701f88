//! Adam, the two-phase training schedule, transfer and evaluation.
//!
//! Phase 1 trains with the full online augmentation pipeline (each loader
//! batch of `batch_size` grows to `3 × batch_size` after mixup). Phase 2
//! continues at a lower learning rate on un-augmented batches. Offline
//! rotation is applied by the caller beforehand (see [`Dataset::rotated`])
//! and stays in effect for both phases.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::augment::{rotate_dataset, AugmentConfig, Batch, OnlineAugmenter};
use crate::model::{kl_l2_loss, LossConfig, Model, ModelSpec};
use crate::params::ParamGroup;
use crate::rng::RngKey;
use crate::{Error, Result, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase1_lr: f64,
    pub phase2_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// L2 coefficient λ of the loss.
    pub l2_lambda: f64,
    /// Keep backbone parameters fixed (transfer fine-tuning only).
    pub freeze_backbone: bool,
}

impl TrainConfig {
    /// 50 + 10 epochs at 1e-4 then 1e-6, sized for fine-tuning a
    /// pre-trained backbone.
    pub fn fine_tune() -> Self {
        Self {
            phase1_epochs: 50,
            phase2_epochs: 10,
            phase1_lr: 1e-4,
            phase2_lr: 1e-6,
            ..Self::default()
        }
    }

    /// 25 + 5 epochs with learning rates sized for training from scratch
    /// on the synthetic task.
    pub fn desk() -> Self {
        Self::default()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.phase1_lr > 0.0 && self.phase2_lr > 0.0) {
            return Err(Error::arg("learning rates must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::arg("batch_size must be at least 2"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase1_epochs: 25,
            phase2_epochs: 5,
            phase1_lr: 2e-3,
            phase2_lr: 2e-5,
            batch_size: 60,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            l2_lambda: 1e-4,
            freeze_backbone: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers per parameter slot plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub t: u64,
}

/// One Adam update with bias correction. Slots whose gradient is `None` are
/// left untouched (their moments do not decay).
pub fn adam_step<'a>(
    slots: impl IntoIterator<Item = (&'a mut Tensor, Option<&'a Tensor>)>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    state.t += 1;
    let t = state.t as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, (param, grad)) in slots.into_iter().enumerate() {
        if state.m.len() <= i {
            state.m.resize(i + 1, Vec::new());
            state.v.resize(i + 1, Vec::new());
        }
        let Some(grad) = grad else { continue };
        if grad.shape() != param.shape() {
            return Err(Error::shape("adam", param.shape(), grad.shape()));
        }
        let n = param.numel();
        if state.m[i].len() != n {
            if !state.m[i].is_empty() {
                return Err(Error::shape("adam state", param.shape(), &[state.m[i].len()]));
            }
            state.m[i] = vec![0.0; n];
            state.v[i] = vec![0.0; n];
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((p, &g), mi), vi) in param.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mn = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * g * g;
            *mi = mn as f32;
            *vi = vn as f32;
            let update = lr * (mn / c1) / (libm::sqrt(vn / c2) + cfg.eps);
            *p = (*p as f64 - update) as f32;
        }
    }
    Ok(())
}

/// Labelled images held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    /// `images` is `[N, H, W, C]`; `labels[i] < num_classes`.
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::shape("dataset", images.shape(), &[labels.len()]));
        }
        if labels.iter().any(|&l| l >= num_classes) {
            return Err(Error::arg("label out of range"));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn from_images(images: &[Tensor], labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Self::new(Tensor::stack(images)?, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn image(&self, i: usize) -> Result<Tensor> {
        let s = self.images.shape();
        self.images.slice_outer(i, i + 1)?.reshape(&s[1..])
    }

    /// Every image followed by its three quarter-turn rotations.
    pub fn rotated(&self) -> Result<Self> {
        let imgs = (0..self.len()).map(|i| self.image(i)).collect::<Result<Vec<_>>>()?;
        let rot = rotate_dataset(&imgs)?;
        let labels = self.labels.iter().flat_map(|&l| [l; 4]).collect();
        Self::from_images(&rot, labels, self.num_classes)
    }

    /// One-hot batch of the given rows.
    pub fn batch(&self, rows: &[usize]) -> Result<Batch> {
        let s = self.images.shape();
        let len: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * len);
        for &r in rows {
            data.extend_from_slice(&self.images.data()[r * len..(r + 1) * len]);
        }
        let mut shape = s.to_vec();
        shape[0] = rows.len();
        let classes: Vec<usize> = rows.iter().map(|&r| self.labels[r]).collect();
        Batch::one_hot(Tensor::new(shape, data)?, &classes, self.num_classes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based, counted across both phases.
    pub epoch: usize,
    pub phase: u8,
    pub lr: f64,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Fraction of presented samples whose argmax matches the label's argmax.
    pub train_acc: f64,
    /// Samples presented to the loss this epoch.
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    /// Random words consumed by online augmentation in phase 1 and phase 2.
    pub online_aug_draws: [u64; 2],
    pub steps: u64,
}

pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, aug: &AugmentConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, aug, |_, _| {})
}

/// [`train`] with a callback after every epoch that sees the record and the
/// current parameters.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    aug: &AugmentConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    cfg.validate()?;
    if data.num_classes() != model.spec().num_classes {
        return Err(Error::arg(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes(),
            model.spec().num_classes
        )));
    }
    let loss_cfg = LossConfig {
        lambda: cfg.l2_lambda,
        batch_size: cfg.batch_size,
    };
    let adam = cfg.adam();
    let mut state = OptimizerState::default();
    let mut report = TrainReport::default();
    let root = RngKey::new(cfg.seed);
    let aug_root = RngKey::new(aug.seed);
    let trainable: Vec<bool> = model
        .params()
        .iter()
        .map(|p| !(cfg.freeze_backbone && p.group == ParamGroup::Backbone))
        .collect();

    let total = cfg.phase1_epochs + cfg.phase2_epochs;
    for epoch in 0..total {
        let phase = if epoch < cfg.phase1_epochs { 1u8 } else { 2 };
        let lr = if phase == 1 { cfg.phase1_lr } else { cfg.phase2_lr };
        let mut augmenter = OnlineAugmenter::new(aug.clone())?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut root.derive_tag("shuffle").derive(epoch as u64).rng());

        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        for (bi, rows) in order.chunks(cfg.batch_size).enumerate() {
            if rows.len() < 2 {
                continue;
            }
            let batch = data.batch(rows)?;
            let batch = if phase == 1 {
                augmenter.apply(&batch, aug_root.derive(epoch as u64).derive(bi as u64))?
            } else {
                batch
            };
            let mut dropout_rng = root.derive_tag("dropout").derive(epoch as u64).derive(bi as u64).rng();

            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let pred = model.forward(tape.constant(&batch.images), &p, true, &mut dropout_rng)?;
            let loss = kl_l2_loss(pred, &batch.labels, p.vars(), &loss_cfg)?;
            loss_sum += loss.value_f64()[0];
            let probs = pred.value();
            correct += count_correct(&probs, &batch.labels);
            seen += batch.len();

            let grads = tape.backward(loss)?;
            let grads: Vec<Option<Tensor>> = p
                .vars()
                .iter()
                .zip(&trainable)
                .map(|(v, &t)| if t { grads.get(*v) } else { None })
                .collect();
            drop(p);
            drop(tape);
            let slots = model
                .params_mut()
                .iter_mut()
                .zip(grads.iter())
                .map(|(p, g)| (&mut p.tensor, g.as_ref()));
            adam_step(slots, &mut state, lr, &adam)?;
            report.steps += 1;
        }
        report.online_aug_draws[phase as usize - 1] += augmenter.draws();
        let rec = EpochRecord {
            epoch: epoch + 1,
            phase,
            lr,
            loss: if seen > 0 { loss_sum / seen as f64 } else { 0.0 },
            train_acc: if seen > 0 { correct as f64 / seen as f64 } else { 0.0 },
            samples: seen,
        };
        on_epoch(&rec, model);
        report.history.push(rec);
    }
    Ok(report)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn count_correct(pred: &Tensor, target: &Tensor) -> usize {
    let c = pred.shape()[1];
    pred.data()
        .chunks(c)
        .zip(target.data().chunks(c))
        .filter(|(p, t)| argmax(p) == argmax(t))
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub total: usize,
}

/// Scores class-probability rows against integer labels.
pub fn evaluate_predictions(pred: &Tensor, labels: &[usize], num_classes: usize) -> Result<Evaluation> {
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if pred.shape() != [labels.len(), num_classes] {
        return Err(Error::shape("evaluate", pred.shape(), &[labels.len(), num_classes]));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut correct = 0;
    for (row, &y) in pred.data().chunks(num_classes).zip(labels) {
        let p = argmax(row);
        confusion[y][p] += 1;
        correct += (p == y) as usize;
    }
    Ok(Evaluation {
        accuracy: correct as f64 / labels.len() as f64,
        confusion,
        total: labels.len(),
    })
}

pub fn evaluate(model: &Model, data: &Dataset) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let pred = model.predict(data.images())?;
    evaluate_predictions(&pred, data.labels(), data.num_classes())
}

/// Builds a model for `downstream` whose backbone (and attention, when the
/// attention kinds agree) is copied bit-exactly from `pretrained`; the head
/// is freshly initialised from `seed`.
pub fn transfer(pretrained: &Model, downstream: ModelSpec, seed: u64) -> Result<Model> {
    let mut model = Model::new(downstream, seed)?;
    let copy_attention = pretrained.spec().attention == model.spec().attention;
    for p in model.params_mut().iter_mut() {
        let wanted = match p.group {
            ParamGroup::Backbone => true,
            ParamGroup::Attention => copy_attention,
            ParamGroup::Head => false,
        };
        if !wanted {
            continue;
        }
        let src = pretrained.params().by_name(&p.name).ok_or_else(|| Error::ArchitectureMismatch {
            name: p.name.clone(),
            detail: "missing from the pretrained model".into(),
        })?;
        if src.tensor.shape() != p.tensor.shape() {
            return Err(Error::ArchitectureMismatch {
                name: p.name.clone(),
                detail: format!("pretrained shape {:?} != {:?}", src.tensor.shape(), p.tensor.shape()),
            });
        }
        p.tensor = src.tensor.clone();
    }
    Ok(model)
}
