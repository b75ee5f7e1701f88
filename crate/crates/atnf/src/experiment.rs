//! Training protocols shared by the CLI and the acceptance suite.

use std::thread;

use atnf_core::attention::AttentionKind;
use atnf_core::augment::AugmentConfig;
use atnf_core::model::{Model, ModelSpec};
use atnf_core::train::{self, Dataset, Evaluation, TrainConfig, TrainReport};
use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub train: TrainConfig,
    pub augment: AugmentConfig,
}

impl Protocol {
    /// The two-phase schedule on 32×32 images. Crop and erase extents are
    /// the 256-pixel defaults scaled to the smaller image.
    pub fn desk(seed: u64) -> Self {
        Self {
            train: TrainConfig {
                seed,
                ..TrainConfig::desk()
            },
            augment: AugmentConfig {
                crop_reduction: 1,
                erase_extent: 3,
                seed,
                ..AugmentConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub model: Model,
    pub report: TrainReport,
    pub test: Evaluation,
    /// Test accuracy after every epoch, when tracking was requested.
    pub test_curve: Vec<f64>,
}

/// Rotates `train_set` four ways, trains `model` under `protocol` and scores
/// it on `test_set`.
pub fn fit(mut model: Model, train_set: &Dataset, test_set: &Dataset, protocol: &Protocol, track: bool) -> Result<RunOutcome> {
    let rotated = train_set.rotated()?;
    let mut curve = Vec::new();
    let report = train::train_with(&mut model, &rotated, &protocol.train, &protocol.augment, |rec, m| {
        if track {
            let acc = train::evaluate(m, test_set).map(|e| e.accuracy).unwrap_or(f64::NAN);
            log::debug!(
                "epoch {} phase {} loss {:.4} train {:.3} test {:.3}",
                rec.epoch,
                rec.phase,
                rec.loss,
                rec.train_acc,
                acc
            );
            curve.push(acc);
        } else {
            log::debug!(
                "epoch {} phase {} loss {:.4} train {:.3}",
                rec.epoch,
                rec.phase,
                rec.loss,
                rec.train_acc
            );
        }
    })?;
    let test = train::evaluate(&model, test_set)?;
    Ok(RunOutcome {
        model,
        report,
        test,
        test_curve: curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub attention: String,
    pub accuracy: f64,
    pub parameters: usize,
}

pub const COMPARED: [Option<AttentionKind>; 4] = [
    None,
    Some(AttentionKind::Se),
    Some(AttentionKind::Cbam),
    Some(AttentionKind::TriAxis),
];

pub fn attention_label(kind: Option<AttentionKind>) -> &'static str {
    kind.map_or("none", |k| k.name())
}

/// Trains the none/SE/CBAM/tri-axis variants of `base` under one protocol.
/// Runs are independent, so `threads > 1` changes wall time only.
pub fn compare_attention(
    base: &ModelSpec,
    model_seed: u64,
    train_set: &Dataset,
    test_set: &Dataset,
    protocol: &Protocol,
    threads: usize,
) -> Result<Vec<CompareRow>> {
    let run = |kind: Option<AttentionKind>| -> Result<CompareRow> {
        let spec = ModelSpec {
            attention: kind,
            taps: if kind.is_some() {
                base.taps.clone()
            } else {
                vec![base.blocks.len()]
            },
            ..base.clone()
        };
        let model = Model::new(spec, model_seed)?;
        let parameters = model.param_count().total;
        let out = fit(model, train_set, test_set, protocol, false)?;
        log::info!(
            "{}: accuracy {:.4}, {} parameters",
            attention_label(kind),
            out.test.accuracy,
            parameters
        );
        Ok(CompareRow {
            attention: attention_label(kind).to_string(),
            accuracy: out.test.accuracy,
            parameters,
        })
    };
    let threads = threads.clamp(1, COMPARED.len());
    let mut results: Vec<Option<Result<CompareRow>>> = (0..COMPARED.len()).map(|_| None).collect();
    for chunk in (0..COMPARED.len()).collect::<Vec<_>>().chunks(threads) {
        thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&i| (i, s.spawn(move || run(COMPARED[i])))).collect();
            for (i, h) in handles {
                results[i] = Some(h.join().expect("training thread panicked"));
            }
        });
    }
    results.into_iter().map(|r| r.expect("every variant ran")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    /// Final test accuracy of the model trained from scratch.
    pub scratch_accuracy: f64,
    pub scratch_curve: Vec<f64>,
    pub transfer_curve: Vec<f64>,
    /// First fine-tuning epoch (1-based) at which the transferred model's
    /// test accuracy reaches `scratch_accuracy`.
    pub epochs_to_match: Option<usize>,
    pub epochs: usize,
}

impl TransferOutcome {
    pub fn within_half(&self) -> bool {
        self.epochs_to_match.is_some_and(|e| 2 * e <= self.epochs)
    }
}

/// Pre-trains on the up-stream task, then trains the down-stream task both
/// from scratch and from the transferred backbone under the same protocol.
pub fn transfer_experiment(
    upstream: (&Dataset, &Dataset),
    downstream: (&Dataset, &Dataset),
    spec: &ModelSpec,
    model_seed: u64,
    upstream_protocol: &Protocol,
    protocol: &Protocol,
) -> Result<TransferOutcome> {
    let up_spec = ModelSpec {
        num_classes: upstream.0.num_classes(),
        ..spec.clone()
    };
    let down_spec = ModelSpec {
        num_classes: downstream.0.num_classes(),
        ..spec.clone()
    };
    let pre = fit(Model::new(up_spec, model_seed)?, upstream.0, upstream.1, upstream_protocol, false)?;
    log::info!("up-stream accuracy {:.4}", pre.test.accuracy);

    let scratch = fit(
        Model::new(down_spec.clone(), model_seed)?,
        downstream.0,
        downstream.1,
        protocol,
        true,
    )?;
    let transferred = train::transfer(&pre.model, down_spec, model_seed)?;
    let fine = fit(transferred, downstream.0, downstream.1, protocol, true)?;
    let target = scratch.test.accuracy;
    let epochs_to_match = fine.test_curve.iter().position(|&a| a >= target).map(|i| i + 1);
    Ok(TransferOutcome {
        scratch_accuracy: target,
        epochs: scratch.test_curve.len(),
        scratch_curve: scratch.test_curve,
        transfer_curve: fine.test_curve,
        epochs_to_match,
    })
}

/// Worker count from `ATNF_THREADS`, defaulting to 1.
pub fn threads_from_env() -> usize {
    std::env::var("ATNF_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}
