//! The `train` command's JSON configuration.
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "model": { "blocks": [{"out_channels": 8}, …], "taps": [2, 3, 4],
//!              "attention": "triaxis", "num_classes": 6 },
//!   "model_seed": 0,
//!   "train": { "phase1_epochs": 25, … },
//!   "augment": { "crop_reduction": 10, … },
//!   "paths": { "manifest": "data/manifest.json", "checkpoint": "out/model.atnf",
//!              "history": "out/history.jsonl", "metrics": "out/metrics.json" }
//! }
//! ```
//!
//! Relative paths resolve against the config file's directory.

use std::fs;
use std::path::{Path, PathBuf};

use atnf_core::augment::AugmentConfig;
use atnf_core::model::ModelSpec;
use atnf_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::SCHEMA_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub manifest: PathBuf,
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
    /// Pre-trained checkpoint whose backbone seeds the model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelSpec,
    #[serde(default)]
    pub model_seed: u64,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        cfg.model.validate()?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let paths = &mut cfg.paths;
        resolve(&mut paths.manifest);
        resolve(&mut paths.checkpoint);
        resolve(&mut paths.history);
        for p in [&mut paths.metrics, &mut paths.init_from].into_iter().flatten() {
            resolve(p);
        }
        Ok(cfg)
    }
}
