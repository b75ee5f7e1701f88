//! Image manifests, stratified splits and loading into training sets.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use atnf_core::rng::RngKey;
use atnf_core::train::Dataset;
use atnf_core::Tensor;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::ppm::RgbImage;
use crate::synth::{self, SynthConfig};
use crate::SCHEMA_VERSION;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Entry {
    /// Relative to the manifest's directory.
    pub file: PathBuf,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_fraction: f64,
    pub seed: u64,
    pub train: Vec<Entry>,
    pub test: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub name: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// `[H, W]`
    pub image_size: [usize; 2],
    pub items: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SynthConfig>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl DatasetManifest {
    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Dataset(m));
        if self.class_names.len() != self.num_classes {
            return bad(format!("{} class names for {} classes", self.class_names.len(), self.num_classes));
        }
        if let Some(e) = self.items.iter().find(|e| e.label >= self.num_classes) {
            return bad(format!("{} has label {} of {}", e.file.display(), e.label, self.num_classes));
        }
        let mut counts = vec![0usize; self.num_classes];
        for e in &self.items {
            counts[e.label] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return bad(format!("class {} ({}) has no images", c, self.class_names[c]));
        }
        let all: HashSet<&Entry> = self.items.iter().collect();
        if all.len() != self.items.len() {
            return bad("duplicate entries".into());
        }
        if let Some(s) = &self.split {
            let train: HashSet<&Entry> = s.train.iter().collect();
            let test: HashSet<&Entry> = s.test.iter().collect();
            if !train.is_disjoint(&test) {
                return bad("train and test splits overlap".into());
            }
            if train.len() + test.len() != all.len() || !train.union(&test).all(|e| all.contains(e)) {
                return bad("splits do not partition the items".into());
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if m.schema_version != SCHEMA_VERSION {
            return Err(Error::Dataset(format!(
                "{}: schema_version {} (expected {SCHEMA_VERSION})",
                path.display(),
                m.schema_version
            )));
        }
        m.validate().map_err(|e| e.context(path))?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, text.as_bytes())
    }

    fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|e| e.label).collect()
    }

    /// Decodes `entries`, checking every image against `image_size`.
    pub fn load(&self, dir: &Path, entries: &[Entry]) -> Result<Dataset> {
        if entries.is_empty() {
            return Err(Error::Dataset("no images selected".into()));
        }
        let [h, w] = self.image_size;
        let mut images = Vec::with_capacity(entries.len());
        for e in entries {
            let path = dir.join(&e.file);
            let img = RgbImage::read(&path)?;
            if (img.height(), img.width()) != (h, w) {
                return Err(Error::Dataset(format!(
                    "{} is {}x{}, manifest says {}x{}",
                    path.display(),
                    img.width(),
                    img.height(),
                    w,
                    h
                )));
            }
            images.push(img.to_tensor());
        }
        let labels = entries.iter().map(|e| e.label).collect();
        Ok(Dataset::from_images(&images, labels, self.num_classes)?)
    }

    /// Train and test sets of the recorded split.
    pub fn load_split(&self, dir: &Path) -> Result<(Dataset, Dataset)> {
        let s = self
            .split
            .as_ref()
            .ok_or_else(|| Error::Dataset("manifest has no train/test split; run `split` first".into()))?;
        Ok((self.load(dir, &s.train)?, self.load(dir, &s.test)?))
    }
}

/// Per-class shuffle, then the first `round(n · fraction)` of each class go
/// to train. Returns `(train, test)` index lists in ascending order.
pub fn stratified_split(labels: &[usize], num_classes: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Dataset(format!("train fraction {fraction} is outside (0, 1)")));
    }
    let root = RngKey::new(seed).derive_tag("split");
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for c in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        let n_train = (idx.len() as f64 * fraction).round() as usize;
        if n_train == 0 || n_train == idx.len() {
            return Err(Error::Dataset(format!(
                "fraction {fraction} leaves class {c} ({} images) with an empty {} split",
                idx.len(),
                if n_train == 0 { "train" } else { "test" }
            )));
        }
        idx.shuffle(&mut root.derive(c as u64).rng());
        train.extend_from_slice(&idx[..n_train]);
        test.extend_from_slice(&idx[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

pub fn split_manifest(m: &DatasetManifest, fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let (train, test) = stratified_split(&m.labels(), m.num_classes, fraction, seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| m.items[i].clone()).collect();
    Ok(DatasetManifest {
        split: Some(Split {
            train_fraction: fraction,
            seed,
            train: pick(&train),
            test: pick(&test),
        }),
        ..m.clone()
    })
}

/// Renders the synthetic set into `dir` as PPM files plus a manifest.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<DatasetManifest> {
    let samples = synth::generate(cfg)?;
    let names = cfg.class_names();
    fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(dir, e))?;
    let mut items = Vec::with_capacity(samples.len());
    for s in &samples {
        let file = PathBuf::from("images").join(format!("{}_{:04}.ppm", names[s.class], s.index));
        write_atomic(&dir.join(&file), &s.image.encode())?;
        items.push(Entry { file, label: s.class });
    }
    let manifest = DatasetManifest {
        schema_version: SCHEMA_VERSION,
        name: format!("synthetic-{}x{}", cfg.classes, cfg.per_class),
        num_classes: cfg.classes,
        class_names: names,
        image_size: [cfg.size, cfg.size],
        items,
        split: None,
        generator: Some(cfg.clone()),
    };
    manifest.write(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Train and test sets drawn from the generator without touching disk.
/// Pixels pass through the same 8-bit quantization as the PPM files.
pub fn synthetic_split(cfg: &SynthConfig, fraction: f64, split_seed: u64) -> Result<(Dataset, Dataset)> {
    let samples = synth::generate(cfg)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.class).collect();
    let (train, test) = stratified_split(&labels, cfg.classes, fraction, split_seed)?;
    let build = |ix: &[usize]| -> Result<Dataset> {
        let images: Vec<Tensor> = ix.iter().map(|&i| samples[i].image.to_tensor()).collect();
        Ok(Dataset::from_images(&images, ix.iter().map(|&i| labels[i]).collect(), cfg.classes)?)
    };
    Ok((build(&train)?, build(&test)?))
}
