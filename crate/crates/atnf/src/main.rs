use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atnf::config::RunConfig;
use atnf::dataset::{self, DatasetManifest, MANIFEST_FILE};
use atnf::experiment::{self, CompareRow, Protocol};
use atnf::modelfile::{self, StoredModel};
use atnf::ppm::RgbImage;
use atnf::synth::SynthConfig;
use atnf::{write_atomic, Error, Result, SCHEMA_VERSION};
use atnf_core::attention::AttentionKind;
use atnf_core::augment::{Batch, OnlineAugmenter};
use atnf_core::gradcheck;
use atnf_core::model::{Model, ModelSpec};
use atnf_core::quant;
use atnf_core::rng::RngKey;
use atnf_core::train::{self, Dataset};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "atnf", version, about = "Attention-augmented scene classifiers at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic scene dataset as PPM files plus a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// First shape family; lets up-stream and down-stream tasks use disjoint families.
        #[arg(long, default_value_t = 0)]
        family_offset: usize,
        /// Also write a stratified train/test split with this train fraction.
        #[arg(long)]
        train_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
    },
    /// Write a stratified train/test split into a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        train_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output manifest; defaults to rewriting the input in place.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train from a JSON run config; writes checkpoint, history and metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on one side of a manifest's split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value_t = Side::Test)]
        split: Side,
    },
    /// Convert an fp32 checkpoint to int8 and report the footprint.
    Quantize {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also compare fp32 and int8 predictions on this manifest's test split.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train the none/SE/CBAM/tri-axis variants under one protocol.
    CompareAttn {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Phase 1 and phase 2 epochs.
        #[arg(long, num_args = 2, value_names = ["PHASE1", "PHASE2"])]
        epochs: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Write the table here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every layer's gradients against central differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        /// Coordinates probed per case.
        #[arg(long, default_value_t = 200)]
        max_coords: usize,
        /// Fraction of coordinates that must pass in every case.
        #[arg(long, default_value_t = 0.95)]
        min_fraction: f64,
    },
    /// Write each online augmentation stage of one batch as PPM images.
    AugmentPreview {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Parameter counts per group.
    Params {
        /// Take the model from a run config instead of the flags below.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 6)]
        classes: usize,
        /// none, se, ca, sa, cbam or triaxis.
        #[arg(long, default_value = "triaxis")]
        attention: String,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Side {
    Train,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}").map_err(|e| Error::io(Path::new("<stdout>"), e))
}

fn json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("plain data serializes");
    v.push(b'\n');
    v
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new(""))
}

fn load_split(manifest: &Path) -> Result<(DatasetManifest, Dataset, Dataset)> {
    let m = DatasetManifest::read(manifest)?;
    let (train_set, test_set) = m.load_split(manifest_dir(manifest))?;
    Ok((m, train_set, test_set))
}

fn parse_attention(name: &str) -> Result<Option<AttentionKind>> {
    match name {
        "none" => Ok(None),
        other => Ok(Some(other.parse()?)),
    }
}

fn gen_data(cfg: SynthConfig, out: &Path, split: Option<(f64, u64)>) -> Result<()> {
    let mut manifest = dataset::write_synthetic(&cfg, out)?;
    if let Some((fraction, seed)) = split {
        manifest = dataset::split_manifest(&manifest, fraction, seed)?;
        manifest.write(&out.join(MANIFEST_FILE))?;
    }
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "manifest": out.join(MANIFEST_FILE),
        "images": manifest.items.len(),
        "classes": manifest.class_names,
        "split": manifest.split.as_ref().map(|s| json!({"train": s.train.len(), "test": s.test.len()})),
    }))
}

fn split(manifest: &Path, fraction: f64, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let m = DatasetManifest::read(manifest)?;
    let out = out.unwrap_or_else(|| manifest.to_path_buf());
    if manifest_dir(&out) != manifest_dir(manifest) {
        return Err(Error::Config("the split manifest must sit next to the images it lists".into()));
    }
    let s = dataset::split_manifest(&m, fraction, seed)?;
    s.write(&out)?;
    let split = s.split.as_ref().expect("split_manifest sets the split");
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "manifest": out,
        "train": split.train.len(),
        "test": split.test.len(),
    }))
}

fn train_cmd(config: &Path) -> Result<()> {
    let cfg = RunConfig::read(config)?;
    let (manifest, train_set, test_set) = load_split(&cfg.paths.manifest)?;
    if manifest.image_size != cfg.model.input_size {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            manifest.image_size, cfg.model.input_size
        )));
    }
    let model = match &cfg.paths.init_from {
        Some(path) => train::transfer(&modelfile::load(path)?.into_model()?, cfg.model.clone(), cfg.model_seed)?,
        None => Model::new(cfg.model.clone(), cfg.model_seed)?,
    };
    let protocol = Protocol {
        train: cfg.train.clone(),
        augment: cfg.augment.clone(),
    };
    let out = experiment::fit(model, &train_set, &test_set, &protocol, false)?;

    let size = modelfile::save(&cfg.paths.checkpoint, &StoredModel::Float(out.model.clone()))?;
    let mut history = Vec::new();
    for rec in &out.report.history {
        serde_json::to_writer(&mut history, rec).expect("plain data serializes");
        history.push(b'\n');
    }
    write_atomic(&cfg.paths.history, &history)?;
    let metrics = json!({
        "schema_version": SCHEMA_VERSION,
        "test_accuracy": out.test.accuracy,
        "test_total": out.test.total,
        "confusion": out.test.confusion,
        "parameters": out.model.param_count(),
        "steps": out.report.steps,
        "checkpoint_bytes": size.total,
    });
    if let Some(path) = &cfg.paths.metrics {
        write_atomic(path, &json_bytes(&metrics))?;
    }
    print_json(&metrics)
}

fn eval(model: &Path, manifest: &Path, side: Side) -> Result<()> {
    let model = modelfile::load(model)?.into_model()?;
    let (_, train_set, test_set) = load_split(manifest)?;
    let data = match side {
        Side::Train => train_set,
        Side::Test => test_set,
    };
    let e = train::evaluate(&model, &data)?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "accuracy": e.accuracy,
        "total": e.total,
        "confusion": e.confusion,
    }))
}

fn quantize(model_path: &Path, out: &Path, manifest: Option<&Path>) -> Result<()> {
    let bytes = fs::read(model_path).map_err(|e| Error::io(model_path, e))?;
    let (_, fp32_size) = modelfile::read_header(&bytes)?;
    let model = modelfile::decode(&bytes)?.into_model()?;
    let q = quant::quantize_model(&model)?;
    let int8_size = modelfile::save(out, &StoredModel::Quantized(q.clone()))?;
    let mut report = json!({
        "schema_version": SCHEMA_VERSION,
        "footprint": q.footprint(),
        "fp32_file_bytes": fp32_size.total,
        "int8_file_bytes": int8_size.total,
        "payload_ratio": int8_size.payload as f64 / fp32_size.payload as f64,
        "file_ratio": int8_size.total as f64 / fp32_size.total as f64,
    });
    if let Some(manifest) = manifest {
        let (_, _, test_set) = load_split(manifest)?;
        let dq = q.dequantize()?;
        let p32 = model.predict(test_set.images())?;
        let p8 = dq.predict(test_set.images())?;
        let c = test_set.num_classes();
        let top1 = |p: &atnf_core::Tensor| p.data().chunks(c).map(train::argmax).collect::<Vec<_>>();
        let (a32, a8) = (top1(&p32), top1(&p8));
        let agree = a32.iter().zip(&a8).filter(|(x, y)| x == y).count() as f64 / a32.len() as f64;
        let e32 = train::evaluate_predictions(&p32, test_set.labels(), test_set.num_classes())?;
        let e8 = train::evaluate_predictions(&p8, test_set.labels(), test_set.num_classes())?;
        report["fp32_accuracy"] = json!(e32.accuracy);
        report["int8_accuracy"] = json!(e8.accuracy);
        report["top1_agreement"] = json!(agree);
    }
    print_json(&report)
}

fn compare(manifest: &Path, seed: u64, epochs: Option<Vec<usize>>, format: Format, out: Option<PathBuf>) -> Result<()> {
    let (m, train_set, test_set) = load_split(manifest)?;
    let base = ModelSpec {
        input_size: m.image_size,
        ..ModelSpec::standard(m.num_classes, Some(AttentionKind::TriAxis))
    };
    let mut protocol = Protocol::desk(seed);
    if let Some(e) = epochs {
        protocol.train.phase1_epochs = e[0];
        protocol.train.phase2_epochs = e[1];
    }
    let rows = experiment::compare_attention(&base, seed, &train_set, &test_set, &protocol, experiment::threads_from_env())?;
    let text = match format {
        Format::Json => json_bytes(&json!({ "schema_version": SCHEMA_VERSION, "rows": rows })),
        Format::Csv => csv(&rows).into_bytes(),
    };
    match out {
        Some(path) => write_atomic(&path, &text),
        None => std::io::stdout()
            .lock()
            .write_all(&text)
            .map_err(|e| Error::io(Path::new("<stdout>"), e)),
    }
}

fn csv(rows: &[CompareRow]) -> String {
    let mut s = String::from("attention,accuracy,parameters\n");
    for r in rows {
        s.push_str(&format!("{},{:.6},{}\n", r.attention, r.accuracy, r.parameters));
    }
    s
}

fn gradcheck_cmd(step: f64, tol: f64, max_coords: usize, min_fraction: f64) -> Result<bool> {
    let cases = gradcheck::suite(step, tol, Some(max_coords))?;
    let ok = cases.iter().all(|c| c.report.passed(min_fraction));
    let rows: Vec<_> = cases
        .iter()
        .map(|c| {
            json!({
                "case": c.name,
                "checked": c.report.checked(),
                "pass_fraction": c.report.pass_fraction(),
                "max_error": c.report.max_error(),
                "passed": c.report.passed(min_fraction),
            })
        })
        .collect();
    print_json(&json!({ "schema_version": SCHEMA_VERSION, "passed": ok, "cases": rows }))?;
    Ok(ok)
}

fn write_batch(dir: &Path, stage: &str, batch: &Batch) -> Result<usize> {
    let n = batch.len();
    for i in 0..n {
        let img = RgbImage::from_tensor(&batch.images.slice_outer(i, i + 1)?.reshape(&batch.images.shape()[1..])?)?;
        write_atomic(&dir.join(format!("{stage}_{i:03}.ppm")), &img.encode())?;
    }
    Ok(n)
}

fn augment_preview(manifest: &Path, out: &Path, count: usize, seed: u64) -> Result<()> {
    let (_, train_set, _) = load_split(manifest)?;
    let rows: Vec<usize> = (0..count.min(train_set.len())).collect();
    if rows.len() < 2 {
        return Err(Error::Dataset("augment-preview needs at least 2 training images".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let protocol = Protocol::desk(seed);
    let mut aug = OnlineAugmenter::new(protocol.augment)?;
    let key = RngKey::new(seed).derive_tag("preview");
    let original = train_set.batch(&rows)?;
    let cropped = aug.random_crop(&original, key)?;
    let erased = aug.random_erase(&cropped, key)?;
    let noisy = aug.add_gaussian_noise(&erased, key)?;
    let mixed = aug.mixup(&noisy, key)?;
    let mut written = Vec::new();
    for (stage, batch) in [
        ("0_original", &original),
        ("1_crop", &cropped),
        ("2_erase", &erased),
        ("3_noise", &noisy),
        ("4_mixup", &mixed),
    ] {
        written.push(json!({ "stage": stage, "images": write_batch(out, stage, batch)? }));
    }
    print_json(&json!({ "schema_version": SCHEMA_VERSION, "out": out, "stages": written }))
}

fn params(config: Option<PathBuf>, classes: usize, attention: &str) -> Result<()> {
    let spec = match config {
        Some(path) => RunConfig::read(&path)?.model,
        None => ModelSpec::standard(classes, parse_attention(attention)?),
    };
    let model = Model::new(spec, 0)?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "attention": experiment::attention_label(model.spec().attention),
        "parameters": model.param_count(),
    }))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData {
            out,
            classes,
            per_class,
            size,
            seed,
            family_offset,
            train_fraction,
            split_seed,
        } => {
            let cfg = SynthConfig {
                classes,
                per_class,
                size,
                seed,
                family_offset,
                ..SynthConfig::default()
            };
            gen_data(cfg, &out, train_fraction.map(|f| (f, split_seed)))?;
        }
        Command::Split {
            manifest,
            train_fraction,
            seed,
            out,
        } => split(&manifest, train_fraction, seed, out)?,
        Command::Train { config } => train_cmd(&config)?,
        Command::Eval { model, manifest, split } => eval(&model, &manifest, split)?,
        Command::Quantize { model, out, manifest } => quantize(&model, &out, manifest.as_deref())?,
        Command::CompareAttn {
            manifest,
            seed,
            epochs,
            format,
            out,
        } => compare(&manifest, seed, epochs, format, out)?,
        Command::Gradcheck {
            step,
            tol,
            max_coords,
            min_fraction,
        } => return gradcheck_cmd(step, tol, max_coords, min_fraction),
        Command::AugmentPreview {
            manifest,
            out,
            count,
            seed,
        } => augment_preview(&manifest, &out, count, seed)?,
        Command::Params {
            config,
            classes,
            attention,
        } => params(config, classes, &attention)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
