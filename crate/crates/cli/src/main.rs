//! `fogstat`: synthetic data, texture features, training, prediction and
//! evaluation for the dual-branch fog segmenter.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
//! failure (divergence, failed self-check).

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;

use fogstat_core::dataio::synth::{synth_dataset, SynthConfig};
use fogstat_core::dataio::{load_image, load_manifest, load_mask, load_samples, save_manifest, save_mask, Split};
use fogstat_core::dbsfnet::{class_probability, load_checkpoint, predict_mask, save_checkpoint, ModelConfig};
use fogstat_core::error::{Error, Result};
use fogstat_core::experiments::{ablation_variants, run_ablation, write_ablation_csv};
use fogstat_core::kem::{kem_transform, KemConfig, PatchSpec, FEATURE_NAMES};
use fogstat_core::metrics::{confusion, curves, metrics_from_confusion, ConfusionCounts, MetricReport};
use fogstat_core::ndtensor::{read_ndt, write_ndt, Tensor};
use fogstat_core::selfcheck::{run_selfcheck, SelfCheckOptions};
use fogstat_core::trainer::{train, write_log_csv, TrainConfig, TrainStatus};

#[derive(Parser, Debug)]
#[command(name = "fogstat", version, about = "Texture statistics and dual-branch fog segmentation")]
struct Cli {
    /// Worker threads; 1 forces fully serial execution.
    #[arg(long, global = true, env = "FOGSTAT_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic fog/cloud dataset with an event-grouped manifest.
    Synth(SynthArgs),
    /// Compute the 8-channel texture feature stack of one image.
    Extract(ExtractArgs),
    /// Train a model on the train split of a manifest.
    Train(TrainArgs),
    /// Segment one image with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Precision-recall and ROC curves from probability maps.
    Curves(CurvesArgs),
    /// Train and score ablation variants under one seed.
    Ablate(AblateArgs),
    /// Run the built-in oracle suite.
    Selfcheck(SelfcheckArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Number of fog events [default: 40].
    #[arg(long)]
    events: Option<usize>,
    /// Frames per event [default: 8].
    #[arg(long)]
    frames: Option<usize>,
    /// Image side length [default: 64].
    #[arg(long)]
    size: Option<usize>,
    /// [default: 7]
    #[arg(long)]
    seed: Option<u64>,
    /// JSON `SynthConfig`; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    patch: usize,
    #[arg(long, value_delimiter = ',', default_value = "2,3,4")]
    levels: Vec<u8>,
    /// Keep raw statistics instead of per-channel standardisation.
    #[arg(long)]
    raw: bool,
    /// Also write one min-max scaled PGM per channel into this directory.
    #[arg(long)]
    dump_pgm: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ModelTrainArgs {
    /// JSON `TrainConfig`; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON `ModelConfig`; missing fields take the desk defaults.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cfg: ModelTrainArgs,
    /// Output directory for `model.fgs`, `log.csv` and `run.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Defaults to the threshold stored in the checkpoint.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the class-1 probability map as a `1 × H × W` NDT tensor.
    #[arg(long)]
    probs: Option<PathBuf>,
    /// JSON `KemConfig` matching the one used in training; defaults otherwise.
    #[arg(long)]
    kem: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of predicted `.pgm` masks.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth `.pgm` masks with matching file names.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    /// Directory of `.ndt` probability maps.
    #[arg(long)]
    probs: PathBuf,
    /// Directory of ground-truth masks named `<stem>.pgm`.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 101)]
    points: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    cfg: ModelTrainArgs,
    /// Comma-separated variants: complete, base, base+<feature>, no-fs, block<k>.
    #[arg(long, value_delimiter = ',')]
    toggles: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SelfcheckArgs {
    /// Seeds per gradient check.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Write the JSON report here as well as printing it.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Resolved configuration recorded next to every output.
#[derive(Serialize)]
struct RunRecord<'a, T: Serialize> {
    command: &'a str,
    threads: usize,
    version: &'static str,
    config: T,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("fogstat: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<u8> {
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match cli.command {
        Command::Synth(a) => synth(a, threads),
        Command::Extract(a) => extract(a, threads),
        Command::Train(a) => train_cmd(a, threads),
        Command::Predict(a) => predict(a, threads),
        Command::Evaluate(a) => evaluate(a, threads),
        Command::Curves(a) => curves_cmd(a, threads),
        Command::Ablate(a) => ablate(a, threads),
        Command::Selfcheck(a) => selfcheck(a, threads),
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn record<T: Serialize>(path: &Path, command: &str, threads: usize, config: T) -> Result<()> {
    write_json(path, &RunRecord { command, threads, version: env!("CARGO_PKG_VERSION"), config })
}

/// `report.json` → `report.json.run.json`.
fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".run.json");
    PathBuf::from(s)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(fs::File::create(path)?))
}

fn synth(a: SynthArgs, threads: usize) -> Result<u8> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SynthConfig::default(),
    };
    cfg.events = a.events.unwrap_or(cfg.events);
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.size = a.size.unwrap_or(cfg.size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    fs::create_dir_all(&a.out)?;
    let manifest = synth_dataset(&cfg, &a.out)?;
    save_manifest(a.out.join("manifest.json"), &manifest)?;
    record(&a.out.join("run.json"), "synth", threads, &cfg)?;
    let sizes: Vec<String> = Split::ALL.iter().map(|&s| format!("{} {}", s.name(), manifest.events(s).len())).collect();
    eprintln!("wrote {} events ({})", cfg.events, sizes.join(", "));
    Ok(0)
}

fn extract(a: ExtractArgs, threads: usize) -> Result<u8> {
    let cfg = KemConfig { patch: PatchSpec::new(a.patch)?, levels: a.levels.clone(), standardize: !a.raw };
    let image = load_image(&a.input)?;
    let feats = kem_transform(&image, &cfg)?;
    write_ndt(&a.out, feats.tensor())?;
    if let Some(dir) = &a.dump_pgm {
        for (c, name) in FEATURE_NAMES.iter().enumerate() {
            dump_channel(&dir.join(format!("{name}.pgm")), feats.tensor(), c)?;
        }
    }
    record(&sidecar(&a.out), "extract", threads, &cfg)?;
    Ok(0)
}

/// Min-max scaled 8-bit view of one channel.
fn dump_channel(path: &Path, t: &Tensor, c: usize) -> Result<()> {
    let (_, h, w) = t.dims3()?;
    let plane = t.channel(c);
    let lo = plane.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = create(path)?;
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = plane.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

fn resolve_configs(a: &ModelTrainArgs) -> Result<(ModelConfig, TrainConfig)> {
    let model: ModelConfig = match &a.model {
        Some(p) => read_json(p)?,
        None => ModelConfig::default(),
    };
    let mut train: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = a.seed {
        train.seed = s;
    }
    if let Some(n) = a.iters {
        train.total_iters = n;
    }
    if let Some(b) = a.batch {
        train.batch_size = b;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

#[derive(Serialize)]
struct TrainRecord<'a> {
    manifest: &'a Path,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn train_cmd(a: TrainArgs, threads: usize) -> Result<u8> {
    let (model, cfg) = resolve_configs(&a.cfg)?;
    let manifest = load_manifest(&a.manifest)?;
    if manifest.image_size != model.input_size {
        return Err(Error::Config(format!(
            "manifest images are {0}×{0} but the model expects {1}×{1}",
            manifest.image_size, model.input_size
        )));
    }
    fs::create_dir_all(&a.out)?;
    record(&a.out.join("run.json"), "train", threads, TrainRecord { manifest: &a.manifest, model: &model, train: &cfg })?;
    let train_set = load_samples(&manifest, Split::Train, &cfg.kem)?;
    let val_set = load_samples(&manifest, Split::Val, &cfg.kem)?;
    eprintln!("training on {} frames, validating on {}", train_set.len(), val_set.len());
    let outcome = train(&model, &cfg, &train_set, &val_set)?;
    save_checkpoint(a.out.join("model.fgs"), &outcome.net)?;
    write_log_csv(create(&a.out.join("log.csv"))?, &outcome.log)?;
    match outcome.status {
        TrainStatus::Completed => {
            if let Some(row) = outcome.log.last() {
                eprintln!("done: train loss {:.4}, val csi {:?}", row.train_loss, row.val_csi);
            }
            Ok(0)
        }
        TrainStatus::Diverged { step, reason } => {
            eprintln!("fogstat: diverged at iteration {step}: {reason}; last good checkpoint saved");
            Ok(4)
        }
    }
}

#[derive(Serialize)]
struct PredictRecord<'a> {
    ckpt: &'a Path,
    input: &'a Path,
    threshold: f64,
    kem: KemConfig,
}

fn predict(a: PredictArgs, threads: usize) -> Result<u8> {
    let net = load_checkpoint(&a.ckpt)?;
    let threshold = a.threshold.unwrap_or(net.config().threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let image = load_image(&a.input)?;
    let kem: KemConfig = match &a.kem {
        Some(p) => read_json(p)?,
        None => KemConfig::default(),
    };
    kem.validate()?;
    let feats = kem_transform(&image, &kem)?;
    let logits = net.forward(&image, &feats)?;
    save_mask(&a.out, &predict_mask(&logits, threshold)?)?;
    if let Some(p) = &a.probs {
        let (_, h, w) = logits.dims3()?;
        write_ndt(p, &Tensor::from_vec(&[1, h, w], class_probability(&logits, 1)?)?)?;
    }
    record(&sidecar(&a.out), "predict", threads, PredictRecord { ckpt: &a.ckpt, input: &a.input, threshold, kem })?;
    Ok(0)
}

/// Files in `dir` with extension `ext`, keyed by file stem.
fn files_by_stem(dir: &Path, ext: &str) -> Result<BTreeMap<String, PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("no .{ext} files in {}", dir.display())));
    }
    Ok(out)
}

fn truth_for(truth: &BTreeMap<String, PathBuf>, stem: &str) -> Result<PathBuf> {
    truth.get(stem).cloned().ok_or_else(|| Error::Data(format!("no ground truth for {stem}")))
}

#[derive(Serialize)]
struct EvaluateReport {
    images: usize,
    counts: ConfusionCounts,
    metrics: MetricReport,
}

fn evaluate(a: EvaluateArgs, threads: usize) -> Result<u8> {
    let preds = files_by_stem(&a.pred, "pgm")?;
    let truths = files_by_stem(&a.truth, "pgm")?;
    let mut counts = ConfusionCounts::default();
    for (stem, p) in &preds {
        counts += confusion(&load_mask(p)?, &load_mask(truth_for(&truths, stem)?)?, None)?;
    }
    let report = EvaluateReport { images: preds.len(), counts, metrics: metrics_from_confusion(counts) };
    write_json(&a.out, &report)?;
    record(&sidecar(&a.out), "evaluate", threads, serde_json::json!({ "pred": a.pred, "truth": a.truth }))?;
    let m = &report.metrics;
    eprintln!("csi {:.4}  miou {:.4}  f1 {:.4}  kappa {:.4}", m.csi, m.miou, m.f1, m.kappa);
    Ok(0)
}

fn curves_cmd(a: CurvesArgs, threads: usize) -> Result<u8> {
    if a.points < 2 {
        return Err(Error::Config("--points must be at least 2".into()));
    }
    let probs = files_by_stem(&a.probs, "ndt")?;
    let truths = files_by_stem(&a.truth, "pgm")?;
    let mut maps = Vec::with_capacity(probs.len());
    let mut masks = Vec::with_capacity(probs.len());
    for (stem, p) in &probs {
        let t = read_ndt(p)?;
        let mask = load_mask(truth_for(&truths, stem)?)?;
        if t.len() != mask.height * mask.width {
            return Err(Error::Data(format!("{}: {} values for a {}×{} mask", p.display(), t.len(), mask.height, mask.width)));
        }
        maps.push(t.into_data());
        masks.push(mask);
    }
    let c = curves(&maps, &masks, a.points)?;
    let mut w = create(&a.out)?;
    writeln!(w, "threshold,precision,recall,tpr,fpr")?;
    for p in &c.points {
        writeln!(w, "{:.6},{:.6},{:.6},{:.6},{:.6}", p.threshold, p.precision, p.recall, p.tpr, p.fpr)?;
    }
    w.flush()?;
    record(&sidecar(&a.out), "curves", threads, serde_json::json!({ "probs": a.probs, "truth": a.truth, "points": a.points, "roc_auc": c.roc_auc }))?;
    eprintln!("roc auc {:.4}", c.roc_auc);
    Ok(0)
}

#[derive(Serialize)]
struct AblateRecord<'a> {
    manifest: &'a Path,
    toggles: &'a [String],
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn ablate(a: AblateArgs, threads: usize) -> Result<u8> {
    let (model, cfg) = resolve_configs(&a.cfg)?;
    let variants = ablation_variants(&model, &a.toggles)?;
    let manifest = load_manifest(&a.manifest)?;
    let train_set = load_samples(&manifest, Split::Train, &cfg.kem)?;
    let val_set = load_samples(&manifest, Split::Val, &cfg.kem)?;
    let test_set = load_samples(&manifest, Split::Test, &cfg.kem)?;
    let rows = run_ablation(&variants, &cfg, &train_set, &val_set, &test_set)?;
    let mut w = create(&a.out)?;
    write_ablation_csv(&mut w, &rows)?;
    w.flush()?;
    record(&sidecar(&a.out), "ablate", threads, AblateRecord { manifest: &a.manifest, toggles: &a.toggles, model: &model, train: &cfg })?;
    Ok(0)
}

fn selfcheck(a: SelfcheckArgs, threads: usize) -> Result<u8> {
    let opts = SelfCheckOptions { seeds: a.seeds, ..SelfCheckOptions::default() };
    let report = run_selfcheck(&opts);
    for c in &report.checks {
        println!("{:<24} {:<4} {:>8.3}s  {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.seconds, c.detail);
    }
    if let Some(p) = &a.out {
        write_json(p, &report)?;
        record(&sidecar(p), "selfcheck", threads, serde_json::json!({ "seeds": a.seeds, "glcm_patches": opts.glcm_patches }))?;
    }
    Ok(if report.all_passed() { 0 } else { 4 })
}
