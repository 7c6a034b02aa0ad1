use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fogstat_core::ndtensor::read_ndt;

fn fogstat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fogstat")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fogstat(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small synthetic dataset plus 32×32 model and short training configs.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(&["synth", "--events", "5", "--frames", "2", "--size", "32", "--seed", "3", "--out", p(&root.join("data"))]);
        fs::write(root.join("model.json"), r#"{"input_size": 32}"#).unwrap();
        fs::write(root.join("train.json"), r#"{"total_iters": 3, "batch_size": 2, "seed": 5}"#).unwrap();
        Fixture { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn train(&self, out: &str, threads: &str) -> PathBuf {
        let out = self.path(out);
        ok(&[
            "--threads",
            threads,
            "train",
            "--manifest",
            p(&self.path("data/manifest.json")),
            "--model",
            p(&self.path("model.json")),
            "--config",
            p(&self.path("train.json")),
            "--out",
            p(&out),
        ]);
        out
    }
}

#[test]
fn synth_writes_manifest_frames_and_record() {
    let f = Fixture::new();
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("data/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["image_size"], 32);
    let events: usize = ["train", "val", "test"].iter().map(|s| manifest["splits"][s].as_array().unwrap().len()).sum();
    assert_eq!(events, 5);
    assert!(f.path("data/images/event000_f1.ppm").exists());
    assert!(f.path("data/masks/event004_f0.pgm").exists());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("data/run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth");
    assert_eq!(run["config"]["seed"], 3);
}

#[test]
fn extract_writes_eight_channel_stack() {
    let f = Fixture::new();
    let out = f.path("feats.ndt");
    let dump = f.path("dump");
    ok(&["extract", "--input", p(&f.path("data/images/event000_f0.ppm")), "--out", p(&out), "--patch", "5", "--levels", "2,3", "--dump-pgm", p(&dump)]);
    assert_eq!(read_ndt(&out).unwrap().shape(), &[8, 32, 32]);
    assert!(dump.join("homogeneity.pgm").exists());
    let run = fs::read_to_string(f.path("feats.ndt.run.json")).unwrap();
    assert!(run.contains("\"levels\""));
}

#[test]
fn train_predict_evaluate_curves_pipeline() {
    let f = Fixture::new();
    let ckpt = f.train("ckpt", "1");
    let log = fs::read_to_string(ckpt.join("log.csv")).unwrap();
    assert!(log.starts_with("step,lr,train_loss,val_loss,val_csi\n"));
    assert_eq!(log.lines().count(), 4);
    assert!(ckpt.join("run.json").exists());

    let pred = f.path("pred");
    let probs = f.path("probs");
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&probs).unwrap();
    for name in ["event000_f0", "event001_f1"] {
        ok(&[
            "predict",
            "--ckpt",
            p(&ckpt.join("model.fgs")),
            "--input",
            p(&f.path(&format!("data/images/{name}.ppm"))),
            "--threshold",
            "0.5",
            "--out",
            p(&pred.join(format!("{name}.pgm"))),
            "--probs",
            p(&probs.join(format!("{name}.ndt"))),
        ]);
    }
    assert_eq!(read_ndt(probs.join("event000_f0.ndt")).unwrap().shape(), &[1, 32, 32]);

    let report = f.path("report.json");
    ok(&["evaluate", "--pred", p(&pred), "--truth", p(&f.path("data/masks")), "--out", p(&report)]);
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["images"], 2);
    let c = &r["counts"];
    let total: u64 = ["tp", "fp", "fn", "tn"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(total, 2 * 32 * 32);

    let csv = f.path("curves.csv");
    ok(&["curves", "--probs", p(&probs), "--truth", p(&f.path("data/masks")), "--points", "11", "--out", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("threshold,precision,recall,tpr,fpr\n"));
    assert_eq!(text.lines().count(), 12);
    assert!(f.path("curves.csv.run.json").exists());
}

#[test]
fn training_is_identical_across_thread_counts() {
    let f = Fixture::new();
    let a = f.train("one", "1");
    let b = f.train("many", "3");
    assert_eq!(fs::read(a.join("model.fgs")).unwrap(), fs::read(b.join("model.fgs")).unwrap());
    assert_eq!(fs::read(a.join("log.csv")).unwrap(), fs::read(b.join("log.csv")).unwrap());
}

#[test]
fn ablate_rows_and_unknown_toggle() {
    let f = Fixture::new();
    let (manifest, model, train) = (f.path("data/manifest.json"), f.path("model.json"), f.path("train.json"));
    let common = ["--manifest", p(&manifest), "--model", p(&model), "--config", p(&train)];

    let out = f.path("ablate.csv");
    let mut args = vec!["ablate"];
    args.extend(common);
    args.extend(["--out", p(&out)]);
    ok(&args);
    let text = fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("complete,"));

    let two = f.path("two.csv");
    let mut args = vec!["ablate"];
    args.extend(common);
    args.extend(["--toggles", "base,base+energy", "--out", p(&two)]);
    ok(&args);
    let variants: Vec<String> = fs::read_to_string(&two).unwrap().lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(variants, ["base", "base+energy"]);

    let bad = f.path("bad.csv");
    let mut args = vec!["ablate"];
    args.extend(common);
    args.extend(["--toggles", "sharpen", "--out", p(&bad)]);
    assert_eq!(fogstat(&args).status.code(), Some(2));
}

#[test]
fn selfcheck_passes_and_reports_timing() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("selfcheck.json");
    let out = ok(&["selfcheck", "--seeds", "1", "--out", p(&report)]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.lines().all(|l| l.contains(" PASS ")), "{text}");
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r["checks"].as_array().unwrap().iter().all(|c| c["seconds"].as_f64().unwrap() >= 0.0));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let out = dir.path().join("out");
    assert_eq!(fogstat(&["train", "--manifest", p(&missing), "--out", p(&out)]).status.code(), Some(3));

    let bad_cfg = dir.path().join("bad.json");
    fs::write(&bad_cfg, r#"{"lr0": -1.0}"#).unwrap();
    assert_eq!(fogstat(&["train", "--manifest", p(&missing), "--config", p(&bad_cfg), "--out", p(&out)]).status.code(), Some(2));

    assert_eq!(fogstat(&["--threads", "0", "selfcheck"]).status.code(), Some(2));
    assert_eq!(fogstat(&["no-such-command"]).status.code(), Some(2));

    let bad_mask = dir.path().join("m.pgm");
    fs::write(&bad_mask, b"P5 1 1 255\n\x07").unwrap();
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    fs::copy(&bad_mask, pred.join("m.pgm")).unwrap();
    let code = fogstat(&["evaluate", "--pred", p(&pred), "--truth", p(&pred), "--out", p(&dir.path().join("r.json"))]).status.code();
    assert_eq!(code, Some(3));
}

#[test]
fn thread_count_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("s.json");
    let out = Command::new(env!("CARGO_BIN_EXE_fogstat"))
        .env("FOGSTAT_THREADS", "2")
        .args(["selfcheck", "--seeds", "1", "--out", p(&report)])
        .output()
        .unwrap();
    assert!(out.status.success());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("s.json.run.json")).unwrap()).unwrap();
    assert_eq!(run["threads"], 2);
}
