use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use m2ae::model::{load_checkpoint, ModelParams};
use m2ae::signals::load_dataset;
use tempfile::TempDir;

const TINY: &str = "model.d_enc = 8\nmodel.enc_depth = 1\nmodel.dec_width = 8\nmodel.heads = 2\nmodel.ffn_mult = 2\n\
                    train.batch_size = 4\ntrain.max_epochs = 2  # short run\n";

fn m2ae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_m2ae")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = m2ae(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: TempDir::new().unwrap() };
        fs::write(f.path("tiny.cfg"), TINY).unwrap();
        ok(&["gen-data", "--subjects", "20", "--pairs-per-subject", "2", "--seed", "3", "--out", s(&f.path("d.m2ae"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, out: &str, extra: &[&str]) -> PathBuf {
        let dir = self.path(out);
        let (cfg, data) = (self.path("tiny.cfg"), self.path("d.m2ae"));
        let mut args = vec!["pretrain", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir)];
        args.extend(extra);
        ok(&args);
        dir
    }
}

#[test]
fn gen_data_writes_loadable_deterministic_files() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a.m2ae"), dir.path().join("b.m2ae"));
    for p in [&a, &b] {
        ok(&["gen-data", "--subjects", "64", "--pairs-per-subject", "4", "--seed", "0", "--out", s(p)]);
    }
    assert_eq!(load_dataset(&a).unwrap().len(), 256);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn single_subject_split_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let out = m2ae(&["gen-data", "--subjects", "1", "--pairs-per-subject", "4", "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("too few subjects"));
}

#[test]
fn help_documents_every_subcommand() {
    let help = ok(&["--help"]);
    for cmd in ["gen-data", "pretrain", "extract", "reconstruct", "probe", "gradcheck"] {
        assert!(help.contains(cmd), "{cmd}");
    }
    let pretrain = ok(&["pretrain", "--help"]);
    for flag in ["--config", "--data", "--out", "--set", "--mode", "--resume", "--warm-start-ecg"] {
        assert!(pretrain.contains(flag), "{flag}");
    }
    assert!(!ok(&["gradcheck", "--help"]).contains("corrupt"));
    assert_eq!(m2ae(&["pretrain"]).status.code(), Some(2));
}

#[test]
fn pretrain_writes_bounded_log_and_checkpoints() {
    let f = Fixture::new();
    let run = f.pretrain("run", &[]);
    let log = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some("epoch,lr,train_total,train_contrast,train_recon_ecg,train_recon_ppg,val_total"));
    assert!(lines.count() <= 2);
    let ckpt = load_checkpoint(run.join("best.m2ck")).unwrap();
    assert_eq!(ckpt.params.config().d_enc, 8);
    assert!(ckpt.params.is_cross_modal());

    let again = f.pretrain("run_again", &[]);
    assert_eq!(fs::read(run.join("metrics.csv")).unwrap(), fs::read(again.join("metrics.csv")).unwrap());

    let last = run.join("last.m2ck");
    let resumed = f.pretrain("run", &["--resume", s(&last), "--set", "train.max_epochs=3"]);
    assert_eq!(fs::read_to_string(resumed.join("metrics.csv")).unwrap().lines().count(), 4);
}

#[test]
fn single_modal_mode_and_warm_start() {
    let f = Fixture::new();
    let ecg = f.pretrain("ecg", &["--mode", "single_modal_ecg"]);
    let ppg = f.pretrain("ppg", &["--mode", "single_modal_ppg"]);
    let ecg_params = load_checkpoint(ecg.join("best.m2ck")).unwrap().params;
    assert!(!ecg_params.is_cross_modal());
    let (e, p) = (ecg.join("best.m2ck"), ppg.join("best.m2ck"));
    let warm =
        f.pretrain("warm", &["--warm-start-ecg", s(&e), "--warm-start-ppg", s(&p), "--set", "train.max_epochs=1"]);
    assert!(load_checkpoint(warm.join("last.m2ck")).unwrap().params.is_cross_modal());
}

#[test]
fn bad_config_exits_with_two() {
    let f = Fixture::new();
    let data = f.path("d.m2ae");
    for set in ["bogus.key=1", "model.heads=3", "train.batch_size=1", "loss.lambda=-1", "train.mode=sideways"] {
        let out = m2ae(&["pretrain", "--data", s(&data), "--out", s(&f.path("bad")), "--set", set]);
        assert_eq!(out.status.code(), Some(2), "{set}");
    }
    let out = m2ae(&["extract", "--ckpt", s(&f.path("missing")), "--data", s(&data), "--source", "ecg", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn extract_writes_one_row_per_segment() {
    let f = Fixture::new();
    let run = f.pretrain("run", &[]);
    let (ckpt, data) = (run.join("best.m2ck"), f.path("d.m2ae"));
    let (a, b) = (f.path("a.csv"), f.path("b.csv"));
    for out in [&a, &b] {
        ok(&["extract", "--ckpt", s(&ckpt), "--data", s(&data), "--source", "ppg", "--out", s(out)]);
    }
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 41);
    assert!(lines.iter().all(|l| l.split(',').count() == 11));
    assert!(lines[1].contains(",ppg,"));

    let single = f.pretrain("single", &["--mode", "single_modal_ecg"]);
    let out = m2ae(&[
        "extract",
        "--ckpt",
        s(&single.join("best.m2ck")),
        "--data",
        s(&data),
        "--source",
        "paired",
        "--out",
        s(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn reconstruct_leaves_checkpoint_untouched() {
    let f = Fixture::new();
    let run = f.pretrain("run", &[]);
    let ckpt = run.join("best.m2ck");
    let before = fs::read(&ckpt).unwrap();
    let rec = f.path("rec");
    let report = ok(&[
        "reconstruct",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&f.path("d.m2ae")),
        "--direction",
        "ppg2ecg",
        "--setting",
        "frozen",
        "--out",
        s(&rec),
    ]);
    assert_eq!(fs::read(&ckpt).unwrap(), before);
    assert!(report.contains("\"mae\""));
    let csvs: Vec<_> = fs::read_dir(&rec)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().ends_with(".csv"))
        .collect();
    assert_eq!(csvs.len(), 4);
    let first = fs::read_to_string(csvs[0].path()).unwrap();
    assert_eq!(first.lines().next(), Some("target,reconstruction"));
    assert_eq!(first.lines().count(), 2049);
    assert!(fs::read_to_string(rec.join("report.txt")).unwrap().contains("\"setting\": \"frozen\""));
}

fn write_probe_inputs(dir: &Path, separable: bool) -> (PathBuf, PathBuf) {
    let mut fp = String::from("subject_id,segment_index,source,f0,f1\n");
    let mut labels = String::from("subject_id,segment_index,label\n");
    for subject in 0..20u32 {
        for seg in 0..2u32 {
            let cls = subject % 2;
            let signal = if separable { f64::from(cls) * 4.0 } else { 0.0 };
            let wobble = f64::from((subject * 7 + seg * 3) % 5) / 5.0;
            fp.push_str(&format!("{subject},{seg},ecg,{},{wobble}\n", signal + wobble));
            labels.push_str(&format!("{subject},{seg},{cls}\n"));
        }
    }
    let (a, b) = (dir.join("fp.csv"), dir.join("labels.csv"));
    fs::write(&a, fp).unwrap();
    fs::write(&b, labels).unwrap();
    (a, b)
}

#[test]
fn probe_reports_held_out_metrics() {
    let dir = TempDir::new().unwrap();
    let (fp, labels) = write_probe_inputs(dir.path(), true);
    let report = dir.path().join("report.txt");
    ok(&["probe", "--fingerprints", s(&fp), "--labels", s(&labels), "--task", "binary", "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.contains("\"auroc\": 1,"), "{text}");
    for key in ["auprc", "f1", "accuracy", "precision", "recall"] {
        assert!(text.contains(&format!("\"{key}\"")));
    }

    ok(&["probe", "--fingerprints", s(&fp), "--labels", s(&labels), "--task", "regression", "--out", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let keys: Vec<&str> = text.lines().filter_map(|l| l.split('"').nth(1)).collect();
    assert_eq!(keys, ["mae", "rmse", "r2", "pearson"]);

    let out = m2ae(&[
        "probe",
        "--fingerprints",
        s(&fp),
        "--labels",
        s(&labels),
        "--task",
        "binary",
        "--out",
        s(&report),
        "--test-fraction",
        "1.5",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let base = ["gradcheck", "--config", s(&cfg), "--coords-per-block", "4"];
    let report = ok(&base);
    let params = ModelParams::init_cross_modal(m2ae::config::RunConfig::parse(TINY).unwrap().model, 0).unwrap();
    for name in params.names() {
        assert_eq!(report.lines().filter(|l| l.split_whitespace().next() == Some(name)).count(), 1, "{name}");
    }
    assert!(report.contains("PASS"));

    let mut bad = base.to_vec();
    bad.extend(["--corrupt-adjoint", "layer_norm:1.5"]);
    let out = m2ae(&bad);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL"));
}
