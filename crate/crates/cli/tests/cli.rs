use std::path::Path;
use std::process::{Command, Output};

use asd_core::container::FeatureFile;
use asd_core::synthetic::{generate, SyntheticSpec};

fn asd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asd"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("spawn asd")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = "\
# small enough to train in seconds
sample_rate = 16000
clip_seconds = 0.25
win_ms = 64
n_mels = 16
h = 8
wavegram_multiplier = 2
width_mult = 0.125
epochs = 2
batch = 8
lr = 0.01
";

fn fixture(dir: &Path) -> (String, String) {
    let spec = SyntheticSpec {
        seconds: 0.25,
        train_per_machine: 6,
        test_normal_per_machine: 3,
        test_anomalous_per_machine: 3,
        ..Default::default()
    };
    let data = dir.join("data");
    generate(&spec).write_dcase(&data).unwrap();
    let cfg = dir.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (cfg.display().to_string(), data.display().to_string())
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&asd(&[])), 1);
    assert_eq!(code(&asd(&["frobnicate"])), 1);
    assert_eq!(code(&asd(&["train", "--config", "x"])), 1);
    assert_eq!(code(&asd(&["--help"])), 0);
}

#[test]
fn params_prints_default_budget() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("empty.cfg");
    std::fs::write(&cfg, "").unwrap();
    let o = asd(&["params", "--config", &s(&cfg)]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l == "total\t884326"), "{out}");
    assert!(out.lines().any(|l| l == "attention\t1428"), "{out}");
}

#[test]
fn bad_config_is_usage_missing_config_is_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "n_mels = many\n").unwrap();
    assert_eq!(code(&asd(&["params", "--config", &s(&cfg)])), 1);
    std::fs::write(&cfg, "alpha = -1\n").unwrap();
    assert_eq!(code(&asd(&["params", "--config", &s(&cfg)])), 1);
    assert_eq!(code(&asd(&["params", "--config", &s(&dir.path().join("none.cfg"))])), 2);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.asdc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let wav = dir.path().join("x.wav");
    std::fs::write(&wav, b"RIFF").unwrap();
    let o = asd(&["score", "--ckpt", &s(&junk), "--wav", &s(&wav), "--label", "hum:00"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("junk.asdc"));
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.path().join("m.asdc");
    assert_eq!(code(&asd(&["train", "--config", &s(&cfg), "--data", &s(&empty), "--out", &s(&out)])), 2);
}

#[test]
fn features_without_checkpoint_writes_log_mel() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let wav = Path::new(&data).join("hum/train/normal_id_00_00000000.wav");
    let out = dir.path().join("f.asdf");
    let o = asd(&["features", "--wav", &s(&wav), "--out", &s(&out), "--config", &cfg]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let f = FeatureFile::load(&out).unwrap();
    assert_eq!(f.version(), 1);
    // 4000 samples, 1024-sample window, hop 512, centred: 1 + 4000 / 512.
    assert_eq!((f.frames, f.bins), (8, 16));
    assert!(f.data.iter().all(|v| v.is_finite()));
}

#[test]
fn train_eval_score_features_attention() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, data) = fixture(dir.path());
    let ckpt = dir.path().join("m.asdc");

    let o = asd(&["train", "--config", &cfg, "--data", &data, "--out", &s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let epochs: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e["loss"].as_f64().unwrap().is_finite()));
    assert!(dir.path().join("m.best.asdc").exists());

    let report = dir.path().join("report.jsonl");
    let o = asd(&["eval", "--ckpt", &s(&ckpt), "--data", &data, "--report", &s(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("overall\tAUC"));
    let text = std::fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // 4 machines x 6 test clips, then the summary.
    assert_eq!(lines.len(), 25);
    let summary: serde_json::Value = serde_json::from_str(lines[24]).unwrap();
    let auc = summary["summary"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let wav = Path::new(&data).join("whine/test/anomaly_id_01_00000005.wav");
    let o = asd(&["score", "--ckpt", &s(&ckpt), "--wav", &s(&wav), "--label", "whine:01"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let score: f64 = stdout(&o).trim().parse().unwrap();
    assert!(score.is_finite() && score >= 0.0, "{score}");
    let o = asd(&["score", "--ckpt", &s(&ckpt), "--wav", &s(&wav), "--label", "drill:07"]);
    assert_eq!(code(&o), 1);

    let feats = dir.path().join("f.asdf");
    let o = asd(&["features", "--wav", &s(&wav), "--out", &s(&feats), "--ckpt", &s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let f = FeatureFile::load(&feats).unwrap();
    assert_eq!((f.version(), f.frames, f.bins, f.channels), (2, 8, 16, Some(2)));

    let att = dir.path().join("att");
    let o = asd(&["attention-stats", "--ckpt", &s(&ckpt), "--data", &data, "--out", &s(&att)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("24 test clips"));
    for name in ["mean.asdf", "std.asdf", "mean_ch0.png", "std_ch1.png", "bands.json"] {
        assert!(att.join(name).exists(), "{name}");
    }
}

#[test]
fn attention_stats_requires_attention() {
    let dir = tempfile::tempdir().unwrap();
    let (_, data) = fixture(dir.path());
    let cfg = dir.path().join("noatt.cfg");
    std::fs::write(&cfg, format!("{TINY}epochs = 1\nuse_attention = false\n").replace("epochs = 2\n", "")).unwrap();
    let ckpt = dir.path().join("m.asdc");
    assert_eq!(code(&asd(&["train", "--config", &s(&cfg), "--data", &data, "--out", &s(&ckpt)])), 0);
    let o = asd(&["attention-stats", "--ckpt", &s(&ckpt), "--data", &data, "--out", &s(&dir.path().join("a"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn gradcheck_passes_with_one_seed() {
    let o = asd(&["gradcheck", "--seeds", "1"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| !l.starts_with("FAIL")));
    assert_eq!(code(&asd(&["gradcheck", "--seeds", "0"])), 1);
}
