use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wavecast::checkpoint::Checkpoint;
use wavecast::embedding::write_table;
use wavecast_core::t2t::EmbeddingTable;

fn tiny() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.toml")
}

fn wavecast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavecast"))
        .args(args)
        .env_remove("WAVECAST_OUTPUT_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn column(path: &Path, name: &str) -> Vec<f64> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let idx = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|rec| rec.unwrap()[idx].parse().unwrap()).collect()
}

fn write_csv(path: &Path, rows: usize, f: impl Fn(usize) -> (f64, f64)) {
    let mut s = String::from("date,flat,ramp\n");
    for i in 0..rows {
        let (a, b) = f(i);
        s.push_str(&format!("2021-01-01 {i:05},{a},{b}\n"));
    }
    fs::write(path, s).unwrap();
}

#[test]
fn decompose_constant_and_trend() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("series.csv");
    write_csv(&input, 100, |i| (4.0, 0.5 * i as f64));
    let out = dir.path().join("flat.csv");
    let o = wavecast(&["decompose", "--input", input.to_str().unwrap(), "--column", "flat", "--output", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let short = column(&out, "short");
    assert_eq!(short.len(), 100);
    assert!(short.iter().all(|v| v.abs() < 1e-9));

    let out = dir.path().join("ramp.csv");
    let o = wavecast(&[
        "decompose", "--input", input.to_str().unwrap(), "--column", "ramp", "--method", "pooling", "--window", "5",
        "--output", out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (x, long) = (column(&out, "value"), column(&out, "long"));
    assert_eq!(long.len(), 100);
    // A centred average tracks a line exactly away from the edges.
    assert!((2..98).all(|i| (long[i] - x[i]).abs() < 1e-9));

    let o = wavecast(&["decompose", "--input", input.to_str().unwrap(), "--column", "nope", "--output", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("nope"));
}

#[test]
fn train_evaluate_forecast_cycle() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let o = wavecast(&["--config", cfg, "--output-dir", out, "-q", "train", "--protocol", "long"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for t in [12, 24] {
        assert!(dir.path().join(format!("model_long_h{t}.ckpt")).exists());
    }
    assert!(dir.path().join("manifest_long.json").exists());

    let o = wavecast(&["--config", cfg, "--output-dir", out, "-q", "evaluate", "--protocol", "long"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("MSE"));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("report_long_synthetic.json")).unwrap()).unwrap();
    assert_eq!(report["protocol"], "long");
    assert!(report["horizons"]["12"]["mse"].as_f64().unwrap().is_finite());
    let rows = fs::read_to_string(dir.path().join("report_long_synthetic.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 4);

    let o = wavecast(&[
        "--config", cfg, "--output-dir", out, "-q", "evaluate", "--protocol", "zero", "--eval-dataset", "synthetic:9",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("synthetic→synthetic:9"));

    let o = wavecast(&["--config", cfg, "--output-dir", out, "-q", "evaluate", "--protocol", "zero", "--eval-dataset", "synthetic"]);
    assert_eq!(code(&o), 1);

    let fc = dir.path().join("forecast.csv");
    let ck = dir.path().join("model_long_h12.ckpt");
    let o = wavecast(&[
        "--config", cfg, "forecast", "--checkpoint", ck.to_str().unwrap(), "--output", fc.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(column(&fc, "ch0").len(), 12);
}

#[test]
fn pretrained_encoder_and_external_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let table = EmbeddingTable::synthetic(200, 16, 10, 5).unwrap();
    let emb = dir.path().join("emb.bin");
    write_table(&emb, &table).unwrap();
    let vocab = format!("vocab.table=\"{}\"", emb.display());
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let o = wavecast(&["--config", cfg, "--output-dir", out, "--set", &vocab, "-q", "pretrain-t2t"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t2t = dir.path().join("t2t.ckpt");
    assert!(t2t.exists());
    let o = wavecast(&[
        "--config", cfg, "--output-dir", out, "--set", &vocab, "-q", "train", "--t2t-checkpoint", t2t.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let pre = Checkpoint::load(&t2t).unwrap();
    let trained = Checkpoint::load(&dir.path().join("model_long_h12.ckpt")).unwrap();
    let vocab_rows = pre.params.get("t2t.vocab").unwrap();
    assert_eq!(vocab_rows.shape(), [40, 16]);
    assert_eq!(table.vectors.row(0), vocab_rows.row(0));
    for (name, value) in pre.params.iter() {
        assert_eq!(trained.params.get(name), Some(value), "{name}");
    }
}

#[test]
fn external_backbone_weights_are_loaded_and_kept() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    let first = wavecast(&["--config", cfg, "--output-dir", a.path().to_str().unwrap(), "-q", "train"]);
    assert_eq!(code(&first), 0, "{}", stderr(&first));
    let donor = a.path().join("model_long_h12.ckpt");
    let weights = format!("backbone_weights=\"{}\"", donor.display());
    let o = wavecast(&[
        "--config", cfg, "--output-dir", b.path().to_str().unwrap(), "--set", &weights, "--set", "train.seed=5", "-q",
        "train",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let donor = Checkpoint::load(&donor).unwrap();
    let got = Checkpoint::load(&b.path().join("model_long_h12.ckpt")).unwrap();
    let base: Vec<&String> = donor.params.names().filter(|n| n.starts_with("backbone.") && !n.contains(".lora_")).collect();
    assert!(!base.is_empty());
    for n in base {
        assert_eq!(got.params.get(n), donor.params.get(n), "{n}");
    }
    assert_ne!(got.params.get("head.weight"), donor.params.get("head.weight"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = tiny();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&wavecast(&["--no-such-flag"])), 1);
    assert_eq!(code(&wavecast(&["--help"])), 0);

    let o = wavecast(&["--config", cfg, "--set", "train.lambda=-1", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lambda"));
    let o = wavecast(&["--config", cfg, "--set", "t2t.bogus=3", "train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("t2t.bogus"));

    let o = wavecast(&["--config", cfg, "--output-dir", out, "evaluate"]);
    assert_eq!(code(&o), 2);
    let o = wavecast(&["--config", cfg, "--set", "data.columns=[\"missing\"]", "train"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("missing"));
    let o = wavecast(&["--config", "/no/such/config.toml", "train"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selftest_and_negative_control() {
    let o = wavecast(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let o = wavecast(&["selftest", "--corrupt-filter"]);
    assert_ne!(code(&o), 0);
    assert!(stdout(&o).contains("FAIL vocabulary filter"));
}
