use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gaitgraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gaitgraph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small network and batches so a 4-subject corpus trains in seconds.
const SMALL: [&str; 10] = [
    "--set",
    "model.channel_divisor=8",
    "--set",
    "augment.window=16",
    "--set",
    "train.subjects_per_batch=2",
    "--set",
    "train.steps_per_epoch=2",
    "--set",
    "eval.window=16",
];

fn prepared(subjects: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let out = dir.path().join("run");
    let o = gaitgraph(&["prepare", p(&corpus), "--synthetic", subjects, "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

fn train_small(dir: &Path, out: &str) -> Output {
    let index = dir.join("run/index.json");
    let mut args = vec!["train", "--cycles", "1:0.01", "--epochs-scale", "1", "--out", out, "--index", p(&index)];
    args.extend(SMALL);
    gaitgraph(&args)
}

#[test]
fn inspect_prints_the_layer_table() {
    let o = gaitgraph(&["inspect"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let shapes: Vec<&str> = text.lines().skip(1).map(|l| l[21..].trim()).collect();
    assert_eq!(
        shapes,
        [
            "60 × 17 × 3",
            "60 × 17 × 64",
            "60 × 17 × 64",
            "60 × 17 × 32",
            "30 × 17 × 128",
            "30 × 17 × 128",
            "15 × 17 × 256",
            "15 × 17 × 256",
            "1 × 256",
            "1 × 128"
        ]
    );
    let short = stdout(&gaitgraph(&["inspect", "--frames", "20"]));
    let frames: Vec<&str> = short.lines().skip(2).take(7).map(|l| l[21..].split(' ').next().unwrap()).collect();
    assert_eq!(frames, ["20", "20", "20", "10", "10", "5", "5"]);
}

#[test]
fn prepare_reports_counts_and_failures() {
    let dir = prepared("2");
    let report = stdout(&gaitgraph(&["prepare", p(&dir.path().join("corpus")), "--out", p(&dir.path().join("run"))]));
    assert!(report.contains("sequences: 220"), "{report}");
    assert!(report.contains("subject 001: NM=66 BG=22 CL=22"), "{report}");

    let bad = dir.path().join("corpus/002-cl-02-180.csv");
    fs::write(&bad, "0,1,2,3\n").unwrap();
    let o = gaitgraph(&["prepare", p(&dir.path().join("corpus")), "--out", p(&dir.path().join("run"))]);
    assert!(o.status.success());
    let report = stdout(&o);
    assert!(report.contains("sequences: 219"), "{report}");
    assert!(report.contains("malformed files: 1") && report.contains("002-cl-02-180.csv"), "{report}");

    let empty = tempfile::tempdir().unwrap();
    let o = gaitgraph(&["prepare", p(empty.path()), "--out", p(&empty.path().join("run"))]);
    assert!(!o.status.success());
    assert!(stdout(&o).contains("sequences: 0"));
}

#[test]
fn train_echoes_the_default_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let o = gaitgraph(&["train", "--out", p(dir.path())]);
    assert!(!o.status.success(), "no corpus configured");
    let echo = stderr(&o);
    for needle in ["batch 128", "temperature 0.01", "weight decay 1e-5", "(300, 1e-2)", "(100, 1e-5)"] {
        assert!(echo.contains(needle), "{needle} missing from {echo}");
    }
}

#[test]
fn train_evaluate_and_embed() {
    let dir = prepared("4");
    let run = dir.path().join("a");
    let o = train_small(dir.path(), p(&run));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["weights.ggw", "history.jsonl", "config.json", "checkpoint/state.json"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    // same config and seed, byte-identical weights
    let again = dir.path().join("b");
    assert!(train_small(dir.path(), p(&again)).status.success());
    assert_eq!(fs::read(run.join("weights.ggw")).unwrap(), fs::read(again.join("weights.ggw")).unwrap());

    let index = dir.path().join("run/index.json");
    let mut args = vec!["evaluate", "--mode", "shuffle", "--out", p(&run), "--index", p(&index)];
    args.extend(SMALL);
    let o = gaitgraph(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("mode: sort") && text.contains("mode: shuffle"), "{text}");
    let header = text.lines().nth(1).unwrap();
    assert_eq!(header.matches('°').count(), 11);
    assert!(header.trim_end().ends_with("mean"));
    assert!(run.join("eval_shuffle.json").is_file());

    let mut args = vec!["evaluate", "--out", p(&run), "--index", p(&index)];
    args.extend(["--set", "model.channel_divisor=4"]);
    let o = gaitgraph(&args);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert!(err.contains("expected") && err.contains("found"), "{err}");

    let seq = dir.path().join("corpus/004-nm-05-090.csv");
    let weights = run.join("weights.ggw");
    let embed = || gaitgraph(&["embed", "--weights", p(&weights), p(&seq)]);
    let (a, b) = (embed(), embed());
    assert!(a.status.success(), "{}", stderr(&a));
    assert_eq!(stdout(&a), stdout(&b));
    assert_eq!(stdout(&a).lines().count(), 1);
    let values: Vec<f64> = serde_json::from_str(&stdout(&a)).unwrap();
    assert_eq!(values.len(), 128);
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-5);

    let short = dir.path().join("sixteen.csv");
    let text = fs::read_to_string(&seq).unwrap();
    let cut: String = text.lines().map(|l| l.rsplitn(4, ',').nth(3).unwrap().to_string() + "\n").collect();
    fs::write(&short, cut).unwrap();
    let o = gaitgraph(&["embed", "--weights", p(&weights), p(&short)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("expected 17 joints"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_every_layer() {
    let o = gaitgraph(&["gradcheck"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    for layer in ["TemporalConv", "BatchNorm", "GraphConv", "Bottleneck block", "Model"] {
        assert!(text.contains(layer), "{text}");
    }
    assert!(!text.contains("FAIL"));
}

#[test]
fn config_file_and_bad_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(&cfg, r#"{"model.channel_divisor": 4}"#).unwrap();
    let o = gaitgraph(&["inspect", "--config", p(&cfg)]);
    assert!(stdout(&o).contains("60 × 17 × 16"));
    let o = gaitgraph(&["inspect", "--set", "model.no_such_key=1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("no_such_key"));
}
