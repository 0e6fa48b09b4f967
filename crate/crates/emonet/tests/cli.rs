use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn emonet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emonet"))
        .args(args)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small enough to train in a debug build within seconds.
const TINY: [&str; 14] = [
    "--set",
    "synth.n_per_class=5",
    "--set",
    "eval.k=2",
    "--set",
    "train.max_epochs=1",
    "--set",
    "model.conv_filters=[4,4,4]",
    "--set",
    "model.fc_dim=8",
    "--set",
    "model.lstm_hidden=4",
    "--set",
    "train.batch_size=4",
];

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic-quick.json")
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(
        emonet(&["crossval", "--out-dir", s(&out)]).status.code(),
        Some(1)
    );
    assert_eq!(
        emonet(&["params", "--set", "model.nope=1"]).status.code(),
        Some(1)
    );
    assert_eq!(emonet(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(emonet(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.csv");
    std::fs::write(&m, "path,label\nmissing.wav,a\n").unwrap();
    let out = emonet(&[
        "features",
        "--manifest",
        s(&m),
        "--cache",
        s(&dir.path().join("c")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.wav"));
}

#[test]
fn diverging_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config();
    let mut args = vec!["crossval", "--synthetic", "--config", s(&cfg)];
    args.extend(TINY);
    args.extend(["--set", "train.lr=1e300", "--out-dir"]);
    let out_dir = dir.path().join("o");
    args.push(s(&out_dir));
    let out = emonet(&args);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_is_reproducible_and_featurizes() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let out = emonet(&["synth", "--seed", "3", "--out-dir", s(d)]);
        assert!(out.status.success());
    }
    let mut wavs: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".wav"))
        .collect();
    wavs.sort();
    assert_eq!(wavs.len(), 60);
    for n in wavs.iter().chain([&"manifest.csv".to_string()]) {
        assert_eq!(
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
            "{n}"
        );
    }
    let other = dir.path().join("c");
    emonet(&["synth", "--seed", "4", "--out-dir", s(&other)]);
    assert_ne!(
        std::fs::read(a.join(&wavs[0])).unwrap(),
        std::fs::read(other.join(&wavs[0])).unwrap()
    );

    let cache = dir.path().join("cache");
    let manifest = a.join("manifest.csv");
    let cold = emonet(&["features", "--manifest", s(&manifest), "--cache", s(&cache)]);
    let cold = String::from_utf8(cold.stdout).unwrap();
    assert!(cold.starts_with("60 utterances, "), "{cold}");
    assert!(cold.contains("cache hits: 0/60"));
    let warm = emonet(&[
        "features",
        "--manifest",
        s(&manifest),
        "--out-cache",
        s(&cache),
    ]);
    let warm = String::from_utf8(warm.stdout).unwrap();
    assert!(warm.contains("cache hits: 60/60"), "{warm}");
    assert_eq!(cold.lines().next(), warm.lines().next());
}

#[test]
fn params_reports_totals() {
    let out = String::from_utf8(emonet(&["params"]).stdout).unwrap();
    assert!(
        out.lines()
            .last()
            .unwrap()
            .split_whitespace()
            .eq(["total", "965702", "(0.97M)"]),
        "{out}"
    );
    let out = emonet(&["params", "--json", "--set", "model.kernel_size=3"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["total"], 554_822);
    assert_eq!(v["padding"], 1);
}

#[test]
fn crossval_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let cfg = quick_config();
    let mut args = vec![
        "--jobs",
        "2",
        "crossval",
        "--synthetic",
        "--config",
        s(&cfg),
    ];
    args.extend(TINY);
    args.extend(["--out-dir", s(&out_dir)]);
    let out = emonet(&args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "resolved_config.json",
        "report.json",
        "fold0_confusion.csv",
        "fold1_history.jsonl",
        "fold1.aen.best",
    ] {
        assert!(out_dir.join(f).exists(), "{f}");
    }
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["k"], 2);
    assert_eq!(report["data_source"], "synthetic");
    let resolved = std::fs::read_to_string(out_dir.join("resolved_config.json")).unwrap();
    assert!(resolved.contains("\"eval.k\": 2"));
}
