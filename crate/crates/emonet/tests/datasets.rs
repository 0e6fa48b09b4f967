use std::path::Path;

use emonet::datasets::{build_features, label_map, label_preset, load_manifest, LabelMap};
use emonet::wav::write_wav;
use emonet::Error;
use emonet_core::dsp::{MelConfig, Waveform};

fn write_corpus(dir: &Path, n: usize) -> Vec<String> {
    let labels = ["anger", "neutral"];
    let mut rows = vec!["path,label,speaker".to_string()];
    for i in 0..n {
        let f = 200.0 + 50.0 * i as f64;
        let w = Waveform::new(
            (0..4000 + 100 * i)
                .map(|t| (2.0 * std::f64::consts::PI * f * t as f64 / 16_000.0).sin() * 0.3)
                .collect(),
            16_000,
        );
        let name = format!("u{i}.wav");
        write_wav(&dir.join(&name), &w).unwrap();
        rows.push(format!("{name},{},s{}", labels[i % 2], i % 3));
    }
    std::fs::write(dir.join("manifest.csv"), rows.join("\n") + "\n").unwrap();
    rows
}

#[test]
fn manifest_columns_are_found_by_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "label,path\nsad,a.wav\nhappy,sub/b.wav\n").unwrap();
    let e = load_manifest(&p).unwrap();
    assert_eq!(e.len(), 2);
    assert_eq!(e[1].path, dir.path().join("sub/b.wav"));
    assert_eq!(e[1].label, "happy");
    assert_eq!(e[0].speaker, None);
    assert_eq!(label_map(&e, None).unwrap().names(), ["happy", "sad"]);
}

#[test]
fn bad_manifests_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    for text in [
        "",
        "path,speaker\na.wav,x\n",
        "path,label\na.wav,x\na.wav,y\n",
        "path,label\n,x\n",
        "path,label\n",
    ] {
        std::fs::write(&p, text).unwrap();
        assert!(
            matches!(load_manifest(&p), Err(Error::Manifest { .. })),
            "{text:?}"
        );
    }
}

#[test]
fn presets_fix_the_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    std::fs::write(&p, "path,label\na.wav,sadness\nb.wav,anger\n").unwrap();
    let e = load_manifest(&p).unwrap();
    let m = label_map(&e, Some("kedas")).unwrap();
    assert_eq!(m.len(), 5);
    assert_eq!(m, label_preset("kedas").unwrap());
    assert!(matches!(
        label_map(&e, Some("ksu-phase1")),
        Err(Error::Config(_))
    ));
    assert!(matches!(label_map(&e, Some("nope")), Err(Error::Config(_))));
}

#[test]
fn warm_cache_reuses_every_utterance() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 6);
    let entries = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    let labels = LabelMap::new(["anger", "neutral"]);
    let mel = MelConfig::default();
    let cache = dir.path().join("cache");
    let (cold, s1) = build_features(&entries, &labels, &mel, Some(&cache)).unwrap();
    assert_eq!((s1.hits, s1.computed), (0, 6));
    let (warm, s2) = build_features(&entries, &labels, &mel, Some(&cache)).unwrap();
    assert_eq!((s2.hits, s2.computed), (6, 0));
    assert_eq!(s1.frames, s2.frames);
    for (a, b) in cold.iter().zip(&warm) {
        assert_eq!(a.label, b.label);
        assert_eq!(a.features, b.features);
    }
    let (uncached, _) = build_features(&entries, &labels, &mel, None).unwrap();
    assert_eq!(uncached[0].features, cold[0].features);

    let other = MelConfig {
        hop: mel.hop / 2,
        ..mel
    };
    let (_, s3) = build_features(&entries, &labels, &other, Some(&cache)).unwrap();
    assert_eq!((s3.hits, s3.computed), (0, 6));
}

#[test]
fn failing_files_are_listed_exactly() {
    let dir = tempfile::tempdir().unwrap();
    write_corpus(dir.path(), 10);
    std::fs::write(dir.path().join("u4.wav"), b"RIFF....garbage").unwrap();
    let entries = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    let labels = LabelMap::new(["anger", "neutral"]);
    match build_features(&entries, &labels, &MelConfig::default(), None) {
        Err(Error::Features(f)) => {
            assert_eq!(f.len(), 1);
            assert_eq!(f[0].0, dir.path().join("u4.wav"));
        }
        other => panic!("{:?}", other.map(|r| r.1)),
    }
}
