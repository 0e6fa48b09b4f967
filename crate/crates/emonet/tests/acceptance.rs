//! Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when
//! any criterion fails. Run with `cargo test -p emonet --test acceptance`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use emonet::format::{
    decode_features, decode_tensors, encode_features, encode_tensors, quantize_features,
    FormatError,
};
use emonet_core::augment::AugmentConfig;
use emonet_core::autodiff::{lstm_cell, BatchNormStats, LstmCellVars, Tape, Var};
use emonet_core::dsp::{melspectrogram, MelConfig, Waveform};
use emonet_core::eval::{confusion_matrix, metrics, stratified_kfold, validation_split};
use emonet_core::model::{EmotionNet, ModelConfig};
use emonet_core::rng::stream;
use emonet_core::synth::{generate_synthetic, SynthConfig};
use emonet_core::train::{evaluate, train, Example, TrainConfig};
use emonet_core::Tensor;
use rand::Rng;

const EPS: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_emonet"))
}

fn quick_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic-quick.json")
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().expect("binary runs");
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

type Check = Result<String, String>;
type OpCase = (
    &'static str,
    Vec<Tensor>,
    Box<dyn Fn(&mut Tape, &[Var]) -> Var>,
);
type Criterion = (&'static str, Box<dyn Fn() -> Check>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

// ---------------------------------------------------------------- 1

fn params_for(k: usize) -> usize {
    let out = run_ok(bin().args([
        "params",
        "--json",
        "--set",
        &format!("model.kernel_size={k}"),
    ]));
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let layers: usize = v["layers"]
        .as_array()
        .unwrap()
        .iter()
        .map(|l| l[1].as_u64().unwrap() as usize)
        .sum();
    let total = v["total"].as_u64().unwrap() as usize;
    assert_eq!(layers, total, "per-layer counts must sum to the total");
    total
}

fn criterion_1() -> Check {
    let reported = [
        (3, 0.55e6),
        (5, 0.71e6),
        (7, 0.97e6),
        (9, 1.29e6),
        (11, 1.71e6),
    ];
    let start = Instant::now();
    let mut parts = vec![];
    let mut counts = vec![];
    for (k, want) in reported {
        let n = params_for(k);
        let dev = (n as f64 - want).abs() / want;
        ensure(
            dev <= 0.02,
            format!("kernel {k}: {n} is {:.2}% from {want}", dev * 100.0),
        )?;
        parts.push(format!(
            "k{k} {n} ({:+.2}%)",
            (n as f64 - want) / want * 100.0
        ));
        counts.push(n);
    }
    let elapsed = start.elapsed() / 5;
    ensure(
        elapsed < Duration::from_secs(1),
        format!("params took {elapsed:?}"),
    )?;
    let per_kernel = parts.join(", ");
    // Kernel 7 must also be within 2% of the comparison table's "1" (M).
    let k7 = counts[2] as f64;
    let dev = (k7 - 1e6).abs() / 1e6;
    // Only the conv kernels depend on k, so the k3 to k7 gap is fixed by the
    // filter counts. This bounds k7 for any model that meets the k3 row.
    let best_k7 = counts[2] - counts[0] + (0.55e6 * 1.02) as usize;
    ensure(
        dev <= 0.02,
        format!(
            "{per_kernel}; kernel 7 is {:.2}% from 1M (tolerance 2%): unattainable together with the \
             0.55M/0.97M rows, since meeting k3 within 2% caps k7 at {best_k7} < 980000",
            dev * 100.0
        ),
    )?;
    Ok(format!(
        "{per_kernel}; k7 {:.2}% from 1M; {:.0} ms per run",
        dev * 100.0,
        elapsed.as_secs_f64() * 1e3
    ))
}

// ---------------------------------------------------------------- 2

fn uniform(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut r = stream(seed, &[]);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.1, 1) and random sign, away from relu's kink.
fn away_from_zero(seed: u64, shape: &[usize]) -> Tensor {
    let mut r = stream(seed, &[]);
    let n = shape.iter().product();
    let v = (0..n)
        .map(|_| r.random_range(0.1..1.0) * if r.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    Tensor::new(shape, v).unwrap()
}

fn project(tape: &mut Tape, out: Var, seed: u64) -> Var {
    let w = uniform(seed, tape.shape(out), -1.0, 1.0);
    let w = tape.constant(w);
    let p = tape.mul(out, w).unwrap();
    tape.sum(p)
}

fn rel_err(a: f64, n: f64) -> f64 {
    let d = a.abs().max(n.abs());
    if d < 1e-9 {
        (a - n).abs()
    } else {
        (a - n).abs() / d
    }
}

struct GradResult {
    worst: f64,
    checked: usize,
    skipped: usize,
}

/// Central differences against backward for every input element. Elements
/// whose perturbation changes a relu sign or pooling choice are skipped.
#[allow(clippy::needless_range_loop)]
fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> GradResult {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_grad()))
        .collect();
    let loss = f(&mut tape, &vars);
    let sig = tape.branch_signature();
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().to_vec())
        .collect();
    let eval = |inp: &[Tensor]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = inp.iter().map(|x| t.leaf(x.clone())).collect();
        let l = f(&mut t, &vs);
        (t.value(l).data()[0], t.branch_signature())
    };
    let mut r = GradResult {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + EPS;
            let (up, su) = eval(&work);
            work[k].data_mut()[i] = orig - EPS;
            let (down, sd) = eval(&work);
            work[k].data_mut()[i] = orig;
            if su != sig || sd != sig {
                r.skipped += 1;
                continue;
            }
            r.worst = r
                .worst
                .max(rel_err(analytic[k][i], (up - down) / (2.0 * EPS)));
            r.checked += 1;
        }
    }
    r
}

fn model_loss(m: &EmotionNet, x: &Tensor, labels: &[usize]) -> (f64, u64) {
    let mut m = m.clone();
    let mut tape = Tape::new();
    let f = m.forward(&mut tape, x, true, &mut stream(5, &[])).unwrap();
    let l = tape.cross_entropy(f.logits, labels).unwrap();
    (tape.value(l).data()[0], tape.branch_signature())
}

fn model_grad_check(names: &[&str], per_tensor: usize) -> GradResult {
    let m = EmotionNet::build(&ModelConfig::default(), 11).unwrap();
    let x = uniform(12, &[2, 1, 128, 64], -1.0, 1.0);
    let labels = [0, 3];
    let mut mm = m.clone();
    let mut tape = Tape::new();
    let f = mm
        .forward(&mut tape, &x, true, &mut stream(5, &[]))
        .unwrap();
    let loss = tape.cross_entropy(f.logits, &labels).unwrap();
    let sig = tape.branch_signature();
    tape.backward(loss).unwrap();
    let mut r = GradResult {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut pick = stream(13, &[]);
    for name in names {
        let idx = m.params().iter().position(|p| p.name == *name).unwrap();
        let analytic = tape.grad(f.params[idx]).unwrap().to_vec();
        for _ in 0..per_tensor {
            let i = pick.random_range(0..analytic.len());
            let (mut up, mut down) = (m.clone(), m.clone());
            up.params_mut()[idx].value.data_mut()[i] += EPS;
            down.params_mut()[idx].value.data_mut()[i] -= EPS;
            let ((lu, su), (ld, sd)) =
                (model_loss(&up, &x, &labels), model_loss(&down, &x, &labels));
            if su != sig || sd != sig {
                r.skipped += 1;
                continue;
            }
            r.worst = r.worst.max(rel_err(analytic[i], (lu - ld) / (2.0 * EPS)));
            r.checked += 1;
        }
    }
    r
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let ops: Vec<OpCase> = vec![
        (
            "conv2d",
            vec![
                uniform(1, &[2, 2, 5, 6], -1.0, 1.0),
                uniform(2, &[3, 2, 3, 3], -0.5, 0.5),
                uniform(3, &[3], -0.5, 0.5),
            ],
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1).unwrap();
                project(t, y, 4)
            }),
        ),
        (
            "maxpool2d",
            vec![uniform(5, &[2, 2, 4, 6], -1.0, 1.0)],
            Box::new(|t, v| {
                let y = t.maxpool2d(v[0]).unwrap();
                project(t, y, 6)
            }),
        ),
        (
            "linear",
            vec![
                uniform(7, &[3, 4], -1.0, 1.0),
                uniform(8, &[5, 4], -1.0, 1.0),
                uniform(9, &[5], -1.0, 1.0),
            ],
            Box::new(|t, v| {
                let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
                project(t, y, 10)
            }),
        ),
        (
            "relu",
            vec![away_from_zero(11, &[4, 5])],
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                project(t, y, 12)
            }),
        ),
        (
            "tanh",
            vec![uniform(13, &[4, 5], -2.0, 2.0)],
            Box::new(|t, v| {
                let y = t.tanh(v[0]);
                project(t, y, 14)
            }),
        ),
        (
            "sigmoid",
            vec![uniform(15, &[4, 5], -4.0, 4.0)],
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                project(t, y, 16)
            }),
        ),
        (
            "softmax",
            vec![uniform(17, &[3, 6], -2.0, 2.0)],
            Box::new(|t, v| {
                let a = t.softmax(v[0], 0).unwrap();
                let b = t.softmax(v[0], 1).unwrap();
                let s = t.add(a, b).unwrap();
                project(t, s, 18)
            }),
        ),
        (
            "batchnorm2d",
            vec![
                uniform(19, &[3, 2, 3, 4], -1.0, 1.0),
                uniform(20, &[2], 0.5, 1.5),
                uniform(21, &[2], -0.5, 0.5),
            ],
            Box::new(|t, v| {
                let mut stats = BatchNormStats::new(2);
                let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, true).unwrap();
                project(t, y, 22)
            }),
        ),
        (
            "lstm_cell",
            vec![
                uniform(23, &[2, 3], -1.0, 1.0),
                uniform(24, &[2, 4], -1.0, 1.0),
                uniform(25, &[2, 4], -1.0, 1.0),
                uniform(26, &[16, 3], -0.5, 0.5),
                uniform(27, &[16, 4], -0.5, 0.5),
                uniform(28, &[16], -0.5, 0.5),
                uniform(29, &[16], -0.5, 0.5),
            ],
            Box::new(|t, v| {
                let p = LstmCellVars {
                    w_ih: v[3],
                    w_hh: v[4],
                    b_ih: v[5],
                    b_hh: v[6],
                };
                let (h, c) = lstm_cell(t, v[0], v[1], v[2], &p).unwrap();
                let s = t.concat_last(h, c).unwrap();
                project(t, s, 30)
            }),
        ),
        (
            "cross_entropy",
            vec![uniform(31, &[4, 5], -3.0, 3.0)],
            Box::new(|t, v| t.cross_entropy(v[0], &[0, 4, 2, 2]).unwrap()),
        ),
    ];
    let mut parts = vec![];
    for (name, inputs, f) in &ops {
        let r = grad_check(inputs, f.as_ref());
        ensure(
            r.worst < GRAD_TOL,
            format!("{name}: max rel err {:.2e}", r.worst),
        )?;
        ensure(
            r.skipped <= r.checked,
            format!(
                "{name}: {} of {} coordinates straddle a kink",
                r.skipped,
                r.skipped + r.checked
            ),
        )?;
        parts.push(format!("{name} {:.1e}", r.worst));
    }
    let r = model_grad_check(&["attn.weight", "out.weight", "conv0.weight"], 6);
    ensure(
        r.worst < GRAD_TOL,
        format!("full model: max rel err {:.2e}", r.worst),
    )?;
    ensure(
        r.skipped <= r.checked,
        format!("full model: {} kink-straddling coordinates", r.skipped),
    )?;
    parts.push(format!(
        "model B=2 T=64 {:.1e} ({} coords, {} kink skips)",
        r.worst, r.checked, r.skipped
    ));
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(120),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "{}; {:.1} s",
        parts.join(", "),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 3

/// Slaney mel scale, written out independently of the library.
fn slaney_mel(hz: f64) -> f64 {
    if hz < 1000.0 {
        hz / (200.0 / 3.0)
    } else {
        15.0 + (hz / 1000.0).ln() / (6.4f64.ln() / 27.0)
    }
}

fn slaney_hz(mel: f64) -> f64 {
    if mel < 15.0 {
        mel * 200.0 / 3.0
    } else {
        1000.0 * ((mel - 15.0) * 6.4f64.ln() / 27.0).exp()
    }
}

/// Band whose triangular filter responds most to a tone at `hz`.
fn oracle_band(cfg: &MelConfig, hz: f64) -> usize {
    let (lo, hi) = (slaney_mel(cfg.f_min), slaney_mel(cfg.f_max));
    let edges: Vec<f64> = (0..cfg.n_mels + 2)
        .map(|i| slaney_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();
    let response = |m: usize| {
        let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
        let tri = ((hz - l) / (c - l)).min((r - hz) / (r - c)).max(0.0);
        tri * 2.0 / (r - l)
    };
    (0..cfg.n_mels)
        .max_by(|&a, &b| response(a).total_cmp(&response(b)))
        .unwrap()
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let cfg = MelConfig::default();
    let mut r = stream(40, &[]);
    for _ in 0..50 {
        let len = r.random_range(1..40_000);
        let w = Waveform::new(
            (0..len).map(|_| r.random_range(-0.5..0.5)).collect(),
            16_000,
        );
        let s = melspectrogram(&w, &cfg).map_err(|e| e.to_string())?;
        ensure(
            s.frames() == len / cfg.hop + 1,
            format!("len {len}: {} frames", s.frames()),
        )?;
        ensure(s.max() == 0.0, format!("len {len}: max {} dB", s.max()))?;
    }
    let tone = Waveform::new(
        (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin())
            .collect(),
        16_000,
    );
    let s = melspectrogram(&tone, &cfg).map_err(|e| e.to_string())?;
    let means = s.band_means();
    let peak = (0..means.len())
        .max_by(|&a, &b| means[a].total_cmp(&means[b]))
        .unwrap();
    let want = oracle_band(&cfg, 440.0);
    ensure(
        peak == want,
        format!("440 Hz peaks in band {peak}, oracle says {want}"),
    )?;
    let silent =
        melspectrogram(&Waveform::new(vec![0.0; 4000], 16_000), &cfg).map_err(|e| e.to_string())?;
    ensure(
        silent.values().iter().all(|v| v.is_finite()),
        "non-finite values for silence",
    )?;
    let elapsed = start.elapsed();
    ensure(
        elapsed < Duration::from_secs(30),
        format!("took {elapsed:?}"),
    )?;
    Ok(format!(
        "50/50 frame counts, max 0 dB each; 440 Hz -> band {peak} (oracle {want}); silence finite (min {} dB); {:.1} s",
        silent.min(),
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Check {
    let cfg = ModelConfig {
        kernel_size: 3,
        conv_filters: vec![4, 4, 4],
        fc_dim: 8,
        lstm_hidden: 4,
        n_mels: 16,
        num_classes: 3,
        ..ModelConfig::default()
    };
    let mut r = stream(50, &[]);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let m = EmotionNet::build(&cfg, i).unwrap();
        let (b, t) = (r.random_range(1..4), r.random_range(8..40));
        let x = uniform(1000 + i, &[b, 1, 16, t], -3.0, 3.0);
        let (_, attn) = m.predict(&x).map_err(|e| e.to_string())?;
        let steps = attn.shape()[1];
        for row in attn.data().chunks(steps) {
            ensure(row.iter().all(|&a| a >= 0.0), "negative attention weight")?;
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    ensure(worst <= 1e-9, format!("attention sum off by {worst:e}"))?;
    for _ in 0..1000 {
        let n = r.random_range(1..50);
        let c = r.random_range(2..6);
        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let m = metrics(&confusion_matrix(&preds, &labels, c).unwrap()).unwrap();
        ensure(
            m.micro_f1 == m.accuracy,
            format!("micro {} != accuracy {}", m.micro_f1, m.accuracy),
        )?;
    }
    let hand = metrics(&vec![vec![1, 1], vec![0, 1]]).unwrap();
    ensure(
        hand.macro_f1 == 2.0 / 3.0,
        format!("macro F1 {}", hand.macro_f1),
    )?;
    Ok(format!("max |sum(alpha) - 1| = {worst:.1e} over 100 forwards; micro F1 == accuracy on 1000 sets; macro F1 [[1,1],[0,1]] = 2/3"))
}

// ---------------------------------------------------------------- 5, 6, 8

fn crossval(out: &Path) -> Result<(f64, Duration), String> {
    let start = Instant::now();
    let cfg = quick_config();
    run_ok(
        bin()
            .args(["--jobs", "1", "crossval", "--synthetic", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(out),
    );
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    ensure(
        report["data_source"] == "synthetic",
        "report is not tagged synthetic",
    )?;
    Ok((
        report["report"]["mean"]["accuracy"].as_f64().unwrap(),
        start.elapsed(),
    ))
}

fn quick_run_config() -> (ModelConfig, TrainConfig, MelConfig) {
    let cfg = emonet::config::RunConfig::load(&quick_config()).unwrap();
    (
        ModelConfig {
            num_classes: 3,
            ..cfg.model
        },
        cfg.train,
        cfg.mel,
    )
}

fn criterion_5(dir: &Path) -> Check {
    let (acc, cv_time) = crossval(&dir.join("run_a"))?;
    ensure(acc >= 0.90, format!("mean fold accuracy {acc:.4} < 0.90"))?;

    let start = Instant::now();
    let (model_cfg, train_cfg, mel) = quick_run_config();
    let data: Vec<Example> = generate_synthetic(&SynthConfig {
        seed: 42,
        ..SynthConfig::default()
    })
    .unwrap()
    .into_iter()
    .map(|(w, label)| Example {
        features: melspectrogram(&w, &mel).unwrap(),
        waveform: Some(w),
        label,
    })
    .collect();
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    let all: Vec<usize> = (0..data.len()).collect();
    let (tr, va) = validation_split(&labels, &all, 42, 0);
    let pick = |idx: &[usize]| idx.iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&tr), pick(&va));
    let cfg = TrainConfig {
        max_epochs: 200,
        seed: 42,
        ..train_cfg
    };
    let model = EmotionNet::build(&model_cfg, 42).unwrap();
    let (model, hist) = train(
        model,
        &train_set,
        &val_set,
        &AugmentConfig::default(),
        &mel,
        &cfg,
    )
    .map_err(|e| e.to_string())?;
    let train_acc = evaluate(&model, &train_set, 8)
        .map_err(|e| e.to_string())?
        .accuracy;
    ensure(
        train_acc >= 0.95,
        format!("single-split train accuracy {train_acc:.4} < 0.95"),
    )?;
    let total = cv_time + start.elapsed();
    ensure(total < Duration::from_secs(1800), format!("took {total:?}"))?;
    Ok(format!(
        "5-fold mean accuracy {acc:.4} ({:.0} s); single split train accuracy {train_acc:.4} after {} epochs (best {}); {:.0} s total",
        cv_time.as_secs_f64(),
        hist.epochs.len(),
        hist.best_epoch,
        total.as_secs_f64()
    ))
}

fn criterion_6(dir: &Path) -> Check {
    let out = dir.join("augment");
    let stdout = run_ok(
        bin()
            .args(["--jobs", "1", "ablate-augment", "--synthetic", "--config"])
            .arg(quick_config())
            .arg("--out-dir")
            .arg(&out),
    );
    let csv = std::fs::read_to_string(out.join("augment.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<&str> = csv.lines().collect();
    ensure(
        rows.len() == 3,
        format!("expected header + 2 rows, got {}", rows.len()),
    )?;
    ensure(
        rows[1].starts_with("off,") && rows[2].starts_with("on,"),
        "rows must be off then on",
    )?;
    ensure(
        rows[1..].iter().all(|r| r.ends_with(",synthetic")),
        "rows must carry the synthetic tag",
    )?;
    ensure(
        stdout.ends_with(&csv),
        "printed table differs from augment.csv",
    )?;
    Ok(format!("two-row table written: {} | {}", rows[1], rows[2]))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Check {
    let mut r = stream(70, &[]);
    let mut done = 0;
    while done < 100 {
        let k = r.random_range(2..8);
        let classes = r.random_range(1..6);
        let n = r.random_range(k * classes..200);
        let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
        let Ok(a) = stratified_kfold(&labels, k, r.random()) else {
            let smallest = (0..classes)
                .map(|c| labels.iter().filter(|&&l| l == c).count())
                .filter(|&n| n > 0)
                .min()
                .unwrap();
            ensure(smallest < k, "rejected a valid label vector")?;
            continue;
        };
        let mut union: Vec<usize> = (0..k).flat_map(|f| a.test_indices(f)).collect();
        union.sort_unstable();
        ensure(
            union == (0..n).collect::<Vec<_>>(),
            "folds do not partition the dataset",
        )?;
        for c in 0..classes {
            let counts: Vec<usize> = (0..k)
                .map(|f| {
                    a.test_indices(f)
                        .iter()
                        .filter(|&&i| labels[i] == c)
                        .count()
                })
                .collect();
            let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
            ensure(spread <= 1, format!("class {c} fold counts {counts:?}"))?;
        }
        done += 1;
    }
    Ok("100 label vectors: folds partition exactly, per-class counts differ by at most 1".into())
}

// ---------------------------------------------------------------- 8

fn criterion_8(dir: &Path) -> Check {
    let (a, b) = (dir.join("run_a"), dir.join("run_b"));
    crossval(&b)?;
    let mut compared = vec![];
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n == "report.json" || n.ends_with(".best"))
        .collect();
    names.sort();
    ensure(
        names.len() == 6,
        format!("expected report + 5 checkpoints, found {names:?}"),
    )?;
    for n in &names {
        let (x, y) = (
            std::fs::read(a.join(n)).unwrap(),
            std::fs::read(b.join(n)).unwrap(),
        );
        ensure(x == y, format!("{n} differs between runs"))?;
        compared.push(n.as_str());
    }
    Ok(format!(
        "byte-identical across two runs: {}",
        compared.join(", ")
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Check {
    let model = EmotionNet::build(&ModelConfig::default(), 90).unwrap();
    let tensors = model.named_tensors();
    let bytes = encode_tensors(&tensors).unwrap();
    let back = decode_tensors(&bytes).map_err(|e| e.to_string())?;
    let bits = |t: &[(String, Tensor)]| {
        t.iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    t.shape().to_vec(),
                    t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                )
            })
            .collect::<Vec<_>>()
    };
    ensure(
        bits(&back) == bits(&tensors),
        "weights changed in round trip",
    )?;
    ensure(
        EmotionNet::from_named_tensors(model.config(), back).map_err(|e| e.to_string())? == model,
        "model differs after load",
    )?;

    let w = Waveform::new(
        (0..12_000).map(|i| (i as f64 * 0.07).sin() * 0.3).collect(),
        16_000,
    );
    let mel = MelConfig::default();
    let feats = quantize_features(&melspectrogram(&w, &mel).unwrap());
    let fbytes = encode_features(&feats);
    let fback = decode_features(&fbytes, 16_000, mel.hop).map_err(|e| e.to_string())?;
    let fbits = |s: &emonet_core::dsp::LogMelSpectrogram| {
        s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    ensure(
        fbits(&fback) == fbits(&feats) && fback.frames() == feats.frames(),
        "features changed in round trip",
    )?;

    let mut flipped = bytes.clone();
    let at = bytes.len() / 2;
    flipped[at] ^= 0x10;
    let werr = decode_tensors(&flipped).unwrap_err();
    ensure(
        matches!(werr, FormatError::Checksum { .. }),
        format!("weight flip gave {werr:?}"),
    )?;
    let mut fflip = fbytes.clone();
    let fat = fbytes.len() - 100;
    fflip[fat] ^= 0x01;
    let ferr = decode_features(&fflip, 16_000, mel.hop).unwrap_err();
    ensure(
        matches!(ferr, FormatError::Checksum { .. }),
        format!("feature flip gave {ferr:?}"),
    )?;
    let rejected = (0..fbytes.len())
        .filter(|&i| {
            let mut b = fbytes.clone();
            b[i] ^= 0x80;
            decode_features(&b, 16_000, mel.hop).is_err()
        })
        .count();
    ensure(
        rejected == fbytes.len(),
        format!(
            "only {rejected}/{} single-byte flips rejected",
            fbytes.len()
        ),
    )?;
    Ok(format!(
        "{} weight tensors and a {}x{} feature map round-trip bit-exactly; flipped bytes caught by CRC (every one of {} positions in the feature file)",
        tensors.len(),
        feats.n_mels(),
        feats.frames(),
        fbytes.len()
    ))
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_path_buf();
    let criteria: Vec<Criterion> = vec![
        ("parameter counts per kernel size", Box::new(criterion_1)),
        ("gradient suite", Box::new(criterion_2)),
        ("DSP shape and spectral suite", Box::new(criterion_3)),
        ("attention and metric identities", Box::new(criterion_4)),
        (
            "end-to-end synthetic training",
            Box::new({
                let d = d.clone();
                move || criterion_5(&d)
            }),
        ),
        (
            "augmentation ablation protocol",
            Box::new({
                let d = d.clone();
                move || criterion_6(&d)
            }),
        ),
        ("stratification", Box::new(criterion_7)),
        (
            "determinism",
            Box::new({
                let d = d.clone();
                move || criterion_8(&d)
            }),
        ),
        ("persistence round trips", Box::new(criterion_9)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("criterion {} ({name}): PASS: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {why}", i + 1);
            }
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
