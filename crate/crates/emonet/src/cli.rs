//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use emonet_core::eval::{Experiment, FoldOutcome, FoldReport};
use emonet_core::model::{EmotionNet, SUPPORTED_KERNELS};
use emonet_core::synth::generate_synthetic;
use emonet_core::train::Example;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{parse_override, RunConfig, RESOLVED_CONFIG};
use crate::datasets::{build_features, featurize, label_map, load_manifest, LabelMap};
use crate::error::{exit, Error, Result};
use crate::format::save_weights;
use crate::wav::write_wav;

#[derive(Debug, Parser)]
#[command(
    name = "emonet",
    version,
    about = "Speech emotion recognition: features, training, cross-validation and ablations"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads; 1 runs everything on a single thread.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ConfigArgs {
    /// Flat JSON config with dotted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.lr=0.001 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Run seed; every random stream is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct DataArgs {
    /// CSV manifest with columns path,label,speaker.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Use the generated synthetic corpus instead of a manifest.
    #[arg(long)]
    pub synthetic: bool,
    /// Feature cache directory.
    #[arg(long, alias = "out-cache")]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Compute (or reuse cached) log-Mel features for a manifest.
    Features {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, alias = "out-cache")]
        cache: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Stratified k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for reports, histories and checkpoints.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cross-validate once per convolution kernel size.
    AblateKernels {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for reports, histories and checkpoints.
        #[arg(long)]
        out_dir: PathBuf,
        /// Subset of kernel sizes, e.g. 3,7.
        #[arg(long, value_delimiter = ',')]
        kernels: Option<Vec<usize>>,
    },
    /// Cross-validate with augmentation off and on.
    AblateAugment {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
        /// Directory for reports, histories and checkpoints.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Print the parameter count with a per-layer breakdown.
    Params {
        #[command(flatten)]
        config: ConfigArgs,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Write the synthetic corpus as WAV files plus a manifest.
    Synth {
        /// Directory for the WAV files and manifest.
        #[arg(long)]
        out_dir: PathBuf,
        /// JSON file with the synthetic corpus description (the `synth.*`
        /// keys as a nested object).
        #[arg(long)]
        spec: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                exit::USAGE
            } else {
                exit::OK
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.jobs == 0 {
        return Err(Error::Usage("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.jobs)
        .build()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Features {
            manifest,
            cache,
            config,
        } => features(&manifest, &cache, &config),
        Command::Crossval {
            data,
            config,
            out_dir,
        } => crossval(&data, &config, &out_dir),
        Command::AblateKernels {
            data,
            config,
            out_dir,
            kernels,
        } => ablate_kernels(&data, &config, &out_dir, kernels),
        Command::AblateAugment {
            data,
            config,
            out_dir,
        } => ablate_augment(&data, &config, &out_dir),
        Command::Params { config, json } => params(&config, json),
        Command::Synth {
            out_dir,
            spec,
            config,
        } => synth(&out_dir, spec.as_deref(), &config),
    })
}

fn resolve(config: &ConfigArgs, data: Option<&DataArgs>) -> Result<RunConfig> {
    let base = match &config.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut overrides: Vec<(String, serde_json::Value)> = Vec::new();
    if let Some(seed) = config.seed {
        overrides.push(("seed".into(), seed.into()));
    }
    if let Some(d) = data {
        if let Some(m) = &d.manifest {
            overrides.push(("data.manifest".into(), m.display().to_string().into()));
            overrides.push(("data.synthetic".into(), false.into()));
        }
        if d.synthetic {
            overrides.push(("data.synthetic".into(), true.into()));
        }
        if let Some(c) = &d.cache {
            overrides.push(("data.cache".into(), c.display().to_string().into()));
        }
    }
    for s in &config.set {
        overrides.push(parse_override(s)?);
    }
    let cfg = base.with_overrides(overrides.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
    if let Some(d) = data {
        if d.synthetic && d.manifest.is_some() {
            return Err(Error::Usage(
                "--manifest and --synthetic are mutually exclusive".into(),
            ));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Where the examples of a run came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Manifest,
}

const SYNTHETIC_NOTE: &str =
    "synthetic data: these numbers check the pipeline end to end and are not comparable to results on real speech corpora";

impl DataSource {
    fn tag(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Manifest => "manifest",
        }
    }

    fn note(self) -> Option<&'static str> {
        (self == DataSource::Synthetic).then_some(SYNTHETIC_NOTE)
    }
}

pub struct Dataset {
    pub examples: Vec<Example>,
    pub labels: LabelMap,
    pub source: DataSource,
}

/// Loads the dataset named by `cfg.data` and sets `model.num_classes` from
/// its vocabulary.
pub fn load_dataset(cfg: &mut RunConfig) -> Result<Dataset> {
    let ds = if cfg.data.synthetic {
        let synth = emonet_core::synth::SynthConfig {
            seed: cfg.seed,
            ..cfg.synth.clone()
        };
        let labels = LabelMap::new(synth.classes.iter().map(|c| c.name.as_str()));
        let waves = generate_synthetic(&synth)?
            .into_iter()
            .map(|(w, c)| {
                (
                    w,
                    labels
                        .id(&synth.classes[c].name)
                        .expect("class names form the vocabulary"),
                )
            })
            .collect();
        Dataset {
            examples: featurize(waves, &cfg.mel)?,
            labels,
            source: DataSource::Synthetic,
        }
    } else if let Some(m) = &cfg.data.manifest {
        let entries = load_manifest(Path::new(m))?;
        let labels = label_map(&entries, cfg.data.label_preset.as_deref())?;
        let cache = cfg.data.cache.as_deref().map(Path::new);
        let (examples, _) = build_features(&entries, &labels, &cfg.mel, cache)?;
        Dataset {
            examples,
            labels,
            source: DataSource::Manifest,
        }
    } else {
        return Err(Error::Usage(
            "one of --manifest or --synthetic is required".into(),
        ));
    };
    cfg.model.num_classes = ds.labels.len();
    cfg.validate()?;
    Ok(ds)
}

fn features(manifest: &Path, cache: &Path, config: &ConfigArgs) -> Result<()> {
    let cfg = resolve(config, None)?;
    let entries = load_manifest(manifest)?;
    let labels = label_map(&entries, cfg.data.label_preset.as_deref())?;
    let (examples, stats) = build_features(&entries, &labels, &cfg.mel, Some(cache))?;
    println!(
        "{} utterances, {} frames total",
        examples.len(),
        stats.frames
    );
    println!("cache hits: {}/{}", stats.hits, examples.len());
    Ok(())
}

#[derive(Serialize)]
struct ReportFile<'a> {
    data_source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<&'static str>,
    labels: &'a [String],
    report: &'a FoldReport,
}

fn confusion_csv(labels: &LabelMap, m: &[Vec<u64>]) -> String {
    let mut s = String::from("true\\pred");
    for l in labels.names() {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.names().iter().zip(m) {
        s.push_str(l);
        for v in row {
            s.push_str(&format!(",{v}"));
        }
        s.push('\n');
    }
    s
}

/// Runs cross-validation and writes every artifact into `out_dir`.
pub fn crossval_to(cfg: &RunConfig, ds: &Dataset, out_dir: &Path) -> Result<FoldReport> {
    create_dir(out_dir)?;
    write(&out_dir.join(RESOLVED_CONFIG), cfg.to_json())?;
    let exp = Experiment {
        dataset: &ds.examples,
        model: &cfg.model,
        train: &cfg.train,
        augment: &cfg.augment,
        mel: &cfg.mel,
        seed: cfg.seed,
    };
    let k = cfg.eval.k;
    let folds = exp.assign(k)?;
    let outcomes: Vec<FoldOutcome> = (0..k)
        .into_par_iter()
        .map(|f| {
            let o = exp.run_fold(&folds, f, &mut |_| {})?;
            eprintln!(
                "fold {}/{k}: accuracy {:.4}, macro F1 {:.4}, {} epochs (best {})",
                f + 1,
                o.metrics.accuracy,
                o.metrics.macro_f1,
                o.metrics.epochs_run,
                o.metrics.best_epoch
            );
            Ok(o)
        })
        .collect::<std::result::Result<_, emonet_core::Error>>()?;
    for o in &outcomes {
        let f = o.metrics.fold;
        write(
            &out_dir.join(format!("fold{f}_confusion.csv")),
            confusion_csv(&ds.labels, &o.metrics.confusion),
        )?;
        let mut jsonl = String::new();
        for e in &o.history.epochs {
            jsonl.push_str(&serde_json::to_string(e).expect("history serializes"));
            jsonl.push('\n');
        }
        write(&out_dir.join(format!("fold{f}_history.jsonl")), jsonl)?;
        save_weights(&o.model, &out_dir.join(format!("fold{f}.aen.best")))?;
    }
    let report = exp.report(k, &outcomes)?;
    let file = ReportFile {
        data_source: ds.source.tag(),
        note: ds.source.note(),
        labels: ds.labels.names(),
        report: &report,
    };
    let mut json = serde_json::to_string_pretty(&file).expect("report serializes");
    json.push('\n');
    write(&out_dir.join("report.json"), json)?;
    println!(
        "mean accuracy {:.4} (std {:.4}), macro F1 {:.4} over {k} folds [{}]",
        report.mean.accuracy,
        report.std.accuracy,
        report.mean.macro_f1,
        ds.source.tag()
    );
    Ok(report)
}

fn crossval(data: &DataArgs, config: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let mut cfg = resolve(config, Some(data))?;
    let ds = load_dataset(&mut cfg)?;
    crossval_to(&cfg, &ds, out_dir).map(|_| ())
}

fn ablate_kernels(
    data: &DataArgs,
    config: &ConfigArgs,
    out_dir: &Path,
    kernels: Option<Vec<usize>>,
) -> Result<()> {
    let mut cfg = resolve(config, Some(data))?;
    let kernels = kernels.unwrap_or_else(|| SUPPORTED_KERNELS.to_vec());
    if let Some(k) = kernels.iter().find(|k| !SUPPORTED_KERNELS.contains(k)) {
        return Err(Error::Usage(format!(
            "kernel {k} not in {SUPPORTED_KERNELS:?}"
        )));
    }
    let ds = load_dataset(&mut cfg)?;
    create_dir(out_dir)?;
    write(&out_dir.join(RESOLVED_CONFIG), cfg.to_json())?;
    let mut csv = String::from("kernel,padding,params,params_millions,mean_accuracy,std_accuracy,mean_macro_f1,data_source\n");
    for k in kernels {
        let mut run = cfg.clone();
        run.model.kernel_size = k;
        let params = EmotionNet::build(&run.model, 0)?.count_params();
        eprintln!("kernel {k}: {params} parameters");
        let r = crossval_to(&run, &ds, &out_dir.join(format!("kernel{k}")))?;
        csv.push_str(&format!(
            "{k},{},{params},{:.2},{:.6},{:.6},{:.6},{}\n",
            run.model.padding(),
            params as f64 / 1e6,
            r.mean.accuracy,
            r.std.accuracy,
            r.mean.macro_f1,
            ds.source.tag()
        ));
    }
    write(&out_dir.join("kernels.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn ablate_augment(data: &DataArgs, config: &ConfigArgs, out_dir: &Path) -> Result<()> {
    let mut cfg = resolve(config, Some(data))?;
    let ds = load_dataset(&mut cfg)?;
    create_dir(out_dir)?;
    write(&out_dir.join(RESOLVED_CONFIG), cfg.to_json())?;
    let mut csv = String::from(
        "augmentation,mean_accuracy,std_accuracy,mean_micro_f1,mean_macro_f1,data_source\n",
    );
    for (name, enabled) in [("off", false), ("on", true)] {
        let mut run = cfg.clone();
        run.augment.enabled = enabled;
        let r = crossval_to(&run, &ds, &out_dir.join(format!("augment_{name}")))?;
        csv.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.mean.accuracy,
            r.std.accuracy,
            r.mean.micro_f1,
            r.mean.macro_f1,
            ds.source.tag()
        ));
    }
    write(&out_dir.join("augment.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct ParamReport {
    kernel_size: usize,
    padding: usize,
    total: usize,
    layers: Vec<(String, usize)>,
}

fn params(config: &ConfigArgs, json: bool) -> Result<()> {
    let cfg = resolve(config, None)?;
    let model = EmotionNet::zeroed(&cfg.model)?;
    let report = ParamReport {
        kernel_size: cfg.model.kernel_size,
        padding: cfg.model.padding(),
        total: model.count_params(),
        layers: model.param_breakdown(),
    };
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&report).expect("report serializes")
        );
        return Ok(());
    }
    println!("kernel {} padding {}", report.kernel_size, report.padding);
    for (name, n) in &report.layers {
        println!("{name:<10} {n:>10}");
    }
    println!(
        "{:<10} {:>10} ({:.2}M)",
        "total",
        report.total,
        report.total as f64 / 1e6
    );
    Ok(())
}

fn synth(out_dir: &Path, spec: Option<&Path>, config: &ConfigArgs) -> Result<()> {
    let mut cfg = resolve(config, None)?;
    if let Some(p) = spec {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        cfg.synth = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        cfg.validate()?;
    }
    let synth = emonet_core::synth::SynthConfig {
        seed: cfg.seed,
        ..cfg.synth.clone()
    };
    let waves = generate_synthetic(&synth)?;
    create_dir(out_dir)?;
    let mut manifest = String::from("path,label,speaker\n");
    let mut counters = vec![0usize; synth.classes.len()];
    for (w, c) in &waves {
        let name = &synth.classes[*c].name;
        let file = format!("{name}_{:03}.wav", counters[*c]);
        counters[*c] += 1;
        write_wav(&out_dir.join(&file), w)?;
        manifest.push_str(&format!("{file},{name},\n"));
    }
    write(&out_dir.join("manifest.csv"), manifest)?;
    write(&out_dir.join(RESOLVED_CONFIG), cfg.to_json())?;
    println!(
        "{} files, {} classes written to {}",
        waves.len(),
        synth.classes.len(),
        out_dir.display()
    );
    Ok(())
}
