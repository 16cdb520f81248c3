use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dualfer::data::{generate_fixture, FixtureSpec};
use dualfer::eval::{
    compare_components, emit_latency, emit_report, emit_timing, evaluate, profile_latency, read_report,
    run_cross_validation, ParamSummary, ReportFormat,
};
use dualfer::fusion::{build_model, Backbones};
use dualfer::runtime::{tune_allocator, Environment};
use dualfer::train::{
    grid_search, load_checkpoint, parse_override, prepare_run, restore_model, train, GridSpec, Protocol, TrainConfig,
};
use dualfer::{Error, Result};

const RUN_ROOT_ENV: &str = "DUALFER_RUN_ROOT";

#[derive(Parser)]
#[command(name = "dualfer", version, about = "Dual-backbone facial expression recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic class-separable dataset.
    Fixture(FixtureArgs),
    /// Train one model; writes history.csv, best.ckpt, last.ckpt and a test report.
    Train(TrainArgs),
    /// k-fold cross-validation with per-fold reports and an aggregate.
    Crossval {
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Exhaustive grid search ranked by validation accuracy.
    Gridsearch {
        /// TOML file of `key = [candidates...]`.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Evaluate a checkpoint on a split of its dataset.
    Eval(EvalArgs),
    /// Per-image forward latency.
    Profile(ProfileArgs),
    /// Summarize a report.json and/or the parameter budget.
    Report(ReportArgs),
}

#[derive(Args)]
struct FixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    classes: usize,
    #[arg(long, default_value_t = 10)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    size: u32,
    #[arg(long, default_value_t = 5)]
    subjects: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackboneArg {
    Fused,
    Shufflenet,
    Efficientvit,
}

impl From<BackboneArg> for Backbones {
    fn from(b: BackboneArg) -> Self {
        match b {
            BackboneArg::Fused => Backbones::Fused,
            BackboneArg::Shufflenet => Backbones::ShuffleNet,
            BackboneArg::Efficientvit => Backbones::EfficientVit,
        }
    }
}

#[derive(Args, Clone)]
struct TrainArgs {
    /// TOML training config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting point when no config is given: kmu_fed or kdef.
    #[arg(long, default_value = "kmu_fed")]
    preset: String,
    /// Dataset root (`root/<class>/*.png`).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long, value_enum)]
    backbones: Option<BackboneArg>,
    #[arg(long)]
    freeze_backbones: bool,
    #[arg(long)]
    subject_disjoint: bool,
    #[arg(long)]
    skip_bad: bool,
    /// Disable every augmentation.
    #[arg(long)]
    no_augment: bool,
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// With --init-from: load matching names only.
    #[arg(long)]
    partial: bool,
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Extra `key=value` config overrides (dotted keys), repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Exact output directory instead of runs/<timestamp>-<command>/.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ProfileArgs {
    /// Model to time; the default configuration with random weights if absent.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_enum)]
    backbones: Option<BackboneArg>,
    /// Also time each backbone alone against the fused model.
    #[arg(long)]
    compare: bool,
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// A report.json, or a directory containing one.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Print parameter counts of the default model against the budgets.
    #[arg(long)]
    params: bool,
    /// Re-emit the CSV artifacts next to the input.
    #[arg(long)]
    csv: bool,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: Option<TrainConfig>,
    seed: Option<u64>,
    code_version: String,
    output_dir: PathBuf,
    started_at: DateTime<Utc>,
    finished_at: Option<DateTime<Utc>>,
    status: String,
    environment: Environment,
}

struct Run {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    fn start(command: &str, explicit: Option<&Path>, config: Option<&TrainConfig>) -> Result<Self> {
        let started_at = Utc::now();
        let dir = match explicit {
            Some(d) => d.to_path_buf(),
            None => {
                let root = std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
                let stamp = started_at.format("%Y%m%dT%H%M%S%.3fZ");
                let mut dir = root.join(format!("{stamp}-{command}"));
                let mut n = 1;
                while dir.exists() {
                    dir = root.join(format!("{stamp}-{command}-{n}"));
                    n += 1;
                }
                dir
            }
        };
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        if let Some(cfg) = config {
            let path = dir.join("config.toml");
            fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))?;
        }
        let run = Self {
            manifest: RunManifest {
                command: command.into(),
                argv: std::env::args().collect(),
                config: config.cloned(),
                seed: config.map(|c| c.seed),
                code_version: env!("CARGO_PKG_VERSION").into(),
                output_dir: dir.clone(),
                started_at,
                finished_at: None,
                status: "running".into(),
                environment: Environment::detect(),
            },
            dir,
        };
        run.write_manifest()?;
        Ok(run)
    }

    fn write_manifest(&self) -> Result<()> {
        let path = self.dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| Error::Serialization(e.to_string()))?;
        fs::write(&path, text).map_err(|e| io_err(&path, e))
    }

    fn finish<T>(mut self, result: Result<T>) -> Result<T> {
        self.manifest.finished_at = Some(Utc::now());
        self.manifest.status = match &result {
            Ok(_) => "ok".into(),
            Err(e) => format!("failed: {e}"),
        };
        self.write_manifest()?;
        if result.is_ok() {
            println!("run directory: {}", self.dir.display());
        }
        result
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::preset(&a.preset)?,
    };
    if !a.overrides.is_empty() {
        let parsed = a.overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;
        cfg = cfg.with_overrides(&parsed)?;
    }
    if let Some(d) = &a.data {
        cfg.dataset_root = Some(d.clone());
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.num_classes {
        cfg.num_classes = v;
    }
    if let Some(b) = a.backbones {
        cfg.model.backbones = b.into();
    }
    cfg.freeze_backbones |= a.freeze_backbones;
    cfg.split.subject_disjoint |= a.subject_disjoint;
    cfg.loading.skip_bad |= a.skip_bad;
    if a.no_augment {
        cfg.augment = dualfer::data::AugmentPolicy::none();
    }
    if let Some(p) = &a.init_from {
        cfg.init_from = Some(p.clone());
        cfg.partial_init = a.partial;
    }
    if let Some(p) = &a.resume {
        cfg.resume_from = Some(p.clone());
    }
    if let Some(root) = &cfg.dataset_root {
        if !root.is_dir() {
            return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_fixture(a: &FixtureArgs) -> Result<()> {
    let spec = FixtureSpec {
        classes: a.classes,
        per_class: a.per_class,
        seed: a.seed,
        size: a.size,
        subjects: a.subjects,
    };
    let paths = generate_fixture(&a.out, &spec)?;
    println!("wrote {} images to {}", paths.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let run = Run::start("train", a.run_dir.as_deref(), Some(&cfg))?;
    let result = (|| {
        let (mut outcome, data) = train(&cfg, Some(&run.dir))?;
        let metrics = evaluate(&mut outcome.model, &data.loader, &data.test, cfg.num_classes, cfg.eval_batch_size)?
            .with_class_names(&data.index.classes);
        let params = ParamSummary::of(&outcome.model);
        emit_report(&run.dir, &metrics, None, Some(&params), &[ReportFormat::Json, ReportFormat::Csv])?;
        let last = outcome.history.last();
        println!(
            "trained {} epochs: final loss {:.5}, best val accuracy {}, test accuracy {:.4} ({} samples)",
            outcome.history.len(),
            last.map_or(f64::NAN, |r| r.train_loss),
            outcome.best_val_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
            metrics.accuracy,
            metrics.n_samples
        );
        Ok(())
    })();
    run.finish(result)
}

fn cmd_crossval(k: usize, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(a)?;
    cfg.split.protocol = Protocol::KFold;
    cfg.split.k = k;
    let run = Run::start("crossval", a.run_dir.as_deref(), Some(&cfg))?;
    let result = run_cross_validation(&cfg, k, Some(&run.dir)).map(|report| {
        for f in &report.folds {
            println!("fold {}: accuracy {:.4}, macro F1 {:.4}", f.fold, f.metrics.accuracy, f.metrics.macro_f1);
        }
        println!(
            "{k}-fold mean accuracy {:.4} (std {:.4}), mean macro F1 {:.4}",
            report.mean_accuracy, report.std_accuracy, report.mean_macro_f1
        );
    });
    run.finish(result)
}

fn cmd_gridsearch(grid: &Path, jobs: usize, a: &TrainArgs) -> Result<()> {
    let cfg = resolve_config(a)?;
    let spec = GridSpec::load(grid)?;
    let run = Run::start("gridsearch", a.run_dir.as_deref(), Some(&cfg))?;
    let result = (|| {
        let (results, best, best_cfg) = grid_search(&cfg, &spec, &run.dir, jobs)?;
        for r in &results {
            let point: Vec<String> = r.point.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
            match (&r.val_accuracy, &r.error) {
                (Some(acc), _) => println!("[{}] {}: val accuracy {acc:.4}", r.point.index, point.join(" ")),
                (None, Some(e)) => println!("[{}] {}: failed: {e}", r.point.index, point.join(" ")),
                _ => {}
            }
        }
        match (best, best_cfg) {
            (Some(i), Some(best_cfg)) => {
                let path = run.dir.join("best_config.toml");
                fs::write(&path, best_cfg.to_toml()?).map_err(|e| io_err(&path, e))?;
                println!("best point: {i} (config in {})", path.display());
                Ok(())
            }
            _ => Err(Error::State("every grid point failed".into())),
        }
    })();
    run.finish(result)
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    if !a.checkpoint.is_file() {
        return Err(Error::Config(format!("checkpoint {} does not exist", a.checkpoint.display())));
    }
    let ckpt = load_checkpoint::<f32>(&a.checkpoint)?;
    let mut cfg = ckpt
        .train_config
        .clone()
        .ok_or_else(|| Error::Config("checkpoint carries no training config; cannot resolve its dataset".into()))?;
    if let Some(d) = &a.data {
        cfg.dataset_root = Some(d.clone());
    }
    if let Some(root) = &cfg.dataset_root {
        if !root.is_dir() {
            return Err(Error::Config(format!("dataset root {} does not exist", root.display())));
        }
    }
    let run = Run::start("eval", a.run_dir.as_deref(), Some(&cfg))?;
    let result = (|| {
        let mut model = restore_model(&ckpt)?;
        let data = prepare_run(&cfg)?;
        let indices = match a.split {
            SplitArg::Train => data.train.clone(),
            SplitArg::Val => data.val.clone(),
            SplitArg::Test => data.test.clone(),
            SplitArg::All => (0..data.loader.len()).collect(),
        };
        let metrics = evaluate(&mut model, &data.loader, &indices, cfg.num_classes, cfg.eval_batch_size)?
            .with_class_names(&data.index.classes);
        let params = ParamSummary::of(&model);
        emit_report(&run.dir, &metrics, None, Some(&params), &[ReportFormat::Json, ReportFormat::Csv])?;
        println!(
            "accuracy {:.6} on {} samples; macro precision {:.4}, recall {:.4}, F1 {:.4}",
            metrics.accuracy, metrics.n_samples, metrics.macro_precision, metrics.macro_recall, metrics.macro_f1
        );
        if let Some(saved) = ckpt.val_accuracy {
            let same_set = data.val == indices;
            println!(
                "validation accuracy recorded at save time: {saved:.6}{}",
                if same_set {
                    if saved == metrics.accuracy { " (reproduced exactly)" } else { " (MISMATCH)" }
                } else {
                    ""
                }
            );
        }
        Ok(())
    })();
    run.finish(result)
}

fn cmd_profile(a: &ProfileArgs) -> Result<()> {
    let mut model = match &a.checkpoint {
        Some(path) => {
            if !path.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", path.display())));
            }
            restore_model(&load_checkpoint::<f32>(path)?)?
        }
        None => {
            let mut cfg = dualfer::fusion::ModelConfig::default();
            if let Some(b) = a.backbones {
                cfg.backbones = b.into();
            }
            build_model::<f32>(&cfg, 0)?
        }
    };
    let run = Run::start("profile", a.run_dir.as_deref(), None)?;
    let result = (|| {
        let size = model.net.config.input_size();
        let stats = profile_latency(&mut model, [a.batch, 3, size, size], a.warmup, a.runs)?;
        emit_latency(&run.dir, &stats)?;
        println!(
            "{} runs after {} warmup, batch {}: mean {:.3} ms/image, std {:.3}, min {:.3}, max {:.3}",
            stats.measured_runs, stats.warmup_runs, stats.batch_size, stats.mean_ms, stats.std_ms, stats.min_ms, stats.max_ms
        );
        if a.compare {
            let timing = compare_components(&model.net.config, a.batch, a.warmup, a.runs)?;
            emit_timing(&run.dir, &timing)?;
            println!(
                "ShuffleNet {:.3} ms, EfficientViT {:.3} ms, fused {:.3} ms (fused / sum = {:.3}; fused not faster than components: {})",
                timing.shufflenet.mean_ms,
                timing.efficientvit.mean_ms,
                timing.fused.mean_ms,
                timing.fused_over_sum,
                timing.fused_not_faster
            );
        }
        Ok(())
    })();
    run.finish(result)
}

fn print_params() -> Result<()> {
    let fused = build_model::<f32>(&dualfer::fusion::ModelConfig::default(), 0)?;
    let s = ParamSummary::of(&fused);
    let with_head = |backbone: usize, dim: usize| backbone + dim * 1000 + 1000;
    let rows = [
        ("fused model", s.total, 5.9e6),
        ("ShuffleNet V2 + 1000-way head", with_head(s.shufflenet, 1024), 2.3e6),
        ("EfficientViT-M2 + 1000-way head", with_head(s.efficientvit, 192), 4.2e6),
    ];
    println!("{:<34} {:>12} {:>10} {:>8}", "model", "params", "budget", "ratio");
    for (name, count, budget) in rows {
        println!("{name:<34} {count:>12} {:>9.1}M {:>8.4}", budget / 1e6, count as f64 / budget);
    }
    println!(
        "components: shufflenet {}, efficientvit {}, classifier {}",
        s.shufflenet, s.efficientvit, s.head
    );
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    if a.input.is_none() && !a.params {
        return Err(Error::Config("nothing to report: pass --input and/or --params".into()));
    }
    if let Some(input) = &a.input {
        let path = if input.is_dir() { input.join("report.json") } else { input.clone() };
        if !path.is_file() {
            return Err(Error::Config(format!("report {} does not exist", path.display())));
        }
        let doc = read_report(&path)?;
        let m = &doc.metrics;
        println!(
            "{} samples, accuracy {:.4}, {} precision {:.4}, recall {:.4}, F1 {:.4}",
            m.n_samples, m.accuracy, m.averaging, m.macro_precision, m.macro_recall, m.macro_f1
        );
        println!("row-normalized confusion (%):");
        for (c, row) in doc.confusion_normalized.iter().enumerate() {
            let name = m.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let cells: Vec<String> = row.iter().map(|v| format!("{:6.1}", v * 100.0)).collect();
            println!("{name:>12} {}", cells.join(" "));
        }
        if a.csv {
            let dir = path.parent().unwrap_or(Path::new("."));
            emit_report(dir, m, doc.latency.as_ref(), doc.params.as_ref(), &[ReportFormat::Csv])?;
        }
    }
    if a.params {
        print_params()?;
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    tune_allocator();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Fixture(a) => cmd_fixture(a),
        Command::Train(a) => cmd_train(a),
        Command::Crossval { k, train } => cmd_crossval(*k, train),
        Command::Gridsearch { grid, jobs, train } => cmd_gridsearch(grid, *jobs, train),
        Command::Eval(a) => cmd_eval(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
