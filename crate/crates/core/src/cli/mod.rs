//! The `dscl` command line: dataset generation, training runs and reports.

mod config;
mod report;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sha2::{Digest, Sha256};

pub use config::{ArchBlock, DataConfig, ExperimentConfig, Overrides, PRESETS};
pub use report::{build_report, mean_std, read_run, Report, RunRecord};

use crate::clreg::MethodKind;
use crate::datagen::{fig1_benchmark, load_path, save_dataset, Dataset};
use crate::error::{Error, Result};
use crate::harness::{run_sequence, split_tasks, EvalMode, RunMetrics, RunSpec, TaskSplit};
use crate::nets::{build_multihead, ArchKind};

#[derive(Debug, Parser)]
#[command(
    name = "dscl",
    version,
    about = "Color/shape disentangled continual learning experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic benchmark or pack a PPM corpus into .dsds files.
    Gen(GenArgs),
    /// Train one task sequence per seed.
    Train(TrainArgs),
    /// Aggregate run directories into tables and curves.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct Source {
    /// JSON experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in config: fig1, flowers10 or capacity-check.
    #[arg(long, conflicts_with = "config")]
    pub preset: Option<String>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub source: Source,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub source: Source,
    /// Repeatable; replaces the configured seed list.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub arch: Option<ArchKind>,
    #[arg(long)]
    pub method: Option<MethodKind>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub width: Option<f64>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the resolved config and parameter counts, train nothing.
    #[arg(long)]
    pub dry_run: bool,
    /// Which accuracies to print after each run.
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Completed run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Both)]
    pub mode: ModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Aware,
    Agnostic,
    Both,
}

impl ModeArg {
    pub fn modes(self) -> Vec<EvalMode> {
        match self {
            ModeArg::Aware => vec![EvalMode::Aware],
            ModeArg::Agnostic => vec![EvalMode::Agnostic],
            ModeArg::Both => vec![EvalMode::Aware, EvalMode::Agnostic],
        }
    }
}

fn resolve(source: &Source) -> Result<ExperimentConfig> {
    match (&source.config, &source.preset) {
        (Some(p), _) => ExperimentConfig::from_file(p),
        (None, Some(name)) => ExperimentConfig::preset(name),
        (None, None) => Err(Error::Config("pass --config PATH or --preset NAME".into())),
    }
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").map_err(|e| Error::io(path, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

/// Train/test datasets and the class split for `cfg`.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset, TaskSplit)> {
    match &cfg.data {
        DataConfig::Fig1 {
            image_size,
            n_per_class,
            seed,
        } => {
            let b = fig1_benchmark(*image_size, *n_per_class, *seed)?;
            let split = TaskSplit::from_classes(b.tasks.clone())?;
            Ok((b.train, b.test, split))
        }
        DataConfig::Corpus {
            train,
            test,
            n_tasks,
            split_seed,
        } => {
            let size = cfg.arch.config.input_size;
            let tr = load_path(train, size)?;
            let te = load_path(test, size)?;
            if tr.class_names != te.class_names {
                return Err(Error::Data("train and test corpora have different classes".into()));
            }
            let split = split_tasks(tr.n_classes(), *n_tasks, *split_seed)?;
            Ok((tr, te, split))
        }
    }
}

pub fn cmd_gen(mut cfg: ExperimentConfig, out: Option<PathBuf>, seed: Option<u64>) -> Result<serde_json::Value> {
    if let (Some(s), DataConfig::Fig1 { seed: ds, .. }) = (seed, &mut cfg.data) {
        *ds = s;
    }
    cfg.validate(true)?;
    let dir = out.unwrap_or_else(|| cfg.out_dir.join("data"));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, test, split) = load_data(&cfg)?;
    let mut files = Vec::new();
    for (name, ds) in [("train.dsds", &train), ("test.dsds", &test)] {
        let p = dir.join(name);
        save_dataset(ds, &p)?;
        files.push(json!({
            "file": name,
            "samples": ds.len(),
            "classes": ds.n_classes(),
            "sha256": sha256_file(&p)?,
        }));
    }
    let manifest = json!({
        "data": cfg.data,
        "image_size": train.image_size(),
        "tasks": split.tasks.iter().map(|t| t.classes.clone()).collect::<Vec<_>>(),
        "files": files,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Resolved config plus parameter counts for every architecture kind.
pub fn dry_run(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    cfg.validate(false)?;
    // head sizes only matter for the head counts; assume balanced tasks
    let n_tasks = cfg.n_tasks();
    let tasks = match &cfg.data {
        DataConfig::Fig1 { .. } => vec![2; n_tasks],
        DataConfig::Corpus { .. } => vec![10; n_tasks],
    };
    let mut counts = serde_json::Map::new();
    for kind in ArchKind::ALL {
        let spec = build_multihead(kind, &cfg.arch.config, &tasks)?;
        counts.insert(
            kind.to_string(),
            json!({
                "fe_params": spec.fe_param_count(),
                "head_params": (0..n_tasks).map(|t| spec.head_param_count(t)).collect::<Vec<_>>(),
                "total_params": spec.total_param_count(),
            }),
        );
    }
    let std_fe = build_multihead(ArchKind::Resnet18, &cfg.arch.config, &tasks)?.fe_param_count();
    let ds_fe = build_multihead(ArchKind::Ds, &cfg.arch.config, &tasks)?.fe_param_count();
    Ok(json!({
        "config": cfg,
        "selected": cfg.arch.kind,
        "param_counts": counts,
        "ds_to_standard_fe_percent": 100.0 * ds_fe as f64 / std_fe as f64,
    }))
}

fn threads() -> usize {
    std::env::var("DSCL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One run per seed, at most `DSCL_THREADS` at a time. Each run directory
/// gets its own `config.json` before training starts.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<RunMetrics>> {
    cfg.validate(true)?;
    let (train, test, split) = load_data(cfg)?;
    for &seed in &cfg.seeds {
        let dir = cfg.run_dir(seed);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("config.json"), &cfg.for_seed(seed))?;
    }
    let queue = Mutex::new(cfg.seeds.clone().into_iter().rev().collect::<Vec<_>>());
    let results = Mutex::new(Vec::new());
    let workers = threads().min(cfg.seeds.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let Some(seed) = queue.lock().expect("queue").pop() else {
                    break;
                };
                let spec = RunSpec {
                    arch: cfg.arch.kind,
                    arch_config: cfg.arch.config.clone(),
                    reg: cfg.method.clone(),
                    train: cfg.train.clone(),
                    seed,
                };
                let dir = cfg.run_dir(seed);
                let r = run_sequence(&spec, &train, &test, &split, Some(&dir)).map(|o| o.metrics);
                results.lock().expect("results").push((seed, r));
            });
        }
    });
    let mut results = results.into_inner().expect("results");
    results.sort_by_key(|(s, _)| *s);
    results.into_iter().map(|(_, r)| r).collect()
}

pub fn cmd_report(dirs: &[PathBuf], modes: &[EvalMode], out: &Path) -> Result<Report> {
    let runs = dirs.iter().map(|d| read_run(d)).collect::<Result<Vec<_>>>()?;
    let report = build_report(&runs, modes)?;
    report.write(out)?;
    Ok(report)
}

/// Prints a line, ignoring a closed pipe (`dscl ... | head`).
fn say(line: impl std::fmt::Display) {
    use std::io::Write;
    let _ = writeln!(std::io::stdout(), "{line}");
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => {
            let m = cmd_gen(resolve(&a.source)?, a.out, a.seed)?;
            say(serde_json::to_string_pretty(&m)?);
        }
        Command::Train(a) => {
            let mut cfg = resolve(&a.source)?;
            Overrides {
                seeds: a.seeds.clone(),
                arch: a.arch,
                method: a.method,
                lambda: a.lambda,
                width: a.width,
                tasks: a.tasks,
                out: a.out.clone(),
            }
            .apply(&mut cfg)?;
            if a.dry_run || a.source.preset.as_deref() == Some("capacity-check") {
                say(serde_json::to_string_pretty(&dry_run(&cfg)?)?);
                return Ok(());
            }
            for m in cmd_train(&cfg)? {
                let mut line = json!({"arch": m.arch, "method": m.method, "seed": m.seed});
                for mode in a.mode.modes() {
                    let (name, mm) = match mode {
                        EvalMode::Aware => ("aware", &m.aware),
                        EvalMode::Agnostic => ("agnostic", &m.agnostic),
                    };
                    line[name] = json!({"mean_acc": mm.mean_acc, "mean_forgetting": mm.mean_forgetting});
                }
                say(line);
            }
        }
        Command::Report(a) => {
            let r = cmd_report(&a.runs, &a.mode.modes(), &a.out)?;
            for (name, _) in &r.files {
                say(a.out.join(name).display());
            }
        }
    }
    Ok(())
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Failures are reported on stderr as one JSON object.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                json!({"error": {"kind": e.kind(), "message": e.to_string(), "exit_code": code}})
            );
            code
        }
    }
}
