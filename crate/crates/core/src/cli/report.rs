use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use crate::clreg::MethodKind;
use crate::error::{Error, Result};
use crate::harness::{EvalMode, ModeMetrics, RunMetrics};
use crate::nets::ArchKind;

/// One completed run directory.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub metrics: RunMetrics,
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| Error::Report(format!("{}: {e}", p.display())))
    };
    let config: ExperimentConfig = serde_json::from_str(&read("config.json")?)
        .map_err(|e| Error::Report(format!("{}/config.json: {e}", dir.display())))?;
    let metrics: RunMetrics = serde_json::from_str(&read("metrics.json")?)
        .map_err(|e| Error::Report(format!("{}/metrics.json: {e}", dir.display())))?;
    Ok(RunRecord {
        dir: dir.to_path_buf(),
        config,
        metrics,
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>();
    (mean, (ss / (n - 1.0)).sqrt())
}

/// The part of a run configuration that must agree across everything
/// aggregated into one report.
fn comparable(c: &ExperimentConfig) -> serde_json::Value {
    let mut v = serde_json::to_value(c).expect("config serializes");
    let o = v.as_object_mut().expect("object");
    o.remove("seeds");
    o.remove("out_dir");
    if let Some(a) = o.get_mut("arch").and_then(|a| a.as_object_mut()) {
        a.remove("kind");
    }
    // methods carry their own hyperparameters
    o.remove("method");
    v
}

fn mode_of(m: &RunMetrics, mode: EvalMode) -> &ModeMetrics {
    match mode {
        EvalMode::Aware => &m.aware,
        EvalMode::Agnostic => &m.agnostic,
    }
}

fn mode_name(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Aware => "aware",
        EvalMode::Agnostic => "agnostic",
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Aggregated report files, by name.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub files: Vec<(String, String)>,
}

impl Report {
    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|(n, _)| n == name).map(|(_, t)| t.as_str())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in &self.files {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Builds `table_acc.csv`, `table_forg.csv` (arch × method, mean and sample
/// std over seeds, one block per mode) and `curves_<mode>.csv`.
pub fn build_report(runs: &[RunRecord], modes: &[EvalMode]) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Report("no runs to report".into()));
    }
    let reference = comparable(&runs[0].config);
    let mut cells: BTreeMap<(ArchKind, MethodKind), BTreeMap<u64, &RunMetrics>> = BTreeMap::new();
    for r in runs {
        if comparable(&r.config) != reference {
            return Err(Error::Report(format!(
                "{} was run with a different data/architecture/training configuration than {}",
                r.dir.display(),
                runs[0].dir.display()
            )));
        }
        let m = &r.metrics;
        let key = (r.config.arch.kind, r.config.method.method);
        if m.arch != key.0.as_str() || m.method != key.1.as_str() {
            return Err(Error::Report(format!(
                "{}: metrics and config disagree",
                r.dir.display()
            )));
        }
        if cells.entry(key).or_default().insert(m.seed, m).is_some() {
            return Err(Error::Report(format!(
                "duplicate run for {} / {} / seed {}",
                key.0, key.1, m.seed
            )));
        }
    }
    let methods: Vec<MethodKind> = MethodKind::ALL
        .iter()
        .copied()
        .filter(|m| cells.keys().any(|(_, k)| k == m))
        .collect();
    let archs: Vec<ArchKind> = ArchKind::ALL
        .iter()
        .copied()
        .filter(|a| cells.keys().any(|(k, _)| k == a))
        .collect();

    let mut header = String::from("mode,arch");
    for m in &methods {
        header.push_str(&format!(",{m}_mean,{m}_sample_std,{m}_n"));
    }
    header.push('\n');
    let mut acc = header.clone();
    let mut forg = header;
    for &mode in modes {
        for a in &archs {
            let mut ra = format!("{},{a}", mode_name(mode));
            let mut rf = ra.clone();
            for m in &methods {
                match cells.get(&(*a, *m)) {
                    Some(seeds) => {
                        let va: Vec<f64> = seeds.values().map(|r| mode_of(r, mode).mean_acc).collect();
                        let vf: Vec<f64> = seeds.values().map(|r| mode_of(r, mode).mean_forgetting).collect();
                        let (ma, sa) = mean_std(&va);
                        let (mf, sf) = mean_std(&vf);
                        ra.push_str(&format!(",{},{},{}", fmt(ma), fmt(sa), va.len()));
                        rf.push_str(&format!(",{},{},{}", fmt(mf), fmt(sf), vf.len()));
                    }
                    None => {
                        ra.push_str(",,,");
                        rf.push_str(",,,");
                    }
                }
            }
            acc.push_str(&ra);
            acc.push('\n');
            forg.push_str(&rf);
            forg.push('\n');
        }
    }

    let mut files = vec![("table_acc.csv".to_string(), acc), ("table_forg.csv".to_string(), forg)];
    for &mode in modes {
        let mut s = String::from("arch,method,after_task,task,mean,sample_std,n\n");
        for ((a, m), seeds) in &cells {
            let first = seeds.values().next().expect("non-empty");
            let n_tasks = first.n_tasks;
            if seeds.values().any(|r| r.n_tasks != n_tasks) {
                return Err(Error::Report(format!("{a}/{m}: runs disagree on the task count")));
            }
            for t in 0..n_tasks {
                // per-task columns, then the stage average
                for k in 0..=t {
                    let v: Vec<f64> = seeds
                        .values()
                        .map(|r| {
                            mode_of(r, mode).matrix[t][k].ok_or_else(|| {
                                Error::Report(format!("{a}/{m} seed {}: matrix entry ({t},{k}) missing", r.seed))
                            })
                        })
                        .collect::<Result<_>>()?;
                    let (mu, sd) = mean_std(&v);
                    s.push_str(&format!("{a},{m},{t},{k},{},{},{}\n", fmt(mu), fmt(sd), v.len()));
                }
                let v: Vec<f64> = seeds.values().filter_map(|r| mode_of(r, mode).stage_means[t]).collect();
                let (mu, sd) = mean_std(&v);
                s.push_str(&format!("{a},{m},{t},avg,{},{},{}\n", fmt(mu), fmt(sd), v.len()));
            }
        }
        files.push((format!("curves_{}.csv", mode_name(mode)), s));
    }
    Ok(Report { files })
}
