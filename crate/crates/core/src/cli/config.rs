use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clreg::{MethodKind, RegConfig};
use crate::error::{Error, Result};
use crate::harness::TrainConfig;
use crate::nets::{ArchConfig, ArchKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchBlock {
    pub kind: ArchKind,
    #[serde(default)]
    pub config: ArchConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataConfig {
    /// The two-task color/shape benchmark, generated in memory.
    Fig1 {
        image_size: usize,
        n_per_class: usize,
        seed: u64,
    },
    /// Class-per-directory PPM trees or packed `.dsds` files.
    Corpus {
        train: PathBuf,
        test: PathBuf,
        n_tasks: usize,
        split_seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchBlock,
    pub method: RegConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
}

pub const PRESETS: [&str; 3] = ["fig1", "flowers10", "capacity-check"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fig1" => Ok(ExperimentConfig {
                arch: ArchBlock {
                    kind: ArchKind::Ds,
                    config: ArchConfig {
                        // the faithful color branch only ever sees a few
                        // corner pixels at this resolution
                        strict_color: true,
                        ..ArchConfig::new(32, 0.25)
                    },
                },
                method: RegConfig::new(MethodKind::Finetune),
                data: DataConfig::Fig1 {
                    image_size: 32,
                    n_per_class: 500,
                    seed: 0,
                },
                train: TrainConfig {
                    lr_grid: vec![5e-3],
                    max_epochs: 20,
                    patience: 5,
                    ..Default::default()
                },
                out_dir: "runs/fig1".into(),
                seeds: vec![0, 1, 2, 3, 4],
            }),
            "flowers10" => Ok(ExperimentConfig {
                arch: ArchBlock {
                    kind: ArchKind::Ds,
                    config: ArchConfig::new(224, 1.0),
                },
                method: RegConfig::new(MethodKind::Lwf),
                data: DataConfig::Corpus {
                    train: "data/flowers/train".into(),
                    test: "data/flowers/test".into(),
                    n_tasks: 10,
                    split_seed: 0,
                },
                train: TrainConfig::default(),
                out_dir: "runs/flowers10".into(),
                seeds: vec![0],
            }),
            "capacity-check" => Ok(ExperimentConfig {
                arch: ArchBlock {
                    kind: ArchKind::Ds,
                    config: ArchConfig::new(224, 1.0),
                },
                method: RegConfig::new(MethodKind::Finetune),
                data: DataConfig::Fig1 {
                    image_size: 224,
                    n_per_class: 1,
                    seed: 0,
                },
                train: TrainConfig::default(),
                out_dir: "runs/capacity-check".into(),
                seeds: vec![0],
            }),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (known: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Task count implied by the data block.
    pub fn n_tasks(&self) -> usize {
        match &self.data {
            DataConfig::Fig1 { .. } => 2,
            DataConfig::Corpus { n_tasks, .. } => *n_tasks,
        }
    }

    /// Checks everything that can be checked without training. With
    /// `check_paths`, corpus paths must exist.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        self.arch.config.validate()?;
        self.method.validate()?;
        self.train.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        match &self.data {
            DataConfig::Fig1 {
                image_size,
                n_per_class,
                ..
            } => {
                if *image_size != self.arch.config.input_size {
                    return Err(Error::Config(format!(
                        "data image_size {image_size} differs from arch input_size {}",
                        self.arch.config.input_size
                    )));
                }
                if *n_per_class == 0 {
                    return Err(Error::Config("n_per_class must be positive".into()));
                }
            }
            DataConfig::Corpus {
                train, test, n_tasks, ..
            } => {
                if *n_tasks == 0 {
                    return Err(Error::Config("n_tasks must be positive".into()));
                }
                if check_paths {
                    for p in [train, test] {
                        if !p.exists() {
                            return Err(Error::Config(format!("data path {} does not exist", p.display())));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// The configuration of a single-seed run, as stored in its directory.
    pub fn for_seed(&self, seed: u64) -> Self {
        ExperimentConfig {
            seeds: vec![seed],
            ..self.clone()
        }
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out_dir
            .join(format!("{}-{}-seed{seed}", self.arch.kind, self.method.method))
    }
}

/// Command-line overrides applied on top of a file or preset.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub arch: Option<ArchKind>,
    pub method: Option<MethodKind>,
    pub lambda: Option<f64>,
    pub width: Option<f64>,
    pub tasks: Option<usize>,
    pub out: Option<PathBuf>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if !self.seeds.is_empty() {
            cfg.seeds = self.seeds.clone();
        }
        if let Some(a) = self.arch {
            cfg.arch.kind = a;
        }
        if let Some(m) = self.method {
            if m != cfg.method.method {
                // a lambda tuned for another method does not carry over
                cfg.method.lambda = None;
            }
            cfg.method.method = m;
        }
        if let Some(l) = self.lambda {
            cfg.method.lambda = Some(l);
        }
        if let Some(w) = self.width {
            cfg.arch.config.width_mult = w;
        }
        if let Some(t) = self.tasks {
            match &mut cfg.data {
                DataConfig::Corpus { n_tasks, .. } => *n_tasks = t,
                DataConfig::Fig1 { .. } if t == 2 => {}
                DataConfig::Fig1 { .. } => {
                    return Err(Error::Config(format!("the fig1 benchmark has 2 tasks, not {t}")));
                }
            }
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        Ok(())
    }
}
