//! Task-incremental protocol: class splits, per-task training with the
//! patience/decay schedule, task-aware and task-agnostic evaluation, and
//! accuracy/forgetting metrics.

mod metrics;
mod train;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{Error, Result};

pub use metrics::{AccuracyMatrix, ModeMetrics, RunMetrics};
pub use train::{
    accuracy_from_logits, evaluate, evaluate_both, run_sequence, train_task, EpochLog, EvalMode, RunOutput, RunSpec,
    TaskOutcome,
};

/// Minimum decrease of the validation loss that counts as improvement.
pub const IMPROVEMENT_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Global class ids; position in this list is the head-local label.
    pub classes: Vec<usize>,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSplit {
    pub tasks: Vec<Task>,
}

/// Shuffles class ids with `seed` and deals them round-robin, so task sizes
/// differ by at most one.
pub fn split_tasks(n_classes: usize, n_tasks: usize, seed: u64) -> Result<TaskSplit> {
    if n_tasks == 0 || n_tasks > n_classes {
        return Err(Error::Config(format!(
            "cannot split {n_classes} classes into {n_tasks} tasks"
        )));
    }
    let mut ids: Vec<usize> = (0..n_classes).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut groups = vec![Vec::new(); n_tasks];
    for (i, c) in ids.into_iter().enumerate() {
        groups[i % n_tasks].push(c);
    }
    TaskSplit::from_classes(groups)
}

impl TaskSplit {
    pub fn from_classes(groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = std::collections::BTreeSet::new();
        for (t, g) in groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::Config(format!("task {t} has no classes")));
            }
            for &c in g {
                if !seen.insert(c) {
                    return Err(Error::Config(format!("class {c} appears in more than one task")));
                }
            }
        }
        Ok(TaskSplit {
            tasks: groups
                .into_iter()
                .map(|classes| Task {
                    classes,
                    train: Vec::new(),
                    val: Vec::new(),
                    test: Vec::new(),
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(|t| t.classes.len()).collect()
    }

    pub fn local_label(&self, task: usize, class: usize) -> Option<usize> {
        self.tasks.get(task)?.classes.iter().position(|&c| c == class)
    }

    /// Fills the index sets: every class's training samples are shuffled and
    /// the first `val_fraction` of them held out for validation (stratified).
    pub fn assign(&mut self, train: &Dataset, test: &Dataset, val_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config(format!("val_fraction {val_fraction} must be in [0, 1)")));
        }
        let by_train = train.class_indices();
        let by_test = test.class_indices();
        for (t, task) in self.tasks.iter_mut().enumerate() {
            task.train.clear();
            task.val.clear();
            task.test.clear();
            for &c in &task.classes {
                let mut idx = by_train
                    .get(c)
                    .cloned()
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::Data(format!("no training samples for class {c}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(c as u64);
                idx.shuffle(&mut rng);
                let mut n_val = (val_fraction * idx.len() as f64).round() as usize;
                if val_fraction > 0.0 && idx.len() >= 2 {
                    n_val = n_val.clamp(1, idx.len() - 1);
                }
                task.val.extend_from_slice(&idx[..n_val]);
                task.train.extend_from_slice(&idx[n_val..]);
                let te = by_test
                    .get(c)
                    .filter(|v| !v.is_empty())
                    .ok_or_else(|| Error::Data(format!("task {t}: no test samples for class {c}")))?;
                task.test.extend_from_slice(te);
            }
            task.train.sort_unstable();
            task.val.sort_unstable();
            task.test.sort_unstable();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_grid: Vec<f64>,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Epochs without validation improvement before a decay.
    pub patience: usize,
    pub lr_decay_factor: f64,
    pub min_lr: f64,
    pub val_fraction: f64,
    pub eval_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_grid: vec![5e-2, 5e-3, 5e-4],
            batch_size: 32,
            max_epochs: 200,
            weight_decay: 2e-4,
            momentum: 0.9,
            patience: 15,
            lr_decay_factor: 3.0,
            min_lr: 1e-6,
            val_fraction: 0.1,
            eval_batch: 256,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return err(format!("lr_grid {:?} must be non-empty and positive", self.lr_grid));
        }
        let lowest = self.lr_grid.iter().copied().fold(f64::INFINITY, f64::min);
        if !(self.min_lr > 0.0 && self.min_lr < lowest) {
            return err(format!("min_lr {} must be positive and below {lowest}", self.min_lr));
        }
        if self.patience == 0 {
            return err("patience must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return err("batch sizes must be positive".into());
        }
        if self.max_epochs == 0 {
            return err("max_epochs must be positive".into());
        }
        if !(self.lr_decay_factor > 1.0) {
            return err(format!("lr_decay_factor {} must exceed 1", self.lr_decay_factor));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return err("momentum must be in [0, 1) and weight_decay ≥ 0".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return err(format!("val_fraction {} must be in [0, 1)", self.val_fraction));
        }
        Ok(())
    }
}

/// Learning rates visited when decaying from `start` until the rate drops
/// below `min_lr`; the last entry is the first rate under the floor.
pub fn lr_trace(start: f64, factor: f64, min_lr: f64) -> Vec<f64> {
    let mut v = vec![start];
    let mut lr = start;
    while lr >= min_lr {
        lr /= factor;
        v.push(lr);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flowers_split_sizes() {
        let s = split_tasks(102, 10, 0).unwrap();
        let mut sizes = s.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, [10, 10, 10, 10, 10, 10, 10, 10, 11, 11]);
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let a = split_tasks(4, 2, 9).unwrap();
        let mut all: Vec<usize> = a.tasks.iter().flat_map(|t| t.classes.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, [0, 1, 2, 3]);
        assert_eq!(a, split_tasks(4, 2, 9).unwrap());
        assert!(matches!(split_tasks(3, 4, 0), Err(Error::Config(_))));
    }

    #[test]
    fn decay_trace() {
        let t = lr_trace(5e-2, 3.0, 1e-6);
        assert_eq!(t.len() - 1, 10);
        assert!(*t.last().unwrap() < 1e-6);
        assert!(t[t.len() - 2] >= 1e-6);
    }

    #[test]
    fn config_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            min_lr: 1e-3,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            patience: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
