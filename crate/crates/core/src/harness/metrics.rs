use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `a[t][k]`: accuracy (percent) on task `k` after finishing task `t`,
/// defined for `k ≤ t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<Option<f64>>>,
}

impl AccuracyMatrix {
    pub fn new(n_tasks: usize) -> Self {
        AccuracyMatrix {
            rows: (0..n_tasks).map(|t| vec![None; t + 1]).collect(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len());
        for (t, r) in rows.iter().enumerate() {
            m.set_row(t, r)?;
        }
        Ok(m)
    }

    pub fn n_tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn set(&mut self, t: usize, k: usize, acc: f64) -> Result<()> {
        if k > t || t >= self.rows.len() {
            return Err(Error::Metric(format!("entry ({t}, {k}) outside the lower triangle")));
        }
        if !(0.0..=100.0).contains(&acc) {
            return Err(Error::Metric(format!("accuracy {acc} outside [0, 100]")));
        }
        self.rows[t][k] = Some(acc);
        Ok(())
    }

    pub fn set_row(&mut self, t: usize, row: &[f64]) -> Result<()> {
        if row.len() != t + 1 {
            return Err(Error::Metric(format!(
                "row {t} needs {} entries, got {}",
                t + 1,
                row.len()
            )));
        }
        for (k, &v) in row.iter().enumerate() {
            self.set(t, k, v)?;
        }
        Ok(())
    }

    pub fn get(&self, t: usize, k: usize) -> Option<f64> {
        self.rows.get(t)?.get(k).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        self.rows.iter().all(|r| r.iter().all(Option::is_some))
    }

    fn require_complete(&self) -> Result<usize> {
        if self.rows.is_empty() || !self.is_complete() {
            return Err(Error::Metric("accuracy matrix is incomplete".into()));
        }
        Ok(self.rows.len())
    }

    /// Mean of the last row.
    pub fn mean_accuracy(&self) -> Result<f64> {
        let n = self.require_complete()?;
        Ok(self.rows[n - 1].iter().map(|v| v.expect("complete")).sum::<f64>() / n as f64)
    }

    /// `max_{t≥k} a[t][k] − a[T][k]` for every task before the last.
    pub fn forgetting(&self) -> Result<Vec<f64>> {
        let n = self.require_complete()?;
        Ok((0..n - 1)
            .map(|k| {
                let best = (k..n)
                    .map(|t| self.get(t, k).expect("complete"))
                    .fold(f64::MIN, f64::max);
                best - self.get(n - 1, k).expect("complete")
            })
            .collect())
    }

    /// Mean of `−fₖ` (a drop reads as a negative number); 0 with one task.
    pub fn mean_forgetting(&self) -> Result<f64> {
        let f = self.forgetting()?;
        if f.is_empty() {
            return Ok(0.0);
        }
        Ok(-f.iter().sum::<f64>() / f.len() as f64)
    }

    /// Average over seen tasks after each stage.
    pub fn stage_means(&self) -> Vec<Option<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let vals: Option<Vec<f64>> = r.iter().copied().collect();
                vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect()
    }

    pub fn rows(&self) -> Vec<Vec<Option<f64>>> {
        self.rows.clone()
    }

    /// Rows `t`, columns `k`; the upper triangle stays empty.
    pub fn to_csv(&self) -> String {
        let n = self.rows.len();
        let mut s = String::from("after_task");
        for k in 0..n {
            s.push_str(&format!(",task_{k}"));
        }
        s.push('\n');
        for (t, r) in self.rows.iter().enumerate() {
            s.push_str(&t.to_string());
            for k in 0..n {
                s.push(',');
                if let Some(Some(v)) = r.get(k) {
                    s.push_str(&format!("{v}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeMetrics {
    pub mean_acc: f64,
    pub mean_forgetting: f64,
    pub matrix: Vec<Vec<Option<f64>>>,
    /// Mean accuracy over seen tasks after each stage.
    pub stage_means: Vec<Option<f64>>,
}

impl ModeMetrics {
    pub fn from_matrix(m: &AccuracyMatrix) -> Result<Self> {
        Ok(ModeMetrics {
            mean_acc: m.mean_accuracy()?,
            mean_forgetting: m.mean_forgetting()?,
            matrix: m.rows(),
            stage_means: m.stage_means(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub arch: String,
    pub method: String,
    pub seed: u64,
    pub n_tasks: usize,
    pub fe_params: usize,
    /// Learning rate chosen from the grid for each task.
    pub chosen_lr: Vec<f64>,
    pub aware: ModeMetrics,
    pub agnostic: ModeMetrics,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_task_example() {
        let m = AccuracyMatrix::from_rows(&[vec![80.0], vec![60.0, 70.0]]).unwrap();
        assert_eq!(m.mean_accuracy().unwrap(), 65.0);
        assert_eq!(m.mean_forgetting().unwrap(), -20.0);
    }

    #[test]
    fn constant_matrix_has_no_forgetting() {
        let rows: Vec<Vec<f64>> = (0..4).map(|t| vec![50.0; t + 1]).collect();
        let m = AccuracyMatrix::from_rows(&rows).unwrap();
        assert_eq!(m.mean_accuracy().unwrap(), 50.0);
        assert_eq!(m.mean_forgetting().unwrap(), 0.0);
    }

    #[test]
    fn incomplete_and_out_of_range() {
        let mut m = AccuracyMatrix::new(2);
        m.set(0, 0, 10.0).unwrap();
        assert!(matches!(m.mean_accuracy(), Err(Error::Metric(_))));
        assert!(m.set(0, 1, 10.0).is_err());
        assert!(m.set(1, 0, 101.0).is_err());
    }

    #[test]
    fn csv_leaves_upper_triangle_empty() {
        let m = AccuracyMatrix::from_rows(&[vec![80.0], vec![60.0, 70.5]]).unwrap();
        assert_eq!(m.to_csv(), "after_task,task_0,task_1\n0,80,\n1,60,70.5\n");
    }
}
