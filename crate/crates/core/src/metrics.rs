//! Success rates and normalized backward transfer over a continual run.

use crate::error::{GecoError, Result};

/// `entries[τ][k]`: success rate on task `k` after training through task `τ`.
/// Cells with `k > τ` are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMatrix {
    pub task_ids: Vec<String>,
    pub trials: usize,
    entries: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(task_ids: Vec<String>, trials: usize) -> Self {
        let k = task_ids.len();
        Self { task_ids, trials, entries: vec![vec![None; k]; k] }
    }

    pub fn tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn set(&mut self, after: usize, task: usize, rate: f64) -> Result<()> {
        if task > after || after >= self.tasks() {
            return Err(GecoError::Shape(format!("cell ({after}, {task}) outside the lower triangle")));
        }
        if !(0.0..=1.0).contains(&rate) {
            return Err(GecoError::Numeric(format!("success rate {rate} outside [0, 1]")));
        }
        self.entries[after][task] = Some(rate);
        Ok(())
    }

    pub fn get(&self, after: usize, task: usize) -> Option<f64> {
        self.entries.get(after)?.get(task).copied().flatten()
    }

    pub fn is_complete(&self) -> bool {
        (0..self.tasks()).all(|t| (0..=t).all(|k| self.get(t, k).is_some()))
    }

    /// Builds a matrix from dense rows; entries above the diagonal are ignored.
    pub fn from_rows(task_ids: Vec<String>, trials: usize, rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::new(task_ids, trials);
        if rows.len() != m.tasks() {
            return Err(GecoError::Shape(format!("{} rows for {} tasks", rows.len(), m.tasks())));
        }
        for (t, row) in rows.iter().enumerate() {
            for k in 0..=t {
                let v = *row.get(k).ok_or_else(|| GecoError::Shape(format!("row {t} too short")))?;
                m.set(t, k, v)?;
            }
        }
        Ok(m)
    }

    /// CSV with header `after_task,<task ids…>`; cells not yet defined are empty.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("after_task");
        for id in &self.task_ids {
            s.push(',');
            s.push_str(id);
        }
        s.push('\n');
        for (t, id) in self.task_ids.iter().enumerate() {
            s.push_str(id);
            for k in 0..self.tasks() {
                s.push(',');
                if let Some(v) = self.get(t, k) {
                    s.push_str(&format!("{v:.6}"));
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Fraction of successful episodes.
pub fn success_rate(outcomes: &[bool]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|&&o| o).count() as f64 / outcomes.len() as f64
}

/// Mean relative drop of task `k` after later tasks, negated so that
/// forgetting is positive: `−(1/(K−k−1)) Σ_{τ>k} (C_{τ,k} − C_{k,k}) / C_{k,k}`
/// with zero-based `k`.
pub fn n_nbt(c: &EvalMatrix, k: usize) -> Result<f64> {
    let kk = c.tasks();
    if k + 1 >= kk {
        return Err(GecoError::UndefinedMetric(format!("task {} has no later tasks", k + 1)));
    }
    let diag = c.get(k, k).ok_or_else(|| GecoError::UndefinedMetric(format!("C[{k}][{k}] missing")))?;
    if diag <= 0.0 {
        return Err(GecoError::UndefinedMetric(format!("task {} never succeeded after its own training", k + 1)));
    }
    let mut sum = 0.0;
    for t in k + 1..kk {
        let v = c.get(t, k).ok_or_else(|| GecoError::UndefinedMetric(format!("C[{t}][{k}] missing")))?;
        sum += (v - diag) / diag;
    }
    // adding +0.0 turns a negated zero into +0.0
    Ok(-sum / (kk - k - 1) as f64 + 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvgMetrics {
    pub avg_sr: f64,
    /// `None` when no task has a defined value.
    pub avg_nnbt: Option<f64>,
}

/// Mean final-row success rate and mean of the defined N-NBT values.
pub fn avg_metrics(c: &EvalMatrix) -> Result<AvgMetrics> {
    let kk = c.tasks();
    if kk == 0 {
        return Err(GecoError::EmptyInput("evaluation matrix has no tasks"));
    }
    let mut sr = 0.0;
    for k in 0..kk {
        sr += c.get(kk - 1, k).ok_or_else(|| GecoError::UndefinedMetric(format!("final row misses task {}", k + 1)))?;
    }
    let defined: Vec<f64> = (0..kk).filter_map(|k| n_nbt(c, k).ok()).collect();
    let avg_nnbt = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AvgMetrics { avg_sr: sr / kk as f64, avg_nnbt })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "/".to_string(), |v| format!("{v:.6}"))
}

/// Evaluation matrix CSV followed by a blank line and the `avg_sr,avg_nnbt` block.
pub fn report_csv(c: &EvalMatrix) -> Result<String> {
    let avg = avg_metrics(c)?;
    let mut s = c.to_csv();
    s.push_str("\nn_nbt");
    for k in 0..c.tasks() {
        s.push(',');
        s.push_str(&cell(n_nbt(c, k).ok()));
    }
    s.push_str("\n\navg_sr,avg_nnbt\n");
    s.push_str(&format!("{:.6},{}\n", avg.avg_sr, cell(avg.avg_nnbt)));
    Ok(s)
}

/// Aligned text rendering of the matrix, N-NBT row and averages.
pub fn report_table(c: &EvalMatrix) -> Result<String> {
    let avg = avg_metrics(c)?;
    let width = c.task_ids.iter().map(|t| t.len()).max().unwrap_or(0).max(12);
    let mut s = format!("{:<width$}", "after \\ task");
    for id in &c.task_ids {
        s.push_str(&format!("  {id:>width$}"));
    }
    s.push('\n');
    for (t, id) in c.task_ids.iter().enumerate() {
        s.push_str(&format!("{id:<width$}"));
        for k in 0..c.tasks() {
            let v = c.get(t, k).map_or_else(|| "".to_string(), |v| format!("{:.1}%", v * 100.0));
            s.push_str(&format!("  {v:>width$}"));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<width$}", "N-NBT"));
    for k in 0..c.tasks() {
        let v = n_nbt(c, k).map_or_else(|_| "/".to_string(), |v| format!("{:.1}%", v * 100.0));
        s.push_str(&format!("  {v:>width$}"));
    }
    s.push('\n');
    let nnbt = avg.avg_nnbt.map_or_else(|| "/".to_string(), |v| format!("{:.1}%", v * 100.0));
    s.push_str(&format!("avg SR {:.1}%  avg N-NBT {nnbt}\n", avg.avg_sr * 100.0));
    Ok(s)
}
