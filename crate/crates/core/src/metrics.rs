//! Evaluation metrics and the run log.
//!
//! Accuracies are indexed by evaluation point `j` (a 1-based batch index) and
//! task position `i`. A record at `j` holds the accuracy of every task seen by
//! then, so `per_task_acc.len()` is `k_j`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::Gradients;
use crate::precond::PreconditionerState;

/// Ratio of preconditioned to raw gradient norm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradRatio {
    pub per_layer: Vec<Option<f64>>,
    pub aggregate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub tau: usize,
    pub per_task_acc: Vec<f64>,
    /// Mean training loss over the gradient steps since the previous record.
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_new: Option<GradRatio>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_replay: Option<GradRatio>,
    /// Probe representation drift accumulated since the previous record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<EvalRecord>,
    /// 1-based index `τ_i` of the last batch of each task.
    pub task_boundaries: Vec<usize>,
}

impl RunLog {
    pub fn new(task_boundaries: Vec<usize>) -> Self {
        Self {
            records: Vec::new(),
            task_boundaries,
        }
    }

    pub fn push(&mut self, record: EvalRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if record.tau <= last.tau {
                return Err(Error::Input(format!(
                    "log records must increase in tau ({} after {})",
                    record.tau, last.tau
                )));
            }
        }
        if let Some(a) = record.per_task_acc.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::Input(format!("accuracy {a} outside [0, 1]")));
        }
        self.records.push(record);
        Ok(())
    }

    /// Accuracy series of task `i` over the records that include it.
    pub fn task_series(&self, i: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| r.per_task_acc.get(i).copied())
            .collect()
    }

    /// One JSON object per record.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean accuracy over the tasks seen, at the last record.
pub fn final_acc(log: &RunLog) -> Result<f64> {
    let last = log
        .records
        .last()
        .ok_or_else(|| Error::Input("final accuracy of an empty log".into()))?;
    if last.per_task_acc.is_empty() {
        return Err(Error::Input(format!("record at tau {} has no accuracies", last.tau)));
    }
    Ok(mean(&last.per_task_acc))
}

/// Mean over evaluation points of the mean accuracy over tasks seen.
pub fn average_anytime_acc(log: &RunLog) -> Result<f64> {
    if log.records.is_empty() {
        return Err(Error::Input("average anytime accuracy of an empty log".into()));
    }
    let mut total = 0.0;
    for r in &log.records {
        if r.per_task_acc.is_empty() {
            return Err(Error::Input(format!("record at tau {} has no accuracies", r.tau)));
        }
        total += mean(&r.per_task_acc);
    }
    Ok(total / log.records.len() as f64)
}

/// Current task's final accuracy plus, for every earlier task, its minimum
/// accuracy over evaluation points strictly after that task ended; averaged
/// over the tasks seen.
pub fn worst_case_acc(log: &RunLog) -> Result<f64> {
    let last = log
        .records
        .last()
        .ok_or_else(|| Error::Input("worst-case accuracy of an empty log".into()))?;
    let k = last.per_task_acc.len();
    if k == 0 {
        return Err(Error::Input(format!("record at tau {} has no accuracies", last.tau)));
    }
    let mut total = last.per_task_acc[k - 1];
    for i in 0..k - 1 {
        let boundary = *log.task_boundaries.get(i).ok_or_else(|| {
            Error::Input(format!("no boundary recorded for task {i}"))
        })?;
        let mut worst = f64::INFINITY;
        for r in log.records.iter().filter(|r| r.tau > boundary) {
            let a = r.per_task_acc.get(i).ok_or_else(|| {
                Error::Input(format!("record at tau {} lacks task {i}", r.tau))
            })?;
            worst = worst.min(*a);
        }
        if !worst.is_finite() {
            return Err(Error::Input(format!("no evaluation point after task {i} ended")));
        }
        total += worst;
    }
    Ok(total / k as f64)
}

/// Sum of Euclidean distances between consecutive representations.
pub fn representation_drift(series: &[Vec<f64>]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Input("drift needs at least two representations".into()));
    }
    Ok(series
        .windows(2)
        .map(|w| {
            w[0].iter()
                .zip(&w[1])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum())
}

/// Sum of absolute consecutive differences.
pub fn total_variation(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::Input("total variation needs at least two points".into()));
    }
    Ok(series.windows(2).map(|w| (w[1] - w[0]).abs()).sum())
}

/// `‖Λg‖ / ‖g‖` over all layers and per layer. `None` for a zero gradient;
/// per-layer entries are `None` where that layer's gradient is zero.
pub fn grad_norm_ratio(grads: &Gradients, state: &PreconditionerState) -> Result<Option<GradRatio>> {
    let pre = state.apply(grads)?;
    let raw = grads.norm();
    if raw == 0.0 {
        return Ok(None);
    }
    let per_layer = grads
        .layers
        .iter()
        .zip(&pre.layers)
        .map(|(g, p)| {
            let n = g.frobenius_norm();
            (n > 0.0).then(|| p.frobenius_norm() / n)
        })
        .collect();
    Ok(Some(GradRatio {
        per_layer,
        aggregate: pre.norm() / raw,
    }))
}

/// Sample mean and standard error (sample standard deviation over `√n`).
/// The error is 0 for fewer than two values.
pub fn mean_and_standard_error(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let m = mean(values);
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}
