use std::io::Write;

use serde::Serialize;

use super::model::Method;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes: Vec<usize>,
    pub steps: usize,
    pub mean_loss: f64,
    /// Accuracy over all classes seen so far.
    pub joint_acc: f64,
    /// Accuracy on each earlier task's classes under the joint evaluation.
    pub per_task_acc: Vec<f64>,
    pub train_forward_passes: u64,
    pub eval_forward_passes: u64,
    pub wall_ms: u64,
}

/// Outcome of one continual run. Accuracies are fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub method: Method,
    pub scenario: String,
    pub avg_acc: f64,
    pub last_acc: f64,
    pub auc_acc: f64,
    pub joint_acc: Vec<f64>,
    /// `matrix[t][j]`: accuracy on task `j`'s classes after training task `t`.
    pub matrix: Vec<Vec<f64>>,
    pub online_curve: Vec<(usize, f64)>,
    pub learnable_params: usize,
    pub total_params: usize,
    pub param_ratio: f64,
    pub train_forward_passes: u64,
    pub eval_forward_passes: u64,
    pub wall_ms: u64,
    pub tasks: Vec<TaskRecord>,
}

pub const CSV_HEADER: &str =
    "seed,method,scenario,avg_acc,last_acc,auc_acc,param_ratio,forward_passes,wall_ms";

#[derive(Serialize)]
struct Summary<'a> {
    summary: bool,
    seed: u64,
    method: Method,
    scenario: &'a str,
    avg_acc: f64,
    last_acc: f64,
    auc_acc: f64,
    joint_acc: &'a [f64],
    online_curve: &'a [(usize, f64)],
    learnable_params: usize,
    total_params: usize,
    param_ratio: f64,
    train_forward_passes: u64,
    eval_forward_passes: u64,
    wall_ms: u64,
}

impl RunReport {
    /// One JSON object per task, then a summary line.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.tasks {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        let s = Summary {
            summary: true,
            seed: self.seed,
            method: self.method,
            scenario: &self.scenario,
            avg_acc: self.avg_acc,
            last_acc: self.last_acc,
            auc_acc: self.auc_acc,
            joint_acc: &self.joint_acc,
            online_curve: &self.online_curve,
            learnable_params: self.learnable_params,
            total_params: self.total_params,
            param_ratio: self.param_ratio,
            train_forward_passes: self.train_forward_passes,
            eval_forward_passes: self.eval_forward_passes,
            wall_ms: self.wall_ms,
        };
        serde_json::to_writer(&mut *out, &s)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes utf-8"))
    }

    /// CSV row matching [`CSV_HEADER`], without a newline.
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.8},{},{}",
            self.seed,
            self.method,
            csv_field(&self.scenario),
            self.avg_acc,
            self.last_acc,
            self.auc_acc,
            self.param_ratio,
            self.train_forward_passes,
            self.wall_ms
        )
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Mean avg/last/AUC accuracy per (method, scenario), in first-seen order.
pub fn summary_table(reports: &[RunReport]) -> String {
    let mut keys: Vec<(Method, String)> = Vec::new();
    for r in reports {
        let k = (r.method, r.scenario.clone());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    let mut out = format!(
        "{:<10} {:<16} {:>5} {:>8} {:>8} {:>8} {:>10}\n",
        "method", "scenario", "runs", "avg", "last", "auc", "ratio"
    );
    for (m, s) in keys {
        let rs: Vec<&RunReport> = reports
            .iter()
            .filter(|r| r.method == m && r.scenario == s)
            .collect();
        let n = rs.len() as f64;
        let mean = |f: fn(&RunReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
        out.push_str(&format!(
            "{:<10} {:<16} {:>5} {:>8.2} {:>8.2} {:>8.2} {:>10.6}\n",
            m.name(),
            s,
            rs.len(),
            100.0 * mean(|r| r.avg_acc),
            100.0 * mean(|r| r.last_acc),
            100.0 * mean(|r| r.auc_acc),
            mean(|r| r.param_ratio)
        ));
    }
    out
}
