use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::Strategy;
use crate::csil::{StageLog, StageRecipe};
use crate::doc::SimilarityMatrix;
use crate::error::Result;
use crate::harness::config::ExperimentConfig;

/// Raw validation counts of one device.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceCount {
    pub device: usize,
    pub correct: usize,
    pub total: usize,
}

/// Validation metrics after one stage. Accuracies are percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub strategy: Strategy,
    /// Devices introduced in this stage.
    pub acc_new: f64,
    /// Devices of earlier stages; absent at stage 0.
    pub acc_old: Option<f64>,
    /// All devices seen so far.
    pub acc_avg: f64,
    pub doc_all: Option<f64>,
    pub doc_new: Option<f64>,
    /// Drop of accuracy on previously learned devices: the previous
    /// stage's `acc_avg` minus this stage's `acc_old`.
    pub forget: Option<f64>,
    pub devices: Vec<DeviceCount>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyReport {
    pub strategy: Strategy,
    pub recipe: StageRecipe,
    pub stages: Vec<StageMetrics>,
    pub logs: Vec<StageLog>,
    /// Fingerprint similarities after each stage.
    pub similarity: Vec<SimilarityMatrix>,
}

impl StrategyReport {
    /// Mean forgetting over the incremental stages.
    pub fn forgetting_per_stage(&self) -> Option<f64> {
        let f: Vec<f64> = self.stages.iter().filter_map(|s| s.forget).collect();
        if f.is_empty() {
            None
        } else {
            Some(f.iter().sum::<f64>() / f.len() as f64)
        }
    }

    pub fn last(&self) -> &StageMetrics {
        self.stages.last().expect("report has at least one stage")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub strategies: Vec<StrategyReport>,
    /// Invariant checks that failed during the run.
    pub violations: Vec<String>,
}

impl ExperimentReport {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategyReport> {
        self.strategies.iter().find(|r| r.strategy == s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Header of the per-strategy metrics table.
pub const METRICS_HEADER: [&str; 8] = [
    "stage", "strategy", "acc_new", "acc_old", "acc_avg", "doc_all", "doc_new", "forget",
];

pub fn write_metrics_csv(r: &StrategyReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for s in &r.stages {
        out.write_record([
            s.stage.to_string(),
            s.strategy.to_string(),
            s.acc_new.to_string(),
            opt(s.acc_old),
            s.acc_avg.to_string(),
            opt(s.doc_all),
            opt(s.doc_new),
            opt(s.forget),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn write_training_csv(r: &StrategyReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["stage", "epoch", "total", "ce", "kd", "ewc", "doc", "train_acc", "val_acc"])?;
    for log in &r.logs {
        for e in &log.epochs {
            out.write_record([
                log.stage.to_string(),
                e.epoch.to_string(),
                e.loss.total.to_string(),
                e.loss.ce.to_string(),
                e.loss.kd.to_string(),
                e.loss.ewc.to_string(),
                opt(e.doc),
                e.train_acc.to_string(),
                opt(e.val_acc),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

fn write_summary_csv(report: &ExperimentReport, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["strategy", "final_acc_avg", "final_acc_new", "final_acc_old", "forget_per_stage"])?;
    for r in &report.strategies {
        let l = r.last();
        out.write_record([
            r.strategy.to_string(),
            l.acc_avg.to_string(),
            l.acc_new.to_string(),
            opt(l.acc_old),
            opt(r.forgetting_per_stage()),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn create(path: PathBuf, written: &mut Vec<PathBuf>) -> Result<std::io::BufWriter<std::fs::File>> {
    let f = std::fs::File::create(&path)?;
    written.push(path);
    Ok(std::io::BufWriter::new(f))
}

/// Writes the report into `dir` and returns the files written.
///
/// CSV output: `summary.csv`, `metrics_<strategy>.csv`,
/// `training_<strategy>.csv`, and `similarity_<strategy>_stage<k>.csv`.
/// JSON output: `report.json`.
pub fn emit_report(report: &ExperimentReport, dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Json => {
                let mut w = create(dir.join("report.json"), &mut written)?;
                w.write_all(report.to_json()?.as_bytes())?;
                w.flush()?;
            }
            ReportFormat::Csv => {
                write_summary_csv(report, create(dir.join("summary.csv"), &mut written)?)?;
                for r in &report.strategies {
                    let name = r.strategy.name();
                    write_metrics_csv(r, create(dir.join(format!("metrics_{name}.csv")), &mut written)?)?;
                    write_training_csv(r, create(dir.join(format!("training_{name}.csv")), &mut written)?)?;
                    for (k, s) in r.similarity.iter().enumerate() {
                        let mut w = create(dir.join(format!("similarity_{name}_stage{k}.csv")), &mut written)?;
                        s.write_csv(&mut w)?;
                        w.flush()?;
                    }
                }
            }
        }
    }
    Ok(written)
}
