use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::eval::mean;
use super::run::{read_run, RunRecord};
use crate::error::{Error, Result};

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub scenario: String,
    pub method: String,
    pub runs: usize,
    pub avg_accuracy_mean: f64,
    pub avg_accuracy_std: f64,
    pub avg_forgetting_mean: f64,
    pub avg_forgetting_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub scenario: String,
    pub method: String,
    pub task: usize,
    pub runs: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
}

/// Aggregates over seeds, grouped by scenario kind and method.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub summaries: Vec<MethodSummary>,
    pub curves: Vec<CurvePoint>,
    /// Records that were skipped because their run did not complete.
    pub incomplete: Vec<String>,
}

impl Report {
    pub fn from_records(records: &[RunRecord]) -> Self {
        let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
        let mut incomplete = Vec::new();
        for r in records {
            if r.is_complete() {
                groups
                    .entry((r.scenario.as_str().to_string(), r.method.clone()))
                    .or_default()
                    .push(r);
            } else {
                incomplete.push(r.file_stem());
            }
        }
        let mut summaries = Vec::new();
        let mut curves = Vec::new();
        for ((scenario, method), runs) in groups {
            let acc: Vec<f64> = runs.iter().filter_map(|r| r.avg_accuracy).collect();
            let fgt: Vec<f64> = runs.iter().filter_map(|r| r.avg_forgetting).collect();
            summaries.push(MethodSummary {
                scenario: scenario.clone(),
                method: method.clone(),
                runs: runs.len(),
                avg_accuracy_mean: mean(&acc),
                avg_accuracy_std: std_dev(&acc),
                avg_forgetting_mean: mean(&fgt),
                avg_forgetting_std: std_dev(&fgt),
            });
            let mut per_task: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for r in &runs {
                for t in &r.tasks {
                    per_task.entry(t.task).or_default().push(t.accuracy);
                }
            }
            for (task, values) in per_task {
                curves.push(CurvePoint {
                    scenario: scenario.clone(),
                    method: method.clone(),
                    task,
                    runs: values.len(),
                    accuracy_mean: mean(&values),
                    accuracy_std: std_dev(&values),
                });
            }
        }
        Self {
            summaries,
            curves,
            incomplete,
        }
    }

    /// Loads every run sidecar (`*.json` holding a record) under `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let files = run_files(dir)?;
        if files.is_empty() {
            return Err(Error::Empty(format!("no result files in {}", dir.display())));
        }
        let records = files.iter().map(|p| read_run(p)).collect::<Result<Vec<_>>>()?;
        Ok(Self::from_records(&records))
    }

    /// Writes `summary.csv` and `accuracy_curves.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        let summary = dir.join("summary.csv");
        let mut w = csv::Writer::from_path(&summary)?;
        for s in &self.summaries {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(&summary, e))?;
        let curves = dir.join("accuracy_curves.csv");
        let mut w = csv::Writer::from_path(&curves)?;
        for c in &self.curves {
            w.serialize(c)?;
        }
        w.flush().map_err(|e| Error::io(&curves, e))?;
        Ok((summary, curves))
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:<18} {:>4}  {:>17}  {:>17}",
            "scenario", "method", "runs", "avg acc (%)", "avg forget (%)"
        )?;
        for s in &self.summaries {
            writeln!(
                f,
                "{:<14} {:<18} {:>4}  {:>8.2} ± {:<6.2}  {:>8.2} ± {:<6.2}",
                s.scenario,
                s.method,
                s.runs,
                100.0 * s.avg_accuracy_mean,
                100.0 * s.avg_accuracy_std,
                100.0 * s.avg_forgetting_mean,
                100.0 * s.avg_forgetting_std
            )?;
        }
        for name in &self.incomplete {
            writeln!(f, "skipped incomplete run {name}")?;
        }
        Ok(())
    }
}

/// JSON files in `dir` that hold run records, sorted by name.
pub fn run_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") && read_run(&path).is_ok() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn population_std() {
        assert_eq!(std_dev(&[0.5]), 0.0);
        assert_eq!(std_dev(&[0.25, 0.25]), 0.0);
        assert!((std_dev(&[1.0, 3.0]) - 1.0).abs() < 1e-15);
    }
}
