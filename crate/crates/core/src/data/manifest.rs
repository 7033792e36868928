//! Scenario manifest: a JSON document listing every task's classes and the
//! dataset rows assigned to its train and validation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassPools, DatasetSpec, Scenario, ScenarioKind, StreamTask};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

/// Fixed-point decimal with 17 significant digits (at least 12 required);
/// parses back to the identical `f64`.
pub fn format_probability(p: f64) -> String {
    let lead = if p > 0.0 { (-p.log10()).floor().max(0.0) as usize } else { 0 };
    format!("{:.*}", 17 + lead, p)
}

pub fn parse_probability(s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Scenario(format!("bad probability `{s}`: {e}")))
}

#[derive(Serialize, Deserialize)]
struct ManifestRepr {
    version: u32,
    kind: ScenarioKind,
    seed: u64,
    class_universe: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    repetition_probs: Option<BTreeMap<usize, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_budget: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    holdout_frac: Option<f64>,
    tasks: Vec<StreamTask>,
}

/// A scenario plus, optionally, the dataset it indexes into.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub scenario: Scenario,
    pub dataset: Option<DatasetSpec>,
    pub holdout_frac: Option<f64>,
}

impl Manifest {
    pub fn new(scenario: Scenario) -> Self {
        Self {
            scenario,
            dataset: None,
            holdout_frac: None,
        }
    }

    pub fn with_dataset(mut self, dataset: DatasetSpec, holdout_frac: f64) -> Self {
        self.dataset = Some(dataset);
        self.holdout_frac = Some(holdout_frac);
        self
    }

    pub fn to_json(&self) -> Result<String> {
        let s = &self.scenario;
        let repr = ManifestRepr {
            version: MANIFEST_VERSION,
            kind: s.kind,
            seed: s.seed,
            class_universe: s.class_universe.clone(),
            repetition_probs: s
                .repetition_probs
                .as_ref()
                .map(|m| m.iter().map(|(&c, &p)| (c, format_probability(p))).collect()),
            task_budget: s.task_budget,
            dataset: self.dataset.clone(),
            holdout_frac: self.holdout_frac,
            tasks: s.tasks.clone(),
        };
        let mut out = serde_json::to_string_pretty(&repr)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let repr: ManifestRepr = serde_json::from_str(text)?;
        if repr.version != MANIFEST_VERSION {
            return Err(Error::Scenario(format!(
                "unsupported manifest version {}",
                repr.version
            )));
        }
        let repetition_probs = match repr.repetition_probs {
            Some(m) => Some(
                m.into_iter()
                    .map(|(c, p)| parse_probability(&p).map(|p| (c, p)))
                    .collect::<Result<BTreeMap<_, _>>>()?,
            ),
            None => None,
        };
        Ok(Self {
            scenario: Scenario {
                kind: repr.kind,
                seed: repr.seed,
                class_universe: repr.class_universe,
                repetition_probs,
                task_budget: repr.task_budget,
                tasks: repr.tasks,
            },
            dataset: repr.dataset,
            holdout_frac: repr.holdout_frac,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScenarioSummary {
    pub tasks: usize,
    pub mean_classes_per_task: f64,
    pub max_task_train: usize,
    /// Fraction of pool samples that appear in at least one task.
    pub sample_coverage: f64,
}

impl ScenarioSummary {
    pub fn new(scenario: &Scenario, pools: Option<&ClassPools>) -> Self {
        let streamed: BTreeSet<usize> = scenario
            .tasks
            .iter()
            .flat_map(|t| t.train.values().chain(t.val.values()).flatten().copied())
            .collect();
        let sample_coverage = match pools {
            Some(p) => {
                let total: usize = p.values().map(Vec::len).sum();
                if total == 0 {
                    0.0
                } else {
                    streamed.len() as f64 / total as f64
                }
            }
            None => f64::NAN,
        };
        Self {
            tasks: scenario.num_tasks(),
            mean_classes_per_task: scenario.mean_classes_per_task(),
            max_task_train: scenario.tasks.iter().skip(1).map(StreamTask::train_len).max().unwrap_or(0),
            sample_coverage,
        }
    }
}

impl fmt::Display for ScenarioSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tasks: {}\nmean classes/task: {:.3}\nmax incremental train samples: {}\nsample coverage: {:.3}",
            self.tasks, self.mean_classes_per_task, self.max_task_train, self.sample_coverage
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_efcir, sample_beta_probs, EfcirParams};

    #[test]
    fn probability_strings_keep_twelve_digits_and_round_trip() {
        for p in [0.15, 0.148_936_170_212_765_96, 1.0, 3.3e-4, 0.999_999_999_9] {
            let s = format_probability(p);
            let digits = s.trim_start_matches("0.").trim_start_matches('0').replace('.', "");
            assert!(digits.len() >= 12, "{s}");
            assert_eq!(parse_probability(&s).unwrap().to_bits(), p.to_bits(), "{s}");
        }
    }

    #[test]
    fn manifest_round_trip() {
        let pools: ClassPools = (0..6).map(|c| (c, (c * 30..c * 30 + 30).collect())).collect();
        let probs = sample_beta_probs(Default::default(), 6, 2).unwrap();
        let probs = probs.into_iter().enumerate().collect();
        let s = gen_efcir(&pools, EfcirParams::new(3, 8, 30), &probs, ScenarioKind::EfcirBeta, 2).unwrap();
        let m = Manifest::new(s).with_dataset(DatasetSpec::toy(1), 0.2);
        let back = Manifest::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
    }
}
