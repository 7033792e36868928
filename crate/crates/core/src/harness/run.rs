use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{MethodBase, MethodName, RunConfig};
use super::eval::{compute_metrics, error_rate, evaluate_logits, ConfusionMatrix};
use super::method::{ContinualMethod, TaskContext};
use crate::baselines::Baseline;
use crate::data::{gen_synthetic_dataset, split_holdout, DataSplit, LabeledDataset, Scenario, ScenarioKind};
use crate::error::{Error, Result};
use crate::horde::{Horde, HordeConfig};

/// Evaluation after one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes: Vec<usize>,
    /// Number of classes seen so far.
    pub seen: usize,
    pub accuracy: f64,
    pub error_rate: f64,
    pub decision: Option<String>,
    pub detail: Option<String>,
    pub ensemble_size: Option<usize>,
    pub class_union: Option<usize>,
    pub per_class: BTreeMap<usize, f64>,
    pub confusion: ConfusionMatrix,
}

/// Result of running one method with one seed over one stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub scenario: ScenarioKind,
    pub scenario_seed: u64,
    pub seed: u64,
    pub config_hash: String,
    pub tasks: Vec<TaskRecord>,
    pub avg_accuracy: Option<f64>,
    pub avg_forgetting: Option<f64>,
    /// Set when the run stopped early; `tasks` then holds the completed ones.
    pub error: Option<String>,
}

impl RunRecord {
    pub fn new(method: String, scenario: &Scenario, seed: u64, config_hash: String) -> Self {
        Self {
            method,
            scenario: scenario.kind,
            scenario_seed: scenario.seed,
            seed,
            config_hash,
            tasks: Vec::new(),
            avg_accuracy: None,
            avg_forgetting: None,
            error: None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.error.is_none()
    }

    fn finish(&mut self) {
        let acc: Vec<f64> = self.tasks.iter().map(|t| t.accuracy).collect();
        let per_class: Vec<BTreeMap<usize, f64>> = self.tasks.iter().map(|t| t.per_class.clone()).collect();
        if let Ok((a, f)) = compute_metrics(&acc, &per_class) {
            self.avg_accuracy = Some(a);
            self.avg_forgetting = Some(f);
        }
    }

    /// `method_seed<seed>`.
    pub fn file_stem(&self) -> String {
        format!("{}_seed{}", self.method, self.seed)
    }
}

fn evaluate_task(
    method: &dyn ContinualMethod,
    dataset: &LabeledDataset,
    test: &[usize],
    seen_so_far: &BTreeSet<usize>,
) -> Result<(f64, ConfusionMatrix)> {
    let seen = method.seen();
    let predicted: BTreeSet<usize> = seen.classes().iter().copied().collect();
    if &predicted != seen_so_far {
        return Err(Error::InvalidArgument(format!(
            "{} predicts {} classes but {} have been seen",
            method.name(),
            predicted.len(),
            seen_so_far.len()
        )));
    }
    let idx: Vec<usize> = test
        .iter()
        .copied()
        .filter(|&i| seen_so_far.contains(&dataset.labels[i]))
        .collect();
    if idx.is_empty() {
        return Err(Error::Empty("test samples of the seen classes".into()));
    }
    let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
    let logits = method.logits(&dataset.rows(&idx).view())?;
    let ev = evaluate_logits(&logits.view(), &labels, seen)?;
    Ok((ev.accuracy, ev.confusion))
}

/// Trains `method` task by task, evaluating on the held-out samples of the
/// classes seen so far after each task. Failures are recorded in the
/// returned record rather than discarding completed tasks.
pub fn run_stream(
    method: &mut dyn ContinualMethod,
    dataset: &LabeledDataset,
    scenario: &Scenario,
    test: &[usize],
    mut record: RunRecord,
) -> RunRecord {
    let mut seen = BTreeSet::new();
    for task in &scenario.tasks {
        let mut step = || -> Result<TaskRecord> {
            let outcome = method.learn_task(&TaskContext { dataset, task })?;
            seen.extend(task.classes.iter().copied());
            let (accuracy, confusion) = evaluate_task(&*method, dataset, test, &seen)?;
            Ok(TaskRecord {
                task: task.index,
                classes: task.classes.clone(),
                seen: seen.len(),
                accuracy,
                error_rate: error_rate(&confusion)?,
                decision: outcome.decision,
                detail: outcome.detail,
                ensemble_size: outcome.ensemble_size,
                class_union: outcome.class_union,
                per_class: confusion.per_class_accuracy(),
                confusion,
            })
        };
        match step() {
            Ok(rec) => {
                log::info!(
                    "{} seed {}: task {} acc {:.4}",
                    record.method,
                    record.seed,
                    rec.task,
                    rec.accuracy
                );
                record.tasks.push(rec);
            }
            Err(e) => {
                record.error = Some(format!("task {}: {e}", task.index));
                break;
            }
        }
    }
    record.finish();
    record
}

/// Instantiates a registered method.
pub fn build_method(
    name: MethodName,
    config: &RunConfig,
    input_dim: usize,
    seed: u64,
) -> Result<Box<dyn ContinualMethod>> {
    Ok(match name.base {
        MethodBase::Baseline(kind) => Box::new(Baseline::new(
            kind,
            name.masked,
            config.baselines.clone(),
            input_dim,
            seed,
        )?),
        MethodBase::Horde(rule) => Box::new(Horde::new(
            HordeConfig {
                growth: rule,
                mask_ce: name.masked,
                ..config.horde.clone()
            },
            seed,
        )?),
    })
}

/// Writes `<stem>.csv` (header comments, one row per task, aggregate
/// comments) and `<stem>.json` (configuration plus full record).
pub fn write_run(dir: &Path, record: &RunRecord, config: &RunConfig) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join(format!("{}.csv", record.file_stem()));
    let json_path = dir.join(format!("{}.json", record.file_stem()));

    let mut buf = Vec::new();
    let status = record.error.as_deref().unwrap_or("complete");
    for (k, v) in [
        ("method", record.method.clone()),
        ("scenario", record.scenario.as_str().to_string()),
        ("scenario_seed", record.scenario_seed.to_string()),
        ("seed", record.seed.to_string()),
        ("config_hash", record.config_hash.clone()),
        ("status", status.replace('\n', " ")),
    ] {
        writeln!(buf, "# {k}: {v}").expect("write to memory");
    }
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(["task", "classes", "seen", "accuracy", "error_rate", "decision", "ensemble_size", "class_union"])
            ?;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &record.tasks {
            let classes = t.classes.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
            w.write_record([
                t.task.to_string(),
                classes,
                t.seen.to_string(),
                t.accuracy.to_string(),
                t.error_rate.to_string(),
                t.decision.clone().unwrap_or_default(),
                opt(t.ensemble_size),
                opt(t.class_union),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
    }
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "nan".into());
    writeln!(buf, "# avg_accuracy: {}", fmt(record.avg_accuracy)).expect("write to memory");
    writeln!(buf, "# avg_forgetting: {}", fmt(record.avg_forgetting)).expect("write to memory");
    fs::write(&csv_path, buf).map_err(|e| Error::io(&csv_path, e))?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        config: &'a RunConfig,
        record: &'a RunRecord,
    }
    let mut json = serde_json::to_string_pretty(&Sidecar { config, record })?;
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    Ok((csv_path, json_path))
}

/// Reads the record back from a JSON sidecar.
pub fn read_run(path: &Path) -> Result<RunRecord> {
    #[derive(Deserialize)]
    struct Sidecar {
        record: RunRecord,
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<Sidecar>(&text)?.record)
}

/// Dataset, held-out split and per-seed streams of a configuration.
pub struct Workload {
    pub dataset: LabeledDataset,
    pub split: DataSplit,
    pub scenarios: BTreeMap<u64, Scenario>,
}

impl Workload {
    /// Builds the data. A manifest fixes the stream for every seed;
    /// otherwise each seed generates its own stream.
    pub fn prepare(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let manifest = config.manifest()?;
        let (spec, holdout) = match &manifest {
            Some(m) => (
                m.dataset.clone().unwrap_or_else(|| config.dataset.clone()),
                m.holdout_frac.unwrap_or(config.holdout_frac),
            ),
            None => (config.dataset.clone(), config.holdout_frac),
        };
        let dataset = gen_synthetic_dataset(&spec)?;
        let split = split_holdout(&dataset, holdout, spec.seed)?;
        let mut scenarios = BTreeMap::new();
        for &seed in &config.seeds {
            let scenario = match &manifest {
                Some(m) => m.scenario.clone(),
                None => config.scenario.generate(&split.train, seed)?,
            };
            scenarios.insert(seed, scenario);
        }
        if manifest.is_some() {
            let test: BTreeSet<usize> = split.test.iter().copied().collect();
            let scenario = scenarios.values().next().expect("at least one seed");
            for task in &scenario.tasks {
                let idx = task.train_indices().into_iter().chain(task.val_indices());
                if let Some(i) = idx.into_iter().find(|i| test.contains(i) || *i >= dataset.len()) {
                    return Err(Error::Scenario(format!(
                        "manifest task {} uses sample {i}, which is not in the training split",
                        task.index
                    )));
                }
            }
        }
        Ok(Self {
            dataset,
            split,
            scenarios,
        })
    }
}

/// Outcome of one (method, seed) job.
#[derive(Clone, Debug)]
pub struct JobResult {
    pub method: String,
    pub seed: u64,
    pub record: Option<RunRecord>,
    pub files: Option<(PathBuf, PathBuf)>,
    pub error: Option<String>,
}

/// Runs every (method, seed) pair on a bounded worker pool, writing one
/// result pair per job into `out`. Failed runs still write what they have.
pub fn execute(config: &RunConfig, workload: &Workload, out: Option<&Path>) -> Result<Vec<JobResult>> {
    let names = config.method_names()?;
    let hash = config.hash()?;
    let jobs: Vec<(MethodName, u64)> = config
        .seeds
        .iter()
        .flat_map(|&s| names.iter().map(move |&n| (n, s)))
        .collect();
    let threads = config.threads.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let run_job = |&(name, seed): &(MethodName, u64)| -> JobResult {
        let scenario = &workload.scenarios[&seed];
        let mut result = JobResult {
            method: name.to_string(),
            seed,
            record: None,
            files: None,
            error: None,
        };
        let mut method = match build_method(name, config, workload.dataset.input_dim(), seed) {
            Ok(m) => m,
            Err(e) => {
                result.error = Some(e.to_string());
                return result;
            }
        };
        let record = RunRecord::new(method.name(), scenario, seed, hash.clone());
        let record = run_stream(method.as_mut(), &workload.dataset, scenario, &workload.split.test, record);
        result.error = record.error.clone();
        if let Some(dir) = out {
            match write_run(dir, &record, config) {
                Ok(files) => result.files = Some(files),
                Err(e) => result.error = Some(e.to_string()),
            }
        }
        result.record = Some(record);
        result
    };
    Ok(pool.install(|| jobs.par_iter().map(run_job).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;
    use crate::testutil::quick_protocol;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig {
            methods: vec!["ft".into(), "horde_m".into()],
            seeds: vec![1, 2],
            dataset: DatasetSpec::new(6, 20, [4, 4, 1], 0),
            ..Default::default()
        };
        cfg.scenario.initial_classes = 2;
        cfg.scenario.tasks = 2;
        cfg.baselines.net = crate::nn::NetShape {
            hidden_dims: vec![8],
            embedding_dim: 4,
        };
        cfg.baselines.protocol = quick_protocol(2);
        cfg.horde = crate::testutil::tiny_horde(3);
        cfg
    }

    #[test]
    fn jobs_write_results_with_shared_task_axis() {
        let cfg = tiny_config();
        let work = Workload::prepare(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let results = execute(&cfg, &work, Some(dir.path())).unwrap();
        assert_eq!(results.len(), 4);
        for r in &results {
            assert!(r.error.is_none(), "{:?}", r.error);
            let rec = read_run(&r.files.as_ref().unwrap().1).unwrap();
            assert_eq!(rec.tasks.len(), 3);
            assert!(rec.tasks.windows(2).all(|w| w[0].seen <= w[1].seen));
            assert!(rec.tasks.iter().all(|t| (0.0..=1.0).contains(&t.accuracy)));
            assert_eq!(&rec, r.record.as_ref().unwrap());
        }
        let csv = fs::read_to_string(dir.path().join("horde_m_seed2.csv")).unwrap();
        assert!(csv.starts_with("# method: horde_m\n"));
        assert!(csv.contains("# avg_accuracy: "));
    }

    #[test]
    fn failed_run_keeps_completed_tasks() {
        struct Flaky(crate::classes::ClassIndex, usize);
        impl ContinualMethod for Flaky {
            fn name(&self) -> String {
                "flaky".into()
            }
            fn learn_task(&mut self, ctx: &TaskContext<'_>) -> Result<crate::harness::TaskOutcome> {
                if self.1 == 1 {
                    return Err(Error::InvalidArgument("boom".into()));
                }
                self.1 += 1;
                self.0.extend(ctx.task.classes.iter().copied());
                Ok(Default::default())
            }
            fn seen(&self) -> &crate::classes::ClassIndex {
                &self.0
            }
            fn logits(&self, x: &ndarray::ArrayView2<f64>) -> Result<ndarray::Array2<f64>> {
                Ok(ndarray::Array2::zeros((x.nrows(), self.0.len())))
            }
        }
        let cfg = tiny_config();
        let work = Workload::prepare(&cfg).unwrap();
        let scenario = &work.scenarios[&1];
        let rec = run_stream(
            &mut Flaky(Default::default(), 0),
            &work.dataset,
            scenario,
            &work.split.test,
            RunRecord::new("flaky".into(), scenario, 1, String::new()),
        );
        assert_eq!(rec.tasks.len(), 1);
        assert!(rec.error.as_deref().unwrap().contains("boom"));
        assert_eq!(rec.avg_accuracy, Some(0.5));
        let dir = tempfile::tempdir().unwrap();
        let (csv, _) = write_run(dir.path(), &rec, &cfg).unwrap();
        assert!(fs::read_to_string(csv).unwrap().contains("# status: task 1: invalid argument: boom"));
    }
}
