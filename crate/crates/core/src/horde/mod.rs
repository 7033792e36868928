//! The ensemble method: a budget of frozen feature extractors whose
//! concatenated embeddings feed one unified linear head. Each task first
//! decides whether to add or replace an extractor, then refreshes the class
//! prototypes of the task's classes and trains the head on real features
//! plus pseudo-features of absent classes.

mod growth;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::classes::ClassIndex;
use crate::error::{Error, Result};
use crate::extractor::{
    concat_embeddings, train_feature_extractor, ExtractorCheckpoint, ExtractorTraining, FeatureExtractor,
    SelfSupConfig,
};
use crate::harness::{
    confusion_with_unseen, error_rate, ContinualMethod, EarlyStopReport, TaskContext, TaskOutcome, TrainProtocol,
};
use crate::head::{train_head, ClassHead, FeatureSet, HeadTraining, PseudoSource};
use crate::nn::NetShape;
use crate::prototypes::{update_prototypes, EstimationHeuristic, PrototypeStore};
use crate::rng;

pub use growth::{class_union, decide_growth_c, decide_growth_m, GrowthAction, GrowthDecision, GrowthRule};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HordeConfig {
    pub growth: GrowthRule,
    /// Maximum number of extractors.
    pub budget: usize,
    /// Error-rate threshold of the `ErrorRate` rule.
    pub tau_e: f64,
    pub heuristic: EstimationHeuristic,
    pub extractor_protocol: TrainProtocol,
    pub head_protocol: TrainProtocol,
    pub selfsup: SelfSupConfig,
    /// Shape of the first extractor ever trained.
    pub full_net: NetShape,
    /// Shape of every later extractor.
    pub slim_net: NetShape,
    /// Freeze head rows of absent classes during head training.
    pub mask_ce: bool,
}

impl Default for HordeConfig {
    fn default() -> Self {
        Self {
            growth: GrowthRule::ClassUnion,
            budget: 10,
            tau_e: 0.4,
            heuristic: EstimationHeuristic::default(),
            extractor_protocol: TrainProtocol::default(),
            head_protocol: TrainProtocol::default(),
            selfsup: SelfSupConfig::default(),
            full_net: NetShape::full(),
            slim_net: NetShape::slim(),
            mask_ce: false,
        }
    }
}

impl HordeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.budget == 0 {
            return Err(Error::InvalidArgument("extractor budget must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_e) {
            return Err(Error::InvalidArgument("tau_e must lie in [0, 1]".into()));
        }
        self.heuristic.validate()?;
        self.extractor_protocol.validate()?;
        self.head_protocol.validate()?;
        self.selfsup.validate()
    }
}

/// One entry of the growth log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub task: usize,
    pub decision: GrowthDecision,
    /// Head error rate on the task before any training (`ErrorRate` rule).
    pub e_before: Option<f64>,
    /// Head error rate on the task after head training.
    pub e_after: f64,
}

/// Extractors, unified head and prototypes, kept mutually consistent.
#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    extractors: Vec<FeatureExtractor>,
    budget: usize,
    head: ClassHead,
    prototypes: PrototypeStore,
    decisions: Vec<DecisionRecord>,
    extractors_trained: usize,
}

impl Ensemble {
    pub fn new(budget: usize) -> Self {
        Self {
            extractors: Vec::new(),
            budget,
            head: ClassHead::new(0),
            prototypes: PrototypeStore::new(),
            decisions: Vec::new(),
            extractors_trained: 0,
        }
    }

    pub fn extractors(&self) -> &[FeatureExtractor] {
        &self.extractors
    }

    pub fn len(&self) -> usize {
        self.extractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.extractors.is_empty()
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn head(&self) -> &ClassHead {
        &self.head
    }

    pub fn prototypes(&self) -> &PrototypeStore {
        &self.prototypes
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn total_dim(&self) -> usize {
        self.extractors.iter().map(FeatureExtractor::embedding_dim).sum()
    }

    pub fn class_union(&self) -> BTreeSet<usize> {
        class_union(&self.extractors)
    }

    pub fn features(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        concat_embeddings(&self.extractors, inputs)
    }

    pub fn logits(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let feats = self.features(inputs)?;
        self.head.logits(&feats.view())
    }

    /// Appends an extractor; the head gains zero input columns for it.
    pub fn add_extractor(&mut self, fe: FeatureExtractor) -> Result<()> {
        if self.extractors.len() >= self.budget {
            return Err(Error::InvalidArgument(format!("ensemble already holds {} extractors", self.budget)));
        }
        let dim = fe.embedding_dim();
        let end = self.total_dim();
        self.head.splice_inputs(end, end, dim);
        self.prototypes.add_slot(dim);
        self.extractors.push(fe);
        self.extractors_trained += 1;
        Ok(())
    }

    /// Swaps the extractor in `slot`. Its head columns are rebuilt as zeros
    /// and every class forgets its prototype segment for that slot.
    pub fn replace_extractor(&mut self, slot: usize, fe: FeatureExtractor) -> Result<()> {
        if slot >= self.extractors.len() {
            return Err(Error::InvalidArgument(format!("no extractor in slot {slot}")));
        }
        let range = self.prototypes.slot_range(slot);
        let dim = fe.embedding_dim();
        self.head.splice_inputs(range.start, range.end, dim);
        self.prototypes.reset_slot(slot, dim);
        self.extractors[slot] = fe;
        self.extractors_trained += 1;
        Ok(())
    }

    /// Error rate of the current head on labelled features; labels the head
    /// cannot predict count as errors.
    fn error_on(&self, set: &FeatureSet) -> Result<f64> {
        let logits = self.head.logits(&set.features.view())?;
        error_rate(&confusion_with_unseen(&logits.view(), &set.labels, self.head.seen())?)
    }

    pub fn to_checkpoint(&self) -> EnsembleCheckpoint {
        EnsembleCheckpoint {
            version: CHECKPOINT_VERSION,
            budget: self.budget,
            extractors: self.extractors.iter().map(FeatureExtractor::to_checkpoint).collect(),
            head: self.head.clone(),
            prototypes: self.prototypes.clone(),
            decisions: self.decisions.clone(),
            extractors_trained: self.extractors_trained,
        }
    }

    pub fn from_checkpoint(ckpt: &EnsembleCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        let extractors = ckpt
            .extractors
            .iter()
            .map(FeatureExtractor::from_checkpoint)
            .collect::<Result<Vec<_>>>()?;
        let ens = Self {
            extractors,
            budget: ckpt.budget,
            head: ckpt.head.clone(),
            prototypes: ckpt.prototypes.clone(),
            decisions: ckpt.decisions.clone(),
            extractors_trained: ckpt.extractors_trained,
        };
        let dims: Vec<usize> = ens.extractors.iter().map(FeatureExtractor::embedding_dim).collect();
        if ens.len() > ens.budget || ens.prototypes.slot_dims() != dims || ens.head.input_dim() != ens.total_dim() {
            return Err(Error::Checkpoint("inconsistent ensemble layout".into()));
        }
        Ok(ens)
    }
}

/// Serialized ensemble: extractors, head, prototypes and the growth log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleCheckpoint {
    pub version: u32,
    pub budget: usize,
    pub extractors: Vec<ExtractorCheckpoint>,
    pub head: ClassHead,
    pub prototypes: PrototypeStore,
    pub decisions: Vec<DecisionRecord>,
    pub extractors_trained: usize,
}

impl EnsembleCheckpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Diagnostics of one [`run_horde_task`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct HordeTaskReport {
    pub record: DecisionRecord,
    pub extractor: Option<EarlyStopReport>,
    pub head: EarlyStopReport,
}

fn feature_set(ensemble: &Ensemble, ctx: &TaskContext<'_>, idx: &[usize]) -> Result<FeatureSet> {
    Ok(FeatureSet {
        features: ensemble.features(&ctx.dataset.rows(idx).view())?,
        labels: idx.iter().map(|&i| ctx.dataset.labels[i]).collect(),
    })
}

/// Processes one task: growth decision and optional extractor training,
/// then prototype refresh and unified-head training.
pub fn run_horde_task(
    ensemble: &mut Ensemble,
    ctx: &TaskContext<'_>,
    config: &HordeConfig,
    seed: u64,
) -> Result<HordeTaskReport> {
    let task = ctx.task;
    let classes: BTreeSet<usize> = task.classes.iter().copied().collect();
    let train_idx = task.train_indices();
    let val_idx = task.val_indices();
    if train_idx.is_empty() {
        return Err(Error::Empty(format!("training data of task {}", task.index)));
    }
    let task_seed = rng::derive_seed(seed, &format!("horde-task-{}", task.index));

    // Step 1: growth.
    let e_before = match config.growth {
        GrowthRule::ErrorRate if !ensemble.is_empty() => {
            Some(ensemble.error_on(&feature_set(ensemble, ctx, &train_idx)?)?)
        }
        _ => None,
    };
    let decision = match config.growth {
        GrowthRule::ClassUnion => decide_growth_m(&ensemble.extractors, ensemble.budget, &classes),
        GrowthRule::ErrorRate => decide_growth_c(&ensemble.extractors, ensemble.budget, e_before, config.tau_e),
    };
    let mut extractor_report = None;
    let mut new_slot = None;
    if decision.trains_extractor() {
        let shape = if ensemble.extractors_trained == 0 {
            &config.full_net
        } else {
            &config.slim_net
        };
        let spec = shape.spec(ctx.dataset.input_dim());
        let (fe, report) = train_feature_extractor(
            ctx.dataset,
            task,
            &ExtractorTraining {
                spec: &spec,
                selfsup: &config.selfsup,
                protocol: &config.extractor_protocol,
                seed: rng::derive_seed(task_seed, "extractor"),
                warm_start: None,
            },
        )?;
        extractor_report = Some(report);
        match decision.action {
            GrowthAction::Add => {
                ensemble.add_extractor(fe)?;
                new_slot = Some(ensemble.len() - 1);
            }
            GrowthAction::Replace(slot) => {
                ensemble.replace_extractor(slot, fe)?;
                new_slot = Some(slot);
            }
            GrowthAction::Keep => unreachable!(),
        }
    }

    // Step 2: prototypes and unified head.
    ensemble.head.observe(task.classes.iter().copied());
    let train = feature_set(ensemble, ctx, &train_idx)?;
    let val = if val_idx.is_empty() {
        None
    } else {
        Some(feature_set(ensemble, ctx, &val_idx)?)
    };
    for slot in 0..ensemble.len() {
        let range = ensemble.prototypes.slot_range(slot);
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in train.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        let segments: BTreeMap<usize, Array2<f64>> = by_class
            .into_iter()
            .map(|(c, rows)| {
                let seg = train.features.slice(s![.., range.clone()]).select(Axis(0), &rows);
                (c, seg)
            })
            .collect();
        update_prototypes(&mut ensemble.prototypes, slot, &segments)?;
    }
    let absent: Vec<usize> = ensemble
        .head
        .seen()
        .classes()
        .iter()
        .copied()
        .filter(|c| !classes.contains(c))
        .collect();
    if config.mask_ce {
        ensemble.head.mask_absent(&task.classes);
    }
    let head_report = {
        let Ensemble { head, prototypes, .. } = ensemble;
        train_head(
            head,
            &HeadTraining {
                train: &train,
                val: val.as_ref(),
                pseudo: PseudoSource::Project {
                    store: prototypes,
                    heuristic: &config.heuristic,
                },
                absent: &absent,
                protocol: &config.head_protocol,
                seed: rng::derive_seed(task_seed, "head"),
            },
        )
    };
    ensemble.head.clear_mask();
    let head_report = head_report?;
    let e_after = ensemble.error_on(&train)?;
    if config.growth == GrowthRule::ErrorRate {
        if let (Some(slot), Some(e)) = (new_slot, e_before) {
            ensemble.extractors[slot].improvement_score = Some(e - e_after);
        }
    }
    let record = DecisionRecord {
        task: task.index,
        decision,
        e_before,
        e_after,
    };
    ensemble.decisions.push(record.clone());
    Ok(HordeTaskReport {
        record,
        extractor: extractor_report,
        head: head_report,
    })
}

/// [`ContinualMethod`] wrapper around an [`Ensemble`].
#[derive(Clone, Debug)]
pub struct Horde {
    config: HordeConfig,
    seed: u64,
    ensemble: Ensemble,
}

impl Horde {
    pub fn new(config: HordeConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ensemble = Ensemble::new(config.budget);
        Ok(Self { config, seed, ensemble })
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn config(&self) -> &HordeConfig {
        &self.config
    }
}

impl ContinualMethod for Horde {
    fn name(&self) -> String {
        let base = match self.config.growth {
            GrowthRule::ClassUnion => "horde_m",
            GrowthRule::ErrorRate => "horde_c",
        };
        if self.config.mask_ce {
            format!("{base}_masked")
        } else {
            base.to_string()
        }
    }

    fn learn_task(&mut self, ctx: &TaskContext<'_>) -> Result<TaskOutcome> {
        let report = run_horde_task(&mut self.ensemble, ctx, &self.config, self.seed)?;
        let mut detail = report.record.decision.reason.clone();
        if let Some(e) = report.record.e_before {
            detail.push_str(&format!("; e_after={:.4}, e_before={e:.4}", report.record.e_after));
        }
        Ok(TaskOutcome {
            decision: Some(report.record.decision.label()),
            detail: Some(detail),
            ensemble_size: Some(self.ensemble.len()),
            class_union: Some(self.ensemble.class_union().len()),
        })
    }

    fn seen(&self) -> &ClassIndex {
        self.ensemble.head.seen()
    }

    fn logits(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.ensemble.logits(inputs)
    }
}
