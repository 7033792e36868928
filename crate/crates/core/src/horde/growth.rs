use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::extractor::FeatureExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action", content = "slot")]
pub enum GrowthAction {
    Keep,
    Add,
    /// Replace the extractor in this slot.
    Replace(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthDecision {
    pub action: GrowthAction,
    pub reason: String,
}

impl GrowthDecision {
    fn new(action: GrowthAction, reason: String) -> Self {
        Self { action, reason }
    }

    /// Short form used in result files, e.g. `replace:2`.
    pub fn label(&self) -> String {
        match self.action {
            GrowthAction::Keep => "keep".into(),
            GrowthAction::Add => "add".into(),
            GrowthAction::Replace(slot) => format!("replace:{slot}"),
        }
    }

    pub fn trains_extractor(&self) -> bool {
        self.action != GrowthAction::Keep
    }
}

/// Growth rule of the ensemble.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowthRule {
    /// Maximize the union of classes the extractors were trained on.
    ClassUnion,
    /// Grow when the head's error rate on the incoming task exceeds a threshold.
    ErrorRate,
}

pub fn class_union(extractors: &[FeatureExtractor]) -> BTreeSet<usize> {
    extractors
        .iter()
        .flat_map(|fe| fe.trained_classes.iter().copied())
        .collect()
}

fn unique_count(extractors: &[FeatureExtractor], slot: usize) -> usize {
    extractors[slot]
        .trained_classes
        .iter()
        .filter(|c| {
            extractors
                .iter()
                .enumerate()
                .all(|(j, fe)| j == slot || !fe.trained_classes.contains(c))
        })
        .count()
}

/// Adds or replaces an extractor only if one trained on `task_classes`
/// strictly enlarges the class union. With a full ensemble the replacement
/// maximizing the resulting union is chosen; ties go to the extractor with
/// the fewest uniquely covered classes, then the oldest.
pub fn decide_growth_m(extractors: &[FeatureExtractor], budget: usize, task_classes: &BTreeSet<usize>) -> GrowthDecision {
    let union = class_union(extractors);
    let n = extractors.len();
    if n < budget {
        let grown = union.union(task_classes).count();
        if grown > union.len() {
            return GrowthDecision::new(GrowthAction::Add, format!("union {} -> {grown}", union.len()));
        }
        return GrowthDecision::new(GrowthAction::Keep, format!("union {} unchanged", union.len()));
    }
    let mut best: Option<(usize, usize, usize, usize)> = None; // (slot, union, unique, birth)
    for slot in 0..n {
        let others: BTreeSet<usize> = extractors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != slot)
            .flat_map(|(_, fe)| fe.trained_classes.iter().copied())
            .chain(task_classes.iter().copied())
            .collect();
        let cand = (slot, others.len(), unique_count(extractors, slot), extractors[slot].birth_task);
        let better = match best {
            None => true,
            Some((_, u, q, b)) => cand.1 > u || (cand.1 == u && (cand.2 < q || (cand.2 == q && cand.3 < b))),
        };
        if better {
            best = Some(cand);
        }
    }
    match best {
        Some((slot, grown, unique, _)) if grown > union.len() => GrowthDecision::new(
            GrowthAction::Replace(slot),
            format!("union {} -> {grown} replacing slot {slot} ({unique} unique)", union.len()),
        ),
        _ => GrowthDecision::new(
            GrowthAction::Keep,
            format!("union {} cannot grow at budget {budget}", union.len()),
        ),
    }
}

/// Grows when `error` (the head's error rate on the incoming task before any
/// training) exceeds `tau_e`. A full ensemble replaces the extractor with the
/// lowest improvement score, ties going to the oldest. An empty ensemble
/// always adds.
pub fn decide_growth_c(extractors: &[FeatureExtractor], budget: usize, error: Option<f64>, tau_e: f64) -> GrowthDecision {
    let Some(e) = error.filter(|_| !extractors.is_empty()) else {
        return GrowthDecision::new(GrowthAction::Add, "empty ensemble".into());
    };
    if e <= tau_e {
        return GrowthDecision::new(GrowthAction::Keep, format!("e={e:.4} <= tau={tau_e}"));
    }
    if extractors.len() < budget {
        return GrowthDecision::new(GrowthAction::Add, format!("e={e:.4} > tau={tau_e}"));
    }
    let slot = (0..extractors.len())
        .min_by(|&a, &b| {
            let (fa, fb) = (&extractors[a], &extractors[b]);
            fa.ranking_score()
                .total_cmp(&fb.ranking_score())
                .then(fa.birth_task.cmp(&fb.birth_task))
        })
        .expect("nonempty ensemble");
    GrowthDecision::new(
        GrowthAction::Replace(slot),
        format!(
            "e={e:.4} > tau={tau_e}, lowest score {} in slot {slot}",
            extractors[slot].ranking_score()
        ),
    )
}
