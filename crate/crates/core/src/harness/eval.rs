use std::collections::BTreeMap;

use ndarray::{ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::classes::ClassIndex;
use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes, both in `classes` order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<usize>) -> Self {
        let k = classes.len();
        Self {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        Self {
            classes: (0..counts.len()).collect(),
            counts,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.counts.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Per-class recall for classes with at least one sample.
    pub fn per_class_accuracy(&self) -> BTreeMap<usize, f64> {
        self.classes
            .iter()
            .zip(&self.counts)
            .enumerate()
            .filter_map(|(i, (&c, row))| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| (c, row[i] as f64 / n as f64))
            })
            .collect()
    }
}

/// Task error rate: the mean over classes of the fraction of that class's
/// samples predicted as some other class. Rows without samples are skipped.
pub fn error_rate(cm: &ConfusionMatrix) -> Result<f64> {
    let k = cm.counts.len();
    if cm.counts.iter().any(|r| r.len() != k) {
        return Err(Error::InvalidArgument("confusion matrix must be square".into()));
    }
    let fractions: Vec<(u64, u64)> = cm
        .counts
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| (n - row[c], n))
        })
        .collect();
    if fractions.is_empty() {
        return Err(Error::Empty("every confusion-matrix row is empty".into()));
    }
    let rows = fractions.len() as f64;
    // Exact rational sum with a single final rounding whenever it fits.
    match exact_fraction_sum(&fractions) {
        Some((num, den)) => Ok(num as f64 / (den as f64 * rows)),
        None => Ok(fractions.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / rows),
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Sum of `a / b` terms as a reduced fraction with both parts below 2^53.
fn exact_fraction_sum(terms: &[(u64, u64)]) -> Option<(u128, u128)> {
    let (mut num, mut den) = (0u128, 1u128);
    for &(a, b) in terms {
        let (a, b) = (u128::from(a), u128::from(b));
        let g = gcd(den, b);
        let lcm = den.checked_mul(b / g)?;
        num = num.checked_mul(lcm / den)?.checked_add(a.checked_mul(lcm / b)?)?;
        den = lcm;
        let r = gcd(num, den).max(1);
        num /= r;
        den /= r;
    }
    const LIMIT: u128 = 1 << 53;
    (num < LIMIT && den < LIMIT).then_some((num, den))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

/// Argmax over the seen-class logits. `logits` columns follow `seen` row
/// order; the confusion matrix is indexed by the sorted seen classes.
pub fn evaluate_logits(logits: &ArrayView2<f64>, labels: &[usize], seen: &ClassIndex) -> Result<Evaluation> {
    if seen.is_empty() {
        return Err(Error::Empty("seen classes".into()));
    }
    if logits.ncols() != seen.len() {
        return Err(Error::dims("evaluation logits", seen.len(), logits.ncols()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::dims("evaluation labels", logits.nrows(), labels.len()));
    }
    let sorted = seen.sorted();
    let pos: BTreeMap<usize, usize> = sorted.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut cm = ConfusionMatrix::new(sorted);
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let Some(&truth) = pos.get(&y) else {
            return Err(Error::InvalidArgument(format!("test label {y} has not been seen")));
        };
        let pred_row = argmax(row.iter().copied());
        let pred = pos[&seen.class_at(pred_row)];
        cm.counts[truth][pred] += 1;
    }
    Ok(Evaluation {
        accuracy: cm.accuracy(),
        confusion: cm,
    })
}

/// Confusion matrix over the seen classes plus any true labels the model
/// cannot predict yet; samples of such classes always count as errors.
pub fn confusion_with_unseen(logits: &ArrayView2<f64>, labels: &[usize], seen: &ClassIndex) -> Result<ConfusionMatrix> {
    if logits.ncols() != seen.len() {
        return Err(Error::dims("evaluation logits", seen.len(), logits.ncols()));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::dims("evaluation labels", logits.nrows(), labels.len()));
    }
    let mut all: Vec<usize> = seen.classes().iter().chain(labels).copied().collect();
    all.sort_unstable();
    all.dedup();
    let pos: BTreeMap<usize, usize> = all.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let mut cm = ConfusionMatrix::new(all);
    for (row, &y) in logits.axis_iter(Axis(0)).zip(labels) {
        let truth = pos[&y];
        let pred = if seen.is_empty() {
            // Nothing to predict: count as an error in the first other column.
            (truth + 1) % cm.classes.len().max(1)
        } else {
            pos[&seen.class_at(argmax(row.iter().copied()))]
        };
        cm.counts[truth][pred] += 1;
    }
    Ok(cm)
}

/// First index of the maximum; NaN never wins.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Mean computed as offsets from the first element, exact for constants.
pub fn mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return f64::NAN;
    };
    first + values.iter().map(|v| v - first).sum::<f64>() / values.len() as f64
}

/// Average accuracy over all evaluated tasks, and average forgetting: for
/// every class seen before the final task, its best accuracy over the run
/// minus its final accuracy, averaged over those classes.
pub fn compute_metrics(
    accuracies: &[f64],
    per_class: &[BTreeMap<usize, f64>],
) -> Result<(f64, f64)> {
    if accuracies.is_empty() {
        return Err(Error::Empty("no evaluated tasks".into()));
    }
    let avg_acc = mean(accuracies);
    if per_class.len() < 2 {
        return Ok((avg_acc, 0.0));
    }
    let last = per_class.len() - 1;
    let before_final = &per_class[last - 1];
    let mut total = 0.0;
    let mut n = 0usize;
    for &c in before_final.keys() {
        let best = per_class
            .iter()
            .filter_map(|m| m.get(&c).copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let final_acc = per_class[last].get(&c).copied().unwrap_or(0.0);
        total += best - final_acc;
        n += 1;
    }
    let forgetting = if n == 0 { 0.0 } else { total / n as f64 };
    Ok((avg_acc, forgetting))
}
