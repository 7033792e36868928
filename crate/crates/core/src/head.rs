//! Linear classifier heads over fixed features, and their training loop with
//! optional pseudo-features for classes absent from the current task.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::classes::ClassIndex;
use crate::error::{Error, Result};
use crate::harness::{early_stop_loop, EarlyStopReport, TrainProtocol, Trainable};
use crate::nn::{cross_entropy_loss, Activation, Dense};
use crate::prototypes::{project_pseudo_feature, translate_feature, EstimationHeuristic, PrototypeStore};
use crate::rng::{self, Rng};

/// A linear layer with one output row per seen class, rows ordered by first
/// appearance of the class.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHead {
    pub layer: Dense,
    seen: ClassIndex,
}

impl ClassHead {
    pub fn new(input_dim: usize) -> Self {
        Self {
            layer: Dense::zeros(input_dim, 0, Activation::Identity),
            seen: ClassIndex::new(),
        }
    }

    pub fn from_parts(layer: Dense, seen: ClassIndex) -> Result<Self> {
        if layer.output_dim() != seen.len() {
            return Err(Error::dims("head rows", seen.len(), layer.output_dim()));
        }
        Ok(Self { layer, seen })
    }

    pub fn seen(&self) -> &ClassIndex {
        &self.seen
    }

    pub fn input_dim(&self) -> usize {
        self.layer.input_dim()
    }

    /// Adds a zero row for each class not seen before; returns how many.
    pub fn observe(&mut self, classes: impl IntoIterator<Item = usize>) -> usize {
        let added = self.seen.extend(classes);
        self.layer.weights.append_rows(added);
        added
    }

    /// Replaces input columns `start..end` with `width` zero columns. The
    /// bias column is never touched.
    pub fn splice_inputs(&mut self, start: usize, end: usize, width: usize) {
        assert!(end <= self.input_dim());
        self.layer.weights.splice_zero_columns(start, end, width);
    }

    pub fn logits(&self, features: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.input_dim() {
            return Err(Error::dims("head input", self.input_dim(), features.ncols()));
        }
        Ok(self.layer.linear(features))
    }

    /// Rows of the head for the given class labels.
    pub fn rows_of(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&c| {
                self.seen.row(c).ok_or(Error::LabelOutOfRange {
                    label: c,
                    classes: self.seen.len(),
                })
            })
            .collect()
    }

    /// Freezes the rows of every seen class outside `current`.
    pub fn mask_absent(&mut self, current: &[usize]) {
        let rows: Vec<usize> = (0..self.seen.len())
            .filter(|&r| !current.contains(&self.seen.class_at(r)))
            .collect();
        self.layer.weights.set_frozen_rows(rows);
    }

    pub fn clear_mask(&mut self) {
        self.layer.weights.clear_frozen_rows();
    }
}

/// Features of labelled samples.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn select(&self, idx: &[usize]) -> FeatureSet {
        FeatureSet {
            features: self.features.select(Axis(0), idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// How features of absent classes are synthesized from real ones.
#[derive(Clone, Copy, Debug)]
pub enum PseudoSource<'a> {
    None,
    /// Standardize with the source statistics and rescale to the target's.
    Project {
        store: &'a PrototypeStore,
        heuristic: &'a EstimationHeuristic,
    },
    /// Shift by the difference of class means.
    Translate { means: &'a BTreeMap<usize, Vec<f64>> },
}

impl PseudoSource<'_> {
    fn has_source(&self, class: usize) -> bool {
        match self {
            PseudoSource::None => false,
            PseudoSource::Project { store, .. } => store.prototype(class).is_some_and(|p| p.is_complete()),
            PseudoSource::Translate { means } => means.contains_key(&class),
        }
    }

    /// One pseudo-feature per real sample, each aimed at a class drawn
    /// uniformly from `absent`. Returns `None` when nothing can be generated.
    pub fn generate(&self, real: &FeatureSet, absent: &[usize], rng: &mut Rng) -> Result<Option<FeatureSet>> {
        if absent.is_empty() || real.is_empty() || matches!(self, PseudoSource::None) {
            return Ok(None);
        }
        // Classes too small to have statistics cannot act as sources.
        let eligible: Vec<usize> = (0..real.len()).filter(|&i| self.has_source(real.labels[i])).collect();
        if eligible.is_empty() {
            return Ok(None);
        }
        let mut features = Array2::zeros((eligible.len(), real.features.ncols()));
        let mut labels = Vec::with_capacity(eligible.len());
        for (out_row, &i) in eligible.iter().enumerate() {
            let row = real.features.row(i);
            let target = *absent.choose(rng).expect("nonempty");
            let source = real.labels[i];
            let out = match self {
                PseudoSource::Project { store, heuristic } => {
                    project_pseudo_feature(&row, source, target, store, heuristic, rng)?
                }
                PseudoSource::Translate { means } => {
                    let mu = |c: usize| {
                        means
                            .get(&c)
                            .ok_or(Error::MissingStatistics { class: c, slot: 0 })
                    };
                    translate_feature(&row, mu(source)?, mu(target)?)?
                }
                PseudoSource::None => unreachable!(),
            };
            features.row_mut(out_row).assign(&out);
            labels.push(target);
        }
        Ok(Some(FeatureSet { features, labels }))
    }
}

/// Everything [`train_head`] needs besides the head itself.
pub struct HeadTraining<'a> {
    pub train: &'a FeatureSet,
    pub val: Option<&'a FeatureSet>,
    pub pseudo: PseudoSource<'a>,
    /// Seen classes without real samples in this task.
    pub absent: &'a [usize],
    pub protocol: &'a TrainProtocol,
    pub seed: u64,
}

struct HeadTrainer<'a> {
    head: &'a mut ClassHead,
    opts: &'a HeadTraining<'a>,
    val_pseudo: Option<FeatureSet>,
    rng: Rng,
}

impl HeadTrainer<'_> {
    fn ce(&mut self, set: &FeatureSet, backward: bool) -> Result<f64> {
        let rows = self.head.rows_of(&set.labels)?;
        let logits = self.head.logits(&set.features.view())?;
        let (loss, dlogits) = cross_entropy_loss(&logits.view(), &rows)?;
        if backward {
            self.head.layer.backward_linear(&set.features.view(), &dlogits);
        }
        Ok(loss)
    }
}

impl Trainable for HeadTrainer<'_> {
    type Snapshot = Dense;

    fn train_epoch(&mut self, lr: f64) -> Result<f64> {
        let opts = self.opts;
        let mut order: Vec<usize> = (0..opts.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(opts.protocol.batch_size) {
            let real = opts.train.select(chunk);
            let mut loss = self.ce(&real, true)?;
            if let Some(pseudo) = opts.pseudo.generate(&real, opts.absent, &mut self.rng)? {
                loss += self.ce(&pseudo, true)?;
            }
            self.head.layer.weights.sgd_step(lr, opts.protocol.momentum);
            sum += loss;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }

    fn validation_loss(&mut self) -> Result<Option<f64>> {
        let Some(val) = self.opts.val.filter(|v| !v.is_empty()) else {
            return Ok(None);
        };
        let mut loss = self.ce(val, false)?;
        if let Some(pseudo) = self.val_pseudo.take() {
            loss += self.ce(&pseudo, false)?;
            self.val_pseudo = Some(pseudo);
        }
        Ok(Some(loss))
    }

    fn snapshot(&self) -> Dense {
        self.head.layer.clone()
    }

    fn restore(&mut self, snapshot: &Dense) {
        let frozen_rows = self.head.layer.weights.frozen_rows().clone();
        self.head.layer = snapshot.clone();
        self.head.layer.weights.set_frozen_rows(frozen_rows);
        self.head.layer.weights.reset_velocity();
    }
}

/// Trains `head` on real features plus pseudo-features under the
/// early-stopping schedule. Cross-entropy always spans every seen class; the
/// real and pseudo terms are summed.
pub fn train_head(head: &mut ClassHead, opts: &HeadTraining<'_>) -> Result<EarlyStopReport> {
    if opts.train.is_empty() {
        return Err(Error::Empty("head training data".into()));
    }
    // Fixed pseudo targets keep the validation loss comparable across epochs.
    let val_pseudo = match opts.val {
        Some(v) if !v.is_empty() => {
            let mut r = rng::stream(opts.seed, "head-val-pseudo");
            opts.pseudo.generate(v, opts.absent, &mut r)?
        }
        _ => None,
    };
    let mut trainer = HeadTrainer {
        head,
        opts,
        val_pseudo,
        rng: rng::stream(opts.seed, "head-batches"),
    };
    early_stop_loop(&mut trainer, opts.protocol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn blobs() -> FeatureSet {
        let mut r = rng::stream(3, "blobs");
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for c in 0..3usize {
            for _ in 0..30 {
                use rand::Rng as _;
                feats.push(c as f64 * 3.0 + r.random_range(-0.5..0.5));
                feats.push(-(c as f64) * 2.0 + r.random_range(-0.5..0.5));
                labels.push(c + 10);
            }
        }
        FeatureSet {
            features: Array2::from_shape_vec((90, 2), feats).unwrap(),
            labels,
        }
    }

    #[test]
    fn observe_appends_zero_rows_once() {
        let mut h = ClassHead::new(4);
        assert_eq!(h.observe([5, 2]), 2);
        assert_eq!(h.observe([2, 7]), 1);
        assert_eq!(h.layer.output_dim(), 3);
        assert!(h.layer.weights.values().iter().all(|&v| v == 0.0));
        assert_eq!(h.rows_of(&[7, 5]).unwrap(), vec![2, 0]);
    }

    #[test]
    fn splice_keeps_other_columns_and_bias() {
        let mut h = ClassHead::new(3);
        h.observe([0]);
        h.layer.weights.values_mut().assign(&array![[1.0, 2.0, 3.0, 9.0]]);
        h.splice_inputs(1, 2, 3);
        assert_eq!(h.layer.weights.values(), &array![[1.0, 0.0, 0.0, 0.0, 3.0, 9.0]]);
    }

    #[test]
    fn separable_features_are_learned() {
        let data = blobs();
        let mut h = ClassHead::new(2);
        h.observe([10, 11, 12]);
        let protocol = TrainProtocol {
            base_lr: 0.05,
            max_epochs: 40,
            ..Default::default()
        };
        train_head(
            &mut h,
            &HeadTraining {
                train: &data,
                val: Some(&data),
                pseudo: PseudoSource::None,
                absent: &[],
                protocol: &protocol,
                seed: 0,
            },
        )
        .unwrap();
        let logits = h.logits(&data.features.view()).unwrap();
        let correct = logits
            .axis_iter(Axis(0))
            .zip(&data.labels)
            .filter(|(row, &y)| h.seen().class_at(crate::harness::argmax(row.iter().copied())) == y)
            .count();
        assert!(correct >= 85, "{correct}/90");
    }

    #[test]
    fn masked_rows_do_not_move() {
        let data = blobs();
        let mut h = ClassHead::new(2);
        h.observe([10, 11, 12]);
        h.layer.weights.values_mut().fill(0.25);
        h.mask_absent(&[10, 11]);
        let protocol = TrainProtocol {
            max_epochs: 5,
            ..Default::default()
        };
        train_head(
            &mut h,
            &HeadTraining {
                train: &data,
                val: Some(&data),
                pseudo: PseudoSource::None,
                absent: &[],
                protocol: &protocol,
                seed: 0,
            },
        )
        .unwrap();
        assert!(h.layer.weights.values().row(2).iter().all(|&v| v == 0.25));
        assert!(h.layer.weights.values().row(0).iter().any(|&v| v != 0.25));
    }

    #[test]
    fn translated_pseudo_features_target_absent_classes() {
        let real = FeatureSet {
            features: array![[1.0, 1.0], [2.0, 0.0]],
            labels: vec![0, 0],
        };
        let means: BTreeMap<usize, Vec<f64>> = [(0, vec![1.5, 0.5]), (4, vec![10.0, 10.0])].into();
        let mut r = rng::stream(0, "t");
        let p = PseudoSource::Translate { means: &means }
            .generate(&real, &[4], &mut r)
            .unwrap()
            .unwrap();
        assert_eq!(p.labels, vec![4, 4]);
        assert_eq!(p.features, array![[9.5, 10.5], [10.5, 9.5]]);
        assert!(PseudoSource::Translate { means: &means }
            .generate(&real, &[], &mut r)
            .unwrap()
            .is_none());
    }
}
