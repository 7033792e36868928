//! Self-reliant feature extractors: trained once on a single task with a
//! rotation-augmented classification head and a batch-hard metric-learning
//! head, then stripped of both heads and frozen.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, StreamTask};
use crate::error::{Error, Result};
use crate::harness::{early_stop_loop, EarlyStopReport, TrainProtocol, Trainable};
use crate::nn::{
    contrastive_loss, cross_entropy_loss, Activation, Batch, Dense, MlpNet, MlpSpec, ParamMatrix,
};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfSupConfig {
    /// Rotation self-supervision.
    pub enabled: bool,
    pub num_orientations: usize,
    pub ce_head: bool,
    pub ml_head: bool,
    pub ml_margin: f64,
    /// Width of the metric-learning projection.
    pub ml_dim: usize,
}

impl Default for SelfSupConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            num_orientations: 4,
            ce_head: true,
            ml_head: true,
            ml_margin: 1.0,
            ml_dim: 32,
        }
    }
}

impl SelfSupConfig {
    pub fn ce_only() -> Self {
        Self {
            enabled: false,
            ml_head: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ce_head && !self.ml_head {
            return Err(Error::InvalidArgument("at least one extractor head must be enabled".into()));
        }
        if self.enabled && !(1..=4).contains(&self.num_orientations) {
            return Err(Error::InvalidArgument("num_orientations must be 1..=4".into()));
        }
        if self.ml_head && (self.ml_margin <= 0.0 || self.ml_dim == 0) {
            return Err(Error::InvalidArgument("invalid metric-learning head settings".into()));
        }
        Ok(())
    }

    fn orientations(&self) -> usize {
        if self.enabled {
            self.num_orientations
        } else {
            1
        }
    }
}

/// Source index for every output position of a counter-clockwise rotation
/// by `quarter_turns * 90` degrees of a square HWC image.
fn rotation_map(shape: [usize; 3], quarter_turns: usize) -> Vec<usize> {
    let [h, w, c] = shape;
    let mut map: Vec<usize> = (0..h * w * c).collect();
    for _ in 0..quarter_turns % 4 {
        // out[i][j] = in[j][w - 1 - i]
        let prev = map.clone();
        for i in 0..h {
            for j in 0..w {
                for ch in 0..c {
                    map[(i * w + j) * c + ch] = prev[(j * w + (w - 1 - i)) * c + ch];
                }
            }
        }
    }
    map
}

/// Expands every sample into `num_orientations` rotated copies (sample-major)
/// labelled `label * num_orientations + orientation`.
pub fn rotate_batch(batch: &Batch, shape: [usize; 3], num_orientations: usize) -> Result<Batch> {
    let [h, w, c] = shape;
    if h != w {
        return Err(Error::InvalidArgument(format!("cannot rotate non-square {h}x{w} input")));
    }
    if h * w * c != batch.inputs.ncols() {
        return Err(Error::dims("rotation input", h * w * c, batch.inputs.ncols()));
    }
    if !(1..=4).contains(&num_orientations) {
        return Err(Error::InvalidArgument("num_orientations must be 1..=4".into()));
    }
    let maps: Vec<Vec<usize>> = (0..num_orientations).map(|k| rotation_map(shape, k)).collect();
    let n = batch.len();
    let mut inputs = Array2::zeros((n * num_orientations, h * w * c));
    let mut labels = Vec::with_capacity(n * num_orientations);
    for (i, (row, &y)) in batch.inputs.axis_iter(Axis(0)).zip(&batch.labels).enumerate() {
        for (k, map) in maps.iter().enumerate() {
            let mut out = inputs.row_mut(i * num_orientations + k);
            for (dst, &src) in out.iter_mut().zip(map) {
                *dst = row[src];
            }
            labels.push(y * num_orientations + k);
        }
    }
    Batch::new(inputs, labels)
}

/// A frozen embedding network with the classes it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    net: MlpNet,
    spec: MlpSpec,
    pub trained_classes: BTreeSet<usize>,
    pub birth_task: usize,
    /// Drop in task error rate credited to this extractor; `None` until scored.
    pub improvement_score: Option<f64>,
}

impl FeatureExtractor {
    /// Wraps and freezes an already trained network.
    pub fn from_net(
        mut net: MlpNet,
        spec: MlpSpec,
        trained_classes: BTreeSet<usize>,
        birth_task: usize,
    ) -> Result<Self> {
        if trained_classes.is_empty() {
            return Err(Error::Empty("extractor trained classes".into()));
        }
        if net.output_dim() != spec.embedding_dim || net.input_dim() != spec.input_dim {
            return Err(Error::dims("extractor network", spec.embedding_dim, net.output_dim()));
        }
        net.freeze();
        Ok(Self {
            net,
            spec,
            trained_classes,
            birth_task,
            improvement_score: None,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.embedding_dim
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn net(&self) -> &MlpNet {
        &self.net
    }

    pub fn embed(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        self.net.infer(inputs)
    }

    /// Improvement score used for replacement ranking; unscored extractors
    /// rank as `+inf`.
    pub fn ranking_score(&self) -> f64 {
        self.improvement_score.unwrap_or(f64::INFINITY)
    }

    pub fn to_checkpoint(&self) -> ExtractorCheckpoint {
        ExtractorCheckpoint {
            version: CHECKPOINT_VERSION,
            spec: self.spec.clone(),
            params: self.net.flat_params(),
            trained_classes: self.trained_classes.clone(),
            birth_task: self.birth_task,
            improvement_score: self.improvement_score,
        }
    }

    pub fn from_checkpoint(ckpt: &ExtractorCheckpoint) -> Result<Self> {
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ckpt.version)));
        }
        ckpt.spec.validate()?;
        if ckpt.params.len() != ckpt.spec.num_params() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                ckpt.spec.num_params(),
                ckpt.params.len()
            )));
        }
        let mut dims = vec![ckpt.spec.input_dim];
        dims.extend(&ckpt.spec.hidden_dims);
        dims.push(ckpt.spec.embedding_dim);
        let mut offset = 0;
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (inp, out) = (pair[0], pair[1]);
            let len = out * (inp + 1);
            let values = Array2::from_shape_vec((out, inp + 1), ckpt.params[offset..offset + len].to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            offset += len;
            let act = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                ckpt.spec.activation
            };
            layers.push(Dense::new(ParamMatrix::new(values), act));
        }
        let mut fe = Self::from_net(
            MlpNet::from_layers(layers)?,
            ckpt.spec.clone(),
            ckpt.trained_classes.clone(),
            ckpt.birth_task,
        )?;
        fe.improvement_score = ckpt.improvement_score;
        Ok(fe)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized extractor: spec, flat parameters and bookkeeping. JSON floats
/// round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtractorCheckpoint {
    pub version: u32,
    pub spec: MlpSpec,
    pub params: Vec<f64>,
    pub trained_classes: BTreeSet<usize>,
    pub birth_task: usize,
    pub improvement_score: Option<f64>,
}

impl ExtractorCheckpoint {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Options for [`train_feature_extractor`] besides the data itself.
#[derive(Clone, Debug)]
pub struct ExtractorTraining<'a> {
    pub spec: &'a MlpSpec,
    pub selfsup: &'a SelfSupConfig,
    pub protocol: &'a TrainProtocol,
    pub seed: u64,
    /// Initialize from these weights instead of a fresh draw.
    pub warm_start: Option<&'a FeatureExtractor>,
}

struct Split {
    inputs: Array2<f64>,
    labels: Vec<usize>,
}

struct ExtractorTrainer<'a> {
    net: MlpNet,
    ce_head: Option<Dense>,
    ml_head: Option<Dense>,
    train: Split,
    val: Option<Split>,
    shape: [usize; 3],
    orientations: usize,
    margin: f64,
    protocol: &'a TrainProtocol,
    rng: Rng,
}

struct StepLoss {
    total: f64,
}

impl ExtractorTrainer<'_> {
    fn augmented(&self, inputs: Array2<f64>, labels: Vec<usize>) -> Result<Batch> {
        let batch = Batch::new(inputs, labels)?;
        if self.orientations > 1 {
            rotate_batch(&batch, self.shape, self.orientations)
        } else {
            Ok(batch)
        }
    }

    /// Forward + optional backward on one (already augmented) batch.
    fn step(&mut self, batch: &Batch, backward: bool) -> Result<StepLoss> {
        let trace = self.net.forward(&batch.inputs.view())?;
        let emb = &trace.output;
        let mut total = 0.0;
        let mut d_emb = Array2::<f64>::zeros(emb.raw_dim());
        if let Some(head) = self.ce_head.as_mut() {
            let logits = head.linear(&emb.view());
            let (loss, dlogits) = cross_entropy_loss(&logits.view(), &batch.labels)?;
            total += loss;
            if backward {
                d_emb += &head.backward_linear(&emb.view(), &dlogits);
            }
        }
        if let Some(head) = self.ml_head.as_mut() {
            if batch.len() >= 2 {
                let proj = head.linear(&emb.view());
                let (loss, dproj) = contrastive_loss(&proj.view(), &batch.labels, self.margin)?;
                total += loss;
                if backward {
                    d_emb += &head.backward_linear(&emb.view(), &dproj);
                }
            }
        }
        if backward {
            self.net.backward(&trace, &d_emb);
        }
        Ok(StepLoss { total })
    }

    fn params_mut(&mut self) -> impl Iterator<Item = &mut ParamMatrix> {
        self.net
            .params_mut()
            .chain(self.ce_head.iter_mut().map(|h| &mut h.weights))
            .chain(self.ml_head.iter_mut().map(|h| &mut h.weights))
    }
}

type TrainerSnapshot = (MlpNet, Option<Dense>, Option<Dense>);

impl Trainable for ExtractorTrainer<'_> {
    type Snapshot = TrainerSnapshot;

    fn train_epoch(&mut self, lr: f64) -> Result<f64> {
        let n = self.train.labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.protocol.batch_size) {
            let inputs = self.train.inputs.select(Axis(0), chunk);
            let labels = chunk.iter().map(|&i| self.train.labels[i]).collect();
            let batch = self.augmented(inputs, labels)?;
            let loss = self.step(&batch, true)?;
            let momentum = self.protocol.momentum;
            for p in self.params_mut() {
                p.sgd_step(lr, momentum);
            }
            sum += loss.total;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }

    fn validation_loss(&mut self) -> Result<Option<f64>> {
        let Some(val) = self.val.as_ref() else {
            return Ok(None);
        };
        let batch = self.augmented(val.inputs.clone(), val.labels.clone())?;
        Ok(Some(self.step(&batch, false)?.total))
    }

    fn snapshot(&self) -> TrainerSnapshot {
        (self.net.clone(), self.ce_head.clone(), self.ml_head.clone())
    }

    fn restore(&mut self, snapshot: &TrainerSnapshot) {
        self.net = snapshot.0.clone();
        self.ce_head = snapshot.1.clone();
        self.ml_head = snapshot.2.clone();
        for p in self.params_mut() {
            p.reset_velocity();
        }
    }
}

/// Trains a new extractor on one task's data and returns it frozen.
/// Returns the early-stopping report alongside.
pub fn train_feature_extractor(
    dataset: &LabeledDataset,
    task: &StreamTask,
    opts: &ExtractorTraining<'_>,
) -> Result<(FeatureExtractor, EarlyStopReport)> {
    opts.spec.validate()?;
    opts.selfsup.validate()?;
    let train_idx = task.train_indices();
    if train_idx.is_empty() {
        return Err(Error::Empty(format!("training data of task {}", task.index)));
    }
    if dataset.input_dim() != opts.spec.input_dim {
        return Err(Error::dims("extractor input", opts.spec.input_dim, dataset.input_dim()));
    }
    let local: BTreeMap<usize, usize> = task.classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let to_split = |idx: &[usize]| Split {
        inputs: dataset.rows(idx),
        labels: idx.iter().map(|&i| local[&dataset.labels[i]]).collect(),
    };
    let val_idx = task.val_indices();

    let mut selfsup = opts.selfsup.clone();
    if selfsup.ml_head && task.classes.len() < 2 {
        log::warn!(
            "task {} has a single class; training extractor with the CE head only",
            task.index
        );
        selfsup.ml_head = false;
        selfsup.ce_head = true;
    }
    let orientations = selfsup.orientations();

    let mut init_rng = rng::stream(opts.seed, "extractor-init");
    let net = match opts.warm_start {
        Some(fe) if fe.spec() == opts.spec => {
            let mut ckpt = fe.to_checkpoint();
            ckpt.improvement_score = None;
            let mut net = FeatureExtractor::from_checkpoint(&ckpt)?.net;
            // Checkpoint reconstruction yields a frozen copy; thaw it.
            for p in net.params_mut() {
                *p = ParamMatrix::new(p.values().clone());
            }
            net
        }
        _ => MlpNet::new(opts.spec, &mut init_rng)?,
    };
    let emb = opts.spec.embedding_dim;
    let ce_head = selfsup
        .ce_head
        .then(|| Dense::glorot(emb, task.classes.len() * orientations, Activation::Identity, &mut init_rng));
    let ml_head = selfsup
        .ml_head
        .then(|| Dense::glorot(emb, selfsup.ml_dim, Activation::Identity, &mut init_rng));

    let mut trainer = ExtractorTrainer {
        net,
        ce_head,
        ml_head,
        train: to_split(&train_idx),
        val: (!val_idx.is_empty()).then(|| to_split(&val_idx)),
        shape: dataset.input_shape,
        orientations,
        margin: selfsup.ml_margin,
        protocol: opts.protocol,
        rng: rng::stream(opts.seed, "extractor-batches"),
    };
    let report = early_stop_loop(&mut trainer, opts.protocol)?;
    let fe = FeatureExtractor::from_net(
        trainer.net,
        opts.spec.clone(),
        task.classes.iter().copied().collect(),
        task.index,
    )?;
    Ok((fe, report))
}

/// Embeds `inputs` with every extractor and concatenates along columns in
/// ensemble order.
pub fn concat_embeddings(extractors: &[FeatureExtractor], inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let total: usize = extractors.iter().map(FeatureExtractor::embedding_dim).sum();
    let mut out = Array2::zeros((inputs.nrows(), total));
    let mut col = 0;
    for fe in extractors {
        let e = fe.embed(inputs)?;
        out.slice_mut(s![.., col..col + fe.embedding_dim()]).assign(&e);
        col += fe.embedding_dim();
    }
    Ok(out)
}
