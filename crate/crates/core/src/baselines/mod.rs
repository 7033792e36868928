//! Comparison methods on a single full-size network with a linear head:
//! finetuning, frozen backbone, EWC, MAS, LwF, frozen backbone with
//! mean-translated pseudo-features, and joint training on all data so far.
//! Each can restrict head updates to the rows of the current task's classes.

mod regularize;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::classes::ClassIndex;
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::harness::{early_stop_loop, ContinualMethod, TaskContext, TaskOutcome, TrainProtocol, Trainable};
use crate::head::{train_head, ClassHead, FeatureSet, HeadTraining, PseudoSource};
use crate::nn::{cross_entropy_loss, Dense, MlpNet, NetShape};
use crate::rng::{self, Rng};

pub use regularize::{
    distill_loss, fisher_importance, mas_importance, mas_importance_classifier, quadratic_penalty, DistillParams,
    ImportanceState, PenaltyParams,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Ft,
    Fz,
    Ewc,
    Mas,
    Lwf,
    Fetril,
    Joint,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 7] = [
        BaselineKind::Ft,
        BaselineKind::Fz,
        BaselineKind::Ewc,
        BaselineKind::Mas,
        BaselineKind::Lwf,
        BaselineKind::Fetril,
        BaselineKind::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BaselineKind::Ft => "ft",
            BaselineKind::Fz => "fz",
            BaselineKind::Ewc => "ewc",
            BaselineKind::Mas => "mas",
            BaselineKind::Lwf => "lwf",
            BaselineKind::Fetril => "fetril",
            BaselineKind::Joint => "joint",
        }
    }

    /// Whether the backbone is frozen after the first task.
    fn freezes_backbone(self) -> bool {
        matches!(self, BaselineKind::Fz | BaselineKind::Fetril)
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::UnknownMethod(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub protocol: TrainProtocol,
    pub net: NetShape,
    pub ewc: PenaltyParams,
    pub mas: PenaltyParams,
    pub lwf: DistillParams,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            protocol: TrainProtocol {
                base_lr: 0.003,
                ..TrainProtocol::default()
            },
            net: NetShape::full(),
            ewc: PenaltyParams {
                lambda: 40000.0,
                alpha: 0.1,
            },
            mas: PenaltyParams { lambda: 10.0, alpha: 0.1 },
            lwf: DistillParams { lambda: 30.0, tau: 2.0 },
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        for p in [self.ewc, self.mas] {
            if !(p.lambda >= 0.0) || !(0.0..=1.0).contains(&p.alpha) {
                return Err(Error::InvalidArgument("penalty needs lambda >= 0 and alpha in [0, 1]".into()));
            }
        }
        if !(self.lwf.lambda >= 0.0) || !(self.lwf.tau > 0.0) {
            return Err(Error::InvalidArgument("distillation needs lambda >= 0 and tau > 0".into()));
        }
        Ok(())
    }
}

enum Regularizer<'a> {
    None,
    Penalty(&'a ImportanceState),
    Distill {
        teacher: &'a (MlpNet, Dense),
        params: DistillParams,
    },
}

struct Split {
    inputs: Array2<f64>,
    rows: Vec<usize>,
}

struct NetTrainer<'a> {
    backbone: &'a mut MlpNet,
    head: &'a mut ClassHead,
    train: Split,
    val: Option<Split>,
    reg: Regularizer<'a>,
    protocol: &'a TrainProtocol,
    rng: Rng,
}

impl NetTrainer<'_> {
    fn step(&mut self, x: &ArrayView2<f64>, rows: &[usize], backward: bool) -> Result<f64> {
        let trace = self.backbone.forward(x)?;
        let emb = &trace.output;
        let logits = self.head.layer.linear(&emb.view());
        let (mut loss, mut dlogits) = cross_entropy_loss(&logits.view(), rows)?;
        if let Regularizer::Distill { teacher, params } = &self.reg {
            let t = teacher.1.linear(&teacher.0.infer(x)?.view());
            let (l, g) = distill_loss(&logits.view(), &t.view(), params.tau)?;
            loss += params.lambda * l;
            dlogits.scaled_add(params.lambda, &g);
        }
        if backward {
            let d_emb = self.head.layer.backward_linear(&emb.view(), &dlogits);
            self.backbone.backward(&trace, &d_emb);
        }
        Ok(loss)
    }

    fn penalty(&mut self, backward: bool) -> Result<f64> {
        let Regularizer::Penalty(state) = &self.reg else {
            return Ok(0.0);
        };
        let (loss, grads) = quadratic_penalty(self.backbone, state)?;
        if backward {
            for (p, g) in self.backbone.params_mut().zip(&grads) {
                *p.grad_mut() += g;
            }
        }
        Ok(loss)
    }
}

impl Trainable for NetTrainer<'_> {
    type Snapshot = (MlpNet, Dense);

    fn train_epoch(&mut self, lr: f64) -> Result<f64> {
        let n = self.train.rows.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.protocol.batch_size) {
            let x = self.train.inputs.select(Axis(0), chunk);
            let rows: Vec<usize> = chunk.iter().map(|&i| self.train.rows[i]).collect();
            let mut loss = self.step(&x.view(), &rows, true)?;
            loss += self.penalty(true)?;
            let m = self.protocol.momentum;
            for p in self.backbone.params_mut() {
                p.sgd_step(lr, m);
            }
            self.head.layer.weights.sgd_step(lr, m);
            sum += loss;
            batches += 1;
        }
        Ok(sum / batches.max(1) as f64)
    }

    fn validation_loss(&mut self) -> Result<Option<f64>> {
        let Some(val) = self.val.take() else {
            return Ok(None);
        };
        let loss = self.step(&val.inputs.view(), &val.rows, false);
        self.val = Some(val);
        Ok(Some(loss? + self.penalty(false)?))
    }

    fn snapshot(&self) -> (MlpNet, Dense) {
        (self.backbone.clone(), self.head.layer.clone())
    }

    fn restore(&mut self, snap: &(MlpNet, Dense)) {
        *self.backbone = snap.0.clone();
        let frozen_rows = self.head.layer.weights.frozen_rows().clone();
        self.head.layer = snap.1.clone();
        self.head.layer.weights.set_frozen_rows(frozen_rows);
        for p in self.backbone.params_mut() {
            p.reset_velocity();
        }
        self.head.layer.weights.reset_velocity();
    }
}

/// One baseline learner.
#[derive(Clone, Debug)]
pub struct Baseline {
    kind: BaselineKind,
    mask_ce: bool,
    cfg: BaselineConfig,
    seed: u64,
    backbone: MlpNet,
    head: ClassHead,
    tasks_done: usize,
    importance: Option<ImportanceState>,
    teacher: Option<(MlpNet, Dense)>,
    class_means: BTreeMap<usize, Vec<f64>>,
    joint_train: BTreeSet<usize>,
    joint_val: BTreeSet<usize>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, mask_ce: bool, cfg: BaselineConfig, input_dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let spec = cfg.net.spec(input_dim);
        spec.validate()?;
        let backbone = MlpNet::new(&spec, &mut rng::stream(seed, "baseline-init"))?;
        let importance = match kind {
            BaselineKind::Ewc => Some(ImportanceState::new(cfg.ewc)),
            BaselineKind::Mas => Some(ImportanceState::new(cfg.mas)),
            _ => None,
        };
        Ok(Self {
            kind,
            mask_ce,
            head: ClassHead::new(spec.embedding_dim),
            cfg,
            seed,
            backbone,
            tasks_done: 0,
            importance,
            teacher: None,
            class_means: BTreeMap::new(),
            joint_train: BTreeSet::new(),
            joint_val: BTreeSet::new(),
        })
    }

    pub fn kind(&self) -> BaselineKind {
        self.kind
    }

    pub fn backbone(&self) -> &MlpNet {
        &self.backbone
    }

    pub fn head(&self) -> &ClassHead {
        &self.head
    }

    pub fn importance(&self) -> Option<&ImportanceState> {
        self.importance.as_ref()
    }

    fn split(&self, dataset: &LabeledDataset, idx: &[usize]) -> Result<Split> {
        let labels: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        Ok(Split {
            inputs: dataset.rows(idx),
            rows: self.head.rows_of(&labels)?,
        })
    }

    fn features(&self, dataset: &LabeledDataset, idx: &[usize]) -> Result<FeatureSet> {
        Ok(FeatureSet {
            features: self.backbone.infer(&dataset.rows(idx).view())?,
            labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
        })
    }

    fn update_means(&mut self, set: &FeatureSet) {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &y) in set.labels.iter().enumerate() {
            by_class.entry(y).or_default().push(i);
        }
        for (c, rows) in by_class {
            let mean = set.features.select(Axis(0), &rows).mean_axis(Axis(0)).expect("nonempty");
            self.class_means.insert(c, mean.to_vec());
        }
    }

    fn train_network(&mut self, ctx: &TaskContext<'_>, seed: u64) -> Result<()> {
        let (train_idx, val_idx) = if self.kind == BaselineKind::Joint {
            self.joint_train.extend(ctx.task.train_indices());
            self.joint_val.extend(ctx.task.val_indices());
            (
                self.joint_train.iter().copied().collect::<Vec<_>>(),
                self.joint_val.iter().copied().collect::<Vec<_>>(),
            )
        } else {
            (ctx.task.train_indices(), ctx.task.val_indices())
        };
        let train = self.split(ctx.dataset, &train_idx)?;
        let val = if val_idx.is_empty() {
            None
        } else {
            Some(self.split(ctx.dataset, &val_idx)?)
        };
        let reg = match (&self.importance, &self.teacher) {
            (Some(state), _) => Regularizer::Penalty(state),
            (None, Some(teacher)) => Regularizer::Distill {
                teacher,
                params: self.cfg.lwf,
            },
            _ => Regularizer::None,
        };
        let mut trainer = NetTrainer {
            backbone: &mut self.backbone,
            head: &mut self.head,
            train,
            val,
            reg,
            protocol: &self.cfg.protocol,
            rng: rng::stream(seed, "baseline-batches"),
        };
        early_stop_loop(&mut trainer, &self.cfg.protocol)?;
        let train = trainer.train;

        match self.kind {
            BaselineKind::Ewc => {
                let omega = fisher_importance(
                    &self.backbone,
                    &self.head.layer,
                    &train.inputs.view(),
                    &train.rows,
                    self.cfg.protocol.batch_size,
                )?;
                self.importance.as_mut().expect("ewc state").consolidate(omega, &self.backbone)?;
            }
            BaselineKind::Mas => {
                let omega = mas_importance_classifier(&self.backbone, &self.head.layer, &train.inputs.view())?;
                self.importance.as_mut().expect("mas state").consolidate(omega, &self.backbone)?;
            }
            BaselineKind::Lwf => {
                let mut teacher = (self.backbone.clone(), self.head.layer.clone());
                teacher.0.freeze();
                teacher.1.weights.freeze();
                self.teacher = Some(teacher);
            }
            _ => {}
        }
        Ok(())
    }

    fn train_head_only(&mut self, ctx: &TaskContext<'_>, seed: u64) -> Result<()> {
        let train = self.features(ctx.dataset, &ctx.task.train_indices())?;
        let val_idx = ctx.task.val_indices();
        let val = if val_idx.is_empty() {
            None
        } else {
            Some(self.features(ctx.dataset, &val_idx)?)
        };
        if self.kind == BaselineKind::Fetril {
            self.update_means(&train);
        }
        let absent: Vec<usize> = self
            .head
            .seen()
            .classes()
            .iter()
            .copied()
            .filter(|c| !ctx.task.classes.contains(c))
            .collect();
        let pseudo = if self.kind == BaselineKind::Fetril {
            PseudoSource::Translate {
                means: &self.class_means,
            }
        } else {
            PseudoSource::None
        };
        train_head(
            &mut self.head,
            &HeadTraining {
                train: &train,
                val: val.as_ref(),
                pseudo,
                absent: &absent,
                protocol: &self.cfg.protocol,
                seed,
            },
        )?;
        Ok(())
    }
}

impl ContinualMethod for Baseline {
    fn name(&self) -> String {
        if self.mask_ce {
            format!("{}_masked", self.kind.as_str())
        } else {
            self.kind.as_str().to_string()
        }
    }

    fn learn_task(&mut self, ctx: &TaskContext<'_>) -> Result<TaskOutcome> {
        let seed = rng::derive_seed(self.seed, &format!("baseline-task-{}", ctx.task.index));
        self.head.observe(ctx.task.classes.iter().copied());
        if self.mask_ce {
            self.head.mask_absent(&ctx.task.classes);
        }
        let result = if self.kind.freezes_backbone() && self.tasks_done > 0 {
            self.train_head_only(ctx, seed)
        } else {
            self.train_network(ctx, seed).and_then(|()| {
                if self.kind.freezes_backbone() {
                    self.backbone.freeze();
                    if self.kind == BaselineKind::Fetril {
                        let train = self.features(ctx.dataset, &ctx.task.train_indices())?;
                        self.update_means(&train);
                    }
                }
                Ok(())
            })
        };
        self.head.clear_mask();
        result?;
        self.tasks_done += 1;
        Ok(TaskOutcome::default())
    }

    fn seen(&self) -> &ClassIndex {
        self.head.seen()
    }

    fn logits(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>> {
        let emb = self.backbone.infer(inputs)?;
        self.head.logits(&emb.view())
    }
}
