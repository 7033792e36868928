use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::classes::ClassIndex;
use crate::data::{LabeledDataset, StreamTask};
use crate::error::Result;

/// One task as seen by a method.
#[derive(Clone, Copy, Debug)]
pub struct TaskContext<'a> {
    pub dataset: &'a LabeledDataset,
    pub task: &'a StreamTask,
}

/// What a method reports about its own update on one task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskOutcome {
    /// Growth decision trace, for methods that grow.
    pub decision: Option<String>,
    /// Free-form trace behind the decision.
    pub detail: Option<String>,
    pub ensemble_size: Option<usize>,
    /// Number of distinct classes covered by the method's extractors.
    pub class_union: Option<usize>,
}

/// A continual learner driven task by task by the harness.
pub trait ContinualMethod: Send {
    fn name(&self) -> String;

    fn learn_task(&mut self, ctx: &TaskContext<'_>) -> Result<TaskOutcome>;

    /// Classes the model can predict, in logit-column order.
    fn seen(&self) -> &ClassIndex;

    /// Logits over [`ContinualMethod::seen`] for each input row.
    fn logits(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>>;
}
