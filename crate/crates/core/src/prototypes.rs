//! Per-extractor class statistics and the projections built on them.
//!
//! A class prototype holds, for every extractor slot of the ensemble, the
//! mean and population standard deviation of that class's embeddings, or
//! nothing when the class has not been observed since the slot was filled.
//! Pseudo-features move a real embedding of a present class onto the
//! distribution of an absent one, segment by segment:
//!
//! ```text
//! F_hat = mu_c + (F - mu_y) / sigma_y * sigma_c
//! ```
//!
//! Unknown target segments fall back to an [`EstimationHeuristic`].

use std::collections::BTreeMap;
use std::fmt::Write as _;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Lower bound applied to every stored standard deviation.
pub const STD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SegmentStats {
    /// Mean and floored population standard deviation of the rows.
    pub fn from_embeddings(embeddings: &ArrayView2<f64>) -> Option<Self> {
        if embeddings.nrows() < 2 {
            return None;
        }
        let mean = embeddings.mean_axis(Axis(0))?;
        let var = embeddings.var_axis(Axis(0), 0.0);
        Some(Self {
            mean: mean.to_vec(),
            std: var.iter().map(|v| v.sqrt().max(STD_FLOOR)).collect(),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPrototype {
    /// Indexed by ensemble slot.
    pub entries: Vec<Option<SegmentStats>>,
}

impl ClassPrototype {
    pub fn is_complete(&self) -> bool {
        self.entries.iter().all(Option::is_some)
    }
}

/// Prototypes of every seen class, with one segment per ensemble slot.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    dims: Vec<usize>,
    classes: BTreeMap<usize, ClassPrototype>,
}

impl PrototypeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn slot_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn num_slots(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    pub fn slot_range(&self, slot: usize) -> std::ops::Range<usize> {
        let start: usize = self.dims[..slot].iter().sum();
        start..start + self.dims[slot]
    }

    /// Appends a slot that no class knows yet.
    pub fn add_slot(&mut self, dim: usize) {
        self.dims.push(dim);
        for proto in self.classes.values_mut() {
            proto.entries.push(None);
        }
    }

    /// Forgets every class's statistics for `slot`; used when the extractor
    /// in that slot is replaced.
    pub fn reset_slot(&mut self, slot: usize, dim: usize) {
        self.dims[slot] = dim;
        for proto in self.classes.values_mut() {
            proto.entries[slot] = None;
        }
    }

    pub fn classes(&self) -> impl Iterator<Item = (&usize, &ClassPrototype)> {
        self.classes.iter()
    }

    pub fn prototype(&self, class: usize) -> Option<&ClassPrototype> {
        self.classes.get(&class)
    }

    pub fn get(&self, class: usize, slot: usize) -> Option<&SegmentStats> {
        self.classes.get(&class)?.entries.get(slot)?.as_ref()
    }

    pub fn is_known(&self, class: usize, slot: usize) -> bool {
        self.get(class, slot).is_some()
    }

    /// Overwrites the statistics of `class` in `slot`. Returns `false` (and
    /// leaves the store untouched) with fewer than two samples.
    pub fn update(&mut self, slot: usize, class: usize, embeddings: &ArrayView2<f64>) -> Result<bool> {
        if slot >= self.dims.len() {
            return Err(Error::InvalidArgument(format!("no extractor slot {slot}")));
        }
        if embeddings.ncols() != self.dims[slot] {
            return Err(Error::dims(format!("prototype slot {slot}"), self.dims[slot], embeddings.ncols()));
        }
        let Some(stats) = SegmentStats::from_embeddings(embeddings) else {
            log::warn!("class {class}: fewer than two samples, prototype for slot {slot} not updated");
            return Ok(false);
        };
        let slots = self.dims.len();
        let proto = self.classes.entry(class).or_insert_with(|| ClassPrototype {
            entries: vec![None; slots],
        });
        proto.entries[slot] = Some(stats);
        Ok(true)
    }

    /// One line per known (class, slot) pair.
    pub fn dump_text(&self) -> String {
        let mut out = String::new();
        let fmt_vec = |v: &[f64]| v.iter().map(|x| format!("{x:.6e}")).collect::<Vec<_>>().join(" ");
        for (class, proto) in &self.classes {
            for (slot, entry) in proto.entries.iter().enumerate() {
                if let Some(s) = entry {
                    let _ = writeln!(
                        out,
                        "class={class} slot={slot} mean=[{}] std=[{}]",
                        fmt_vec(&s.mean),
                        fmt_vec(&s.std)
                    );
                }
            }
        }
        out
    }
}

/// Recomputes the statistics of each listed class for one extractor slot.
pub fn update_prototypes(
    store: &mut PrototypeStore,
    slot: usize,
    embeddings_by_class: &BTreeMap<usize, ndarray::Array2<f64>>,
) -> Result<()> {
    for (&class, emb) in embeddings_by_class {
        store.update(slot, class, &emb.view())?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimationKind {
    Zeros,
    Random,
    #[serde(alias = "original")]
    OriginalFeatures,
}

impl std::str::FromStr for EstimationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zeros" => Ok(Self::Zeros),
            "random" => Ok(Self::Random),
            "original" | "original_features" => Ok(Self::OriginalFeatures),
            other => Err(Error::InvalidArgument(format!("unknown estimation heuristic `{other}`"))),
        }
    }
}

/// How the mean of an unknown prototype segment is estimated. The standard
/// deviation of such a segment is fixed to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationHeuristic {
    pub kind: EstimationKind,
    /// Standard deviation of the isotropic normal used by `Random`.
    #[serde(default = "default_scale")]
    pub random_scale: f64,
    /// For `OriginalFeatures`: substitute the estimate into the projection
    /// formula instead of passing the segment through unchanged.
    #[serde(default)]
    pub literal_original: bool,
}

fn default_scale() -> f64 {
    40.0
}

impl Default for EstimationHeuristic {
    fn default() -> Self {
        Self::new(EstimationKind::OriginalFeatures)
    }
}

impl EstimationHeuristic {
    pub fn new(kind: EstimationKind) -> Self {
        Self {
            kind,
            random_scale: default_scale(),
            literal_original: false,
        }
    }

    pub fn random(scale: f64) -> Self {
        Self {
            random_scale: scale,
            ..Self::new(EstimationKind::Random)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.random_scale > 0.0) {
            return Err(Error::InvalidArgument("random_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Estimated mean of an unknown segment for the sample `segment`.
pub fn estimate_missing_mean(heuristic: &EstimationHeuristic, segment: &ArrayView1<f64>, rng: &mut Rng) -> Array1<f64> {
    match heuristic.kind {
        EstimationKind::Zeros => Array1::zeros(segment.len()),
        EstimationKind::Random => {
            let normal = Normal::new(0.0, heuristic.random_scale).expect("positive scale");
            Array1::from_shape_fn(segment.len(), |_| normal.sample(rng))
        }
        EstimationKind::OriginalFeatures => segment.to_owned(),
    }
}

/// Moves `feature` (a concatenated ensemble embedding of a `source` sample)
/// onto the distribution of `target`, one extractor segment at a time.
pub fn project_pseudo_feature(
    feature: &ArrayView1<f64>,
    source: usize,
    target: usize,
    store: &PrototypeStore,
    heuristic: &EstimationHeuristic,
    rng: &mut Rng,
) -> Result<Array1<f64>> {
    if feature.len() != store.total_dim() {
        return Err(Error::dims("pseudo-feature input", store.total_dim(), feature.len()));
    }
    let mut out = Array1::zeros(feature.len());
    for slot in 0..store.num_slots() {
        let range = store.slot_range(slot);
        let seg = feature.slice(ndarray::s![range.clone()]);
        let src = store
            .get(source, slot)
            .ok_or(Error::MissingStatistics { class: source, slot })?;
        let mut dst = out.slice_mut(ndarray::s![range]);
        match store.get(target, slot) {
            Some(tgt) => {
                for i in 0..seg.len() {
                    dst[i] = tgt.mean[i] + (seg[i] - src.mean[i]) / src.std[i] * tgt.std[i];
                }
            }
            None if heuristic.kind == EstimationKind::OriginalFeatures && !heuristic.literal_original => {
                dst.assign(&seg);
            }
            None => {
                let mu = estimate_missing_mean(heuristic, &seg, rng);
                for i in 0..seg.len() {
                    dst[i] = mu[i] + (seg[i] - src.mean[i]) / src.std[i];
                }
            }
        }
    }
    Ok(out)
}

/// Mean-shift translation: `F + mu_target - mu_source`.
pub fn translate_feature(feature: &ArrayView1<f64>, mu_source: &[f64], mu_target: &[f64]) -> Result<Array1<f64>> {
    if mu_source.len() != feature.len() || mu_target.len() != feature.len() {
        return Err(Error::dims("translation means", feature.len(), mu_source.len().min(mu_target.len())));
    }
    Ok(Array1::from_shape_fn(feature.len(), |i| feature[i] + (mu_target[i] - mu_source[i])))
}
