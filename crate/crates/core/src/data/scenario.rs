use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::ClassPools;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Cil,
    EfcirUniform,
    EfcirBeta,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::Cil => "cil",
            ScenarioKind::EfcirUniform => "efcir_uniform",
            ScenarioKind::EfcirBeta => "efcir_beta",
        }
    }
}

impl std::str::FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "cil" => Ok(ScenarioKind::Cil),
            "efcir_u" | "efcir_uniform" => Ok(ScenarioKind::EfcirUniform),
            "efcir_b" | "efcir_beta" => Ok(ScenarioKind::EfcirBeta),
            other => Err(Error::InvalidArgument(format!("unknown scenario kind `{other}`"))),
        }
    }
}

/// One incremental task: its classes and the dataset rows allocated to them.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamTask {
    pub index: usize,
    pub classes: Vec<usize>,
    pub train: BTreeMap<usize, Vec<usize>>,
    pub val: BTreeMap<usize, Vec<usize>>,
}

impl StreamTask {
    pub fn train_indices(&self) -> Vec<usize> {
        self.train.values().flatten().copied().collect()
    }

    pub fn val_indices(&self) -> Vec<usize> {
        self.val.values().flatten().copied().collect()
    }

    pub fn train_len(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub kind: ScenarioKind,
    pub seed: u64,
    pub class_universe: Vec<usize>,
    pub repetition_probs: Option<BTreeMap<usize, f64>>,
    /// Sample limit of every incremental task (absent for CIL).
    pub task_budget: Option<usize>,
    pub tasks: Vec<StreamTask>,
}

impl Scenario {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn mean_classes_per_task(&self) -> f64 {
        if self.tasks.is_empty() {
            return 0.0;
        }
        self.tasks.iter().map(|t| t.classes.len()).sum::<usize>() as f64 / self.tasks.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaParams {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for BetaParams {
    fn default() -> Self {
        Self {
            alpha: 3.5,
            beta: 20.0,
        }
    }
}

impl BetaParams {
    pub fn mean(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }
}

/// I.i.d. `Beta(alpha, beta)` draws via `X / (X + Y)` with
/// `X ~ Gamma(alpha)`, `Y ~ Gamma(beta)`.
pub fn sample_beta_probs(params: BetaParams, num_classes: usize, seed: u64) -> Result<Vec<f64>> {
    if !(params.alpha > 0.0 && params.beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta parameters must be positive, got ({}, {})",
            params.alpha, params.beta
        )));
    }
    let ga = Gamma::new(params.alpha, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let gb = Gamma::new(params.beta, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng::stream(seed, "beta-probs");
    Ok((0..num_classes)
        .map(|_| loop {
            let x = ga.sample(&mut r);
            let y = gb.sample(&mut r);
            let p = x / (x + y);
            // The open interval keeps every class reachable and every draw finite.
            if p > 0.0 && p < 1.0 {
                break p;
            }
        })
        .collect())
}

pub fn uniform_probs(pools: &ClassPools, p: f64) -> BTreeMap<usize, f64> {
    pools.keys().map(|&c| (c, p)).collect()
}

fn shuffled_universe(pools: &ClassPools, seed: u64) -> Vec<usize> {
    let mut universe: Vec<usize> = pools.keys().copied().collect();
    universe.shuffle(&mut rng::stream(seed, "class-order"));
    universe
}

/// Splits one class's allocation into train and validation parts.
fn split_val(mut alloc: Vec<usize>, val_frac: f64, r: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    alloc.shuffle(r);
    let n_val = ((alloc.len() as f64) * val_frac).round() as usize;
    let n_val = n_val.min(alloc.len().saturating_sub(1));
    let mut val = alloc[..n_val].to_vec();
    let mut train = alloc[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..1.0).contains(&v) {
        return Err(Error::InvalidArgument(format!("{name} must lie in [0, 1), got {v}")));
    }
    Ok(())
}

/// Disjoint class-incremental stream: `initial_classes` in task 0 followed by
/// `num_tasks` tasks of `classes_per_task` unseen classes each. Every task
/// uses all training data of its classes.
pub fn gen_cil(
    pools: &ClassPools,
    initial_classes: usize,
    num_tasks: usize,
    classes_per_task: usize,
    val_frac: f64,
    seed: u64,
) -> Result<Scenario> {
    if pools.is_empty() {
        return Err(Error::Empty("class pools".into()));
    }
    check_fraction("val_frac", val_frac)?;
    let needed = initial_classes + num_tasks * classes_per_task;
    if initial_classes == 0 || needed != pools.len() || (num_tasks > 0 && classes_per_task == 0) {
        return Err(Error::Scenario(format!(
            "CIL needs initial + tasks * per_task == classes, got {initial_classes} + {num_tasks} * {classes_per_task} vs {}",
            pools.len()
        )));
    }
    let universe = shuffled_universe(pools, seed);
    let mut tasks = Vec::with_capacity(num_tasks + 1);
    let mut start = 0;
    for t in 0..=num_tasks {
        let width = if t == 0 { initial_classes } else { classes_per_task };
        let mut classes = universe[start..start + width].to_vec();
        start += width;
        classes.sort_unstable();
        let mut train = BTreeMap::new();
        let mut val = BTreeMap::new();
        for &c in &classes {
            let mut r = rng::substream(seed, "cil-val", ((t as u64) << 32) | c as u64);
            let (tr, va) = split_val(pools[&c].clone(), val_frac, &mut r);
            train.insert(c, tr);
            val.insert(c, va);
        }
        tasks.push(StreamTask {
            index: t,
            classes,
            train,
            val,
        });
    }
    Ok(Scenario {
        kind: ScenarioKind::Cil,
        seed,
        class_universe: universe,
        repetition_probs: None,
        task_budget: None,
        tasks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfcirParams {
    pub initial_classes: usize,
    pub num_inc_tasks: usize,
    pub task_budget: usize,
    #[serde(default = "default_initial_frac")]
    pub initial_data_frac: f64,
    #[serde(default = "default_val_frac")]
    pub val_frac: f64,
}

fn default_initial_frac() -> f64 {
    0.5
}
fn default_val_frac() -> f64 {
    0.1
}

impl EfcirParams {
    pub fn new(initial_classes: usize, num_inc_tasks: usize, task_budget: usize) -> Self {
        Self {
            initial_classes,
            num_inc_tasks,
            task_budget,
            initial_data_frac: default_initial_frac(),
            val_frac: default_val_frac(),
        }
    }
}

const COVERAGE_ATTEMPTS: u64 = 256;

/// Stream with class repetition. Task 0 holds the initial class block with a
/// fraction of each class's data; every later task draws each class
/// independently with its repetition probability and splits the sample
/// budget evenly among the present classes, preferring samples that have not
/// been streamed yet. A task where no class fires is redrawn, and the whole
/// stream is redrawn (with a derived seed) if some class never appears.
pub fn gen_efcir(
    pools: &ClassPools,
    params: EfcirParams,
    probs: &BTreeMap<usize, f64>,
    kind: ScenarioKind,
    seed: u64,
) -> Result<Scenario> {
    if pools.is_empty() || pools.values().all(Vec::is_empty) {
        return Err(Error::Empty("class pools".into()));
    }
    if kind == ScenarioKind::Cil {
        return Err(Error::Scenario("gen_efcir builds repetition streams only".into()));
    }
    check_fraction("val_frac", params.val_frac)?;
    if !(params.initial_data_frac > 0.0 && params.initial_data_frac <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "initial_data_frac must lie in (0, 1], got {}",
            params.initial_data_frac
        )));
    }
    if params.initial_classes == 0 || params.initial_classes > pools.len() {
        return Err(Error::Scenario(format!(
            "initial block of {} classes does not fit {} classes",
            params.initial_classes,
            pools.len()
        )));
    }
    if params.task_budget < pools.len() {
        return Err(Error::Scenario(format!(
            "task budget {} is below the number of classes {}",
            params.task_budget,
            pools.len()
        )));
    }
    for &c in pools.keys() {
        match probs.get(&c) {
            Some(&p) if p > 0.0 && p <= 1.0 => {}
            Some(&p) => {
                return Err(Error::InvalidArgument(format!(
                    "repetition probability of class {c} must lie in (0, 1], got {p}"
                )))
            }
            None => return Err(Error::InvalidArgument(format!("missing probability for class {c}"))),
        }
    }
    if pools.values().any(|p| p.len() < 2) {
        return Err(Error::Scenario("every class needs at least two training samples".into()));
    }

    for attempt in 0..COVERAGE_ATTEMPTS {
        let inner_seed = if attempt == 0 {
            seed
        } else {
            rng::mix64(seed ^ rng::mix64(attempt))
        };
        let tasks = efcir_tasks(pools, &params, probs, inner_seed, seed);
        let covered: BTreeSet<usize> = tasks.iter().flat_map(|t| t.classes.iter().copied()).collect();
        if covered.len() == pools.len() {
            return Ok(Scenario {
                kind,
                seed,
                class_universe: shuffled_universe(pools, seed),
                repetition_probs: Some(probs.clone()),
                task_budget: Some(params.task_budget),
                tasks,
            });
        }
    }
    Err(Error::Scenario(format!(
        "no stream covering every class after {COVERAGE_ATTEMPTS} attempts"
    )))
}

/// Per-class sampler that hands out unstreamed samples first.
struct ClassSampler {
    pool: Vec<usize>,
    fresh: Vec<usize>,
}

impl ClassSampler {
    fn new(pool: &[usize], r: &mut Rng) -> Self {
        let mut fresh = pool.to_vec();
        fresh.shuffle(r);
        // popped from the back
        fresh.reverse();
        Self {
            pool: pool.to_vec(),
            fresh,
        }
    }

    fn draw(&mut self, count: usize, r: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            match self.fresh.pop() {
                Some(i) => out.push(i),
                None => break,
            }
        }
        if out.len() < count {
            let taken: BTreeSet<usize> = out.iter().copied().collect();
            let rest: Vec<usize> = self.pool.iter().copied().filter(|i| !taken.contains(i)).collect();
            out.extend(rest.choose_multiple(r, count - out.len()).copied());
        }
        out
    }
}

fn efcir_tasks(
    pools: &ClassPools,
    params: &EfcirParams,
    probs: &BTreeMap<usize, f64>,
    inner_seed: u64,
    seed: u64,
) -> Vec<StreamTask> {
    // The class order and initial block depend only on the caller's seed so a
    // coverage redraw never changes task 0's class set.
    let universe = shuffled_universe(pools, seed);
    let mut alloc_rng = rng::stream(inner_seed, "efcir-alloc");
    let mut samplers: BTreeMap<usize, ClassSampler> = pools
        .iter()
        .map(|(&c, pool)| (c, ClassSampler::new(pool, &mut alloc_rng)))
        .collect();

    let mut tasks = Vec::with_capacity(params.num_inc_tasks + 1);
    let mut initial: Vec<usize> = universe[..params.initial_classes].to_vec();
    initial.sort_unstable();
    let mut train = BTreeMap::new();
    let mut val = BTreeMap::new();
    let mut val_rng = rng::stream(inner_seed, "efcir-val");
    for &c in &initial {
        let n = ((pools[&c].len() as f64) * params.initial_data_frac).round() as usize;
        let n = n.clamp(2, pools[&c].len());
        let alloc = samplers.get_mut(&c).expect("sampler").draw(n, &mut alloc_rng);
        let (tr, va) = split_val(alloc, params.val_frac, &mut val_rng);
        train.insert(c, tr);
        val.insert(c, va);
    }
    tasks.push(StreamTask {
        index: 0,
        classes: initial,
        train,
        val,
    });

    let mut presence_rng = rng::stream(inner_seed, "efcir-presence");
    let sorted: Vec<usize> = pools.keys().copied().collect();
    for t in 1..=params.num_inc_tasks {
        let present = loop {
            let present: Vec<usize> = sorted
                .iter()
                .copied()
                .filter(|c| presence_rng.random::<f64>() < probs[c])
                .collect();
            if !present.is_empty() {
                break present;
            }
        };
        let k = present.len();
        let base = params.task_budget / k;
        let extra = params.task_budget % k;
        let min_pool = present.iter().map(|c| pools[c].len()).min().unwrap_or(0);
        let mut train = BTreeMap::new();
        let mut val = BTreeMap::new();
        for (i, &c) in present.iter().enumerate() {
            let quota = (base + usize::from(i < extra)).min(min_pool);
            let alloc = samplers.get_mut(&c).expect("sampler").draw(quota, &mut alloc_rng);
            let (tr, va) = split_val(alloc, params.val_frac, &mut val_rng);
            train.insert(c, tr);
            val.insert(c, va);
        }
        tasks.push(StreamTask {
            index: t,
            classes: present,
            train,
            val,
        });
    }
    tasks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pools(classes: usize, per_class: usize) -> ClassPools {
        (0..classes)
            .map(|c| (c, (c * per_class..(c + 1) * per_class).collect()))
            .collect()
    }

    #[test]
    fn cil_partition() {
        let p = pools(100, 20);
        let s = gen_cil(&p, 50, 10, 5, 0.1, 3).unwrap();
        assert_eq!(s.tasks.len(), 11);
        assert_eq!(s.tasks[0].classes.len(), 50);
        let mut all = BTreeSet::new();
        for t in &s.tasks {
            for c in &t.classes {
                assert!(all.insert(*c), "class {c} repeated");
            }
            assert!(t.classes.len() == 50 || t.classes.len() == 5);
        }
        assert_eq!(all.len(), 100);
        let mut initial = s.class_universe[..50].to_vec();
        initial.sort_unstable();
        assert_eq!(initial, s.tasks[0].classes);
    }

    #[test]
    fn cil_degenerate_joint() {
        let p = pools(6, 20);
        let s = gen_cil(&p, 6, 0, 0, 0.1, 0).unwrap();
        assert_eq!(s.tasks.len(), 1);
        assert_eq!(s.tasks[0].classes, (0..6).collect::<Vec<_>>());
    }

    #[test]
    fn cil_mismatch_is_error() {
        assert!(gen_cil(&pools(10, 20), 5, 2, 2, 0.1, 0).is_err());
    }

    #[test]
    fn cil_val_split_disjoint_ten_percent() {
        let s = gen_cil(&pools(4, 40), 2, 1, 2, 0.1, 5).unwrap();
        for t in &s.tasks {
            for c in &t.classes {
                assert_eq!(t.val[c].len(), 4);
                assert_eq!(t.train[c].len(), 36);
                assert!(t.val[c].iter().all(|i| !t.train[c].contains(i)));
            }
        }
    }

    #[test]
    fn forced_presence_fills_budget_evenly() {
        let p = pools(100, 500);
        let params = EfcirParams::new(50, 5, 2000);
        let s = gen_efcir(&p, params, &uniform_probs(&p, 1.0), ScenarioKind::EfcirUniform, 1).unwrap();
        for t in &s.tasks[1..] {
            assert_eq!(t.classes.len(), 100);
            for c in &t.classes {
                assert_eq!(t.train[c].len() + t.val[c].len(), 20);
            }
        }
        assert_eq!(s.tasks[0].classes.len(), 50);
        assert_eq!(s.tasks[0].train_len() + s.tasks[0].val_indices().len(), 50 * 250);
    }

    #[test]
    fn efcir_prefers_unstreamed_samples() {
        let p = pools(4, 30);
        let mut params = EfcirParams::new(2, 20, 40);
        params.val_frac = 0.0;
        let s = gen_efcir(&p, params, &uniform_probs(&p, 0.5), ScenarioKind::EfcirUniform, 11).unwrap();
        // Every sample must be streamed once the budget has covered each pool.
        let streamed: BTreeSet<usize> = s.tasks.iter().flat_map(|t| t.train_indices()).collect();
        assert_eq!(streamed.len(), 120);
    }

    #[test]
    fn efcir_budget_below_classes_is_error() {
        let p = pools(10, 30);
        assert!(gen_efcir(&p, EfcirParams::new(5, 3, 9), &uniform_probs(&p, 0.2), ScenarioKind::EfcirUniform, 0).is_err());
    }

    #[test]
    fn beta_support_and_symmetry() {
        let draws = sample_beta_probs(BetaParams { alpha: 2.0, beta: 2.0 }, 20_000, 4).unwrap();
        assert!(draws.iter().all(|&p| p > 0.0 && p < 1.0));
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(sample_beta_probs(BetaParams { alpha: 0.0, beta: 1.0 }, 3, 0).is_err());
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("efcir-u".parse::<ScenarioKind>().unwrap(), ScenarioKind::EfcirUniform);
        assert_eq!("EFCIR-B".parse::<ScenarioKind>().unwrap(), ScenarioKind::EfcirBeta);
        assert_eq!("cil".parse::<ScenarioKind>().unwrap(), ScenarioKind::Cil);
        assert!("x".parse::<ScenarioKind>().is_err());
    }
}
