use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{BaselineConfig, BaselineKind};
use crate::data::{
    gen_cil, gen_efcir, sample_beta_probs, uniform_probs, BetaParams, ClassPools, DatasetSpec, EfcirParams, Manifest,
    Scenario, ScenarioKind,
};
use crate::error::{Error, Result};
use crate::horde::{GrowthRule, HordeConfig};

/// A method name such as `ft`, `horde_m` or `ewc_masked`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct MethodName {
    pub base: MethodBase,
    pub masked: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodBase {
    Baseline(BaselineKind),
    Horde(GrowthRule),
}

impl std::str::FromStr for MethodName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (stem, masked) = match s.strip_suffix("_masked") {
            Some(stem) => (stem, true),
            None => (s, false),
        };
        let base = match stem {
            "horde_m" => MethodBase::Horde(GrowthRule::ClassUnion),
            "horde_c" => MethodBase::Horde(GrowthRule::ErrorRate),
            other => MethodBase::Baseline(other.parse().map_err(|_| Error::UnknownMethod(s.to_string()))?),
        };
        Ok(Self { base, masked })
    }
}

impl std::fmt::Display for MethodName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let stem = match self.base {
            MethodBase::Baseline(k) => k.as_str(),
            MethodBase::Horde(GrowthRule::ClassUnion) => "horde_m",
            MethodBase::Horde(GrowthRule::ErrorRate) => "horde_c",
        };
        if self.masked {
            write!(f, "{stem}_masked")
        } else {
            f.write_str(stem)
        }
    }
}

/// How to obtain the task stream of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Use this manifest instead of generating a stream.
    pub manifest: Option<PathBuf>,
    pub kind: ScenarioKind,
    pub initial_classes: usize,
    /// Number of tasks after the initial one.
    pub tasks: usize,
    /// Classes per incremental task (class-incremental streams).
    pub classes_per_task: usize,
    /// Samples per incremental task (repetition streams).
    pub budget: usize,
    /// Repetition probability of every class (uniform streams).
    pub p: f64,
    /// Beta distribution of per-class repetition probabilities.
    pub beta: BetaParams,
    pub val_frac: f64,
    pub initial_data_frac: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            kind: ScenarioKind::Cil,
            initial_classes: 10,
            tasks: 5,
            classes_per_task: 2,
            budget: 400,
            p: 0.15,
            beta: BetaParams::default(),
            val_frac: 0.1,
            initial_data_frac: 0.5,
        }
    }
}

impl ScenarioConfig {
    pub fn generate(&self, pools: &ClassPools, seed: u64) -> Result<Scenario> {
        match self.kind {
            ScenarioKind::Cil => gen_cil(
                pools,
                self.initial_classes,
                self.tasks,
                self.classes_per_task,
                self.val_frac,
                seed,
            ),
            kind => {
                let params = EfcirParams {
                    initial_classes: self.initial_classes,
                    num_inc_tasks: self.tasks,
                    task_budget: self.budget,
                    initial_data_frac: self.initial_data_frac,
                    val_frac: self.val_frac,
                };
                let probs = if kind == ScenarioKind::EfcirUniform {
                    if !(0.0..=1.0).contains(&self.p) || self.p == 0.0 {
                        return Err(Error::InvalidArgument(format!("p must lie in (0, 1], got {}", self.p)));
                    }
                    uniform_probs(pools, self.p)
                } else {
                    let draws = sample_beta_probs(self.beta, pools.len(), seed)?;
                    pools.keys().copied().zip(draws).collect()
                };
                gen_efcir(pools, params, &probs, kind, seed)
            }
        }
    }
}

/// Everything a `run` needs. Output location and parallelism are not part
/// of the hashed configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetSpec,
    /// Fraction of every class held out for evaluation.
    pub holdout_frac: f64,
    pub scenario: ScenarioConfig,
    pub horde: HordeConfig,
    pub baselines: BaselineConfig,
    #[serde(skip_serializing)]
    pub output: Option<PathBuf>,
    #[serde(skip_serializing)]
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            methods: vec!["horde_m".into()],
            seeds: vec![1],
            dataset: DatasetSpec::toy(0),
            holdout_frac: 0.2,
            scenario: ScenarioConfig::default(),
            horde: HordeConfig::default(),
            baselines: BaselineConfig::default(),
            output: None,
            threads: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        // Relative manifest paths are relative to the config file.
        if let (Some(m), Some(dir)) = (cfg.scenario.manifest.as_mut(), path.parent()) {
            if m.is_relative() {
                *m = dir.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn method_names(&self) -> Result<Vec<MethodName>> {
        self.methods.iter().map(|m| m.parse()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        self.method_names()?;
        self.dataset.validate()?;
        if !(0.0..1.0).contains(&self.holdout_frac) || self.holdout_frac == 0.0 {
            return Err(Error::Config("holdout_frac must lie in (0, 1)".into()));
        }
        self.horde.validate()?;
        self.baselines.validate()
    }

    /// The manifest named by the scenario section, if any.
    pub fn manifest(&self) -> Result<Option<Manifest>> {
        self.scenario.manifest.as_deref().map(Manifest::read).transpose()
    }

    /// Hex SHA-256 of the canonical JSON form of the configuration.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_string(&serde_json::to_value(self)?)?;
        Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
    }
}
