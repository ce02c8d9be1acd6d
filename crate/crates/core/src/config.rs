//! Run configuration: one TOML file with a section per typed config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::baselines::{BackpropConfig, CemConfig, SurrogateVariant};
use crate::compose::{DesignObjective, SamplerConfig};
use crate::denoiser::DenoiserConfig;
use crate::diffusion::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{Scenario, SweepKind, TABLE_SCENARIOS};
use crate::sim::SimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_sims: usize,
    /// Extra simulations held out for surrogate validation.
    pub n_val_sims: usize,
    /// Window stride used when slicing trajectories for training.
    pub window_stride: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_sims: 200,
            n_val_sims: 20,
            window_stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub base_width: usize,
    pub train: TrainConfig,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            base_width: 16,
            train: TrainConfig {
                lr: 5e-4,
                total_steps: 10_000,
                lr_decay_every: 0,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_runs: usize,
    /// Window length of the trained denoiser.
    pub t_tr: usize,
    /// Stride between composed time windows.
    pub t_q: usize,
    pub scenarios: Vec<Scenario>,
    pub methods: Vec<String>,
    /// Surrogate variant used by the CEM and backprop rows.
    pub surrogate: SurrogateVariant,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_runs: 100,
            t_tr: 24,
            t_q: 10,
            scenarios: TABLE_SCENARIOS.to_vec(),
            methods: ["cindm", "cem", "backprop", "random"].map(String::from).to_vec(),
            surrogate: SurrogateVariant::MultiStep,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    pub grid: Vec<f64>,
    pub n_runs: usize,
    pub scenario: Scenario,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kind: SweepKind::Lambda,
            grid: vec![1e-3, 1e-2, 0.1, 0.4, 1.0, 10.0],
            n_runs: 100,
            scenario: Scenario::new(2, 24),
        }
    }
}

/// Every setting of a run. Missing sections and keys take their defaults;
/// unknown keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub dataset: DatasetConfig,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub surrogate: SurrogateConfig,
    pub sampler: SamplerConfig,
    pub objective: DesignObjective,
    pub cem: CemConfig,
    pub backprop: BackpropConfig,
    pub experiment: ExperimentConfig,
    pub sweep: SweepConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Sets every component seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.sim.seed = seed;
        self.denoiser.seed = seed;
        self.train.seed = seed;
        self.surrogate.train.seed = seed;
        self.sampler.seed = seed;
        self.cem.seed = seed;
        self.backprop.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.surrogate.train.validate()?;
        self.sampler.validate()?;
        self.objective.validate()?;
        self.cem.validate()?;
        self.backprop.validate()?;
        if self.dataset.n_sims == 0 || self.experiment.n_runs == 0 {
            return Err(Error::Config("n_sims and n_runs must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        crate::dataset::hex(&crate::dataset::config_digest(self))
    }
}
