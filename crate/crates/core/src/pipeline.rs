//! Glue between configuration, trained artifacts and the evaluation
//! harness: designers for each method, artifact paths and the run manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::baselines::{
    baseline_designs, train_surrogate, BackpropConfig, BaselineMethod, CemConfig, Dynamics, Surrogate, SurrogateVariant,
    TrainedSurrogate,
};
use crate::compose::{build_plan, design, DesignObjective, DesignOutput, ModelRegistry, SamplerConfig};
use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::diffusion::{cosine_schedule, train, FeatureScaling, TrainedDenoiser, WindowSet};
use crate::error::{Error, Result};
use crate::eval::{random_designs, Designer, Scenario};
use crate::sim::SimConfig;

pub const PAIR_MODEL: &str = "pair";

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join("dataset.bin")
}

pub fn validation_path(dir: &Path) -> PathBuf {
    dir.join("dataset-val.bin")
}

pub fn denoiser_path(dir: &Path) -> PathBuf {
    dir.join("denoiser.ckpt")
}

pub fn surrogate_path(dir: &Path, variant: SurrogateVariant) -> PathBuf {
    dir.join(format!("surrogate-{}.ckpt", variant.name()))
}

pub fn design_path(dir: &Path, method: &str, scenario: Scenario) -> PathBuf {
    dir.join(format!("design-{method}-{}b-{}.bin", scenario.n_bodies, scenario.n_frames))
}

/// Trains the window denoiser on `dataset` as configured.
pub fn train_denoiser(
    config: &RunConfig,
    dataset: &Dataset,
    on_checkpoint: impl FnMut(&TrainedDenoiser) -> Result<()>,
) -> Result<TrainedDenoiser> {
    let scaling = FeatureScaling::default();
    let windows = WindowSet::from_dataset(dataset, config.denoiser.window_len, config.dataset.window_stride, &scaling)?;
    let schedule = cosine_schedule(config.sampler.steps)?;
    train(config.denoiser.clone(), &windows, scaling, &schedule, &config.train, on_checkpoint)
}

/// Trains a forward surrogate; `validation` trajectories are cut into
/// disjoint windows and scored after training.
pub fn train_surrogate_model(
    config: &RunConfig,
    variant: SurrogateVariant,
    dataset: &Dataset,
    validation: Option<&Dataset>,
) -> Result<TrainedSurrogate> {
    let scaling = FeatureScaling::default();
    let len = variant.window_len();
    let windows = WindowSet::from_dataset(dataset, len, config.dataset.window_stride, &scaling)?;
    let val = validation.map(|v| WindowSet::from_dataset(v, len, len, &scaling)).transpose()?;
    let backbone = variant.backbone(dataset.n_bodies, config.surrogate.base_width, config.denoiser.seed);
    train_surrogate(variant, backbone, &windows, val.as_ref(), scaling, &config.surrogate.train)
}

/// Registry holding the EMA weights of a trained denoiser as the pair model.
pub fn registry_from(trained: &TrainedDenoiser) -> Result<ModelRegistry> {
    let mut reg = ModelRegistry::new(trained.scaling);
    reg.insert(PAIR_MODEL, Arc::new(trained.ema_model()?));
    Ok(reg)
}

/// Compositional diffusion designer: time windows times body pairs.
pub struct CindmDesigner {
    pub registry: ModelRegistry,
    pub sampler: SamplerConfig,
    pub objective: DesignObjective,
    pub t_tr: usize,
    pub t_q: usize,
}

impl Designer for CindmDesigner {
    fn design(&self, scenario: Scenario, n_runs: usize, seed: u64) -> Result<DesignOutput> {
        let plan = build_plan(scenario.n_bodies, scenario.n_frames, self.t_tr, self.t_q, &self.registry, PAIR_MODEL)?;
        let cfg = SamplerConfig { seed, ..self.sampler };
        design(&plan, &self.objective, &cfg, &self.registry, n_runs)
    }

    fn unsupported(&self, scenario: Scenario) -> Option<String> {
        crate::compose::time_windows(scenario.n_frames, self.t_tr, self.t_q)
            .err()
            .map(|e| e.to_string())
    }
}

/// CEM or backprop through a trained surrogate.
pub struct SurrogateDesigner {
    pub method: BaselineMethod,
    pub model: Arc<Surrogate<f32>>,
    pub cem: CemConfig,
    pub backprop: BackpropConfig,
    pub sim: SimConfig,
    pub objective: DesignObjective,
}

impl Designer for SurrogateDesigner {
    fn design(&self, scenario: Scenario, n_runs: usize, seed: u64) -> Result<DesignOutput> {
        baseline_designs(
            self.method,
            self.model.as_ref(),
            &self.objective,
            &self.cem,
            &self.backprop,
            &self.sim,
            scenario.n_frames,
            n_runs,
            seed,
        )
    }

    fn unsupported(&self, scenario: Scenario) -> Option<String> {
        let nb = Dynamics::n_bodies(self.model.as_ref());
        (nb != scenario.n_bodies).then(|| format!("surrogate trained on {nb} bodies"))
    }
}

/// Initial states drawn like the training data.
pub struct RandomDesigner {
    pub sim: SimConfig,
}

impl Designer for RandomDesigner {
    fn design(&self, scenario: Scenario, n_runs: usize, seed: u64) -> Result<DesignOutput> {
        random_designs(&self.sim, scenario.n_bodies, scenario.n_frames, n_runs, seed)
    }
}

/// Loads a surrogate checkpoint, mapping a missing file to `None`.
pub fn load_surrogate(path: &Path) -> Result<Option<Arc<Surrogate<f32>>>> {
    match TrainedSurrogate::load(path) {
        Ok(t) => Ok(Some(Arc::new(t.ema_model()?))),
        Err(Error::MissingCheckpoint(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn load_denoiser(path: &Path) -> Result<Option<TrainedDenoiser>> {
    match TrainedDenoiser::load(path) {
        Ok(t) => Ok(Some(t)),
        Err(Error::MissingCheckpoint(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub config_digest: String,
    pub git_describe: Option<String>,
    pub started: String,
    pub finished: String,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("manifest.json")
    }

    pub fn load_or_default(dir: &Path) -> Result<Self> {
        match std::fs::read(Self::path(dir)) {
            Ok(bytes) => Ok(serde_json::from_slice(&bytes)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(e.into()),
        }
    }

    /// Appends `entry` to the manifest in `dir`.
    pub fn record(dir: &Path, entry: ManifestEntry) -> Result<()> {
        let mut m = Self::load_or_default(dir)?;
        m.entries.push(entry);
        std::fs::write(Self::path(dir), serde_json::to_vec_pretty(&m)?)?;
        Ok(())
    }
}

pub fn timestamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

/// `git describe --always --dirty` of the working directory, if available.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}
