//! Cosine noise schedule, denoiser training and single-model ancestral
//! sampling.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::denoiser::{DenoiserConfig, UNet};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, Ema, Graph, NamedTensor, ParamStore, Tensor};
use crate::rng;
use crate::sim::FEATURES;

pub const BETA_MAX: f64 = 0.999;
const COSINE_OFFSET: f64 = 0.008;

/// Per-step noise quantities for `s = 1..=S`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

/// Cosine schedule: `alpha_bar(s) = f(s) / f(0)` with
/// `f(s) = cos^2(((s/S + 0.008) / 1.008) * pi/2)`.
pub fn cosine_schedule(steps: usize) -> Result<DiffusionSchedule> {
    if steps == 0 {
        return Err(Error::Config("diffusion schedule needs at least one step".into()));
    }
    let f = |s: usize| {
        let t = s as f64 / steps as f64;
        ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2)
            .cos()
            .powi(2)
    };
    let f0 = f(0);
    let alpha_bar: Vec<f64> = (0..=steps).map(|s| f(s) / f0).collect();
    let beta: Vec<f64> = (1..=steps)
        .map(|s| (1.0 - alpha_bar[s] / alpha_bar[s - 1]).min(BETA_MAX))
        .collect();
    let sigma = (1..=steps)
        .map(|s| {
            let var = beta[s - 1] * (1.0 - alpha_bar[s - 1]) / (1.0 - alpha_bar[s]);
            var.max(0.0).sqrt()
        })
        .collect();
    Ok(DiffusionSchedule {
        beta,
        alpha_bar,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    /// `alpha_bar(s)` for `s` in `0..=S`.
    pub fn alpha_bar(&self, s: usize) -> f64 {
        self.alpha_bar[s]
    }

    /// `beta_s` for `s` in `1..=S`.
    pub fn beta(&self, s: usize) -> f64 {
        self.beta[s - 1]
    }

    /// Posterior standard deviation for `s` in `1..=S`; zero at `s = 1`.
    pub fn sigma(&self, s: usize) -> f64 {
        self.sigma[s - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Network time input for step `s`.
    pub fn frac(&self, s: usize) -> f64 {
        s as f64 / self.steps() as f64
    }

    /// One ancestral update
    /// `z <- (z - eta * beta_s / sqrt(1 - abar_s) * (eps + guide)) / sqrt(1 - beta_s) + sigma_s * xi`,
    /// where `guide` is the guidance term already in noise space.
    ///
    /// With `clip`, the denoiser part is evaluated through the implied clean
    /// estimate `x0 = (z - sqrt(1 - abar_s) * eta * eps) / sqrt(abar_s)`,
    /// clamped to `[-clip, clip]`, and the guidance part is added unchanged.
    /// When no clamping occurs this is the same update.
    #[allow(clippy::too_many_arguments)]
    pub fn transition(
        &self,
        z: &mut [f64],
        eps: &[f64],
        guide: Option<&[f64]>,
        s: usize,
        eta: f64,
        noise: Option<&[f64]>,
        clip: Option<f64>,
    ) {
        let beta = self.beta(s);
        let ab = self.alpha_bar(s);
        let c_z = 1.0 / (1.0 - beta).sqrt();
        let c_eps = eta * beta / (1.0 - ab).sqrt();
        let sigma = self.sigma(s);
        match clip {
            None => {
                for (zi, e) in z.iter_mut().zip(eps) {
                    *zi = c_z * (*zi - c_eps * e);
                }
            }
            Some(c) => {
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
                let k_z = c_z * (1.0 - beta / (1.0 - ab));
                let k_x = c_z * beta * sa / (1.0 - ab);
                for (zi, e) in z.iter_mut().zip(eps) {
                    let x0 = ((*zi - sb * eta * e) / sa).clamp(-c, c);
                    *zi = k_z * *zi + k_x * x0;
                }
            }
        }
        if let Some(g) = guide {
            for (zi, gi) in z.iter_mut().zip(g) {
                *zi -= c_z * c_eps * gi;
            }
        }
        if let Some(xi) = noise {
            for (zi, x) in z.iter_mut().zip(xi) {
                *zi += sigma * x;
            }
        }
    }
}

/// `z_s = sqrt(abar_s) z0 + sqrt(1 - abar_s) eps`.
pub fn q_sample(z0: &[f64], s: usize, eps: &[f64], schedule: &DiffusionSchedule) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::Shape {
            op: "q_sample",
            left: vec![z0.len()],
            right: vec![eps.len()],
        });
    }
    let ab = schedule.alpha_bar(s);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(z0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Per-feature affine map from box units to the space the networks operate
/// in: `u = (z - offset) / scale`. The default maps positions in
/// `[0.1, 0.9]` and velocities in `[-0.5, 0.5]` to `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaling {
    pub offset: [f64; FEATURES],
    pub scale: [f64; FEATURES],
}

impl Default for FeatureScaling {
    fn default() -> Self {
        Self {
            offset: [0.5, 0.5, 0.0, 0.0],
            scale: [0.4, 0.4, 0.5, 0.5],
        }
    }
}

impl FeatureScaling {
    pub fn identity() -> Self {
        Self {
            offset: [0.0; FEATURES],
            scale: [1.0; FEATURES],
        }
    }

    pub fn to_model(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, v)| (v - self.offset[i % FEATURES]) / self.scale[i % FEATURES])
            .collect()
    }

    pub fn to_box(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .enumerate()
            .map(|(i, v)| v * self.scale[i % FEATURES] + self.offset[i % FEATURES])
            .collect()
    }

    /// Chain rule for a gradient taken in box units.
    pub fn grad_to_model(&self, g: &mut [f64]) {
        for (i, v) in g.iter_mut().enumerate() {
            *v *= self.scale[i % FEATURES];
        }
    }
}

/// Sliding windows over the trajectories of a dataset, in model space.
#[derive(Clone, Debug)]
pub struct WindowSet {
    pub window_len: usize,
    pub channels: usize,
    n_frames: usize,
    frames: Vec<f32>,
    starts: Vec<(usize, usize)>,
}

impl WindowSet {
    pub fn from_dataset(ds: &Dataset, window_len: usize, stride: usize, scaling: &FeatureScaling) -> Result<Self> {
        if window_len == 0 || stride == 0 {
            return Err(Error::Config("window length and stride must be positive".into()));
        }
        if ds.n_sims == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        if ds.n_frames < window_len {
            return Err(Error::Config(format!(
                "trajectories have {} frames, windows need {window_len}",
                ds.n_frames
            )));
        }
        let frames = ds
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| ((v as f64 - scaling.offset[i % FEATURES]) / scaling.scale[i % FEATURES]) as f32)
            .collect();
        let starts = (0..ds.n_sims)
            .flat_map(|s| (0..=ds.n_frames - window_len).step_by(stride).map(move |t| (s, t)))
            .collect();
        Ok(Self {
            window_len,
            channels: ds.frame_width(),
            n_frames: ds.n_frames,
            frames,
            starts,
        })
    }

    /// Windows given directly in model space, each `window_len * channels` long.
    pub fn from_windows(window_len: usize, channels: usize, windows: Vec<Vec<f32>>) -> Result<Self> {
        let n_el = window_len * channels;
        if let Some(w) = windows.iter().find(|w| w.len() != n_el) {
            return Err(Error::Shape {
                op: "window set",
                left: vec![w.len()],
                right: vec![n_el],
            });
        }
        Ok(Self {
            window_len,
            channels,
            n_frames: window_len,
            starts: (0..windows.len()).map(|i| (i, 0)).collect(),
            frames: windows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn window(&self, i: usize) -> &[f32] {
        let (s, t) = self.starts[i];
        let base = (s * self.n_frames + t) * self.channels;
        &self.frames[base..base + self.window_len * self.channels]
    }

    /// Stacks windows `idx` into `[idx.len(), window_len, channels]`.
    pub fn batch(&self, idx: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(idx.len() * self.window_len * self.channels);
        for &i in idx {
            data.extend_from_slice(self.window(i));
        }
        Tensor::new(vec![idx.len(), self.window_len, self.channels], data).expect("window shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub total_steps: usize,
    /// Step at which the first decay applies.
    pub lr_decay_start: usize,
    /// Steps between decays; 0 keeps the rate constant.
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub ema_decay: f64,
    pub log_every: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 2e-4,
            total_steps: 32_000,
            lr_decay_start: 20_000,
            lr_decay_every: 4_000,
            lr_decay_factor: 0.5,
            ema_decay: 0.95,
            log_every: 100,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || self.total_steps == 0 {
            return Err(Error::Config("batch_size, lr and total_steps must be positive".into()));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::Config(format!("ema_decay {} outside (0, 1)", self.ema_decay)));
        }
        Ok(())
    }

    /// Learning rate in effect at (0-based) `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.lr_decay_every == 0 || step < self.lr_decay_start {
            return self.lr;
        }
        let k = (step - self.lr_decay_start) / self.lr_decay_every + 1;
        self.lr * self.lr_decay_factor.powi(k as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub ema_decay: f64,
}

/// Writes the training log CSV: `step,loss,lr,ema_decay`.
pub fn write_loss_csv(records: &[LossRecord], mut w: impl Write) -> Result<()> {
    writeln!(w, "step,loss,lr,ema_decay")?;
    for r in records {
        writeln!(w, "{},{},{},{}", r.step, r.loss, r.lr, r.ema_decay)?;
    }
    Ok(())
}

/// Anything that predicts noise for a batch of model-space windows.
pub trait EpsModel: Send + Sync {
    fn window_len(&self) -> usize;
    fn channels(&self) -> usize;
    /// `z: [batch, window_len, channels]`, `fracs[b] = s / S`.
    fn predict_eps(&self, z: &Tensor<f32>, fracs: &[f64]) -> Result<Tensor<f32>>;

    /// Vector-Jacobian product `cot^T d eps / d z`, shaped like `z`.
    fn eps_vjp(&self, _z: &Tensor<f32>, _fracs: &[f64], _cot: &Tensor<f32>) -> Result<Tensor<f32>> {
        Err(Error::InvalidState("model does not provide input gradients".into()))
    }
}

impl EpsModel for UNet<f32> {
    fn window_len(&self) -> usize {
        self.config().window_len
    }

    fn channels(&self) -> usize {
        self.config().channels
    }

    fn predict_eps(&self, z: &Tensor<f32>, fracs: &[f64]) -> Result<Tensor<f32>> {
        self.predict(z, fracs)
    }

    fn eps_vjp(&self, z: &Tensor<f32>, fracs: &[f64], cot: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let p = self.params().bind(&mut g, false);
        let x = g.leaf(z.clone(), true);
        let out = self.forward(&mut g, &p, x, fracs)?;
        let c = g.constant(cot.clone());
        let prod = g.mul(out, c)?;
        let total = g.sum(prod)?;
        let mut grads = g.backward(total)?;
        Ok(grads.take(x).unwrap_or_else(|| Tensor::zeros(z.shape())))
    }
}

/// Trained denoiser: live weights, EMA shadow, optimizer state and scaling.
#[derive(Clone, Debug)]
pub struct TrainedDenoiser {
    pub model: UNet<f32>,
    pub ema: Ema<f32>,
    pub adam: AdamState<f32>,
    pub scaling: FeatureScaling,
    pub steps_done: usize,
    pub losses: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
struct DenoiserMeta {
    kind: String,
    denoiser: DenoiserConfig,
    scaling: FeatureScaling,
    ema_decay: f64,
    adam: AdamConfig,
    adam_step: u64,
    steps_done: usize,
}

impl TrainedDenoiser {
    /// Model evaluated with the EMA weights.
    pub fn ema_model(&self) -> Result<UNet<f32>> {
        UNet::from_params(self.model.config().clone(), self.ema.shadow.clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = DenoiserMeta {
            kind: "denoiser".into(),
            denoiser: self.model.config().clone(),
            scaling: self.scaling,
            ema_decay: self.ema.decay,
            adam: self.adam.config,
            adam_step: self.adam.step,
            steps_done: self.steps_done,
        };
        checkpoint_from(
            serde_json::to_value(meta).expect("metadata serializes"),
            self.model.params(),
            &self.ema.shadow,
            &self.adam,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: DenoiserMeta = serde_json::from_value(ck.metadata.clone())?;
        if meta.kind != "denoiser" {
            return Err(Error::Format(format!("checkpoint holds a {}, not a denoiser", meta.kind)));
        }
        let (params, shadow, adam) = params_from_checkpoint(ck, meta.adam, meta.adam_step)?;
        let model = UNet::from_params(meta.denoiser, params)?;
        Ok(Self {
            model,
            ema: Ema {
                decay: meta.ema_decay,
                shadow,
            },
            adam,
            scaling: meta.scaling,
            steps_done: meta.steps_done,
            losses: Vec::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

pub(crate) fn checkpoint_from(
    metadata: serde_json::Value,
    params: &ParamStore<f32>,
    shadow: &ParamStore<f32>,
    adam: &AdamState<f32>,
) -> Checkpoint {
    let mut entries = Vec::new();
    for (n, t) in params.names().iter().zip(params.tensors()) {
        entries.push(NamedTensor::from_tensor(format!("param/{n}"), t));
    }
    for (n, t) in shadow.names().iter().zip(shadow.tensors()) {
        entries.push(NamedTensor::from_tensor(format!("ema/{n}"), t));
    }
    for (n, t) in params.names().iter().zip(&adam.m) {
        entries.push(NamedTensor::from_tensor(format!("adam.m/{n}"), t));
    }
    for (n, t) in params.names().iter().zip(&adam.v) {
        entries.push(NamedTensor::from_tensor(format!("adam.v/{n}"), t));
    }
    Checkpoint { metadata, entries }
}

type Restored = (ParamStore<f32>, ParamStore<f32>, AdamState<f32>);

pub(crate) fn params_from_checkpoint(ck: &Checkpoint, adam_cfg: AdamConfig, adam_step: u64) -> Result<Restored> {
    let collect = |prefix: &str| -> Result<ParamStore<f32>> {
        let mut store = ParamStore::new();
        for (name, e) in ck.section(prefix) {
            store.add(name, e.to_tensor()?);
        }
        Ok(store)
    };
    let params = collect("param")?;
    let shadow = collect("ema")?;
    let m = collect("adam.m")?;
    let v = collect("adam.v")?;
    if shadow.names() != params.names() || m.names() != params.names() || v.names() != params.names() {
        return Err(Error::Format("checkpoint sections disagree on parameter names".into()));
    }
    let adam = AdamState {
        config: adam_cfg,
        step: adam_step,
        m: m.tensors().to_vec(),
        v: v.tensors().to_vec(),
    };
    Ok((params, shadow, adam))
}

pub(crate) fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Trains a fresh denoiser with the noise-prediction loss
/// `|| eps - eps_theta(sqrt(abar_s) z + sqrt(1 - abar_s) eps, s) ||^2`.
///
/// `on_checkpoint` is called every `config.checkpoint_every` steps.
pub fn train(
    denoiser: DenoiserConfig,
    windows: &WindowSet,
    scaling: FeatureScaling,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    on_checkpoint: impl FnMut(&TrainedDenoiser) -> Result<()>,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    let model = UNet::<f32>::new(denoiser)?;
    let state = TrainedDenoiser {
        ema: Ema::new(config.ema_decay, model.params())?,
        adam: AdamState::new(AdamConfig::with_lr(config.lr), model.params().tensors()),
        model,
        scaling,
        steps_done: 0,
        losses: Vec::new(),
    };
    resume(state, windows, schedule, config, on_checkpoint)
}

/// Continues training from `state.steps_done` up to `config.total_steps`.
/// Batches are drawn per step from `config.seed`, so an interrupted and
/// resumed run matches an uninterrupted one.
pub fn resume(
    mut state: TrainedDenoiser,
    windows: &WindowSet,
    schedule: &DiffusionSchedule,
    config: &TrainConfig,
    mut on_checkpoint: impl FnMut(&TrainedDenoiser) -> Result<()>,
) -> Result<TrainedDenoiser> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    let dc = state.model.config();
    if windows.window_len != dc.window_len || windows.channels != dc.channels {
        return Err(Error::Shape {
            op: "train windows",
            left: vec![windows.window_len, windows.channels],
            right: vec![dc.window_len, dc.channels],
        });
    }
    state.ema.decay = config.ema_decay;
    let n_el = windows.window_len * windows.channels;
    let steps = schedule.steps();

    for step in state.steps_done..config.total_steps {
        let mut rng = rng::labeled(config.seed, "train-diffusion", step as u64);
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..windows.len())).collect();
        let z0 = windows.batch(&idx);
        let s_list: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(1..=steps)).collect();
        let eps: Vec<f64> = normal_vec(&mut rng, z0.numel());
        let mut zs = Vec::with_capacity(z0.numel());
        for (b, &s) in s_list.iter().enumerate() {
            let sl = b * n_el..(b + 1) * n_el;
            let x0: Vec<f64> = z0.data()[sl.clone()].iter().map(|&v| v as f64).collect();
            zs.extend(q_sample(&x0, s, &eps[sl], schedule)?.into_iter().map(|v| v as f32));
        }
        let fracs: Vec<f64> = s_list.iter().map(|&s| schedule.frac(s)).collect();

        let mut g = Graph::<f32>::new();
        let p = state.model.params().bind(&mut g, true);
        let x = g.constant(Tensor::new(z0.shape().to_vec(), zs)?);
        let target = g.constant(Tensor::new(z0.shape().to_vec(), eps.iter().map(|&v| v as f32).collect())?);
        let pred = state.model.forward(&mut g, &p, x, &fracs)?;
        let loss_var = g.mse(pred, target)?;
        let loss = g.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss at step {step} (lr {}, steps {:?})",
                config.lr_at(step),
                &s_list[..s_list.len().min(4)]
            )));
        }
        let mut grads = g.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = p
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        state.adam.config.lr = config.lr_at(step);
        state.adam.step(state.model.params_mut().tensors_mut(), &grads)?;
        state.ema.update(state.model.params());
        state.steps_done = step + 1;

        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.total_steps) {
            log::debug!("train step {step} loss {loss:.5}");
            state.losses.push(LossRecord {
                step,
                loss,
                lr: config.lr_at(step),
                ema_decay: config.ema_decay,
            });
        }
        if config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0 {
            on_checkpoint(&state)?;
        }
    }
    Ok(state)
}

/// How the objective gradient enters the noise estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceSpace {
    /// `eps + lambda * sqrt(1 - abar_s) * grad J`.
    #[default]
    Eps,
    /// `eps + lambda * grad J`.
    Raw,
}

impl GuidanceSpace {
    pub fn factor(self, schedule: &DiffusionSchedule, s: usize) -> f64 {
        match self {
            GuidanceSpace::Eps => (1.0 - schedule.alpha_bar(s)).sqrt(),
            GuidanceSpace::Raw => 1.0,
        }
    }
}

/// Objective gradient for guided sampling: given model-space windows
/// `[batch][window_len * channels]`, return `grad J` in model space.
pub type GuidanceFn<'a> = dyn Fn(&[f64]) -> Vec<f64> + 'a;

pub struct Guidance<'a> {
    pub lambda: f64,
    pub space: GuidanceSpace,
    pub grad: &'a GuidanceFn<'a>,
}

/// Ancestral sampling of `n` windows from a single model. `clip` bounds the
/// implied clean estimate at every step (see [`DiffusionSchedule::transition`]).
///
/// Chain `i` draws all of its noise from its own stream of `seed`. The
/// returned samples are in model space, `n * window_len * channels` values.
pub fn sample(
    model: &dyn EpsModel,
    schedule: &DiffusionSchedule,
    n: usize,
    guidance: Option<&Guidance<'_>>,
    clip: Option<f64>,
    seed: u64,
) -> Result<Vec<f64>> {
    let per = model.window_len() * model.channels();
    let shape = [n, model.window_len(), model.channels()];
    let mut rngs: Vec<_> = (0..n).map(|i| chain_rng(seed, i)).collect();
    let mut z: Vec<f64> = rngs.iter_mut().flat_map(|r| normal_vec(r, per)).collect();

    for s in (1..=schedule.steps()).rev() {
        let fracs = vec![schedule.frac(s); n];
        let zt = Tensor::new(shape.to_vec(), z.iter().map(|&v| v as f32).collect())?;
        let eps: Vec<f64> = model.predict_eps(&zt, &fracs)?.data().iter().map(|&v| v as f64).collect();
        let guide = guidance.filter(|g| g.lambda != 0.0).map(|gd| {
            let f = gd.lambda * gd.space.factor(schedule, s);
            (gd.grad)(&z).into_iter().map(|g| f * g).collect::<Vec<f64>>()
        });
        let noise: Option<Vec<f64>> = (s > 1).then(|| rngs.iter_mut().flat_map(|r| normal_vec(r, per)).collect());
        schedule.transition(&mut z, &eps, guide.as_deref(), s, 1.0, noise.as_deref(), clip);
        if let Some(bad) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sample diverged at step {s} (index {bad})")));
        }
    }
    Ok(z)
}

/// Noise stream of sampling chain `i`.
pub fn chain_rng(seed: u64, i: usize) -> rand_chacha::ChaCha8Rng {
    rng::labeled(seed, "chain", i as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_abar(s: usize, steps: usize) -> f64 {
        let f = |s: f64| (((s / steps as f64) + 0.008) / 1.008 * std::f64::consts::PI / 2.0).cos().powi(2);
        f(s as f64) / f(0.0)
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let sch = cosine_schedule(1000).unwrap();
        assert_eq!(sch.alpha_bar(0), 1.0);
        assert!(sch.alpha_bar(1000) < 1e-3);
        for s in 1..=1000 {
            assert!(sch.alpha_bar(s) < sch.alpha_bar(s - 1));
            assert!(sch.beta(s) > 0.0 && sch.beta(s) <= BETA_MAX);
            assert!(sch.sigma(s) >= 0.0 && sch.sigma(s) <= sch.beta(s).sqrt() + 1e-15);
        }
        assert_eq!(sch.sigma(1), 0.0);
        assert!(cosine_schedule(0).is_err());
    }

    #[test]
    fn ten_step_betas_match_closed_form() {
        let sch = cosine_schedule(10).unwrap();
        for s in 1..=10 {
            let expect = (1.0 - closed_form_abar(s, 10) / closed_form_abar(s - 1, 10)).min(0.999);
            assert!((sch.beta(s) - expect).abs() < 1e-15, "s={s}");
        }
    }

    #[test]
    fn q_sample_special_cases() {
        let sch = cosine_schedule(100).unwrap();
        let z0 = [0.3, -0.7, 1.1];
        assert_eq!(q_sample(&z0, 0, &[5.0, 5.0, 5.0], &sch).unwrap(), z0.to_vec());
        let zs = q_sample(&z0, 40, &[0.0; 3], &sch).unwrap();
        let a = sch.alpha_bar(40).sqrt();
        for (x, y) in zs.iter().zip(z0) {
            assert_eq!(*x, a * y);
        }
        assert!(q_sample(&z0, 3, &[0.0; 2], &sch).is_err());
    }

    #[test]
    fn perfect_denoising_reconstructs() {
        let sch = cosine_schedule(1000).unwrap();
        let z0 = [0.25, -0.5, 0.9, 0.0];
        let eps = [1.3, -0.2, 0.4, -2.0];
        for s in [1, 500, 999] {
            let zs = q_sample(&z0, s, &eps, &sch).unwrap();
            let ab = sch.alpha_bar(s);
            for i in 0..4 {
                let rec = (zs[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
                assert!((rec - z0[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scaling_round_trip_and_range() {
        let sc = FeatureScaling::default();
        let z = [0.1, 0.9, -0.5, 0.5, 0.5, 0.5, 0.0, 0.0];
        let u = sc.to_model(&z);
        assert_eq!(&u[..4], &[-1.0, 1.0, -1.0, 1.0]);
        let back = sc.to_box(&u);
        for (a, b) in back.iter().zip(z) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn lr_schedule_steps() {
        let c = TrainConfig {
            lr: 1e-4,
            lr_decay_start: 600,
            lr_decay_every: 40,
            ..TrainConfig::default()
        };
        assert_eq!(c.lr_at(599), 1e-4);
        assert_eq!(c.lr_at(600), 5e-5);
        assert_eq!(c.lr_at(640), 2.5e-5);
        let flat = TrainConfig {
            lr_decay_every: 0,
            ..c
        };
        assert_eq!(flat.lr_at(1_000_000), 1e-4);
    }

    #[test]
    fn loss_csv_header() {
        let mut buf = Vec::new();
        write_loss_csv(&[LossRecord { step: 0, loss: 1.5, lr: 1e-4, ema_decay: 0.95 }], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,lr,ema_decay\n0,1.5,0.0001,0.95\n");
    }

    struct Zero;

    impl EpsModel for Zero {
        fn window_len(&self) -> usize {
            4
        }
        fn channels(&self) -> usize {
            2
        }
        fn predict_eps(&self, z: &Tensor<f32>, _: &[f64]) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(z.shape()))
        }
    }

    #[test]
    fn q_sample_variance_matches_schedule() {
        let sch = cosine_schedule(1000).unwrap();
        let mut rng = rng::labeled(5, "test", 0);
        let n = 100_000;
        for s in [10, 400, 900] {
            let eps = normal_vec(&mut rng, n);
            let zs = q_sample(&vec![0.7; n], s, &eps, &sch).unwrap();
            let mean = zs.iter().sum::<f64>() / n as f64;
            let var = zs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            let expect = 1.0 - sch.alpha_bar(s);
            assert!((var / expect - 1.0).abs() < 0.02, "s={s}: {var} vs {expect}");
        }
    }

    #[test]
    fn one_step_zero_model_is_scaled_gaussian() {
        let sch = cosine_schedule(1).unwrap();
        let n = 5000;
        let z = sample(&Zero, &sch, n, None, None, 11).unwrap();
        let scale = 1.0 / (1.0 - sch.beta(1)).sqrt();
        // first draw of every chain, scaled
        for i in [0, 17, n - 1] {
            let first = normal_vec(&mut chain_rng(11, i), 8);
            for (a, b) in z[i * 8..(i + 1) * 8].iter().zip(&first) {
                assert!((a - scale * b).abs() < 1e-12 * scale);
            }
        }
        let var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
        assert!((var / (scale * scale) - 1.0).abs() < 0.03);
    }

    #[test]
    fn zero_lambda_guidance_is_bitwise_unguided() {
        let sch = cosine_schedule(20).unwrap();
        let grad = |z: &[f64]| z.iter().map(|v| v * 3.0).collect::<Vec<_>>();
        let off = Guidance { lambda: 0.0, space: GuidanceSpace::Eps, grad: &grad };
        let a = sample(&Zero, &sch, 3, None, Some(1.0), 4).unwrap();
        let b = sample(&Zero, &sch, 3, Some(&off), Some(1.0), 4).unwrap();
        assert_eq!(a, b);
        let on = Guidance { lambda: 0.5, ..off };
        assert_ne!(a, sample(&Zero, &sch, 3, Some(&on), Some(1.0), 4).unwrap());
    }

    fn tiny_denoiser() -> DenoiserConfig {
        DenoiserConfig {
            window_len: 8,
            channels: 4,
            base_width: 8,
            depth: 2,
            channel_factors: vec![1, 2],
            blocks_per_level: 1,
            step_embed_dim: 8,
            groups: 4,
            ..DenoiserConfig::default()
        }
    }

    fn single_window() -> WindowSet {
        let w: Vec<f32> = (0..32).map(|i| ((i as f32) * 0.37).sin() * 0.8).collect();
        WindowSet::from_windows(8, 4, vec![w]).unwrap()
    }

    #[test]
    fn unet_vjp_matches_finite_differences() {
        let cfg = DenoiserConfig {
            base_width: 8,
            depth: 2,
            channel_factors: vec![1, 2],
            blocks_per_level: 1,
            step_embed_dim: 8,
            groups: 4,
            window_len: 8,
            channels: 4,
            ..DenoiserConfig::default()
        };
        let net = UNet::<f32>::new(cfg).unwrap();
        let z: Vec<f32> = (0..2 * 32).map(|i| (i as f32 * 0.41).sin()).collect();
        let cot: Vec<f32> = (0..2 * 32).map(|i| (i as f32 * 0.23).cos()).collect();
        let zt = Tensor::new(vec![2, 8, 4], z.clone()).unwrap();
        let fracs = [0.3, 0.8];
        let jv = net.eps_vjp(&zt, &fracs, &Tensor::new(vec![2, 8, 4], cot.clone()).unwrap()).unwrap();
        let f = |z: &[f32]| -> f64 {
            let out = net.predict_eps(&Tensor::new(vec![2, 8, 4], z.to_vec()).unwrap(), &fracs).unwrap();
            out.data().iter().zip(&cot).map(|(&a, &c)| a as f64 * c as f64).sum()
        };
        for i in [0, 9, 31, 40, 63] {
            let h = 1e-2;
            let (mut zp, mut zm) = (z.clone(), z.clone());
            zp[i] += h;
            zm[i] -= h;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h as f64);
            let g = jv.data()[i] as f64;
            assert!((fd - g).abs() < 2e-2 * (1.0 + g.abs()), "coordinate {i}: {fd} vs {g}");
        }
    }

    #[test]
    fn overfits_single_window() {
        let sch = cosine_schedule(1000).unwrap();
        let cfg = TrainConfig {
            batch_size: 16,
            lr: 2e-3,
            total_steps: 2000,
            log_every: 50,
            ..TrainConfig::default()
        };
        let t = train(tiny_denoiser(), &single_window(), FeatureScaling::identity(), &sch, &cfg, |_| Ok(())).unwrap();
        let tail: Vec<f64> = t.losses.iter().rev().take(10).map(|r| r.loss).collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean < 0.5, "final loss {mean}");
        assert!(t.losses[0].loss > mean);
    }

    #[test]
    fn training_is_reproducible() {
        let sch = cosine_schedule(100).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            total_steps: 30,
            log_every: 1,
            ..TrainConfig::default()
        };
        let run = || train(tiny_denoiser(), &single_window(), FeatureScaling::identity(), &sch, &cfg, |_| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.ema_model().unwrap().params().tensors(), b.ema_model().unwrap().params().tensors());
    }

    #[test]
    fn accepts_full_size_batch_shape() {
        let m = UNet::<f32>::new(DenoiserConfig::default()).unwrap();
        let x = Tensor::new(vec![32, 24, 8], vec![0.1; 32 * 24 * 8]).unwrap();
        let eps = m.predict_eps(&x, &[0.5; 32]).unwrap();
        assert_eq!(eps.shape(), &[32, 24, 8]);
    }
}
