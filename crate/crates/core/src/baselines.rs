//! Surrogate forward models and the CEM and backprop inverse-design
//! baselines built on them.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::compose::{DesignHeader, DesignObjective, DesignOutput};
use crate::denoiser::{DenoiserConfig, UNet};
use crate::diffusion::{self, FeatureScaling, LossRecord, TrainConfig, WindowSet};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Checkpoint, Ema, Graph, Real, Tensor, Var};
use crate::rng;
use crate::sim::{self, SimConfig, FEATURES};

/// Velocity bound applied to every designed state.
pub const VELOCITY_LIMIT: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SurrogateVariant {
    /// Frame `t` to frame `t + 1`.
    OneStep,
    /// Frame 0 to frames `1..=23`.
    MultiStep,
}

impl SurrogateVariant {
    /// Frames predicted per forward pass.
    pub fn horizon(self) -> usize {
        match self {
            SurrogateVariant::OneStep => 1,
            SurrogateVariant::MultiStep => 23,
        }
    }

    /// Backbone window: the conditioning frame plus the predicted frames.
    pub fn window_len(self) -> usize {
        self.horizon() + 1
    }

    pub fn name(self) -> &'static str {
        match self {
            SurrogateVariant::OneStep => "1-step",
            SurrogateVariant::MultiStep => "23-step",
        }
    }

    /// Backbone with the denoiser's layout, no step embedding and one extra
    /// input channel holding the in-window time.
    pub fn backbone(self, n_bodies: usize, base_width: usize, seed: u64) -> DenoiserConfig {
        let depth = match self {
            SurrogateVariant::OneStep => 1,
            SurrogateVariant::MultiStep => 3,
        };
        DenoiserConfig {
            window_len: self.window_len(),
            channels: n_bodies * FEATURES,
            extra_in_channels: 1,
            base_width,
            depth,
            channel_factors: [1, 2, 4][..depth].to_vec(),
            blocks_per_level: 1,
            step_embed_dim: 0,
            seed,
            ..DenoiserConfig::default()
        }
    }
}

/// Forward dynamics model in model space: the conditioning frame is tiled
/// over the window and the backbone predicts a residual on top of it.
#[derive(Clone, Debug)]
pub struct Surrogate<T> {
    pub variant: SurrogateVariant,
    pub net: UNet<T>,
    pub scaling: FeatureScaling,
}

impl<T: Real> Surrogate<T> {
    pub fn new(variant: SurrogateVariant, config: DenoiserConfig, scaling: FeatureScaling) -> Result<Self> {
        if config.window_len != variant.window_len() || config.extra_in_channels != 1 || config.step_embed_dim != 0 {
            return Err(Error::Config(format!(
                "{} surrogate needs window {}, one extra channel and no step embedding",
                variant.name(),
                variant.window_len()
            )));
        }
        Ok(Self {
            variant,
            net: UNet::new(config)?,
            scaling,
        })
    }

    pub fn n_bodies(&self) -> usize {
        self.net.config().channels / FEATURES
    }

    pub fn width(&self) -> usize {
        self.net.config().channels
    }

    /// `cond: [batch, 1, width]` to predicted frames `[batch, horizon, width]`.
    pub fn step_graph(&self, g: &mut Graph<T>, p: &[Var], cond: Var) -> Result<Var> {
        let sh = g.shape(cond).to_vec();
        if sh.len() != 3 || sh[1] != 1 || sh[2] != self.width() {
            return Err(Error::Shape {
                op: "surrogate condition",
                left: sh,
                right: vec![0, 1, self.width()],
            });
        }
        let (batch, l) = (sh[0], self.variant.window_len());
        let tiled = g.concat(&vec![cond; l], 1)?;
        let ramp = g.constant(Tensor::from_fn(&[batch, l, 1], |i| {
            T::from_f64_lossy((i % l) as f64 / (l - 1) as f64)
        }));
        let x = g.concat(&[tiled, ramp], 2)?;
        let out = self.net.forward(g, p, x, &[])?;
        let pred = g.add(out, tiled)?;
        g.slice(pred, 1, 1, self.variant.horizon())
    }

    /// Chained rollout from `gamma: [batch, 1, width]` to `[batch, n_frames, width]`
    /// (frame 0 is `gamma`). The multi-step variant re-conditions on its last
    /// predicted frame.
    pub fn rollout_graph(&self, g: &mut Graph<T>, p: &[Var], gamma: Var, n_frames: usize) -> Result<Var> {
        if n_frames == 0 {
            return Err(Error::Config("rollout needs at least one frame".into()));
        }
        let h = self.variant.horizon();
        let mut parts = vec![gamma];
        let mut have = 1;
        let mut cond = gamma;
        while have < n_frames {
            let seg = self.step_graph(g, p, cond)?;
            cond = g.slice(seg, 1, h - 1, 1)?;
            parts.push(seg);
            have += h;
        }
        let all = g.concat(&parts, 1)?;
        if have == n_frames {
            Ok(all)
        } else {
            g.slice(all, 1, 0, n_frames)
        }
    }

    /// Rollout of `n_runs` box-unit initial states; returns box units
    /// `[n_runs, n_frames, width]`.
    pub fn rollout(&self, gamma: &[f64], n_runs: usize, n_frames: usize) -> Result<Vec<f64>> {
        let w = self.width();
        check_len("surrogate rollout", gamma.len(), n_runs * w)?;
        let mut g = Graph::new();
        let p = self.net.params().bind(&mut g, false);
        let x = g.constant(to_model_tensor(&self.scaling, gamma, n_runs, w));
        let out = self.rollout_graph(&mut g, &p, x, n_frames)?;
        let vals: Vec<f64> = g.value(out).data().iter().map(|v| v.as_f64()).collect();
        Ok(self.scaling.to_box(&vals))
    }

    /// Final predicted frame of each run and the gradient of
    /// `sum(cotangent * final_frame)` with respect to `gamma` (box units).
    pub fn final_frame_vjp(
        &self,
        gamma: &[f64],
        n_runs: usize,
        n_frames: usize,
        cotangent: impl Fn(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.width();
        check_len("surrogate vjp", gamma.len(), n_runs * w)?;
        let mut g = Graph::new();
        let p = self.net.params().bind(&mut g, false);
        let x = g.leaf(to_model_tensor(&self.scaling, gamma, n_runs, w), true);
        let traj = self.rollout_graph(&mut g, &p, x, n_frames)?;
        let last = g.slice(traj, 1, n_frames - 1, 1)?;
        let final_model: Vec<f64> = g.value(last).data().iter().map(|v| v.as_f64()).collect();
        let final_box = self.scaling.to_box(&final_model);
        let mut cot = cotangent(&final_box);
        check_len("surrogate cotangent", cot.len(), final_box.len())?;
        self.scaling.grad_to_model(&mut cot);
        let c = g.constant(Tensor::new(
            vec![n_runs, 1, w],
            cot.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )?);
        let prod = g.mul(last, c)?;
        let loss = g.sum(prod)?;
        let grads = g.backward(loss)?;
        let gx = grads
            .get(x)
            .map(|t| t.data().iter().map(|v| v.as_f64()).collect::<Vec<_>>())
            .unwrap_or_else(|| vec![0.0; gamma.len()]);
        // d(model)/d(box) = 1 / scale
        let grad = gx
            .iter()
            .enumerate()
            .map(|(i, v)| v / self.scaling.scale[i % FEATURES])
            .collect();
        Ok((final_box, grad))
    }
}

fn check_len(op: &'static str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape {
            op,
            left: vec![got],
            right: vec![want],
        });
    }
    Ok(())
}

fn to_model_tensor<T: Real>(scaling: &FeatureScaling, gamma: &[f64], n_runs: usize, w: usize) -> Tensor<T> {
    let u = scaling.to_model(gamma);
    Tensor::new(vec![n_runs, 1, w], u.iter().map(|&v| T::from_f64_lossy(v)).collect()).expect("gamma shape")
}

/// Trained surrogate with optimizer state and loss log.
#[derive(Clone, Debug)]
pub struct TrainedSurrogate {
    pub model: Surrogate<f32>,
    pub ema: Ema<f32>,
    pub adam: AdamState<f32>,
    pub steps_done: usize,
    pub losses: Vec<LossRecord>,
    /// Mean absolute rollout error on held-out windows, box units.
    pub validation_mae: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct SurrogateMeta {
    kind: String,
    variant: SurrogateVariant,
    backbone: DenoiserConfig,
    scaling: FeatureScaling,
    ema_decay: f64,
    adam: AdamConfig,
    adam_step: u64,
    steps_done: usize,
    validation_mae: Option<f64>,
}

impl TrainedSurrogate {
    /// Surrogate evaluated with the EMA weights.
    pub fn ema_model(&self) -> Result<Surrogate<f32>> {
        Ok(Surrogate {
            variant: self.model.variant,
            net: UNet::from_params(self.model.net.config().clone(), self.ema.shadow.clone())?,
            scaling: self.model.scaling,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = SurrogateMeta {
            kind: "surrogate".into(),
            variant: self.model.variant,
            backbone: self.model.net.config().clone(),
            scaling: self.model.scaling,
            ema_decay: self.ema.decay,
            adam: self.adam.config,
            adam_step: self.adam.step,
            steps_done: self.steps_done,
            validation_mae: self.validation_mae,
        };
        diffusion::checkpoint_from(
            serde_json::to_value(meta).expect("metadata serializes"),
            self.model.net.params(),
            &self.ema.shadow,
            &self.adam,
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: SurrogateMeta = serde_json::from_value(ck.metadata.clone())?;
        if meta.kind != "surrogate" {
            return Err(Error::Format(format!("checkpoint holds a {}, not a surrogate", meta.kind)));
        }
        let (params, shadow, adam) = diffusion::params_from_checkpoint(ck, meta.adam, meta.adam_step)?;
        let mut model = Surrogate::new(meta.variant, meta.backbone, meta.scaling)?;
        model.net.params_mut().load_from(&params)?;
        Ok(Self {
            model,
            ema: Ema {
                decay: meta.ema_decay,
                shadow,
            },
            adam,
            steps_done: meta.steps_done,
            losses: Vec::new(),
            validation_mae: meta.validation_mae,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// MSE training of a surrogate on windows of `variant.window_len()` frames.
/// The last `validation` windows (if any) are held out and scored after
/// training.
pub fn train_surrogate(
    variant: SurrogateVariant,
    backbone: DenoiserConfig,
    windows: &WindowSet,
    validation: Option<&WindowSet>,
    scaling: FeatureScaling,
    config: &TrainConfig,
) -> Result<TrainedSurrogate> {
    config.validate()?;
    if windows.is_empty() {
        return Err(Error::Config("no training windows".into()));
    }
    if windows.window_len < variant.window_len() {
        return Err(Error::Config(format!(
            "{} surrogate needs windows of {} frames, got {}",
            variant.name(),
            variant.window_len(),
            windows.window_len
        )));
    }
    let model = Surrogate::<f32>::new(variant, backbone, scaling)?;
    if windows.channels != model.width() {
        return Err(Error::Shape {
            op: "surrogate windows",
            left: vec![windows.channels],
            right: vec![model.width()],
        });
    }
    let ema = Ema::new(config.ema_decay, model.net.params())?;
    let adam = AdamState::new(AdamConfig::with_lr(config.lr), model.net.params().tensors());
    let mut state = TrainedSurrogate {
        model,
        ema,
        adam,
        steps_done: 0,
        losses: Vec::new(),
        validation_mae: None,
    };
    let mut rng = rng::labeled(config.seed, "train-surrogate", 0);
    let h = variant.horizon();
    for step in 0..config.total_steps {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..windows.len())).collect();
        let batch = windows.batch(&idx);
        let mut g = Graph::<f32>::new();
        let p = state.model.net.params().bind(&mut g, true);
        let full = g.constant(batch);
        let cond = g.slice(full, 1, 0, 1)?;
        let target = g.slice(full, 1, 1, h)?;
        let pred = state.model.step_graph(&mut g, &p, cond)?;
        let loss_var = g.mse(pred, target)?;
        let loss = g.value(loss_var).item() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("surrogate loss at step {step}")));
        }
        let mut grads = g.backward(loss_var)?;
        let grads: Vec<Tensor<f32>> = p
            .iter()
            .map(|&v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v))))
            .collect();
        state.adam.config.lr = config.lr_at(step);
        state.adam.step(state.model.net.params_mut().tensors_mut(), &grads)?;
        state.ema.update(state.model.net.params());
        state.steps_done = step + 1;
        if config.log_every > 0 && (step % config.log_every == 0 || step + 1 == config.total_steps) {
            log::debug!("surrogate step {step} loss {loss:.6}");
            state.losses.push(LossRecord {
                step,
                loss,
                lr: config.lr_at(step),
                ema_decay: config.ema_decay,
            });
        }
    }
    if let Some(val) = validation.filter(|v| !v.is_empty()) {
        let model = state.ema_model()?;
        let n = val.len().min(256);
        let (mut err, mut count) = (0.0, 0usize);
        for i in 0..n {
            let win = val.window(i);
            let frames = val.window_len;
            let gamma = scaling.to_box(&win[..val.channels].iter().map(|&v| v as f64).collect::<Vec<_>>());
            let pred = model.rollout(&gamma, 1, frames)?;
            let truth = scaling.to_box(&win.iter().map(|&v| v as f64).collect::<Vec<_>>());
            err += pred.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
            count += pred.len();
        }
        let mae = err / count as f64;
        log::info!("{} surrogate validation rollout MAE {mae:.5}", variant.name());
        state.validation_mae = Some(mae);
    }
    Ok(state)
}

/// Forward models the baselines can optimize through.
pub trait Dynamics {
    fn n_bodies(&self) -> usize;

    /// Box-unit trajectories `[n_runs, n_frames, n_bodies * FEATURES]`.
    fn rollout(&self, gamma: &[f64], n_runs: usize, n_frames: usize) -> Result<Vec<f64>>;

    /// Final frames and `d/dgamma sum(cot(final) * final)`.
    fn final_frame_vjp(
        &self,
        gamma: &[f64],
        n_runs: usize,
        n_frames: usize,
        cotangent: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)>;

    /// Whether the rollout is a trajectory estimate worth scoring for MAE.
    fn emits_trajectory(&self) -> bool {
        false
    }
}

impl Dynamics for Surrogate<f32> {
    fn n_bodies(&self) -> usize {
        Surrogate::n_bodies(self)
    }

    fn rollout(&self, gamma: &[f64], n_runs: usize, n_frames: usize) -> Result<Vec<f64>> {
        Surrogate::rollout(self, gamma, n_runs, n_frames)
    }

    fn final_frame_vjp(
        &self,
        gamma: &[f64],
        n_runs: usize,
        n_frames: usize,
        cotangent: &dyn Fn(&[f64]) -> Vec<f64>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Surrogate::final_frame_vjp(self, gamma, n_runs, n_frames, cotangent)
    }

    fn emits_trajectory(&self) -> bool {
        self.variant == SurrogateVariant::MultiStep
    }
}

/// Keeps positions inside `[radius, 1 - radius]` and velocities inside
/// `[-VELOCITY_LIMIT, VELOCITY_LIMIT]`.
pub fn clamp_gamma(gamma: &mut [f64], radius: f64) {
    for (i, v) in gamma.iter_mut().enumerate() {
        *v = if i % FEATURES < 2 {
            v.clamp(radius, 1.0 - radius)
        } else {
            v.clamp(-VELOCITY_LIMIT, VELOCITY_LIMIT)
        };
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub population: usize,
    pub elite_frac: f64,
    pub iterations: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            population: 100,
            elite_frac: 0.1,
            iterations: 20,
            init_std: 0.25,
            seed: 0,
        }
    }
}

impl CemConfig {
    pub fn n_elites(&self) -> usize {
        (self.population as f64 * self.elite_frac).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_elites() < 2 || self.n_elites() > self.population || self.iterations == 0 {
            return Err(Error::Config(format!(
                "CEM needs 2 <= elites <= population and iterations > 0 (population {}, elite_frac {})",
                self.population, self.elite_frac
            )));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Config("CEM init_std must be positive".into()));
        }
        Ok(())
    }
}

pub const CEM_VAR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct CemResult {
    pub best: Vec<f64>,
    pub best_value: f64,
    /// Best-ever value after each iteration.
    pub best_trace: Vec<f64>,
    /// Mean elite value of each iteration.
    pub elite_trace: Vec<f64>,
    /// Population indices of the elites, best first.
    pub elites: Vec<Vec<usize>>,
    pub mean: Vec<f64>,
}

/// Cross-entropy method with a diagonal Gaussian. `project` is applied to
/// every candidate before scoring; `score` evaluates a whole population.
pub fn cem_optimize(
    mean: Vec<f64>,
    std: Vec<f64>,
    config: &CemConfig,
    rng: &mut impl Rng,
    project: impl Fn(&mut [f64]),
    mut score: impl FnMut(&[Vec<f64>]) -> Result<Vec<f64>>,
) -> Result<CemResult> {
    config.validate()?;
    let dim = mean.len();
    let mut mean = mean;
    let mut var: Vec<f64> = std.iter().map(|s| (s * s).max(CEM_VAR_FLOOR)).collect();
    let n_el = config.n_elites();
    let mut res = CemResult {
        best: mean.clone(),
        best_value: f64::INFINITY,
        best_trace: Vec::new(),
        elite_trace: Vec::new(),
        elites: Vec::new(),
        mean: Vec::new(),
    };
    for _ in 0..config.iterations {
        let pop: Vec<Vec<f64>> = (0..config.population)
            .map(|_| {
                let mut c: Vec<f64> = (0..dim)
                    .map(|d| mean[d] + var[d].sqrt() * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                project(&mut c);
                c
            })
            .collect();
        let vals = score(&pop)?;
        check_len("cem scores", vals.len(), pop.len())?;
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
        let elites = &order[..n_el];
        if vals[elites[0]] < res.best_value {
            res.best_value = vals[elites[0]];
            res.best = pop[elites[0]].clone();
        }
        for d in 0..dim {
            let m = elites.iter().map(|&e| pop[e][d]).sum::<f64>() / n_el as f64;
            let v = elites.iter().map(|&e| (pop[e][d] - m).powi(2)).sum::<f64>() / n_el as f64;
            mean[d] = m;
            var[d] = v.max(CEM_VAR_FLOOR);
        }
        res.best_trace.push(res.best_value);
        res.elite_trace.push(elites.iter().map(|&e| vals[e]).sum::<f64>() / n_el as f64);
        res.elites.push(elites.to_vec());
    }
    res.mean = mean;
    Ok(res)
}

/// CEM over initial states: population rolled out through `model` and scored
/// on the final frame.
pub fn cem_design(
    model: &dyn Dynamics,
    objective: &DesignObjective,
    config: &CemConfig,
    n_frames: usize,
    radius: f64,
    run: usize,
) -> Result<CemResult> {
    let nb = model.n_bodies();
    let mut mean = Vec::with_capacity(nb * FEATURES);
    for _ in 0..nb {
        mean.extend_from_slice(&[0.5, 0.5, 0.0, 0.0]);
    }
    let std = vec![config.init_std; mean.len()];
    let mut rng = rng::labeled(config.seed, "cem", run as u64);
    let width = nb * FEATURES;
    cem_optimize(
        mean,
        std,
        config,
        &mut rng,
        |c| clamp_gamma(c, radius),
        |pop| {
            let flat: Vec<f64> = pop.concat();
            let traj = model.rollout(&flat, pop.len(), n_frames)?;
            let per = n_frames * width;
            Ok((0..pop.len())
                .map(|r| objective.final_frame(&traj[r * per + (n_frames - 1) * width..(r + 1) * per]))
                .collect())
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackpropConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for BackpropConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 1e-2,
            seed: 0,
        }
    }
}

impl BackpropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || !(self.lr >= 0.0) {
            return Err(Error::Config("backprop needs steps > 0 and lr >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackpropResult {
    pub gamma: Vec<f64>,
    /// Surrogate objective before each update, then after the last one.
    pub trace: Vec<f64>,
}

/// Adam descent on the initial state through the model's rollout, clamping
/// to the valid box after each update.
pub fn backprop_design(
    model: &dyn Dynamics,
    objective: &DesignObjective,
    config: &BackpropConfig,
    n_frames: usize,
    radius: f64,
    init: Vec<f64>,
) -> Result<BackpropResult> {
    config.validate()?;
    let nb = model.n_bodies();
    check_len("backprop init", init.len(), nb * FEATURES)?;
    let mut gamma = Tensor::new(vec![init.len()], init)?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), std::slice::from_ref(&gamma));
    let mut trace = Vec::with_capacity(config.steps + 1);
    let cot = |f: &[f64]| objective.objective_and_grad(f, 1, nb).1;
    for step in 0..=config.steps {
        let (last, grad) = model.final_frame_vjp(gamma.data(), 1, n_frames, &cot)?;
        trace.push(objective.final_frame(&last));
        if step == config.steps {
            break;
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("backprop gradient at step {step}")));
        }
        let g = Tensor::new(vec![grad.len()], grad)?;
        adam.step(std::slice::from_mut(&mut gamma), std::slice::from_ref(&g))?;
        clamp_gamma(gamma.data_mut(), radius);
    }
    Ok(BackpropResult {
        gamma: gamma.into_data(),
        trace,
    })
}

/// Which optimizer drives a surrogate baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Cem,
    Backprop,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Cem => "cem",
            BaselineMethod::Backprop => "backprop",
        }
    }
}

/// Runs `n_runs` independent baseline designs and packages them in the
/// shared design-output format.
#[allow(clippy::too_many_arguments)]
pub fn baseline_designs(
    method: BaselineMethod,
    model: &dyn Dynamics,
    objective: &DesignObjective,
    cem: &CemConfig,
    backprop: &BackpropConfig,
    sim_config: &SimConfig,
    n_frames: usize,
    n_runs: usize,
    seed: u64,
) -> Result<DesignOutput> {
    let nb = model.n_bodies();
    let mut gamma = Vec::with_capacity(n_runs * nb * FEATURES);
    for run in 0..n_runs {
        let g = match method {
            BaselineMethod::Cem => {
                let cfg = CemConfig { seed, ..*cem };
                cem_design(model, objective, &cfg, n_frames, sim_config.radius, run)?.best
            }
            BaselineMethod::Backprop => {
                let cfg = SimConfig {
                    n_bodies: nb,
                    ..sim_config.clone()
                };
                let mut r = rng::labeled(seed, "backprop-init", run as u64);
                let init: Vec<f64> = sim::sample_initial(&cfg, &mut r)?.iter().flat_map(|s| s.features()).collect();
                backprop_design(model, objective, &BackpropConfig { seed, ..*backprop }, n_frames, sim_config.radius, init)?.gamma
            }
        };
        gamma.extend(g);
    }
    let trajectory = if model.emits_trajectory() {
        Some(model.rollout(&gamma, n_runs, n_frames)?)
    } else {
        None
    };
    let config = match method {
        BaselineMethod::Cem => serde_json::to_value(cem)?,
        BaselineMethod::Backprop => serde_json::to_value(backprop)?,
    };
    Ok(DesignOutput {
        header: DesignHeader {
            method: method.name().into(),
            n_runs,
            n_bodies: nb,
            n_frames,
            seed,
            config,
        },
        gamma,
        trajectory,
    })
}

/// Shared parameters of a surrogate and an f64 copy, for gradient checks.
pub fn cast_surrogate<U: Real>(s: &Surrogate<f32>) -> Surrogate<U> {
    Surrogate {
        variant: s.variant,
        net: s.net.cast(),
        scaling: s.scaling,
    }
}
