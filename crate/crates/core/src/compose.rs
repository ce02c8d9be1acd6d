//! Composition of window models over time windows and body pairs, the design
//! objective, and guided compositional sampling.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diffusion::{chain_rng, cosine_schedule, normal_vec, EpsModel, FeatureScaling, GuidanceSpace};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::sim::FEATURES;

/// Windows per model call; bounds peak memory on large plans.
const PREDICT_CHUNK: usize = 512;

/// Default bound on the clean estimate, in model units.
pub const DEFAULT_CLIP: f64 = 1.0;

/// Default multiplier on `lambda`. The objective is a distance in box units,
/// so its gradient is O(1) and a unit weight barely tilts the samples; this
/// gain puts the conventional `lambda` range (0.01 to 1) where guidance
/// starts to trade physical consistency for objective.
pub const DEFAULT_GUIDANCE_GAIN: f64 = 500.0;

/// Start frames of the windows of length `t_tr` at stride `t_q` covering
/// `t_total` frames.
pub fn time_windows(t_total: usize, t_tr: usize, t_q: usize) -> Result<Vec<usize>> {
    if t_tr == 0 || t_q == 0 {
        return Err(Error::Config("window length and stride must be positive".into()));
    }
    if t_total < t_tr {
        return Err(Error::Config(format!("horizon {t_total} shorter than window {t_tr}")));
    }
    let span = t_total - t_tr;
    if span % t_q != 0 {
        return Err(Error::WindowStride {
            span,
            stride: t_q,
            residue: span % t_q,
        });
    }
    Ok((0..=span).step_by(t_q).collect())
}

/// Unordered body pairs `(i, j)`, `i < j`, in lexicographic order.
pub fn body_pairs(n_bodies: usize) -> Result<Vec<(usize, usize)>> {
    if n_bodies < 2 {
        return Err(Error::Config(format!("body pairs need at least 2 bodies, got {n_bodies}")));
    }
    Ok((0..n_bodies)
        .flat_map(|i| (i + 1..n_bodies).map(move |j| (i, j)))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub model_id: String,
    /// Global coordinate of each window element, row-major over
    /// `[window_len, channels]`.
    pub index_map: Vec<usize>,
}

/// Covering family of model windows over a design variable laid out as
/// `[n_frames, n_bodies * FEATURES]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionPlan {
    pub n_frames: usize,
    pub n_bodies: usize,
    pub entries: Vec<PlanEntry>,
    pub coverage: Vec<u32>,
}

impl CompositionPlan {
    /// Validates arbitrary entries: injective maps inside the variable and
    /// full coverage.
    pub fn from_entries(n_frames: usize, n_bodies: usize, entries: Vec<PlanEntry>) -> Result<Self> {
        let len = n_frames * n_bodies * FEATURES;
        let mut coverage = vec![0u32; len];
        for (k, e) in entries.iter().enumerate() {
            let mut seen = vec![false; len];
            for &i in &e.index_map {
                if i >= len {
                    return Err(Error::Config(format!("plan entry {k} maps outside the design variable ({i} >= {len})")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Config(format!("plan entry {k} maps coordinate {i} twice")));
                }
                coverage[i] += 1;
            }
        }
        let uncovered: Vec<usize> = (0..len).filter(|&i| coverage[i] == 0).collect();
        if !uncovered.is_empty() {
            return Err(Error::CoverageGap { uncovered });
        }
        Ok(Self {
            n_frames,
            n_bodies,
            entries,
            coverage,
        })
    }

    pub fn len(&self) -> usize {
        self.n_frames * self.n_bodies * FEATURES
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_width(&self) -> usize {
        self.n_bodies * FEATURES
    }
}

/// Index map of a window starting at `offset` over `bodies`, channels in
/// body order.
pub fn window_index_map(n_bodies: usize, offset: usize, window_len: usize, bodies: &[usize]) -> Vec<usize> {
    let width = n_bodies * FEATURES;
    let mut map = Vec::with_capacity(window_len * bodies.len() * FEATURES);
    for t in 0..window_len {
        for &b in bodies {
            for f in 0..FEATURES {
                map.push((offset + t) * width + b * FEATURES + f);
            }
        }
    }
    map
}

/// Cross product of time windows and body pairs, every entry using
/// `model_id`.
pub fn build_plan(
    n_bodies: usize,
    t_total: usize,
    t_tr: usize,
    t_q: usize,
    registry: &ModelRegistry,
    model_id: &str,
) -> Result<CompositionPlan> {
    let model = registry.get(model_id)?;
    if model.window_len() != t_tr || model.channels() != 2 * FEATURES {
        return Err(Error::Shape {
            op: "build_plan model",
            left: vec![model.window_len(), model.channels()],
            right: vec![t_tr, 2 * FEATURES],
        });
    }
    let offsets = time_windows(t_total, t_tr, t_q)?;
    let pairs = body_pairs(n_bodies)?;
    let mut entries = Vec::with_capacity(offsets.len() * pairs.len());
    for &o in &offsets {
        for &(i, j) in &pairs {
            entries.push(PlanEntry {
                model_id: model_id.to_string(),
                index_map: window_index_map(n_bodies, o, t_tr, &[i, j]),
            });
        }
    }
    CompositionPlan::from_entries(t_total, n_bodies, entries)
}

/// Read-only set of window models keyed by id, sharing one feature scaling.
#[derive(Clone, Default)]
pub struct ModelRegistry {
    models: BTreeMap<String, Arc<dyn EpsModel>>,
    pub scaling: FeatureScaling,
}

impl ModelRegistry {
    pub fn new(scaling: FeatureScaling) -> Self {
        Self {
            models: BTreeMap::new(),
            scaling,
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, model: Arc<dyn EpsModel>) {
        self.models.insert(id.into(), model);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn EpsModel>> {
        self.models
            .get(id)
            .ok_or_else(|| Error::Config(format!("no model '{id}' in registry")))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.models.keys().map(String::as_str)
    }
}

/// Final-frame distance of every ball to a target point, averaged over
/// bodies.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignObjective {
    pub target: [f64; 2],
}

impl Default for DesignObjective {
    fn default() -> Self {
        Self { target: [0.5, 0.5] }
    }
}

impl DesignObjective {
    pub fn validate(&self) -> Result<()> {
        if self.target.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("target {:?} outside the unit box", self.target)));
        }
        Ok(())
    }

    /// Objective on the final frame only (`n_bodies * FEATURES` values).
    pub fn final_frame(&self, frame: &[f64]) -> f64 {
        let n = frame.len() / FEATURES;
        let sum: f64 = (0..n)
            .map(|b| {
                let dx = frame[b * FEATURES] - self.target[0];
                let dy = frame[b * FEATURES + 1] - self.target[1];
                dx.hypot(dy)
            })
            .sum();
        sum / n as f64
    }

    /// `J` and `dJ/dz` for one trajectory `[n_frames, n_bodies * FEATURES]`
    /// in box units.
    pub fn objective_and_grad(&self, z: &[f64], n_frames: usize, n_bodies: usize) -> (f64, Vec<f64>) {
        let width = n_bodies * FEATURES;
        let last = (n_frames - 1) * width;
        let mut grad = vec![0.0; z.len()];
        let mut sum = 0.0;
        for b in 0..n_bodies {
            let i = last + b * FEATURES;
            let (dx, dy) = (z[i] - self.target[0], z[i + 1] - self.target[1]);
            let d = dx.hypot(dy);
            sum += d;
            if d > 0.0 {
                grad[i] = dx / d / n_bodies as f64;
                grad[i + 1] = dy / d / n_bodies as f64;
            }
        }
        (sum / n_bodies as f64, grad)
    }
}

/// Where the design objective is evaluated during guided sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceInput {
    /// `grad_z J(z_s)` on the noisy sample.
    Noisy,
    /// `sqrt(abar_s) * grad_z J(x0(z_s))` through the composed clean
    /// estimate, so the gradient reaches every coordinate the estimate
    /// depends on.
    #[default]
    Denoised,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Diffusion steps `S`.
    pub steps: usize,
    /// Inner Langevin updates per level `K`.
    pub langevin_steps: usize,
    pub lambda: f64,
    /// Guidance weight is `lambda * guidance_gain`.
    pub guidance_gain: f64,
    pub eta: f64,
    pub coverage_normalize: bool,
    pub guidance_space: GuidanceSpace,
    pub guidance_input: GuidanceInput,
    /// Bound on the implied clean estimate during transitions (model
    /// units); `inf` disables it.
    pub clip_denoised: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            langevin_steps: 1,
            lambda: 0.4,
            guidance_gain: DEFAULT_GUIDANCE_GAIN,
            eta: 1.0,
            coverage_normalize: true,
            guidance_space: GuidanceSpace::Eps,
            guidance_input: GuidanceInput::default(),
            clip_denoised: DEFAULT_CLIP,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn clip(&self) -> Option<f64> {
        self.clip_denoised.is_finite().then_some(self.clip_denoised)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one diffusion step".into()));
        }
        if !(self.lambda >= 0.0) || !(self.guidance_gain >= 0.0) || !(self.eta > 0.0) || !(self.clip_denoised > 0.0) {
            return Err(Error::Config(format!(
                "lambda and guidance_gain must be >= 0, eta and clip_denoised > 0 (got {}, {}, {}, {})",
                self.lambda, self.guidance_gain, self.eta, self.clip_denoised
            )));
        }
        Ok(())
    }
}

/// Composed noise estimate for `n_runs` stacked design variables (model
/// space). Each entry's model sees its slice; outputs are summed per
/// coordinate and divided by coverage, or by the entry count when
/// `coverage_normalize` is off.
pub fn composed_eps(
    z: &[f64],
    n_runs: usize,
    frac: f64,
    plan: &CompositionPlan,
    registry: &ModelRegistry,
    coverage_normalize: bool,
) -> Result<Vec<f64>> {
    compose_entries(z, n_runs, frac, plan, registry, coverage_normalize, None)
}

/// `cot^T d eps / d z` of [`composed_eps`] at `z`.
pub fn composed_eps_vjp(
    z: &[f64],
    cot: &[f64],
    n_runs: usize,
    frac: f64,
    plan: &CompositionPlan,
    registry: &ModelRegistry,
    coverage_normalize: bool,
) -> Result<Vec<f64>> {
    if cot.len() != z.len() {
        return Err(Error::Shape {
            op: "composed_eps_vjp",
            left: vec![cot.len()],
            right: vec![z.len()],
        });
    }
    compose_entries(z, n_runs, frac, plan, registry, coverage_normalize, Some(cot))
}

fn compose_entries(
    z: &[f64],
    n_runs: usize,
    frac: f64,
    plan: &CompositionPlan,
    registry: &ModelRegistry,
    coverage_normalize: bool,
    cot: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let len = plan.len();
    if z.len() != n_runs * len {
        return Err(Error::Shape {
            op: "composed_eps",
            left: vec![z.len()],
            right: vec![n_runs, len],
        });
    }
    let n_entries = plan.entries.len() as f64;
    let divisor = |k: usize| {
        if coverage_normalize {
            plan.coverage[k % len] as f64
        } else {
            n_entries
        }
    };
    let mut acc = vec![0.0f64; z.len()];
    let mut by_model: BTreeMap<&str, Vec<&PlanEntry>> = BTreeMap::new();
    for e in &plan.entries {
        by_model.entry(e.model_id.as_str()).or_default().push(e);
    }
    for (id, entries) in by_model {
        let model = registry.get(id)?;
        let (wl, ch) = (model.window_len(), model.channels());
        let per = wl * ch;
        if let Some(bad) = entries.iter().find(|e| e.index_map.len() != per) {
            return Err(Error::Shape {
                op: "composed_eps entry vs model",
                left: vec![bad.index_map.len()],
                right: vec![wl, ch],
            });
        }
        // jobs ordered run-major then entry
        let jobs: Vec<(usize, &PlanEntry)> = (0..n_runs)
            .flat_map(|r| entries.iter().map(move |e| (r, *e)))
            .collect();
        for chunk in jobs.chunks(PREDICT_CHUNK) {
            let gather = |src: &[f64], scaled: bool| -> Vec<f32> {
                let mut data = Vec::with_capacity(chunk.len() * per);
                for (r, e) in chunk {
                    data.extend(e.index_map.iter().map(|&i| {
                        let k = r * len + i;
                        (if scaled { src[k] / divisor(k) } else { src[k] }) as f32
                    }));
                }
                data
            };
            let shape = vec![chunk.len(), wl, ch];
            let x = Tensor::new(shape.clone(), gather(z, false))?;
            let fracs = vec![frac; chunk.len()];
            let out = match cot {
                None => model.predict_eps(&x, &fracs)?,
                Some(c) => model.eps_vjp(&x, &fracs, &Tensor::new(shape, gather(c, true))?)?,
            };
            for (k, (r, e)) in chunk.iter().enumerate() {
                let o = &out.data()[k * per..(k + 1) * per];
                let ar = &mut acc[r * len..(r + 1) * len];
                for (&i, &v) in e.index_map.iter().zip(o) {
                    ar[i] += v as f64;
                }
            }
        }
    }
    if cot.is_none() {
        for (k, a) in acc.iter_mut().enumerate() {
            *a /= divisor(k);
        }
    }
    Ok(acc)
}

/// Designed initial states and trajectories in box units.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignOutput {
    pub header: DesignHeader,
    /// `[n_runs, n_bodies, FEATURES]`.
    pub gamma: Vec<f64>,
    /// `[n_runs, n_frames, n_bodies * FEATURES]` when the method produces one.
    pub trajectory: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignHeader {
    pub method: String,
    pub n_runs: usize,
    pub n_bodies: usize,
    pub n_frames: usize,
    pub seed: u64,
    /// Method-specific settings (plan summary, sampler or optimizer config).
    pub config: serde_json::Value,
}

const DESIGN_MAGIC: &[u8; 8] = b"CINDMD1\0";
const DESIGN_VERSION: u32 = 1;

impl DesignOutput {
    pub fn gamma_of(&self, run: usize) -> &[f64] {
        let w = self.header.n_bodies * FEATURES;
        &self.gamma[run * w..(run + 1) * w]
    }

    pub fn trajectory_of(&self, run: usize) -> Option<&[f64]> {
        let n = self.header.n_frames * self.header.n_bodies * FEATURES;
        self.trajectory.as_ref().map(|t| &t[run * n..(run + 1) * n])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(DESIGN_MAGIC)?;
        w.write_all(&DESIGN_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(&header)?;
        w.write_all(&[self.trajectory.is_some() as u8])?;
        for v in self.gamma.iter().chain(self.trajectory.iter().flatten()) {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != DESIGN_MAGIC {
            return Err(Error::Format("not a design output file".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != DESIGN_VERSION {
            return Err(Error::Format(format!("unsupported design file version {version}")));
        }
        r.read_exact(&mut b4)?;
        let mut header = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut header)?;
        let header: DesignHeader = serde_json::from_slice(&header)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut read_f32s = |n: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect())
        };
        let gamma = read_f32s(header.n_runs * header.n_bodies * FEATURES)?;
        let trajectory = match flag[0] {
            0 => None,
            1 => Some(read_f32s(header.n_runs * header.n_frames * header.n_bodies * FEATURES)?),
            f => return Err(Error::Format(format!("bad trajectory flag {f}"))),
        };
        Ok(Self {
            header,
            gamma,
            trajectory,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

/// Guided compositional sampling of `n_runs` designs.
///
/// From `z_S ~ N(0, I)`, each level runs `K` inner updates
/// `z <- z - eta_s * eps_tilde + sigma_s * xi` with `eta_s = eta * beta_s`,
/// followed by one ancestral transition to the next level. `eps_tilde` is
/// the composed estimate plus the scaled objective gradient.
pub fn design(
    plan: &CompositionPlan,
    objective: &DesignObjective,
    config: &SamplerConfig,
    registry: &ModelRegistry,
    n_runs: usize,
) -> Result<DesignOutput> {
    config.validate()?;
    objective.validate()?;
    let schedule = cosine_schedule(config.steps)?;
    let len = plan.len();
    let scaling = registry.scaling;
    let mut rngs: Vec<_> = (0..n_runs).map(|i| chain_rng(config.seed, i)).collect();
    let mut z: Vec<f64> = rngs.iter_mut().flat_map(|r| normal_vec(r, len)).collect();

    let eps_at = |z: &[f64], s: usize| composed_eps(z, n_runs, schedule.frac(s), plan, registry, config.coverage_normalize);
    let grad_at = |x: &[f64]| -> Vec<f64> {
        let mut out = Vec::with_capacity(x.len());
        for r in 0..n_runs {
            let xr = scaling.to_box(&x[r * len..(r + 1) * len]);
            let (_, mut g) = objective.objective_and_grad(&xr, plan.n_frames, plan.n_bodies);
            scaling.grad_to_model(&mut g);
            out.extend(g);
        }
        out
    };
    // noise-space guidance term, `None` when guidance is off
    let guide_at = |z: &[f64], eps: &[f64], s: usize| -> Result<Option<Vec<f64>>> {
        let weight = config.lambda * config.guidance_gain;
        if weight == 0.0 {
            return Ok(None);
        }
        let f = weight * config.guidance_space.factor(&schedule, s);
        let dir = match config.guidance_input {
            GuidanceInput::Noisy => grad_at(z),
            GuidanceInput::Denoised => {
                let ab = schedule.alpha_bar(s);
                let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt() * config.eta);
                let c = config.clip().unwrap_or(f64::INFINITY);
                let x0: Vec<f64> = z.iter().zip(eps).map(|(zi, e)| ((zi - sb * e) / sa).clamp(-c, c)).collect();
                let v = grad_at(&x0);
                let jv = composed_eps_vjp(z, &v, n_runs, schedule.frac(s), plan, registry, config.coverage_normalize)?;
                v.iter().zip(jv).map(|(vi, j)| vi - sb * j).collect()
            }
        };
        Ok(Some(dir.into_iter().map(|d| f * d).collect()))
    };
    let check = |z: &[f64], s: usize, k: Option<usize>| -> Result<()> {
        match z.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::NonFinite(format!(
                "design state at step {s}, inner iteration {k:?} (coordinate {i})"
            ))),
            None => Ok(()),
        }
    };

    for s in (1..=config.steps).rev() {
        let eta_s = config.eta * schedule.beta(s);
        let sigma = schedule.sigma(s);
        for k in 0..config.langevin_steps {
            let mut eps = eps_at(&z, s)?;
            if let Some(g) = guide_at(&z, &eps, s)? {
                for (e, gi) in eps.iter_mut().zip(g) {
                    *e += gi;
                }
            }
            let noise: Vec<f64> = rngs.iter_mut().flat_map(|r| normal_vec(r, len)).collect();
            for ((zi, e), xi) in z.iter_mut().zip(&eps).zip(&noise) {
                *zi += -eta_s * e + sigma * xi;
            }
            check(&z, s, Some(k))?;
        }
        let eps = eps_at(&z, s)?;
        let guide = guide_at(&z, &eps, s)?;
        let noise: Option<Vec<f64>> = (s > 1).then(|| rngs.iter_mut().flat_map(|r| normal_vec(r, len)).collect());
        schedule.transition(&mut z, &eps, guide.as_deref(), s, config.eta, noise.as_deref(), config.clip());
        check(&z, s, None)?;
    }

    let trajectory = scaling.to_box(&z);
    let width = plan.frame_width();
    let gamma: Vec<f64> = (0..n_runs)
        .flat_map(|r| trajectory[r * len..r * len + width].iter().copied())
        .collect();
    Ok(DesignOutput {
        header: DesignHeader {
            method: "cindm".into(),
            n_runs,
            n_bodies: plan.n_bodies,
            n_frames: plan.n_frames,
            seed: config.seed,
            config: serde_json::json!({
                "sampler": config,
                "entries": plan.entries.len(),
                "objective": objective,
            }),
        },
        gamma,
        trajectory: Some(trajectory),
    })
}
