//! Ground-truth solver for equal-mass elastic balls in the unit box.
//!
//! Units are normalized box units: a raw simulation box of 200 is mapped to
//! `[0, 1]`, so a raw radius of 20 becomes 0.1 and raw velocities drawn from
//! `U(-100, 100)` become `U(-0.5, 0.5)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the raw simulation box the normalized units derive from.
pub const RAW_BOX_SIZE: f64 = 200.0;

/// Features stored per body and frame: `x, y, vx, vy`.
pub const FEATURES: usize = 4;

const OVERLAP_TOL: f64 = 1e-9;
const PLACEMENT_RETRIES: usize = 10_000;

/// Converts a raw-unit coordinate or velocity to box units.
pub fn from_raw_units(v: f64) -> f64 {
    v / RAW_BOX_SIZE
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BallState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl BallState {
    pub fn new(x: f64, y: f64, vx: f64, vy: f64) -> Self {
        Self {
            pos: [x, y],
            vel: [vx, vy],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.vel).all(|v| v.is_finite())
    }

    pub fn kinetic_energy(&self) -> f64 {
        0.5 * (self.vel[0] * self.vel[0] + self.vel[1] * self.vel[1])
    }

    pub fn features(&self) -> [f64; FEATURES] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_bodies: usize,
    pub radius: f64,
    pub dt_sim: f64,
    pub record_stride: usize,
    pub n_steps_sim: usize,
    pub velocity_range: [f64; 2],
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_bodies: 2,
            radius: 0.1,
            dt_sim: 1.0 / 60.0,
            record_stride: 4,
            n_steps_sim: 1000,
            velocity_range: [-0.5, 0.5],
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.radius < 0.5) {
            return Err(Error::Config(format!("radius {} outside (0, 0.5)", self.radius)));
        }
        if self.n_bodies == 0 {
            return Err(Error::Config("n_bodies must be positive".into()));
        }
        if !(self.dt_sim > 0.0) || self.record_stride == 0 {
            return Err(Error::Config("dt_sim and record_stride must be positive".into()));
        }
        if self.velocity_range[0] > self.velocity_range[1] {
            return Err(Error::Config("velocity_range is reversed".into()));
        }
        Ok(())
    }

    /// Time between recorded frames.
    pub fn dt_record(&self) -> f64 {
        self.dt_sim * self.record_stride as f64
    }

    /// Number of recorded frames of a full rollout.
    pub fn n_frames(&self) -> usize {
        self.n_steps_sim / self.record_stride
    }

    /// Same config with the rollout length set to `frames` recorded frames.
    pub fn with_frames(&self, frames: usize) -> Self {
        Self {
            n_steps_sim: frames * self.record_stride,
            ..self.clone()
        }
    }
}

/// Recorded trajectory, row-major `[frames][bodies][x, y, vx, vy]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub n_frames: usize,
    pub n_bodies: usize,
    pub dt_record: f64,
    pub data: Vec<f64>,
}

impl Trajectory {
    pub fn new(n_frames: usize, n_bodies: usize, dt_record: f64, data: Vec<f64>) -> Result<Self> {
        if n_frames == 0 || data.len() != n_frames * n_bodies * FEATURES {
            return Err(Error::Shape {
                op: "trajectory",
                left: vec![n_frames, n_bodies, FEATURES],
                right: vec![data.len()],
            });
        }
        Ok(Self {
            n_frames,
            n_bodies,
            dt_record,
            data,
        })
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        let w = self.n_bodies * FEATURES;
        &self.data[t * w..(t + 1) * w]
    }

    pub fn state(&self, t: usize, body: usize) -> BallState {
        let f = &self.frame(t)[body * FEATURES..(body + 1) * FEATURES];
        BallState::new(f[0], f[1], f[2], f[3])
    }

    pub fn states(&self, t: usize) -> Vec<BallState> {
        (0..self.n_bodies).map(|b| self.state(t, b)).collect()
    }
}

fn check_states(states: &[BallState]) -> Result<()> {
    for (i, s) in states.iter().enumerate() {
        if !s.is_finite() {
            return Err(Error::InvalidState(format!("ball {i} has non-finite state {s:?}")));
        }
    }
    Ok(())
}

/// Validates that balls are inside the box and pairwise non-overlapping.
pub fn check_placement(states: &[BallState], radius: f64, tol: f64) -> Result<()> {
    check_states(states)?;
    for (i, s) in states.iter().enumerate() {
        for &p in &s.pos {
            if p < radius - tol || p > 1.0 - radius + tol {
                return Err(Error::InvalidState(format!("ball {i} at {:?} is outside the box", s.pos)));
            }
        }
    }
    for i in 0..states.len() {
        for j in i + 1..states.len() {
            let d = dist(states[i].pos, states[j].pos);
            if d < 2.0 * radius - tol {
                return Err(Error::InvalidState(format!(
                    "balls {i} and {j} overlap (distance {d:.6} < {:.6})",
                    2.0 * radius
                )));
            }
        }
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Advances all balls by `dt`: free flight, pairwise elastic contacts in
/// sorted `(i, j)` order, then wall reflections.
pub fn step(states: &[BallState], dt: f64, radius: f64) -> Result<Vec<BallState>> {
    check_states(states)?;
    let mut next: Vec<BallState> = states
        .iter()
        .map(|s| BallState {
            pos: [s.pos[0] + s.vel[0] * dt, s.pos[1] + s.vel[1] * dt],
            vel: s.vel,
        })
        .collect();

    let n = next.len();
    for i in 0..n {
        for j in i + 1..n {
            resolve_pair(&mut next, i, j, radius);
        }
    }
    for s in &mut next {
        reflect_walls(s, radius);
    }
    // Pair separation can push a ball through a wall; relax positions only.
    for _ in 0..16 {
        let mut moved = false;
        for i in 0..n {
            for j in i + 1..n {
                moved |= separate(&mut next, i, j, radius);
            }
        }
        for s in &mut next {
            for a in 0..2 {
                let c = s.pos[a].clamp(radius, 1.0 - radius);
                moved |= c != s.pos[a];
                s.pos[a] = c;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(next)
}

fn resolve_pair(s: &mut [BallState], i: usize, j: usize, radius: f64) {
    let d = [s[j].pos[0] - s[i].pos[0], s[j].pos[1] - s[i].pos[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    if len >= 2.0 * radius || len == 0.0 {
        return;
    }
    let n = [d[0] / len, d[1] / len];
    let rel = (s[j].vel[0] - s[i].vel[0]) * n[0] + (s[j].vel[1] - s[i].vel[1]) * n[1];
    if rel < 0.0 {
        // equal masses: normal components swap
        for a in 0..2 {
            s[i].vel[a] += rel * n[a];
            s[j].vel[a] -= rel * n[a];
        }
    }
    separate(s, i, j, radius);
}

/// Pushes an overlapping pair apart symmetrically along the centre line.
fn separate(s: &mut [BallState], i: usize, j: usize, radius: f64) -> bool {
    let d = [s[j].pos[0] - s[i].pos[0], s[j].pos[1] - s[i].pos[1]];
    let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
    let overlap = 2.0 * radius - len;
    if overlap <= OVERLAP_TOL * 1e-3 || len == 0.0 {
        return false;
    }
    let n = [d[0] / len, d[1] / len];
    for a in 0..2 {
        s[i].pos[a] -= 0.5 * overlap * n[a];
        s[j].pos[a] += 0.5 * overlap * n[a];
    }
    true
}

fn reflect_walls(s: &mut BallState, radius: f64) {
    let (lo, hi) = (radius, 1.0 - radius);
    for a in 0..2 {
        if s.pos[a] < lo {
            s.pos[a] = 2.0 * lo - s.pos[a];
            s.vel[a] = s.vel[a].abs();
        } else if s.pos[a] > hi {
            s.pos[a] = 2.0 * hi - s.pos[a];
            s.vel[a] = -s.vel[a].abs();
        }
        s.pos[a] = s.pos[a].clamp(lo, hi);
    }
}

/// Simulates `config.n_steps_sim` substeps and records every
/// `config.record_stride`-th state, starting with `initial`.
pub fn rollout(initial: &[BallState], config: &SimConfig) -> Result<Trajectory> {
    config.validate()?;
    check_placement(initial, config.radius, OVERLAP_TOL)?;
    let n_frames = config.n_frames().max(1);
    let mut data = Vec::with_capacity(n_frames * initial.len() * FEATURES);
    let mut state = initial.to_vec();
    for frame in 0..n_frames {
        if frame > 0 {
            for _ in 0..config.record_stride {
                state = step(&state, config.dt_sim, config.radius)?;
            }
        }
        for s in &state {
            data.extend_from_slice(&s.features());
        }
    }
    Trajectory::new(n_frames, initial.len(), config.dt_record(), data)
}

/// Rejection-samples non-overlapping positions in `[r, 1 - r]^2` and uniform
/// velocities from `config.velocity_range`.
pub fn sample_initial(config: &SimConfig, rng: &mut impl Rng) -> Result<Vec<BallState>> {
    config.validate()?;
    let r = config.radius;
    let [vlo, vhi] = config.velocity_range;
    let mut out: Vec<BallState> = Vec::with_capacity(config.n_bodies);
    let mut retries = 0;
    while out.len() < config.n_bodies {
        let p = [rng.random_range(r..=1.0 - r), rng.random_range(r..=1.0 - r)];
        if out.iter().any(|s| dist(s.pos, p) < 2.0 * r) {
            retries += 1;
            if retries >= PLACEMENT_RETRIES {
                return Err(Error::InfeasiblePacking {
                    n_bodies: config.n_bodies,
                    radius: r,
                    retries,
                });
            }
            continue;
        }
        let v = if vhi > vlo {
            [rng.random_range(vlo..vhi), rng.random_range(vlo..vhi)]
        } else {
            [vlo, vlo]
        };
        out.push(BallState { pos: p, vel: v });
    }
    Ok(out)
}

/// Moves balls to the nearest feasible configuration: clamp into the box,
/// then iteratively separate overlapping pairs. Returns the projected states
/// and the total displacement, or `None` when no feasible configuration was
/// reached within the iteration budget.
pub fn project_feasible(states: &[BallState], radius: f64) -> Option<(Vec<BallState>, f64)> {
    if states.iter().any(|s| !s.is_finite()) {
        return None;
    }
    let mut out = states.to_vec();
    for _ in 0..1000 {
        for s in &mut out {
            for a in 0..2 {
                s.pos[a] = s.pos[a].clamp(radius, 1.0 - radius);
            }
        }
        if check_placement(&out, radius, OVERLAP_TOL).is_ok() {
            let moved = states.iter().zip(&out).map(|(a, b)| dist(a.pos, b.pos)).sum();
            return Some((out, moved));
        }
        let n = out.len();
        for i in 0..n {
            for j in i + 1..n {
                if dist(out[i].pos, out[j].pos) == 0.0 {
                    // coincident centres: split along x deterministically
                    out[i].pos[0] -= 1e-6;
                    out[j].pos[0] += 1e-6;
                }
                separate(&mut out, i, j, radius + OVERLAP_TOL);
            }
        }
    }
    None
}
