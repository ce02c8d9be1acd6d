//! Ground-truth re-simulation of designs, metric aggregation, tables and
//! sweeps.

use serde::{Deserialize, Serialize};

use crate::compose::{DesignHeader, DesignObjective, DesignOutput};
use crate::error::{Error, Result};
use crate::sim::{self, BallState, SimConfig, FEATURES};

/// Metrics of one design re-simulated by the solver.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub design_obj: f64,
    pub mae: Option<f64>,
    /// Total position displacement applied to make the design feasible.
    pub projection: f64,
}

/// Runs the solver from `gamma` (`[n_bodies, FEATURES]`, box units) for
/// `n_frames` frames and scores the solver trajectory. Infeasible designs
/// are projected first; velocities are clamped to `[-1, 1]`.
pub fn evaluate(
    gamma: &[f64],
    designed: Option<&[f64]>,
    n_frames: usize,
    sim_config: &SimConfig,
    objective: &DesignObjective,
) -> Result<(Evaluation, sim::Trajectory)> {
    if gamma.len() % FEATURES != 0 || gamma.is_empty() {
        return Err(Error::Shape {
            op: "evaluate gamma",
            left: vec![gamma.len()],
            right: vec![FEATURES],
        });
    }
    let states: Vec<BallState> = gamma
        .chunks_exact(FEATURES)
        .map(|c| BallState::new(c[0], c[1], c[2].clamp(-1.0, 1.0), c[3].clamp(-1.0, 1.0)))
        .collect();
    let (states, projection) = sim::project_feasible(&states, sim_config.radius)
        .ok_or_else(|| Error::InvalidState("design could not be projected to a feasible placement".into()))?;
    if projection > 0.0 {
        log::debug!("design projected by {projection:.4}");
    }
    let config = SimConfig {
        n_bodies: states.len(),
        ..sim_config.with_frames(n_frames)
    };
    let traj = sim::rollout(&states, &config)?;
    let design_obj = objective.final_frame(traj.frame(n_frames - 1));
    let mae = match designed {
        Some(d) => {
            if d.len() != traj.data.len() {
                return Err(Error::Shape {
                    op: "evaluate designed trajectory",
                    left: vec![d.len()],
                    right: vec![n_frames, states.len() * FEATURES],
                });
            }
            let sum: f64 = d.iter().zip(&traj.data).map(|(a, b)| (a - b).abs()).sum();
            Some(sum / d.len() as f64)
        }
        None => None,
    };
    Ok((
        Evaluation {
            design_obj,
            mae,
            projection,
        },
        traj,
    ))
}

/// Monte-Carlo estimate of `E|p - target|` for `p` uniform in the unit
/// square.
pub fn uniform_baseline(target: [f64; 2], n_samples: usize, seed: u64) -> f64 {
    use rand::Rng;
    let mut rng = crate::rng::labeled(seed, "uniform-baseline", 0);
    let sum: f64 = (0..n_samples)
        .map(|_| {
            let (x, y): (f64, f64) = (rng.random(), rng.random());
            (x - target[0]).hypot(y - target[1])
        })
        .sum();
    sum / n_samples as f64
}

/// Initial states drawn like the training data, as a design method.
pub fn random_designs(sim_config: &SimConfig, n_bodies: usize, n_frames: usize, n_runs: usize, seed: u64) -> Result<DesignOutput> {
    let cfg = SimConfig {
        n_bodies,
        ..sim_config.clone()
    };
    let mut gamma = Vec::with_capacity(n_runs * n_bodies * FEATURES);
    for run in 0..n_runs {
        let mut rng = crate::rng::labeled(seed, "random-design", run as u64);
        gamma.extend(sim::sample_initial(&cfg, &mut rng)?.iter().flat_map(|s| s.features()));
    }
    Ok(DesignOutput {
        header: DesignHeader {
            method: "random".into(),
            n_runs,
            n_bodies,
            n_frames,
            seed,
            config: serde_json::to_value(&cfg)?,
        },
        gamma,
        trajectory: None,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub n_bodies: usize,
    pub n_frames: usize,
}

impl Scenario {
    pub const fn new(n_bodies: usize, n_frames: usize) -> Self {
        Self { n_bodies, n_frames }
    }

    pub fn label(&self) -> String {
        format!("{}-body {} steps", self.n_bodies, self.n_frames)
    }
}

/// Two-body horizons followed by the many-body grid.
pub const TABLE_SCENARIOS: [Scenario; 8] = [
    Scenario::new(2, 24),
    Scenario::new(2, 34),
    Scenario::new(2, 44),
    Scenario::new(2, 54),
    Scenario::new(4, 24),
    Scenario::new(4, 44),
    Scenario::new(8, 24),
    Scenario::new(8, 44),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub method: String,
    pub n_bodies: usize,
    pub n_frames: usize,
    pub run: usize,
    pub seed: u64,
    pub design_obj: f64,
    pub mae: Option<f64>,
    pub projection: f64,
}

/// Mean and 95% confidence half-width `1.96 * std / sqrt(n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub mean: f64,
    pub ci: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { n, mean, ci })
    }
}

/// Re-simulates every run of a design output. Runs whose design cannot be
/// made feasible are returned separately by index.
pub fn evaluate_output(
    output: &DesignOutput,
    sim_config: &SimConfig,
    objective: &DesignObjective,
) -> Result<(Vec<RunRecord>, Vec<usize>)> {
    let h = &output.header;
    let mut records = Vec::with_capacity(h.n_runs);
    let mut failed = Vec::new();
    for run in 0..h.n_runs {
        match evaluate(output.gamma_of(run), output.trajectory_of(run), h.n_frames, sim_config, objective) {
            Ok((e, _)) => records.push(RunRecord {
                method: h.method.clone(),
                n_bodies: h.n_bodies,
                n_frames: h.n_frames,
                run,
                seed: h.seed,
                design_obj: e.design_obj,
                mae: e.mae,
                projection: e.projection,
            }),
            Err(Error::InvalidState(msg)) => {
                log::warn!("{} run {run}: {msg}", h.method);
                failed.push(run);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((records, failed))
}

/// Produces designs for a scenario.
pub trait Designer: Send + Sync {
    fn design(&self, scenario: Scenario, n_runs: usize, seed: u64) -> Result<DesignOutput>;

    /// Reason this designer cannot handle `scenario`, if any.
    fn unsupported(&self, _scenario: Scenario) -> Option<String> {
        None
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub method: String,
    pub scenario: Scenario,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub records: Vec<RunRecord>,
    /// `(method, scenario, failed run count)`.
    pub failures: Vec<(String, Scenario, usize)>,
    pub skipped: Vec<SkippedCell>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub method: String,
    pub scenario: Scenario,
    pub design_obj: Aggregate,
    pub mae: Option<Aggregate>,
    pub failed: usize,
}

impl DesignReport {
    /// Method order of first appearance.
    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Aggregates recomputed from the per-run records.
    pub fn cell(&self, method: &str, scenario: Scenario) -> Option<CellSummary> {
        let runs: Vec<&RunRecord> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.n_bodies == scenario.n_bodies && r.n_frames == scenario.n_frames)
            .collect();
        let design_obj = Aggregate::of(&runs.iter().map(|r| r.design_obj).collect::<Vec<_>>())?;
        let maes: Vec<f64> = runs.iter().filter_map(|r| r.mae).collect();
        let failed = self
            .failures
            .iter()
            .filter(|(m, s, _)| m == method && *s == scenario)
            .map(|f| f.2)
            .sum();
        Some(CellSummary {
            method: method.to_string(),
            scenario,
            design_obj,
            mae: Aggregate::of(&maes),
            failed,
        })
    }

    pub fn cells(&self) -> Vec<CellSummary> {
        let mut scenarios: Vec<Scenario> = self.records.iter().map(|r| Scenario::new(r.n_bodies, r.n_frames)).collect();
        scenarios.sort();
        scenarios.dedup();
        let mut out = Vec::new();
        for m in self.methods() {
            for &s in &scenarios {
                out.extend(self.cell(&m, s));
            }
        }
        out
    }
}

/// Runs every designer on every scenario and re-simulates the designs.
/// Designers given as `None` (e.g. missing checkpoints) and unsupported
/// cells are listed in `skipped`.
pub fn run_experiment(
    designers: &[(String, Option<&dyn Designer>)],
    scenarios: &[Scenario],
    n_runs: usize,
    seed: u64,
    sim_config: &SimConfig,
    objective: &DesignObjective,
) -> Result<DesignReport> {
    let mut report = DesignReport::default();
    for (name, designer) in designers {
        for &scenario in scenarios {
            let skip = |reason: String| SkippedCell {
                method: name.clone(),
                scenario,
                reason,
            };
            let Some(d) = designer else {
                report.skipped.push(skip("no trained model".into()));
                continue;
            };
            if let Some(reason) = d.unsupported(scenario) {
                report.skipped.push(skip(reason));
                continue;
            }
            log::info!("{name}: {}", scenario.label());
            let mut out = d.design(scenario, n_runs, seed)?;
            out.header.method = name.clone();
            let (records, failed) = evaluate_output(&out, sim_config, objective)?;
            report.records.extend(records);
            if !failed.is_empty() {
                report.failures.push((name.clone(), scenario, failed.len()));
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Csv,
    Markdown,
}

pub const CSV_HEADER: &str = "method,n_bodies,n_frames,n_runs,n_failed,design_obj_mean,design_obj_ci,mae_mean,mae_ci";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Writes the per-cell aggregates. Floats use the shortest representation
/// that parses back to the same value.
pub fn write_csv(report: &DesignReport, mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for c in report.cells() {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            c.method,
            c.scenario.n_bodies,
            c.scenario.n_frames,
            c.design_obj.n,
            c.failed,
            c.design_obj.mean,
            c.design_obj.ci,
            opt(c.mae.map(|a| a.mean)),
            opt(c.mae.map(|a| a.ci)),
        )?;
    }
    Ok(())
}

/// Parses a table written by [`write_csv`].
pub fn read_csv(text: &str) -> Result<Vec<CellSummary>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected table header".into()));
    }
    let bad = |l: &str| Error::Format(format!("bad table row '{l}'"));
    let mut out = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(bad(line));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
        let n = int(f[3])?;
        let mae = if f[7].is_empty() {
            None
        } else {
            Some(Aggregate {
                n,
                mean: num(f[7])?,
                ci: num(f[8])?,
            })
        };
        out.push(CellSummary {
            method: f[0].to_string(),
            scenario: Scenario::new(int(f[1])?, int(f[2])?),
            design_obj: Aggregate {
                n,
                mean: num(f[5])?,
                ci: num(f[6])?,
            },
            mae,
            failed: int(f[4])?,
        });
    }
    Ok(out)
}

/// Markdown table: one row per method, `design obj | MAE` per scenario in
/// the fixed scenario order, lowest mean per column in bold.
pub fn write_markdown(report: &DesignReport, mut w: impl std::io::Write) -> Result<()> {
    let present: Vec<Scenario> = {
        let mut all: Vec<Scenario> = TABLE_SCENARIOS.to_vec();
        for r in &report.records {
            let s = Scenario::new(r.n_bodies, r.n_frames);
            if !all.contains(&s) {
                all.push(s);
            }
        }
        all.into_iter()
            .filter(|s| report.records.iter().any(|r| r.n_bodies == s.n_bodies && r.n_frames == s.n_frames))
            .collect()
    };
    let methods = report.methods();
    let cells: Vec<Vec<Option<CellSummary>>> = methods
        .iter()
        .map(|m| present.iter().map(|&s| report.cell(m, s)).collect())
        .collect();
    let best = |col: usize, pick: &dyn Fn(&CellSummary) -> Option<f64>| -> Option<f64> {
        cells
            .iter()
            .filter_map(|row| row[col].as_ref().and_then(pick))
            .min_by(|a, b| a.total_cmp(b))
    };

    write!(w, "| Method |")?;
    for s in &present {
        write!(w, " {} design obj | {} MAE |", s.label(), s.label())?;
    }
    writeln!(w)?;
    write!(w, "|---|")?;
    for _ in &present {
        write!(w, "---|---|")?;
    }
    writeln!(w)?;
    let fmt = |a: Option<Aggregate>, best: Option<f64>| match a {
        None => "—".to_string(),
        Some(a) if Some(a.mean) == best => format!("**{:.4} ± {:.4}**", a.mean, a.ci),
        Some(a) => format!("{:.4} ± {:.4}", a.mean, a.ci),
    };
    for (m, row) in methods.iter().zip(&cells) {
        write!(w, "| {m} |")?;
        for (col, cell) in row.iter().enumerate() {
            let obj_best = best(col, &|c| Some(c.design_obj.mean));
            let mae_best = best(col, &|c| c.mae.map(|a| a.mean));
            write!(
                w,
                " {} | {} |",
                fmt(cell.as_ref().map(|c| c.design_obj), obj_best),
                fmt(cell.as_ref().and_then(|c| c.mae), mae_best)
            )?;
        }
        writeln!(w)?;
    }
    if !report.skipped.is_empty() {
        writeln!(w)?;
        for s in &report.skipped {
            writeln!(w, "- skipped {} on {}: {}", s.method, s.scenario.label(), s.reason)?;
        }
    }
    for (m, s, n) in &report.failures {
        writeln!(w, "- {m} on {}: {n} infeasible runs excluded", s.label())?;
    }
    Ok(())
}

pub fn emit_table(report: &DesignReport, format: TableFormat, path: &std::path::Path) -> Result<()> {
    if report.records.is_empty() {
        return Err(Error::InvalidState("report has no runs".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        TableFormat::Csv => write_csv(report, &mut w)?,
        TableFormat::Markdown => write_markdown(report, &mut w)?,
    }
    std::io::Write::flush(&mut w)?;
    Ok(())
}

/// SVG of a designed trajectory (circles every 2 frames, darker later) over
/// the solver rollout ('+' marks), with the target as a star and the unit
/// box as frame. Both trajectories are `[n_frames, n_bodies * FEATURES]`.
pub fn write_trajectory_svg(
    designed: &[f64],
    solver: &[f64],
    n_bodies: usize,
    radius: f64,
    target: [f64; 2],
    mut w: impl std::io::Write,
) -> Result<()> {
    let width = n_bodies * FEATURES;
    if designed.len() != solver.len() || width == 0 || designed.len() % width != 0 {
        return Err(Error::Shape {
            op: "trajectory plot",
            left: vec![designed.len()],
            right: vec![solver.len()],
        });
    }
    let n_frames = designed.len() / width;
    const PX: f64 = 400.0;
    const PAD: f64 = 20.0;
    let x = |v: f64| PAD + v * PX;
    let y = |v: f64| PAD + (1.0 - v) * PX;
    let palette = ["31,119,180", "214,39,40", "44,160,44", "148,103,189", "255,127,14", "140,86,75", "227,119,194", "23,190,207"];
    let size = PX + 2.0 * PAD;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    )?;
    writeln!(
        w,
        r#"<rect x="{PAD}" y="{PAD}" width="{PX}" height="{PX}" fill="white" stroke="black" stroke-width="1.5"/>"#
    )?;
    for b in 0..n_bodies {
        let rgb = palette[b % palette.len()];
        for t in (0..n_frames).step_by(2) {
            let i = t * width + b * FEATURES;
            // shade ramps from faint to opaque over the horizon
            let shade = 0.15 + 0.85 * t as f64 / (n_frames.max(2) - 1) as f64;
            writeln!(
                w,
                r#"<circle cx="{:.2}" cy="{:.2}" r="{:.2}" fill="rgb({rgb})" fill-opacity="{shade:.3}" stroke="rgb({rgb})" stroke-opacity="{shade:.3}"/>"#,
                x(designed[i]),
                y(designed[i + 1]),
                radius * PX
            )?;
        }
        let mut d = String::new();
        for t in (0..n_frames).step_by(2) {
            let i = t * width + b * FEATURES;
            let (cx, cy) = (x(solver[i]), y(solver[i + 1]));
            d.push_str(&format!("M{:.2} {:.2}h8M{:.2} {:.2}v8", cx - 4.0, cy, cx, cy - 4.0));
        }
        writeln!(w, r#"<path d="{d}" stroke="black" stroke-width="1.2" fill="none"/>"#)?;
    }
    let (cx, cy) = (x(target[0]), y(target[1]));
    let star: Vec<String> = (0..10)
        .map(|k| {
            let a = std::f64::consts::PI * (k as f64 / 5.0 - 0.5);
            let r = if k % 2 == 0 { 10.0 } else { 4.0 };
            format!("{:.2},{:.2}", cx + r * a.cos(), cy + r * a.sin())
        })
        .collect();
    writeln!(w, r#"<polygon points="{}" fill="gold" stroke="black"/>"#, star.join(" "))?;
    writeln!(w, "</svg>")?;
    Ok(())
}

pub fn emit_trajectory_plot(
    designed: &[f64],
    solver: &[f64],
    n_bodies: usize,
    radius: f64,
    target: [f64; 2],
    out: &std::path::Path,
) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(out)?);
    write_trajectory_svg(designed, solver, n_bodies, radius, target, &mut w)?;
    std::io::Write::flush(&mut w)?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Lambda,
    Steps,
    BatchSize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub design_obj: Aggregate,
    pub mae: Option<Aggregate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub kind: SweepKind,
    pub scenario: Scenario,
    pub rows: Vec<SweepRow>,
}

/// Mean over groups of the best objective among the first `b` members.
/// `objs` is `[groups, group_size]` row-major.
pub fn best_of_b(objs: &[f64], group_size: usize, b: usize) -> f64 {
    let groups = objs.len() / group_size;
    let sum: f64 = (0..groups)
        .map(|g| {
            objs[g * group_size..g * group_size + b]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    sum / groups as f64
}

/// Sweeps one sampler setting of the compositional designer. For
/// `BatchSize`, `n_runs` groups of `max(grid)` designs are drawn once and
/// `r_B` is the mean per-group best of the first `B`.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    kind: SweepKind,
    grid: &[f64],
    scenario: Scenario,
    plan: &crate::compose::CompositionPlan,
    base: &crate::compose::SamplerConfig,
    registry: &crate::compose::ModelRegistry,
    n_runs: usize,
    sim_config: &SimConfig,
    objective: &DesignObjective,
) -> Result<SweepReport> {
    use crate::compose::{design, SamplerConfig};
    let summarize = |out: &DesignOutput| -> Result<(Vec<f64>, Option<Aggregate>)> {
        let (records, _) = evaluate_output(out, sim_config, objective)?;
        let maes: Vec<f64> = records.iter().filter_map(|r| r.mae).collect();
        Ok((records.iter().map(|r| r.design_obj).collect(), Aggregate::of(&maes)))
    };
    let mut rows = Vec::with_capacity(grid.len());
    match kind {
        SweepKind::Lambda | SweepKind::Steps => {
            for &v in grid {
                let cfg = match kind {
                    SweepKind::Lambda => SamplerConfig { lambda: v, ..*base },
                    _ => SamplerConfig {
                        steps: v as usize,
                        ..*base
                    },
                };
                let out = design(plan, objective, &cfg, registry, n_runs)?;
                let (objs, mae) = summarize(&out)?;
                let design_obj = Aggregate::of(&objs)
                    .ok_or_else(|| Error::InvalidState(format!("no feasible runs at {v}")))?;
                log::info!("sweep {kind:?} {v}: design obj {:.4}", design_obj.mean);
                rows.push(SweepRow { value: v, design_obj, mae });
            }
        }
        SweepKind::BatchSize => {
            let sizes: Vec<usize> = grid.iter().map(|&v| v as usize).collect();
            let gmax = sizes.iter().copied().max().unwrap_or(0);
            if gmax == 0 || sizes.contains(&0) {
                return Err(Error::Config("batch sizes must be positive".into()));
            }
            let out = design(plan, objective, base, registry, n_runs * gmax)?;
            let (records, failed) = evaluate_output(&out, sim_config, objective)?;
            if !failed.is_empty() {
                return Err(Error::InvalidState(format!("{} infeasible designs in batch sweep", failed.len())));
            }
            let objs: Vec<f64> = records.iter().map(|r| r.design_obj).collect();
            for &b in &sizes {
                let per_group: Vec<f64> = (0..n_runs)
                    .map(|g| best_of_b(&objs[g * gmax..(g + 1) * gmax], gmax, b))
                    .collect();
                rows.push(SweepRow {
                    value: b as f64,
                    design_obj: Aggregate::of(&per_group).expect("n_runs > 0"),
                    mae: None,
                });
            }
        }
    }
    Ok(SweepReport { kind, scenario, rows })
}

impl SweepReport {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "value,n_runs,design_obj_mean,design_obj_ci,mae_mean,mae_ci")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.value,
                r.design_obj.n,
                r.design_obj.mean,
                r.design_obj.ci,
                opt(r.mae.map(|a| a.mean)),
                opt(r.mae.map(|a| a.ci))
            )?;
        }
        Ok(())
    }

    pub fn write_markdown(&self, mut w: impl std::io::Write) -> Result<()> {
        let name = match self.kind {
            SweepKind::Lambda => "lambda",
            SweepKind::Steps => "diffusion steps",
            SweepKind::BatchSize => "batch size B",
        };
        writeln!(w, "{} ({})\n", name, self.scenario.label())?;
        writeln!(w, "| {name} | design obj | MAE |")?;
        writeln!(w, "|---|---|---|")?;
        for r in &self.rows {
            let mae = r
                .mae
                .map(|a| format!("{:.4} ± {:.4}", a.mean, a.ci))
                .unwrap_or_else(|| "—".into());
            writeln!(w, "| {} | {:.4} ± {:.4} | {mae} |", r.value, r.design_obj.mean, r.design_obj.ci)?;
        }
        Ok(())
    }
}
