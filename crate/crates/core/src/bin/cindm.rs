use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use clap::{Parser, Subcommand, ValueEnum};

use cindm::baselines::{BaselineMethod, SurrogateVariant};
use cindm::compose::{build_plan, DesignOutput};
use cindm::config::RunConfig;
use cindm::dataset::Dataset;
use cindm::diffusion::write_loss_csv;
use cindm::eval::{self, Designer, Scenario, SweepKind, TableFormat};
use cindm::pipeline::{self, CindmDesigner, Manifest, ManifestEntry, RandomDesigner, SurrogateDesigner};
use cindm::{Error, Result};

#[derive(Parser)]
#[command(name = "cindm", version, about = "Compositional inverse design with diffusion models")]
struct Cli {
    /// Overrides every component seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    #[value(name = "1-step")]
    OneStep,
    #[value(name = "23-step")]
    MultiStep,
}

impl From<Variant> for SurrogateVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::OneStep => SurrogateVariant::OneStep,
            Variant::MultiStep => SurrogateVariant::MultiStep,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Cindm,
    Cem,
    Backprop,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Lambda,
    Steps,
    BatchSize,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the training (and validation) trajectories.
    GenData {
        #[arg(long)]
        n_sims: Option<usize>,
    },
    /// Train the window denoiser on the generated dataset.
    TrainDiffusion {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train a forward surrogate for the baselines.
    TrainSurrogate {
        #[arg(long, value_enum, default_value = "23-step")]
        variant: Variant,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Design initial states for one scenario.
    Design {
        #[arg(long, value_enum, default_value = "cindm")]
        method: Method,
        #[arg(long, default_value_t = 2)]
        bodies: usize,
        #[arg(long, default_value_t = 24)]
        frames: usize,
        #[arg(long)]
        runs: Option<usize>,
        /// Surrogate used by cem/backprop.
        #[arg(long, value_enum, default_value = "23-step")]
        variant: Variant,
    },
    /// Re-simulate a design file and print its metrics.
    Evaluate {
        design: PathBuf,
    },
    /// Run the configured methods on the configured scenarios and write
    /// CSV and Markdown tables.
    Table,
    /// Render one run of a design file next to its solver rollout.
    Plot {
        design: PathBuf,
        #[arg(long, default_value_t = 0)]
        run: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep guidance weight, diffusion steps or best-of-B batch size.
    Sweep {
        #[arg(long, value_enum)]
        kind: Option<Kind>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    config.validate()?;
    std::fs::create_dir_all(&cli.out)?;
    let started = SystemTime::now();
    let (name, artifacts) = dispatch(&cli.command, &mut config, &cli.out)?;
    Manifest::record(
        &cli.out,
        ManifestEntry {
            command: name.into(),
            config_digest: config.digest(),
            git_describe: pipeline::git_describe(),
            started: pipeline::timestamp(started),
            finished: pipeline::timestamp(SystemTime::now()),
            artifacts: artifacts.iter().map(|p| p.display().to_string()).collect(),
        },
    )?;
    std::fs::write(cli.out.join("config.toml"), config.to_toml())?;
    for a in &artifacts {
        println!("{}", a.display());
    }
    Ok(())
}

fn dispatch(cmd: &Command, config: &mut RunConfig, out: &Path) -> Result<(&'static str, Vec<PathBuf>)> {
    match cmd {
        Command::GenData { n_sims } => {
            if let Some(n) = n_sims {
                config.dataset.n_sims = *n;
            }
            let train = Dataset::generate(&config.sim, config.dataset.n_sims)?;
            let path = pipeline::dataset_path(out);
            train.save(&path)?;
            let mut paths = vec![path];
            if config.dataset.n_val_sims > 0 {
                let val_cfg = cindm::sim::SimConfig {
                    seed: config.sim.seed.wrapping_add(1),
                    ..config.sim.clone()
                };
                let val = Dataset::generate(&val_cfg, config.dataset.n_val_sims)?;
                let vp = pipeline::validation_path(out);
                val.save(&vp)?;
                paths.push(vp);
            }
            log::info!("{}", serde_json::to_string(&train.summary())?);
            Ok(("gen-data", paths))
        }
        Command::TrainDiffusion { steps } => {
            if let Some(s) = steps {
                config.train.total_steps = *s;
            }
            let ds = Dataset::load(&pipeline::dataset_path(out))?;
            let ckpt = pipeline::denoiser_path(out);
            let trained = pipeline::train_denoiser(config, &ds, |state| {
                log::info!("checkpoint at step {}", state.steps_done);
                state.save(&ckpt)
            })?;
            trained.save(&ckpt)?;
            let log_path = out.join("train-diffusion.csv");
            write_loss_csv(&trained.losses, std::fs::File::create(&log_path)?)?;
            Ok(("train-diffusion", vec![ckpt, log_path]))
        }
        Command::TrainSurrogate { variant, steps } => {
            let variant = SurrogateVariant::from(*variant);
            if let Some(s) = steps {
                config.surrogate.train.total_steps = *s;
            }
            let ds = Dataset::load(&pipeline::dataset_path(out))?;
            let val = match Dataset::load(&pipeline::validation_path(out)) {
                Ok(v) => Some(v),
                Err(Error::Io(_)) => None,
                Err(e) => return Err(e),
            };
            let trained = pipeline::train_surrogate_model(config, variant, &ds, val.as_ref())?;
            let ckpt = pipeline::surrogate_path(out, variant);
            trained.save(&ckpt)?;
            let log_path = out.join(format!("train-surrogate-{}.csv", variant.name()));
            write_loss_csv(&trained.losses, std::fs::File::create(&log_path)?)?;
            Ok(("train-surrogate", vec![ckpt, log_path]))
        }
        Command::Design {
            method,
            bodies,
            frames,
            runs,
            variant,
        } => {
            let scenario = Scenario::new(*bodies, *frames);
            let n_runs = runs.unwrap_or(config.experiment.n_runs);
            let (name, designer) = designer_for(*method, SurrogateVariant::from(*variant), config, out)?;
            let designer = designer.ok_or_else(|| Error::MissingCheckpoint(out.to_path_buf()))?;
            if let Some(reason) = designer.unsupported(scenario) {
                return Err(Error::Config(reason));
            }
            let output = designer.design(scenario, n_runs, config.sampler.seed)?;
            let path = pipeline::design_path(out, name, scenario);
            output.save(&path)?;
            Ok(("design", vec![path]))
        }
        Command::Evaluate { design } => {
            let output = DesignOutput::load(design)?;
            let (records, failed) = eval::evaluate_output(&output, &config.sim, &config.objective)?;
            let report = eval::DesignReport {
                records,
                failures: if failed.is_empty() {
                    vec![]
                } else {
                    let h = &output.header;
                    vec![(h.method.clone(), Scenario::new(h.n_bodies, h.n_frames), failed.len())]
                },
                skipped: vec![],
            };
            for c in report.cells() {
                println!(
                    "{} {}: design obj {:.4} ± {:.4}{} ({} runs, {} failed)",
                    c.method,
                    c.scenario.label(),
                    c.design_obj.mean,
                    c.design_obj.ci,
                    c.mae.map(|a| format!(", MAE {:.4} ± {:.4}", a.mean, a.ci)).unwrap_or_default(),
                    c.design_obj.n,
                    c.failed
                );
            }
            let path = design.with_extension("eval.json");
            std::fs::write(&path, serde_json::to_vec_pretty(&report)?)?;
            Ok(("evaluate", vec![path]))
        }
        Command::Table => {
            let mut designers: Vec<(String, Option<Box<dyn Designer>>)> = Vec::new();
            for m in &config.experiment.methods {
                let method = match m.as_str() {
                    "cindm" => Method::Cindm,
                    "cem" => Method::Cem,
                    "backprop" => Method::Backprop,
                    "random" => Method::Random,
                    other => return Err(Error::Config(format!("unknown method '{other}'"))),
                };
                let (name, d) = designer_for(method, config.experiment.surrogate, config, out)?;
                designers.push((name.to_string(), d));
            }
            let refs: Vec<(String, Option<&dyn Designer>)> =
                designers.iter().map(|(n, d)| (n.clone(), d.as_deref())).collect();
            let report = eval::run_experiment(
                &refs,
                &config.experiment.scenarios,
                config.experiment.n_runs,
                config.sampler.seed,
                &config.sim,
                &config.objective,
            )?;
            let csv = out.join("table.csv");
            let md = out.join("table.md");
            let json = out.join("report.json");
            eval::emit_table(&report, TableFormat::Csv, &csv)?;
            eval::emit_table(&report, TableFormat::Markdown, &md)?;
            std::fs::write(&json, serde_json::to_vec_pretty(&report)?)?;
            Ok(("table", vec![csv, md, json]))
        }
        Command::Plot { design, run, output } => {
            let d = DesignOutput::load(design)?;
            if *run >= d.header.n_runs {
                return Err(Error::Config(format!("run {run} out of range ({} runs)", d.header.n_runs)));
            }
            let (_, solver) = eval::evaluate(
                d.gamma_of(*run),
                None,
                d.header.n_frames,
                &config.sim,
                &config.objective,
            )?;
            // without a designed trajectory, draw the solver rollout twice
            let designed = d.trajectory_of(*run).unwrap_or(&solver.data).to_vec();
            let path = output.clone().unwrap_or_else(|| design.with_extension(format!("run{run}.svg")));
            eval::emit_trajectory_plot(
                &designed,
                &solver.data,
                d.header.n_bodies,
                config.sim.radius,
                config.objective.target,
                &path,
            )?;
            Ok(("plot", vec![path]))
        }
        Command::Sweep { kind, grid } => {
            if let Some(k) = kind {
                config.sweep.kind = match k {
                    Kind::Lambda => SweepKind::Lambda,
                    Kind::Steps => SweepKind::Steps,
                    Kind::BatchSize => SweepKind::BatchSize,
                };
            }
            if let Some(g) = grid {
                config.sweep.grid = g.clone();
            }
            let trained = pipeline::load_denoiser(&pipeline::denoiser_path(out))?
                .ok_or_else(|| Error::MissingCheckpoint(pipeline::denoiser_path(out)))?;
            let registry = pipeline::registry_from(&trained)?;
            let sc = config.sweep.scenario;
            let plan = build_plan(sc.n_bodies, sc.n_frames, config.experiment.t_tr, config.experiment.t_q, &registry, pipeline::PAIR_MODEL)?;
            let report = eval::sweep(
                config.sweep.kind,
                &config.sweep.grid,
                sc,
                &plan,
                &config.sampler,
                &registry,
                config.sweep.n_runs,
                &config.sim,
                &config.objective,
            )?;
            let stem = match config.sweep.kind {
                SweepKind::Lambda => "sweep-lambda",
                SweepKind::Steps => "sweep-steps",
                SweepKind::BatchSize => "sweep-batch-size",
            };
            let csv = out.join(format!("{stem}.csv"));
            let md = out.join(format!("{stem}.md"));
            report.write_csv(std::fs::File::create(&csv)?)?;
            report.write_markdown(std::fs::File::create(&md)?)?;
            Ok(("sweep", vec![csv, md]))
        }
    }
}

type Boxed = Option<Box<dyn Designer>>;

fn designer_for(method: Method, variant: SurrogateVariant, config: &RunConfig, out: &Path) -> Result<(&'static str, Boxed)> {
    Ok(match method {
        Method::Cindm => {
            let d = pipeline::load_denoiser(&pipeline::denoiser_path(out))?
                .map(|t| -> Result<Box<dyn Designer>> {
                    Ok(Box::new(CindmDesigner {
                        registry: pipeline::registry_from(&t)?,
                        sampler: config.sampler,
                        objective: config.objective,
                        t_tr: config.experiment.t_tr,
                        t_q: config.experiment.t_q,
                    }))
                })
                .transpose()?;
            ("cindm", d)
        }
        Method::Cem | Method::Backprop => {
            let bm = if matches!(method, Method::Cem) {
                BaselineMethod::Cem
            } else {
                BaselineMethod::Backprop
            };
            let d = pipeline::load_surrogate(&pipeline::surrogate_path(out, variant))?.map(|model: Arc<_>| {
                Box::new(SurrogateDesigner {
                    method: bm,
                    model,
                    cem: config.cem,
                    backprop: config.backprop,
                    sim: config.sim.clone(),
                    objective: config.objective,
                }) as Box<dyn Designer>
            });
            (bm.name(), d)
        }
        Method::Random => (
            "random",
            Some(Box::new(RandomDesigner { sim: config.sim.clone() }) as Box<dyn Designer>),
        ),
    })
}
