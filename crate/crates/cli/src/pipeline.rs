use std::time::Instant;

use anyhow::Context;
use attralign_core::alignment::{evaluate, AttributeOracle, ClassifierOracle, Oracle, RbfOracle, TargetSpec};
use attralign_core::controller::{particle_guidance_sample, solve_emsa, vanilla_sample, RunReport, SolverConfig};
use attralign_core::diffnet::{Checkpoint, HeadKind};
use attralign_core::dynamics::{ControlledDynamics, Dynamics, TimeGrid};
use attralign_core::generative::{AlphaSchedule, GenerativeModel, MixtureSpec};
use attralign_core::memory;
use attralign_core::numerics::{Matrix, Rng};

use crate::config::{read_input, ExperimentConfig, InputError, InstanceKind, ModelSource, OracleSource, Spacing, TargetSource};

pub struct Setup {
    pub config: ExperimentConfig,
    pub dynamics: ControlledDynamics,
    pub oracle: AttributeOracle,
    pub target: TargetSpec,
}

pub fn load_mixture(cfg: &ExperimentConfig) -> anyhow::Result<MixtureSpec> {
    let text = read_input(&cfg.mixture)?;
    MixtureSpec::from_json(&text).map_err(|e| InputError(format!("invalid mixture {}: {e}", cfg.mixture.display())).into())
}

pub fn load_checkpoint(path: &std::path::Path) -> anyhow::Result<Checkpoint> {
    let text = read_input(path)?;
    Checkpoint::from_json(&text).map_err(|e| InputError(format!("invalid checkpoint {}: {e}", path.display())).into())
}

impl Setup {
    pub fn load(config: ExperimentConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let mixture = load_mixture(&config)?;
        let model = match &config.model {
            ModelSource::Analytic => GenerativeModel::AnalyticMixture(mixture.clone()),
            ModelSource::Checkpoint(path) => GenerativeModel::from_checkpoint(&load_checkpoint(path)?)
                .with_context(|| format!("loading model {}", path.display()))?,
        };
        let dynamics = match config.instance {
            InstanceKind::Edm => ControlledDynamics::edm(model, config.grid.horizon)?,
            InstanceKind::Ddim => ControlledDynamics::ddim(model, &AlphaSchedule::default())?,
            InstanceKind::Fm => ControlledDynamics::flow(model)?,
        };
        let oracle = match &config.oracle {
            OracleSource::Rbf { temperature } => AttributeOracle::Rbf(RbfOracle::from_mixture(&mixture, *temperature)?),
            OracleSource::Classifier { heads: paths, temperature } => {
                let mut heads = Vec::new();
                for path in paths {
                    let ckpt = load_checkpoint(path)?;
                    if ckpt.head_kind != HeadKind::Oracle {
                        return Err(InputError(format!("{} is not an oracle checkpoint", path.display())).into());
                    }
                    let name = ckpt
                        .conditioning
                        .axis
                        .as_ref()
                        .map(|a| a.0.clone())
                        .ok_or_else(|| InputError(format!("{} lacks an axis name", path.display())))?;
                    heads.push((name, ckpt.to_net()?));
                }
                AttributeOracle::Classifier(ClassifierOracle::new(heads)?.with_temperature(*temperature)?)
            }
        };
        let target = match &config.target {
            TargetSource::Preset { preset, joint } => TargetSpec::preset(*preset, &oracle.axes(), *joint)?,
            TargetSource::File(path) => TargetSpec::from_json(&read_input(path)?)
                .map_err(|e| InputError(format!("invalid target {}: {e}", path.display())))?,
        };
        target
            .check_oracle(&oracle)
            .map_err(|e| InputError(format!("target does not fit the oracle: {e}")))?;
        Ok(Self {
            config,
            dynamics,
            oracle,
            target,
        })
    }

    pub fn grid(&self, steps: usize) -> anyhow::Result<TimeGrid> {
        let g = &self.config.grid;
        Ok(match (self.config.instance, g.spacing) {
            (InstanceKind::Edm, Spacing::Uniform) => TimeGrid::edm_uniform(g.horizon, steps)?,
            (InstanceKind::Edm, Spacing::Karras) => TimeGrid::edm_karras(g.horizon, steps, g.sigma_min, g.karras_rho)?,
            (InstanceKind::Ddim, _) => TimeGrid::ddim(&AlphaSchedule::default(), steps)?,
            (InstanceKind::Fm, _) => TimeGrid::flow(steps)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Emsa,
    Vanilla,
    Pg(f64),
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Emsa => "emsa",
            Method::Vanilla => "vanilla",
            Method::Pg(_) => "pg",
        }
    }
}

pub struct RunOutput {
    /// Terminal samples in data space.
    pub samples: Matrix,
    pub report: RunReport,
}

/// Runs `method` over `config.samples` prior draws in batches of `solver.batch`.
/// Batch `b` draws its prior from stream `b` of the seed, so a row of the
/// output depends only on the seed, its batch and the solver settings.
pub fn run(setup: &Setup, solver: &SolverConfig, method: Method, quiet: bool) -> anyhow::Result<RunOutput> {
    let d = &setup.dynamics;
    let grid = setup.grid(solver.steps)?;
    let total = setup.config.samples;
    let batches = total.div_ceil(solver.batch);
    let mut config_echo = serde_json::to_value(&setup.config)?;
    config_echo["solver"] = serde_json::to_value(solver)?;
    if let Method::Pg(weight) = method {
        config_echo["pg_weight"] = serde_json::json!(weight);
    }
    let mut report = RunReport::new(method.name(), d.instance.name(), config_echo);
    report.batches = batches;
    report.converged = true;

    let master = Rng::new(solver.seed);
    let mut rows = Vec::with_capacity(total * d.state_dim());
    let mut terminal = 0.0;
    let start = Instant::now();
    let heap_before = memory::current_bytes();
    memory::reset_peak();
    for b in 0..batches {
        let m = solver.batch.min(total - b * solver.batch);
        let x0 = d.sample_prior(&mut master.fork(b as u64), m);
        let x = match method {
            Method::Emsa => {
                let cfg = SolverConfig { batch: m, ..solver.clone() };
                let out = solve_emsa(d, &grid, &setup.oracle, &setup.target, &cfg, &x0)
                    .with_context(|| format!("batch {b}"))?;
                let r = out.report;
                report.converged &= r.converged;
                terminal += r.final_terminal_cost.unwrap_or(0.0) / batches as f64;
                report.final_control_energy += r.final_control_energy / batches as f64;
                let t = &mut report.timings;
                t.forward_secs += r.timings.forward_secs;
                t.terminal_secs += r.timings.terminal_secs;
                t.backward_secs += r.timings.backward_secs;
                t.final_rollout_secs += r.timings.final_rollout_secs;
                report.iterations.extend(r.iterations.into_iter().map(|mut it| {
                    it.batch = b;
                    it
                }));
                out.state.x
            }
            Method::Vanilla => vanilla_sample(d, &grid, &x0)?.x,
            Method::Pg(weight) => {
                particle_guidance_sample(d, &grid, &setup.oracle, &setup.target, weight, &x0, solver.joint_estimator)?.x
            }
        };
        rows.extend_from_slice(d.to_data_space(&x, grid.horizon()).data());
        if !quiet && (b + 1) % 16 == 0 {
            eprintln!("  {} / {batches} batches", b + 1);
        }
    }
    let peak = memory::peak_bytes().saturating_sub(heap_before);
    report.timings.total_secs = start.elapsed().as_secs_f64();
    if memory::is_tracking() {
        report.peak_memory_bytes = Some(peak as u64);
    }
    let samples = Matrix::new(total, d.state_dim(), rows)?;
    if method == Method::Emsa {
        report.final_terminal_cost = Some(terminal);
    } else {
        report.converged = false;
    }
    report.evaluation = Some(evaluate(&setup.oracle, &samples, &setup.target, solver.joint_estimator)?);
    Ok(RunOutput { samples, report })
}
