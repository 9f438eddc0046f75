use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use attralign_core::alignment::{evaluate, Oracle};
use attralign_core::controller::{RunReport, SolverConfig};
use attralign_core::diffnet::{Adam, Checkpoint, HeadKind, MlpNet, TimeEmbedding};
use attralign_core::generative::{
    data_scale, train_classifier, train_noise_pred, train_score_dsm, train_velocity_fm, AlphaSchedule,
    GenerativeModel, NoiseLevels, TrainConfig, TrainOutcome,
};
use attralign_core::numerics::Rng;

use crate::config::{ExperimentConfig, InputError, SweepAxis};
use crate::output;
use crate::pipeline::{self, load_mixture, Method, Setup};

pub struct RunContext {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    pub quiet: bool,
}

impl RunContext {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TrainTarget {
    Score,
    Noise,
    Velocity,
    Oracle,
}

fn optimizer_record(ckpt: &mut Checkpoint, cfg: &TrainConfig) {
    ckpt.optimizer = Some(Adam::new(0, cfg.lr).record());
}

pub fn train(ctx: &RunContext, which: &[TrainTarget]) -> anyhow::Result<()> {
    let cfg = &ctx.config;
    let mixture = load_mixture(cfg)?;
    let n = mixture.dim();
    let seed = cfg.solver.seed;
    let master = Rng::new(seed);
    let mut log = csv::Writer::from_path(ctx.out("train_log.csv"))?;
    log.write_record(["model", "step", "loss"])?;
    let mut log_losses = |name: &str, out: &TrainOutcome| -> anyhow::Result<()> {
        for (step, loss) in out.losses.iter().enumerate() {
            log.write_record([name, &step.to_string(), &loss.to_string()])?;
        }
        Ok(())
    };
    let sizes = |input: usize, output: usize| {
        let mut s = vec![input];
        s.extend(&cfg.train.hidden);
        s.push(output);
        s
    };
    let gen = &cfg.train.generator;

    for (stream, target) in [TrainTarget::Score, TrainTarget::Noise, TrainTarget::Velocity].into_iter().enumerate() {
        if !which.contains(&target) {
            continue;
        }
        let mut rng = master.fork(stream as u64);
        let net = MlpNet::new(&sizes(n + 1, n), TimeEmbedding::RawScalar, &mut rng)?;
        let started = Instant::now();
        let (name, out, model) = match target {
            TrainTarget::Score => {
                let sigma_data = data_scale(&mixture);
                let levels = NoiseLevels {
                    sigma_min: 0.02,
                    sigma_max: cfg.train.dsm_sigma_max,
                };
                let out = train_score_dsm(net, sigma_data, &mixture, levels, gen, &mut rng)?;
                let model = GenerativeModel::LearnedScore {
                    net: out.net.clone(),
                    sigma_data,
                };
                ("score", out, model)
            }
            TrainTarget::Noise => {
                let out = train_noise_pred(net, &mixture, &AlphaSchedule::default(), gen, &mut rng)?;
                let model = GenerativeModel::LearnedNoise { net: out.net.clone() };
                ("noise", out, model)
            }
            _ => {
                let out = train_velocity_fm(net, &mixture, gen, &mut rng)?;
                let model = GenerativeModel::LearnedVelocity { net: out.net.clone() };
                ("velocity", out, model)
            }
        };
        let mut ckpt = model.to_checkpoint(seed)?;
        optimizer_record(&mut ckpt, gen);
        let path = ctx.out(&format!("{name}.json"));
        ckpt.save(&path)?;
        log_losses(name, &out)?;
        ctx.say(format!(
            "trained {name} in {:.1}s, final loss {:.5} -> {}",
            started.elapsed().as_secs_f64(),
            out.final_loss.unwrap_or(f64::NAN),
            path.display()
        ));
    }

    if which.contains(&TrainTarget::Oracle) {
        for (j, (axis, classes)) in mixture.axes().into_iter().enumerate() {
            let mut rng = master.fork(100 + j as u64);
            let net = MlpNet::new(&sizes(n, classes), TimeEmbedding::None, &mut rng)?;
            let out = train_classifier(net, &mixture, &axis, &cfg.train.classifier, &mut rng)?;
            let mut ckpt = Checkpoint::from_net(&out.net, HeadKind::Oracle, seed);
            ckpt.conditioning.axis = Some((axis.clone(), classes));
            optimizer_record(&mut ckpt, &cfg.train.classifier);
            let path = ctx.out(&format!("oracle_{axis}.json"));
            ckpt.save(&path)?;
            log_losses(&format!("oracle_{axis}"), &out)?;
            ctx.say(format!(
                "trained oracle '{axis}', final loss {:.5} -> {}",
                out.final_loss.unwrap_or(f64::NAN),
                path.display()
            ));
        }
    }
    log.flush()?;
    Ok(())
}

fn write_run(ctx: &RunContext, setup: &Setup, prefix: &str, out: &pipeline::RunOutput) -> anyhow::Result<()> {
    output::write_report(&ctx.out(&format!("{prefix}_report.json")), &out.report)?;
    output::write_samples(&ctx.out(&format!("{prefix}_samples.csv")), &out.samples, &setup.oracle)?;
    let eval = out.report.evaluation.as_ref().expect("run always evaluates");
    output::write_histogram(&ctx.out(&format!("{prefix}_histogram.csv")), eval)?;
    if !out.report.iterations.is_empty() {
        output::write_cost_curve(&ctx.out(&format!("{prefix}_cost_curve.csv")), &out.report)?;
    }
    summarize(ctx, prefix, &out.report);
    Ok(())
}

fn summarize(ctx: &RunContext, label: &str, report: &RunReport) {
    let Some(eval) = &report.evaluation else { return };
    let m = eval.headline_metrics();
    let mut line = format!(
        "{label}: {} samples, TV {:.4}, JS {:.4}, chi2 {:.4}, FD {:.4}, {:.2}s",
        eval.samples, m.tv, m.js, m.chi2, eval.fairness_discrepancy, report.timings.total_secs
    );
    if !report.iterations.is_empty() {
        let max_it = report.iterations.iter().map(|i| i.iteration + 1).max().unwrap_or(0);
        line.push_str(&format!(", ≤{max_it} iterations per batch"));
    }
    ctx.say(line);
}

pub fn align(ctx: &RunContext) -> anyhow::Result<()> {
    let setup = Setup::load(ctx.config.clone())?;
    let out = pipeline::run(&setup, &ctx.config.solver, Method::Emsa, ctx.quiet)?;
    write_run(ctx, &setup, "emsa", &out)
}

pub fn baseline(ctx: &RunContext, method: Method) -> anyhow::Result<()> {
    let setup = Setup::load(ctx.config.clone())?;
    let out = pipeline::run(&setup, &ctx.config.solver, method, ctx.quiet)?;
    write_run(ctx, &setup, method.name(), &out)
}

pub fn eval(ctx: &RunContext, samples: &Path) -> anyhow::Result<()> {
    let setup = Setup::load(ctx.config.clone())?;
    let x = output::read_samples(samples)?;
    if x.cols() != setup.oracle.state_dim() {
        return Err(InputError(format!(
            "{} has {} coordinates, the oracle expects {}",
            samples.display(),
            x.cols(),
            setup.oracle.state_dim()
        ))
        .into());
    }
    let mut report = RunReport::new("eval", setup.dynamics.instance.name(), serde_json::to_value(&setup.config)?);
    report.config["samples_file"] = serde_json::json!(samples.display().to_string());
    let eval = evaluate(&setup.oracle, &x, &setup.target, setup.config.estimator())?;
    output::write_histogram(&ctx.out("eval_histogram.csv"), &eval)?;
    report.evaluation = Some(eval);
    output::write_report(&ctx.out("eval_report.json"), &report)?;
    summarize(ctx, "eval", &report);
    Ok(())
}

pub fn sweep(ctx: &RunContext, axis: Option<SweepAxis>, values: Option<Vec<usize>>) -> anyhow::Result<()> {
    let from_cfg = ctx.config.sweep.clone();
    let axis = axis
        .or(from_cfg.as_ref().map(|s| s.axis))
        .ok_or_else(|| InputError("sweep needs --axis or a sweep section in the config".into()))?;
    let values = values
        .or(from_cfg.map(|s| s.values))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| InputError("sweep needs a nonempty --values list or a sweep section".into()))?;
    let setup = Setup::load(ctx.config.clone())?;
    let name = match axis {
        SweepAxis::Batch => "batch",
        SweepAxis::Iters => "iters",
        SweepAxis::Steps => "steps",
    };
    let path = ctx.out(&format!("sweep_{name}.csv"));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record([
        name,
        "samples",
        "tv",
        "js",
        "chi2",
        "fd",
        "wall_secs",
        "secs_per_sample",
        "peak_heap_bytes",
        "mean_iterations",
        "error",
    ])?;
    for &v in &values {
        let solver = match axis {
            SweepAxis::Batch => SolverConfig {
                batch: v,
                ..ctx.config.solver.clone()
            },
            SweepAxis::Iters => SolverConfig {
                max_iters: v,
                ..ctx.config.solver.clone()
            },
            SweepAxis::Steps => SolverConfig {
                steps: v,
                ..ctx.config.solver.clone()
            },
        };
        let result = solver
            .validate()
            .map_err(anyhow::Error::from)
            .and_then(|_| pipeline::run(&setup, &solver, Method::Emsa, true));
        match result {
            Ok(out) => {
                let r = &out.report;
                let eval = r.evaluation.as_ref().expect("run always evaluates");
                let m = eval.headline_metrics();
                let mean_iters = r.iterations.len() as f64 / r.batches as f64;
                w.write_record([
                    v.to_string(),
                    eval.samples.to_string(),
                    m.tv.to_string(),
                    m.js.to_string(),
                    m.chi2.to_string(),
                    eval.fairness_discrepancy.to_string(),
                    r.timings.total_secs.to_string(),
                    (r.timings.total_secs / eval.samples as f64).to_string(),
                    r.peak_memory_bytes.map(|b| b.to_string()).unwrap_or_default(),
                    mean_iters.to_string(),
                    String::new(),
                ])?;
                ctx.say(format!("{name}={v}: TV {:.4}, {:.3}s", m.tv, r.timings.total_secs));
            }
            Err(e) => {
                let mut rec = vec![v.to_string()];
                rec.extend(std::iter::repeat_n(String::new(), 9));
                rec.push(format!("{e:#}"));
                w.write_record(&rec)?;
                ctx.say(format!("{name}={v}: failed: {e:#}"));
            }
        }
        w.flush()?;
    }
    ctx.say(format!("wrote {}", path.display()));
    Ok(())
}

pub fn ensure_out_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}
