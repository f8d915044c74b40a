//! `epi`: train, evaluate and inspect epigraph controllers.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use epi_core::env::{DtPolicy, SystemModel};
use epi_core::eval::{dt_sweep, evaluate_learner, trace_compare, write_sweep_csv, TraceOptions};
use epi_core::grid::{run_oracle, write_probe_csv};
use epi_core::lqr::{GroundTruth, GtConfig};
use epi_core::trainer::{stream_rng, train, write_zstar_csv, zstar_trace, EnvKind, Learner, TrainConfig};

use crate::manifest::{RunManifest, MANIFEST};

#[derive(Debug, Parser)]
#[command(name = "epi", version = manifest::VERSION, about = "Epigraph-form constrained control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from scratch; writes train.csv and ckpt_<episode>.
    Train(Common),
    /// Deterministic evaluation of a checkpoint; writes eval.csv.
    Eval(Common),
    /// Learned value and actions against the reference controller; writes trace.csv.
    Trace(Common),
    /// Distance to target over decision intervals; writes sweep.csv.
    SweepDt(Common),
    /// One reference-controller rollout; writes gt.csv.
    Gt(Common),
    /// Grid oracle on the double-integrator toy; writes oracle_table.csv and oracle_probes.csv.
    Oracle(Common),
    /// Budget and active branch along one episode; writes zstar.csv.
    Zstar(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; defaults of --env when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs/latest")]
    out: PathBuf,
    /// Checkpoint file.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Fixed decision interval, overriding the configured policy.
    #[arg(long)]
    dt: Option<f64>,
    /// Comma-separated decision intervals for sweep-dt.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2")]
    dt_list: Vec<f64>,
    #[arg(long)]
    n_eval: Option<usize>,
    /// oscillator | particle
    #[arg(long)]
    env: Option<EnvKind>,
}

impl Common {
    /// Resolved configuration. Without --config, a checkpoint's sibling
    /// manifest supplies it so evaluation sees the training environment.
    fn config(&self) -> Result<TrainConfig> {
        let mut cfg = match (&self.config, self.manifest_next_to_ckpt()) {
            (Some(path), _) => TrainConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
            (None, Some(m)) => m.config,
            (None, None) => TrainConfig::for_env(self.env.unwrap_or(EnvKind::Oscillator)),
        };
        if let Some(env) = self.env {
            if env != cfg.env {
                bail!("--env {env:?} contradicts the configured environment {:?}", cfg.env);
            }
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        if let Some(n) = self.n_eval {
            cfg.n_eval = n;
        }
        if let Some(dt) = self.dt {
            cfg.dt = DtPolicy::Fixed { dt };
        }
        // a training run's seed also fixes the particle layout, so for
        // checkpoint commands --seed only reseeds the evaluation streams
        if let (Some(s), None) = (self.seed, &self.ckpt) {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn manifest_next_to_ckpt(&self) -> Option<RunManifest> {
        let dir = self.ckpt.as_ref()?.parent()?;
        RunManifest::read(&dir.join(MANIFEST)).ok()
    }

    fn eval_seed(&self, cfg: &TrainConfig) -> u64 {
        self.seed.unwrap_or(cfg.seed)
    }

    fn learner(&self, env: &dyn SystemModel, cfg: &TrainConfig) -> Result<(PathBuf, Learner)> {
        let Some(path) = &self.ckpt else {
            bail!("--ckpt is required");
        };
        let l = Learner::load(path, env, cfg.gamma).with_context(|| format!("loading checkpoint {}", path.display()))?;
        Ok((path.clone(), l))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Trace(a) => cmd_trace(&a),
        Command::SweepDt(a) => cmd_sweep_dt(&a),
        Command::Gt(a) => cmd_gt(&a),
        Command::Oracle(a) => cmd_oracle(&a),
        Command::Zstar(a) => cmd_zstar(&a),
    }
}

fn cmd_train(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    let m = RunManifest::begin("train", &cfg, cfg.seed, &a.out, None)?;
    let summary = train(&cfg, &a.out)?;
    let last = summary.log.last().map_or(f64::NAN, |r| r.score);
    println!(
        "trained {} episodes ({} skipped), last score {last:.3}, {} checkpoints",
        summary.log.len(),
        summary.skipped_episodes,
        summary.checkpoints.len()
    );
    m.finish()
}

fn cmd_eval(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    let env = cfg.build_env();
    let (ckpt, learner) = a.learner(env.as_ref(), &cfg)?;
    let seed = a.eval_seed(&cfg);
    let m = RunManifest::begin("eval", &cfg, seed, &a.out, Some(&ckpt))?;
    let report = evaluate_learner(&learner, env.as_ref(), &cfg, cfg.n_eval, seed)?;
    report.write_csv(&a.out.join("eval.csv"))?;
    println!(
        "{} episodes: mean score {:.3} (std {:.3}), violation rate {:.3}",
        report.n_episodes, report.mean_score, report.std_score, report.violation_rate
    );
    m.finish()
}

fn oscillator_only(cfg: &TrainConfig, what: &str) -> Result<()> {
    if cfg.env != EnvKind::Oscillator {
        bail!("{what} needs the oscillator environment (the reference controller is oscillator-specific)");
    }
    Ok(())
}

fn cmd_trace(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    oscillator_only(&cfg, "trace")?;
    let env = cfg.build_env();
    let (ckpt, learner) = a.learner(env.as_ref(), &cfg)?;
    let seed = a.eval_seed(&cfg);
    let m = RunManifest::begin("trace", &cfg, seed, &a.out, Some(&ckpt))?;
    let gt = GroundTruth::new(&cfg.oscillator, GtConfig::default())?;
    let report = trace_compare(&learner, &learner.critic.ret, &gt, TraceOptions::for_config(&cfg), seed)?;
    report.write_csv(&a.out.join("trace.csv"))?;
    println!(
        "value pearson {:.4}, mean action gap {:.4}",
        report.value_pearson, report.mean_action_gap
    );
    m.finish()
}

fn cmd_sweep_dt(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    let env = cfg.build_env();
    let (ckpt, learner) = a.learner(env.as_ref(), &cfg)?;
    let seed = a.eval_seed(&cfg);
    let m = RunManifest::begin("sweep-dt", &cfg, seed, &a.out, Some(&ckpt))?;
    let total_time = cfg.horizon as f64 * cfg.dt.nominal();
    let rows = dt_sweep(&learner, env.as_ref(), &a.dt_list, total_time, cfg.n_eval, seed)?;
    write_sweep_csv(&a.out.join("sweep.csv"), &rows)?;
    for r in &rows {
        println!("dt {:<6} mean distance {:.4} (std {:.4})", r.dt, r.mean_distance, r.std_distance);
    }
    m.finish()
}

fn cmd_gt(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    oscillator_only(&cfg, "gt")?;
    let seed = a.eval_seed(&cfg);
    let m = RunManifest::begin("gt", &cfg, seed, &a.out, None)?;
    let gt = GroundTruth::new(&cfg.oscillator, GtConfig::default())?;
    let x0 = cfg.oscillator.sample_initial_state(&mut stream_rng(seed, 0));
    let rows = gt.rollout(&x0, cfg.dt.nominal(), cfg.horizon, cfg.gamma)?;
    write_gt_csv(&a.out.join("gt.csv"), &rows)?;
    let min_h = rows.iter().map(|r| r.h).fold(f64::INFINITY, f64::min);
    println!("{} steps, min h {min_h:.5}", rows.len());
    m.finish()
}

fn write_gt_csv(path: &Path, rows: &[epi_core::lqr::GtStep]) -> Result<()> {
    let Some(first) = rows.first() else {
        bail!("empty reference rollout");
    };
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..first.x.len()).map(|i| format!("x{i}")));
    header.extend((0..first.u.len()).map(|i| format!("u{i}")));
    header.extend(["h", "cost", "value_to_go"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t.to_string()];
        rec.extend(r.x.iter().chain(&r.u).map(f64::to_string));
        rec.extend([r.h, r.cost, r.value_to_go].map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_oracle(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    let m = RunManifest::begin("oracle", &cfg, cfg.seed, &a.out, None)?;
    let run = run_oracle(&cfg.oracle)?;
    if !run.convergence.converged || !run.direct_convergence.converged {
        bail!(
            "value iteration did not converge (epigraph delta {:.3e}, direct delta {:.3e})",
            run.convergence.final_delta,
            run.direct_convergence.final_delta
        );
    }
    run.table.write_csv(&a.out.join("oracle_table.csv"))?;
    write_probe_csv(&a.out.join("oracle_probes.csv"), &run.probes)?;
    println!(
        "converged in {} sweeps (direct {}); {} probes",
        run.convergence.iterations,
        run.direct_convergence.iterations,
        run.probes.len()
    );
    m.finish()
}

fn cmd_zstar(a: &Common) -> Result<()> {
    let cfg = a.config()?;
    let env = cfg.build_env();
    let (ckpt, learner) = a.learner(env.as_ref(), &cfg)?;
    let seed = a.eval_seed(&cfg);
    let m = RunManifest::begin("zstar", &cfg, seed, &a.out, Some(&ckpt))?;
    let rows = zstar_trace(&learner, env.as_ref(), &cfg, seed)?;
    write_zstar_csv(&a.out.join("zstar.csv"), &rows)?;
    let infeasible = rows.iter().filter(|r| !r.feasible).count();
    println!("{} states, {infeasible} infeasible", rows.len());
    m.finish()
}
