//! Episode metrics, value/action traces against the reference controller, and
//! decision-interval sweeps.

use std::path::Path;

use rayon::prelude::*;

use crate::env::{normalize_action, scale_action, step_continuous, DtPolicy, SystemModel};
use crate::error::{Error, Result};
use crate::losses::ScalarField;
use crate::lqr::GroundTruth;
use crate::rollout::{Rollout, Step};
use crate::trainer::{stream_rng, ActMode, Learner, TrainConfig, STREAM_EVAL};
use crate::EpiRng;

/// Anything that maps a state to a physical joint action.
pub trait Controller: Sync {
    fn control(&self, env: &dyn SystemModel, x: &[f64], dt: f64) -> Result<Vec<f64>>;
}

impl Controller for Learner {
    fn control(&self, env: &dyn SystemModel, x: &[f64], dt: f64) -> Result<Vec<f64>> {
        let inputs = Learner::policy_inputs(env, x, dt);
        // deterministic actions never touch the stream
        let mut unused = stream_rng(0, 0);
        let u = self.act(&inputs, ActMode::Deterministic, &mut unused)?;
        Ok(scale_action(&env.action_low(), &env.action_high(), &u))
    }
}

impl Controller for GroundTruth {
    fn control(&self, _env: &dyn SystemModel, x: &[f64], _dt: f64) -> Result<Vec<f64>> {
        self.action(x)
    }
}

/// Closed-loop episode from `x0` under `ctrl`.
pub fn controlled_rollout(
    ctrl: &dyn Controller,
    env: &dyn SystemModel,
    x0: Vec<f64>,
    dt: DtPolicy,
    horizon: usize,
    rng: &mut EpiRng,
) -> Result<Rollout> {
    let (low, high) = (env.action_low(), env.action_high());
    let mut x = x0;
    let mut t = 0.0;
    let mut steps = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        let h = dt.sample(rng);
        let u = ctrl.control(env, &x, h)?;
        let r = step_continuous(env, &x, &u, h)?;
        steps.push(Step {
            t,
            dt: h,
            constraint: env.constraint(&x),
            obs: Learner::policy_inputs(env, &x, h),
            u_norm: normalize_action(&low, &high, &u),
            u,
            x,
            stage_cost: r.stage_cost,
            penalty: r.violation_penalty,
            next_x: r.next_state.clone(),
        });
        x = r.next_state;
        t += h;
    }
    Ok(Rollout {
        episode: 0,
        seed: 0,
        steps,
        terminal_constraint: env.constraint(&x),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub episode: usize,
    pub score: f64,
    pub cost: f64,
    pub violated: bool,
    /// Largest `c` over the visited states, terminal included.
    pub max_constraint: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub mean_score: f64,
    pub std_score: f64,
    pub violation_rate: f64,
    pub mean_cost: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("evaluation episodes"));
        }
        let n = rows.len() as f64;
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let (mean_score, std_score) = mean_std(&scores);
        Ok(Self {
            n_episodes: rows.len(),
            mean_score,
            std_score,
            violation_rate: rows.iter().filter(|r| r.violated).count() as f64 / n,
            mean_cost: rows.iter().map(|r| r.cost).sum::<f64>() / n,
            rows,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["episode", "score", "J", "violated"])?;
        for r in &self.rows {
            w.write_record([
                r.episode.to_string(),
                r.score.to_string(),
                r.cost.to_string(),
                u8::from(r.violated).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn eval_row(episode: usize, r: &Rollout) -> EvalRow {
    let cost = r.episode_cost();
    EvalRow {
        episode,
        score: -cost,
        cost,
        violated: r.violated(),
        max_constraint: r.steps.iter().map(|s| s.constraint).fold(r.terminal_constraint, f64::max),
    }
}

/// `n_episodes` seeded episodes; episode `k` draws from its own stream, so
/// rows do not depend on scheduling.
pub fn evaluate(
    ctrl: &dyn Controller,
    env: &dyn SystemModel,
    dt: DtPolicy,
    horizon: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    let rows = (0..n_episodes)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(seed, STREAM_EVAL | k as u64);
            let x0 = env.sample_initial_state(&mut rng);
            Ok(eval_row(k, &controlled_rollout(ctrl, env, x0, dt, horizon, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_rows(rows)
}

pub fn evaluate_learner(
    learner: &Learner,
    env: &dyn SystemModel,
    cfg: &TrainConfig,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalReport> {
    learner.check_env(env)?;
    evaluate(learner, env, cfg.dt, cfg.horizon, n_episodes, seed)
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / a.len() as f64;
    cov / (sa * sb)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceOptions {
    pub dt: f64,
    pub horizon: usize,
    /// Steps of the reference rollout used for its cost-to-go.
    pub gt_horizon: usize,
    pub gamma: f64,
    /// Applied to the reference cost-to-go so both value columns share units.
    pub cost_scale: f64,
}

impl TraceOptions {
    pub fn for_config(cfg: &TrainConfig) -> Self {
        let dt = cfg.dt.nominal();
        Self {
            dt,
            horizon: cfg.horizon,
            gt_horizon: (60.0 / dt).round() as usize,
            gamma: cfg.gamma,
            cost_scale: cfg.cost_scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub v_learned: f64,
    pub v_gt: f64,
    pub u_learned: Vec<f64>,
    pub u_gt: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceReport {
    pub rows: Vec<TraceRow>,
    /// Correlation of the two value columns.
    pub value_pearson: f64,
    /// Mean Euclidean distance between the two action columns.
    pub mean_action_gap: f64,
}

impl TraceReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let Some(first) = self.rows.first() else {
            return Err(Error::Empty("trace"));
        };
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..first.x.len()).map(|i| format!("x{i}")));
        header.extend(["V_learned".to_string(), "V_gt".to_string()]);
        header.extend((0..first.u_learned.len()).map(|i| format!("u_learned{i}")));
        header.extend((0..first.u_gt.len()).map(|i| format!("u_gt{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.t.to_string()];
            rec.extend(r.x.iter().map(f64::to_string));
            rec.extend([r.v_learned.to_string(), r.v_gt.to_string()]);
            rec.extend(r.u_learned.iter().chain(&r.u_gt).map(f64::to_string));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolls out `policy` on the oscillator and, at every visited state, compares
/// `value` and the policy's action with the reference controller's discounted
/// cost-to-go and action.
pub fn trace_compare(
    policy: &dyn Controller,
    value: &dyn ScalarField,
    gt: &GroundTruth,
    opts: TraceOptions,
    seed: u64,
) -> Result<TraceReport> {
    let env = &gt.env;
    let mut rng = stream_rng(seed, STREAM_EVAL);
    let x0 = env.sample_initial_state(&mut rng);
    let r = controlled_rollout(policy, env, x0, DtPolicy::Fixed { dt: opts.dt }, opts.horizon, &mut rng)?;
    let rows = r
        .steps
        .par_iter()
        .map(|s| {
            Ok(TraceRow {
                t: s.t,
                x: s.x.clone(),
                v_learned: value.value(&s.x)?,
                v_gt: opts.cost_scale * gt.discounted_cost(&s.x, opts.dt, opts.gt_horizon, opts.gamma)?,
                u_learned: s.u.clone(),
                u_gt: gt.action(&s.x)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let vl: Vec<f64> = rows.iter().map(|r| r.v_learned).collect();
    let vg: Vec<f64> = rows.iter().map(|r| r.v_gt).collect();
    let gap = rows
        .iter()
        .map(|r| r.u_learned.iter().zip(&r.u_gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum::<f64>()
        / rows.len().max(1) as f64;
    Ok(TraceReport {
        value_pearson: pearson(&vl, &vg),
        mean_action_gap: gap,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub dt: f64,
    pub mean_distance: f64,
    pub std_distance: f64,
}

/// For each interval, `n_episodes` episodes of fixed duration `total_time`;
/// the per-episode metric is the time-averaged distance to target.
/// Start states are shared across intervals.
pub fn dt_sweep(
    ctrl: &dyn Controller,
    env: &dyn SystemModel,
    dt_list: &[f64],
    total_time: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if dt_list.is_empty() {
        return Err(Error::Empty("dt list"));
    }
    if n_episodes == 0 {
        return Err(Error::Empty("evaluation episodes"));
    }
    let probe = env.sample_initial_state(&mut stream_rng(seed, STREAM_EVAL));
    if env.distance_to_target(&probe).is_none() {
        return Err(Error::InvalidArgument(format!("{} has no distance-to-target metric", env.name())));
    }
    dt_list
        .iter()
        .map(|&dt| {
            if !(dt.is_finite() && dt > 0.0) {
                return Err(Error::InvalidTimeStep(dt));
            }
            let steps = ((total_time / dt).round() as usize).max(1);
            let d = (0..n_episodes)
                .into_par_iter()
                .map(|k| {
                    let mut rng = stream_rng(seed, STREAM_EVAL | k as u64);
                    let x0 = env.sample_initial_state(&mut rng);
                    let r = controlled_rollout(ctrl, env, x0, DtPolicy::Fixed { dt }, steps, &mut rng)?;
                    let sum: f64 = r
                        .steps
                        .iter()
                        .map(|s| env.distance_to_target(&s.next_x).unwrap_or(f64::NAN) * s.dt)
                        .sum();
                    Ok(sum / (steps as f64 * dt))
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean_distance, std_distance) = mean_std(&d);
            Ok(SweepRow {
                dt,
                mean_distance,
                std_distance,
            })
        })
        .collect()
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["dt", "mean_distance", "std_distance"])?;
    for r in rows {
        w.write_record([r.dt.to_string(), r.mean_distance.to_string(), r.std_distance.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Nondecreasing up to at most one inversion of relative size `tol`.
pub fn nondecreasing_with_slack(values: &[f64], tol: f64) -> bool {
    let mut inversions = 0;
    for w in values.windows(2) {
        if w[1] < w[0] {
            inversions += 1;
            if (w[0] - w[1]) > tol * w[0].abs() {
                return false;
            }
        }
    }
    inversions <= 1
}
