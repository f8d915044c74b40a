//! Episode records and the per-state regression targets derived from them.

use crate::error::{Error, Result};

/// One decision interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub t: f64,
    pub dt: f64,
    pub x: Vec<f64>,
    /// Per-agent policy inputs (observation followed by `dt`).
    pub obs: Vec<Vec<f64>>,
    /// Joint action in physical units.
    pub u: Vec<f64>,
    /// Joint action in `[-1, 1]` coordinates, as seen by the models.
    pub u_norm: Vec<f64>,
    /// Stage cost rate at `(x, u)`.
    pub stage_cost: f64,
    /// `c(x)` at the start of the interval.
    pub constraint: f64,
    /// Violation penalty at the end of the interval.
    pub penalty: f64,
    pub next_x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub episode: usize,
    pub seed: u64,
    pub steps: Vec<Step>,
    /// `c` at the final state.
    pub terminal_constraint: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn terminal_state(&self) -> Option<&[f64]> {
        self.steps.last().map(|s| s.next_x.as_slice())
    }

    /// `J = sum_t (l_t + kappa_t)`, undiscounted and without `dt` weighting.
    pub fn episode_cost(&self) -> f64 {
        self.steps.iter().map(|s| s.stage_cost + s.penalty).sum()
    }

    pub fn violations(&self) -> usize {
        self.steps.iter().filter(|s| s.penalty > 0.0).count()
    }

    pub fn violated(&self) -> bool {
        self.violations() > 0
    }

    /// Checks the documented invariants.
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.steps.len() > horizon {
            return Err(Error::InvalidArgument(format!(
                "rollout has {} steps, horizon is {horizon}",
                self.steps.len()
            )));
        }
        for w in self.steps.windows(2) {
            if w[1].t <= w[0].t {
                return Err(Error::InvalidArgument("rollout times must increase".into()));
            }
        }
        if let Some(s) = self.steps.iter().find(|s| !(s.dt > 0.0)) {
            return Err(Error::InvalidTimeStep(s.dt));
        }
        Ok(())
    }
}

/// Regression targets for the two value heads at one visited state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadTargets {
    /// Left Riemann sum of discounted stage cost plus the discounted tail.
    pub ret: f64,
    /// Running maximum of `c` over the remaining states, terminal included.
    pub cons: f64,
}

impl HeadTargets {
    /// `max{cons, ret - z}`.
    pub fn composite(&self, z: f64) -> f64 {
        self.cons.max(self.ret - z)
    }
}

/// Targets for every step, computed in one backward sweep.
/// `tail` is the (detached) return value at the terminal state.
pub fn suffix_targets(rollout: &Rollout, gamma: f64, tail: f64) -> Result<Vec<HeadTargets>> {
    if rollout.is_empty() {
        return Err(Error::Empty("rollout suffix"));
    }
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidDiscount(gamma));
    }
    let mut out = vec![
        HeadTargets {
            ret: 0.0,
            cons: 0.0
        };
        rollout.len()
    ];
    let mut ret = tail;
    let mut cons = rollout.terminal_constraint;
    for (k, s) in rollout.steps.iter().enumerate().rev() {
        ret = s.stage_cost * s.dt + gamma.powf(s.dt) * ret;
        cons = cons.max(s.constraint);
        out[k] = HeadTargets { ret, cons };
    }
    Ok(out)
}
