//! Continuous-time environments with caller-chosen decision intervals.
//!
//! Every environment is an immutable description implementing [`SystemModel`].
//! Stepping is a pure function of `(state, action, dt)` plus, for the noisy
//! variant, an explicit random stream.

mod oscillator;
mod particle;
mod toy;

pub use oscillator::{smooth_violation, Oscillator};
pub use particle::{ParticleLayout, ParticleTarget};
pub use toy::{ToyConstraint, ToyDoubleIntegrator, ToySingleIntegrator};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};
use crate::EpiRng;

/// Penalty charged when a discrete violation event fires.
pub const VIOLATION_PENALTY: f64 = 10.0;

/// A continuous-time control system: dynamics `f`, stage cost `l`, constraint
/// `c` (safe iff `c(x) <= 0`) and a box of admissible joint actions.
pub trait SystemModel: Send + Sync {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn n_agents(&self) -> usize;
    fn action_dim_per_agent(&self) -> usize;

    fn action_dim(&self) -> usize {
        self.n_agents() * self.action_dim_per_agent()
    }

    /// Lower corner of the physical joint-action box.
    fn action_low(&self) -> Vec<f64>;
    /// Upper corner of the physical joint-action box.
    fn action_high(&self) -> Vec<f64>;

    /// Continuous-time vector field `xdot = f(x, u)`.
    fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64>;

    /// Non-negative stage cost rate `l(x, u)`.
    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64;

    fn constraint(&self, x: &[f64]) -> f64;

    /// Gradient of [`SystemModel::constraint`] (a subgradient where `c` has kinks).
    fn constraint_grad(&self, x: &[f64]) -> Vec<f64>;

    /// One integrator step of length `dt`. Defaults to explicit Euler.
    fn integrate(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let xdot = self.dynamics(x, u);
        x.iter().zip(&xdot).map(|(xi, di)| xi + di * dt).collect()
    }

    /// Discrete constraint penalty `kappa` charged on entering `x`.
    fn violation_penalty(&self, x: &[f64]) -> f64 {
        if self.constraint(x) > 0.0 {
            VIOLATION_PENALTY
        } else {
            0.0
        }
    }

    fn observation_dim(&self) -> usize {
        self.state_dim()
    }

    /// Local observation of `agent`; the full state unless overridden.
    fn observation(&self, x: &[f64], _agent: usize) -> Vec<f64> {
        x.to_vec()
    }

    fn sample_initial_state(&self, rng: &mut EpiRng) -> Vec<f64>;

    /// Task-level distance to target, for environments that have one.
    fn distance_to_target(&self, _x: &[f64]) -> Option<f64> {
        None
    }
}

/// Outcome of a single environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    /// Stage cost rate evaluated at the pre-step state and the applied action.
    pub stage_cost: f64,
    /// Constraint value at the post-step state.
    pub constraint_value: f64,
    /// Discrete penalty, positive iff the violation condition fired at the post-step state.
    pub violation_penalty: f64,
    pub dt_used: f64,
}

fn validate_step(env: &dyn SystemModel, x: &[f64], u: &[f64], dt: f64) -> Result<()> {
    check_len("state", env.state_dim(), x.len())?;
    check_len("action", env.action_dim(), u.len())?;
    check_finite("state", x)?;
    check_finite("action", u)?;
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidTimeStep(dt));
    }
    let low = env.action_low();
    let high = env.action_high();
    for (index, ((&value, &lo), &hi)) in u.iter().zip(&low).zip(&high).enumerate() {
        let slack = 1e-9 * (1.0 + hi.abs().max(lo.abs()));
        if value < lo - slack || value > hi + slack {
            return Err(Error::ActionOutOfBounds {
                index,
                value,
                low: lo,
                high: hi,
            });
        }
    }
    Ok(())
}

/// Deterministic step of length `dt` with the environment's integrator.
pub fn step_continuous(env: &dyn SystemModel, x: &[f64], u: &[f64], dt: f64) -> Result<StepResult> {
    validate_step(env, x, u, dt)?;
    let next_state = env.integrate(x, u, dt);
    check_finite("next state", &next_state)?;
    Ok(StepResult {
        stage_cost: env.stage_cost(x, u),
        constraint_value: env.constraint(&next_state),
        violation_penalty: env.violation_penalty(&next_state),
        next_state,
        dt_used: dt,
    })
}

/// Deterministic step followed by an additive `N(0, sigma2 I)` state perturbation.
///
/// With `sigma2 == 0` no random numbers are drawn and the result is
/// bit-identical to [`step_continuous`].
pub fn step_noisy(
    env: &dyn SystemModel,
    x: &[f64],
    u: &[f64],
    dt: f64,
    sigma2: f64,
    rng: &mut EpiRng,
) -> Result<StepResult> {
    if !(sigma2.is_finite() && sigma2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise variance must be non-negative, got {sigma2}"
        )));
    }
    let mut result = step_continuous(env, x, u, dt)?;
    if sigma2 > 0.0 {
        let sigma = sigma2.sqrt();
        for xi in result.next_state.iter_mut() {
            let eps: f64 = StandardNormal.sample(rng);
            *xi += sigma * eps;
        }
        result.constraint_value = env.constraint(&result.next_state);
        result.violation_penalty = env.violation_penalty(&result.next_state);
    }
    Ok(result)
}

/// Map a normalized action in `[-1, 1]^m` onto the physical box.
pub fn scale_action(low: &[f64], high: &[f64], normalized: &[f64]) -> Vec<f64> {
    normalized
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&a, (&lo, &hi))| {
            let a = a.clamp(-1.0, 1.0);
            lo + 0.5 * (a + 1.0) * (hi - lo)
        })
        .collect()
}

/// Inverse of [`scale_action`].
pub fn normalize_action(low: &[f64], high: &[f64], physical: &[f64]) -> Vec<f64> {
    physical
        .iter()
        .zip(low.iter().zip(high))
        .map(|(&u, (&lo, &hi))| 2.0 * (u - lo) / (hi - lo) - 1.0)
        .collect()
}

/// How decision intervals are chosen during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DtPolicy {
    Fixed { dt: f64 },
    Uniform { low: f64, high: f64 },
}

impl DtPolicy {
    pub fn sample(&self, rng: &mut EpiRng) -> f64 {
        match *self {
            DtPolicy::Fixed { dt } => dt,
            DtPolicy::Uniform { low, high } => rng.random_range(low..=high),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            DtPolicy::Fixed { dt } => dt.is_finite() && dt > 0.0,
            DtPolicy::Uniform { low, high } => low.is_finite() && high.is_finite() && low > 0.0 && high >= low,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid decision-interval policy {self:?}")))
        }
    }

    /// Representative interval, used to size time horizons.
    pub fn nominal(&self) -> f64 {
        match *self {
            DtPolicy::Fixed { dt } => dt,
            DtPolicy::Uniform { low, high } => 0.5 * (low + high),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_noise_is_bit_identical() {
        let env = Oscillator::default();
        let mut rng = EpiRng::seed_from_u64(3);
        let x = [0.3, -0.1, 0.5, 0.2];
        let u = [1.5, -2.0];
        let a = step_continuous(&env, &x, &u, 0.1).unwrap();
        let b = step_noisy(&env, &x, &u, 0.1, 0.0, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noise_variance_matches() {
        let env = Oscillator::default();
        let mut rng = EpiRng::seed_from_u64(7);
        let x = [0.0; 4];
        let u = [0.0; 2];
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sum_sq = [0.0; 4];
        for _ in 0..n {
            let r = step_noisy(&env, &x, &u, 0.1, 0.1, &mut rng).unwrap();
            for i in 0..4 {
                sum[i] += r.next_state[i];
                sum_sq[i] += r.next_state[i] * r.next_state[i];
            }
        }
        for i in 0..4 {
            let mean = sum[i] / n as f64;
            let var = sum_sq[i] / n as f64 - mean * mean;
            assert!((var - 0.1).abs() <= 0.005, "coordinate {i}: variance {var}");
        }
    }

    #[test]
    fn seeded_noise_is_reproducible() {
        let env = Oscillator::default();
        let run = || {
            let mut rng = EpiRng::seed_from_u64(42);
            let mut x = vec![0.1, 0.0, 0.4, 0.0];
            for _ in 0..20 {
                x = step_noisy(&env, &x, &[1.0, -1.0], 0.05, 1.0, &mut rng)
                    .unwrap()
                    .next_state;
            }
            x
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rejects_bad_inputs() {
        let env = Oscillator::default();
        let x = [0.0; 4];
        assert!(matches!(
            step_continuous(&env, &x, &[0.0, 0.0], 0.0),
            Err(Error::InvalidTimeStep(_))
        ));
        assert!(matches!(
            step_continuous(&env, &x, &[0.0, 0.0], -0.1),
            Err(Error::InvalidTimeStep(_))
        ));
        assert!(matches!(
            step_continuous(&env, &[f64::NAN, 0.0, 0.0, 0.0], &[0.0, 0.0], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            step_continuous(&env, &x, &[f64::INFINITY, 0.0], 0.1),
            Err(Error::NonFinite(_))
        ));
        assert!(matches!(
            step_continuous(&env, &x, &[10.5, 0.0], 0.1),
            Err(Error::ActionOutOfBounds { index: 0, .. })
        ));
        assert!(matches!(
            step_continuous(&env, &x[..3], &[0.0, 0.0], 0.1),
            Err(Error::DimensionMismatch { .. })
        ));
        let mut rng = EpiRng::seed_from_u64(0);
        assert!(step_noisy(&env, &x, &[0.0, 0.0], 0.1, -1.0, &mut rng).is_err());
    }

    #[test]
    fn action_scaling_round_trips() {
        let low = [-10.0, -2.0];
        let high = [10.0, 4.0];
        let u = scale_action(&low, &high, &[-1.0, 0.5]);
        assert_eq!(u, vec![-10.0, 2.5]);
        let back = normalize_action(&low, &high, &u);
        assert!((back[0] + 1.0).abs() < 1e-15 && (back[1] - 0.5).abs() < 1e-15);
    }
}
