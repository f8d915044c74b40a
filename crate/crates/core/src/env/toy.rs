//! Low-dimensional systems small enough for tabular ground truth.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SystemModel;
use crate::EpiRng;

/// Constraint shape shared by the toy systems, applied to the position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToyConstraint {
    /// `c(x) = value` everywhere.
    Constant { value: f64 },
    /// `c(x) = position - limit`.
    Upper { limit: f64 },
}

impl ToyConstraint {
    fn eval(&self, position: f64) -> f64 {
        match *self {
            ToyConstraint::Constant { value } => value,
            ToyConstraint::Upper { limit } => position - limit,
        }
    }

    fn slope(&self) -> f64 {
        match self {
            ToyConstraint::Constant { .. } => 0.0,
            ToyConstraint::Upper { .. } => 1.0,
        }
    }
}

/// `x' = x + u dt` with `u in [-u_max, u_max]` and cost `q x^2 + r u^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToySingleIntegrator {
    pub u_max: f64,
    pub state_weight: f64,
    pub action_weight: f64,
    pub constraint: ToyConstraint,
}

impl Default for ToySingleIntegrator {
    fn default() -> Self {
        Self {
            u_max: 1.0,
            state_weight: 1.0,
            action_weight: 0.0,
            constraint: ToyConstraint::Upper { limit: 0.5 },
        }
    }
}

impl SystemModel for ToySingleIntegrator {
    fn name(&self) -> &'static str {
        "toy1"
    }

    fn state_dim(&self) -> usize {
        1
    }

    fn n_agents(&self) -> usize {
        1
    }

    fn action_dim_per_agent(&self) -> usize {
        1
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-self.u_max]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![self.u_max]
    }

    fn dynamics(&self, _x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![u[0]]
    }

    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.state_weight * x[0] * x[0] + self.action_weight * u[0] * u[0]
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        self.constraint.eval(x[0])
    }

    fn constraint_grad(&self, _x: &[f64]) -> Vec<f64> {
        vec![self.constraint.slope()]
    }

    fn sample_initial_state(&self, rng: &mut EpiRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..=1.0)]
    }
}

/// 1-D double integrator `[p, v]`, semi-implicit, with acceleration in
/// `[-u_max, u_max]` and cost `qp p^2 + qv v^2 + r a^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDoubleIntegrator {
    pub u_max: f64,
    pub position_weight: f64,
    pub velocity_weight: f64,
    pub action_weight: f64,
    pub constraint: ToyConstraint,
}

impl Default for ToyDoubleIntegrator {
    fn default() -> Self {
        Self {
            u_max: 1.0,
            position_weight: 1.0,
            velocity_weight: 0.5,
            action_weight: 0.1,
            constraint: ToyConstraint::Upper { limit: 0.6 },
        }
    }
}

impl ToyDoubleIntegrator {
    /// Zero cost and `c = 0` everywhere.
    pub fn zero() -> Self {
        Self {
            position_weight: 0.0,
            velocity_weight: 0.0,
            action_weight: 0.0,
            constraint: ToyConstraint::Constant { value: 0.0 },
            ..Self::default()
        }
    }
}

impl SystemModel for ToyDoubleIntegrator {
    fn name(&self) -> &'static str {
        "toy2"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn n_agents(&self) -> usize {
        1
    }

    fn action_dim_per_agent(&self) -> usize {
        1
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-self.u_max]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![self.u_max]
    }

    fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![x[1], u[0]]
    }

    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        self.position_weight * x[0] * x[0] + self.velocity_weight * x[1] * x[1] + self.action_weight * u[0] * u[0]
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        self.constraint.eval(x[0])
    }

    fn constraint_grad(&self, _x: &[f64]) -> Vec<f64> {
        vec![self.constraint.slope(), 0.0]
    }

    fn integrate(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let v = x[1] + u[0] * dt;
        vec![x[0] + v * dt, v]
    }

    fn sample_initial_state(&self, rng: &mut EpiRng) -> Vec<f64> {
        vec![rng.random_range(-1.0..=0.4), rng.random_range(-0.5..=0.5)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::step_continuous;

    #[test]
    fn single_integrator_moves_by_u_dt() {
        let env = ToySingleIntegrator::default();
        let r = step_continuous(&env, &[0.2], &[-0.5], 0.1).unwrap();
        assert!((r.next_state[0] - 0.15).abs() < 1e-15);
    }

    #[test]
    fn double_integrator_zero_velocity_fixed_point() {
        let env = ToyDoubleIntegrator::default();
        let r = step_continuous(&env, &[0.3, 0.0], &[0.0], 0.1).unwrap();
        assert_eq!(r.next_state, vec![0.3, 0.0]);
    }

    #[test]
    fn constraint_variants() {
        let mut env = ToyDoubleIntegrator::default();
        assert!((env.constraint(&[0.7, 0.0]) - 0.1).abs() < 1e-15);
        env.constraint = ToyConstraint::Constant { value: -1.0 };
        assert_eq!(env.constraint(&[5.0, 0.0]), -1.0);
        assert_eq!(env.constraint_grad(&[5.0, 0.0]), vec![0.0, 0.0]);
    }
}
