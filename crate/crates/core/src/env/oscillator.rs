use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{SystemModel, VIOLATION_PENALTY};
use crate::EpiRng;

/// Two masses on springs, one per agent, with the ordering constraint
/// `x1 <= x2 + margin`. State layout is `[x1, v1, x2, v2]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Oscillator {
    pub spring: f64,
    pub damping: f64,
    pub coupling: f64,
    pub control_penalty: f64,
    pub u_max: f64,
    pub margin: f64,
    /// Rejection threshold on `h(x) = margin - (x1 - x2)` for initial states.
    pub init_min_clearance: f64,
    pub init_position_range: f64,
    pub init_velocity_range: f64,
}

impl Default for Oscillator {
    fn default() -> Self {
        Self {
            spring: 1.0,
            damping: 0.5,
            coupling: 2.0,
            control_penalty: 0.01,
            u_max: 10.0,
            margin: 0.02,
            init_min_clearance: 0.05,
            init_position_range: 1.0,
            init_velocity_range: 0.5,
        }
    }
}

impl Oscillator {
    /// `h(x) = margin - (x1 - x2)`; the safe set is `h >= 0`.
    pub fn barrier(&self, x: &[f64]) -> f64 {
        self.margin - (x[0] - x[2])
    }

    /// `x1 > x2 + margin`.
    pub fn is_violating(&self, x: &[f64]) -> bool {
        x[0] > x[2] + self.margin
    }
}

/// Logistic surrogate `2 sigma(20 (x1 - x2 + 0.02)) - 1`, logged alongside the
/// hard penalty.
pub fn smooth_violation(x: &[f64]) -> f64 {
    let s = 20.0 * (x[0] - x[2] + 0.02);
    2.0 / (1.0 + (-s).exp()) - 1.0
}

impl SystemModel for Oscillator {
    fn name(&self) -> &'static str {
        "oscillator"
    }

    fn state_dim(&self) -> usize {
        4
    }

    fn n_agents(&self) -> usize {
        2
    }

    fn action_dim_per_agent(&self) -> usize {
        1
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-self.u_max; 2]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![self.u_max; 2]
    }

    fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let (k, b) = (self.spring, self.damping);
        vec![
            x[1],
            -k * x[0] - b * x[1] + u[0],
            x[3],
            -k * x[2] - b * x[3] + u[1],
        ]
    }

    fn stage_cost(&self, x: &[f64], u: &[f64]) -> f64 {
        let d = x[0] - x[2];
        x[0] * x[0] + x[2] * x[2] + self.coupling * d * d + self.control_penalty * (u[0] * u[0] + u[1] * u[1])
    }

    fn constraint(&self, x: &[f64]) -> f64 {
        x[0] - x[2] - self.margin
    }

    fn constraint_grad(&self, _x: &[f64]) -> Vec<f64> {
        vec![1.0, 0.0, -1.0, 0.0]
    }

    /// Semi-implicit Euler: velocities first, positions from the new velocities.
    fn integrate(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let (k, b) = (self.spring, self.damping);
        let v1 = x[1] + (-k * x[0] - b * x[1] + u[0]) * dt;
        let v2 = x[3] + (-k * x[2] - b * x[3] + u[1]) * dt;
        vec![x[0] + v1 * dt, v1, x[2] + v2 * dt, v2]
    }

    fn violation_penalty(&self, x: &[f64]) -> f64 {
        if self.is_violating(x) {
            VIOLATION_PENALTY
        } else {
            0.0
        }
    }

    fn sample_initial_state(&self, rng: &mut EpiRng) -> Vec<f64> {
        let p = self.init_position_range;
        let v = self.init_velocity_range;
        loop {
            let x = vec![
                rng.random_range(-p..=p),
                rng.random_range(-v..=v),
                rng.random_range(-p..=p),
                rng.random_range(-v..=v),
            ];
            if self.barrier(&x) >= self.init_min_clearance {
                return x;
            }
        }
    }

    fn distance_to_target(&self, x: &[f64]) -> Option<f64> {
        Some((x[0] * x[0] + x[2] * x[2]).sqrt())
    }
}
