use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use super::{SystemModel, VIOLATION_PENALTY};
use crate::EpiRng;

const N_AGENTS: usize = 2;

/// Goal and obstacle placement for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleLayout {
    pub goals: [[f64; 2]; N_AGENTS],
    pub starts: [[f64; 2]; N_AGENTS],
    pub obstacle: [f64; 2],
}

impl ParticleLayout {
    /// Agents start on the left, goals sit on the right, the obstacle is
    /// in between. Positions are jittered by a seeded stream.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = EpiRng::seed_from_u64(seed ^ 0x5eed_1a70_u64);
        let mut jitter = |scale: f64| rng.random_range(-scale..=scale);
        Self {
            goals: [
                [0.7 + jitter(0.1), 0.35 + jitter(0.1)],
                [0.7 + jitter(0.1), -0.35 + jitter(0.1)],
            ],
            starts: [
                [-0.7 + jitter(0.05), 0.3 + jitter(0.05)],
                [-0.7 + jitter(0.05), -0.3 + jitter(0.05)],
            ],
            obstacle: [jitter(0.1), jitter(0.1)],
        }
    }
}

impl Default for ParticleLayout {
    fn default() -> Self {
        Self::from_seed(0)
    }
}

/// Two point-mass agents steering toward fixed goals past one circular
/// obstacle. State layout per agent is `[px, py, vx, vy]`; the joint action is
/// one 2-D force per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ParticleTarget {
    pub mass: f64,
    pub damping: f64,
    pub force_max: f64,
    pub agent_radius: f64,
    pub obstacle_radius: f64,
    /// Uniform perturbation applied to start positions at every reset.
    pub start_noise: f64,
    /// Drawn from the run seed, never read from a config file.
    #[serde(skip)]
    pub layout: ParticleLayout,
}

impl Default for ParticleTarget {
    fn default() -> Self {
        Self::with_layout_seed(0)
    }
}

impl ParticleTarget {
    pub fn with_layout_seed(seed: u64) -> Self {
        Self {
            mass: 1.0,
            damping: 0.25,
            force_max: 1.0,
            agent_radius: 0.05,
            obstacle_radius: 0.2,
            start_noise: 0.1,
            layout: ParticleLayout::from_seed(seed),
        }
    }

    fn pos(x: &[f64], i: usize) -> [f64; 2] {
        [x[4 * i], x[4 * i + 1]]
    }

    fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    }

    /// Overlap depth `(r_i + r_o) - |p_i - p_o|` of agent `i` with the obstacle.
    pub fn obstacle_overlap(&self, x: &[f64], i: usize) -> f64 {
        self.agent_radius + self.obstacle_radius - Self::dist(Self::pos(x, i), self.layout.obstacle)
    }

    pub fn agent_overlap(&self, x: &[f64]) -> f64 {
        2.0 * self.agent_radius - Self::dist(Self::pos(x, 0), Self::pos(x, 1))
    }

    /// Per-agent discrete collision cost: 10 on any overlap, 0 otherwise.
    pub fn collision_costs(&self, x: &[f64]) -> [f64; N_AGENTS] {
        let pair = self.agent_overlap(x) > 0.0;
        let mut out = [0.0; N_AGENTS];
        for (i, cost) in out.iter_mut().enumerate() {
            if pair || self.obstacle_overlap(x, i) > 0.0 {
                *cost = VIOLATION_PENALTY;
            }
        }
        out
    }

    /// Per-agent continuous proximity cost `0.5 * phi(overlap)` with
    /// `phi(d) = 20 d` for `d > 0` and `0.5 d` otherwise. Logged only.
    pub fn proximity_costs(&self, x: &[f64]) -> [f64; N_AGENTS] {
        let phi = |d: f64| if d > 0.0 { 20.0 * d } else { 0.5 * d };
        let mut out = [0.0; N_AGENTS];
        for (i, cost) in out.iter_mut().enumerate() {
            *cost = 0.5 * phi(self.obstacle_overlap(x, i));
        }
        out
    }

    /// Per-agent dense goal reward `-|p_i - g_i|`.
    pub fn goal_rewards(&self, x: &[f64]) -> [f64; N_AGENTS] {
        let mut out = [0.0; N_AGENTS];
        for (i, r) in out.iter_mut().enumerate() {
            *r = -Self::dist(Self::pos(x, i), self.layout.goals[i]);
        }
        out
    }
}

impl SystemModel for ParticleTarget {
    fn name(&self) -> &'static str {
        "particle"
    }

    fn state_dim(&self) -> usize {
        4 * N_AGENTS
    }

    fn n_agents(&self) -> usize {
        N_AGENTS
    }

    fn action_dim_per_agent(&self) -> usize {
        2
    }

    fn action_low(&self) -> Vec<f64> {
        vec![-self.force_max; 2 * N_AGENTS]
    }

    fn action_high(&self) -> Vec<f64> {
        vec![self.force_max; 2 * N_AGENTS]
    }

    fn dynamics(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut xdot = vec![0.0; x.len()];
        for i in 0..N_AGENTS {
            for d in 0..2 {
                let v = x[4 * i + 2 + d];
                xdot[4 * i + d] = v;
                xdot[4 * i + 2 + d] = u[2 * i + d] / self.mass - self.damping * v;
            }
        }
        xdot
    }

    fn stage_cost(&self, x: &[f64], _u: &[f64]) -> f64 {
        -self.goal_rewards(x).iter().sum::<f64>()
    }

    /// Largest overlap depth over agent-obstacle and agent-agent pairs.
    fn constraint(&self, x: &[f64]) -> f64 {
        (0..N_AGENTS)
            .map(|i| self.obstacle_overlap(x, i))
            .fold(self.agent_overlap(x), f64::max)
    }

    fn constraint_grad(&self, x: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; x.len()];
        let unit = |a: [f64; 2], b: [f64; 2]| {
            let d = Self::dist(a, b).max(1e-12);
            [(a[0] - b[0]) / d, (a[1] - b[1]) / d]
        };
        let mut best = self.agent_overlap(x);
        let mut active = None;
        for i in 0..N_AGENTS {
            let o = self.obstacle_overlap(x, i);
            if o > best {
                best = o;
                active = Some(i);
            }
        }
        match active {
            Some(i) => {
                let n = unit(Self::pos(x, i), self.layout.obstacle);
                grad[4 * i] = -n[0];
                grad[4 * i + 1] = -n[1];
            }
            None => {
                let n = unit(Self::pos(x, 0), Self::pos(x, 1));
                grad[0] = -n[0];
                grad[1] = -n[1];
                grad[4] = n[0];
                grad[5] = n[1];
            }
        }
        grad
    }

    /// Explicit update: `p += v dt`, then `v += (F/m - damping v) dt`.
    fn integrate(&self, x: &[f64], u: &[f64], dt: f64) -> Vec<f64> {
        let mut next = x.to_vec();
        for i in 0..N_AGENTS {
            for d in 0..2 {
                let v = x[4 * i + 2 + d];
                next[4 * i + d] = x[4 * i + d] + v * dt;
                next[4 * i + 2 + d] = v + (u[2 * i + d] / self.mass - self.damping * v) * dt;
            }
        }
        next
    }

    fn violation_penalty(&self, x: &[f64]) -> f64 {
        self.collision_costs(x).iter().sum()
    }

    fn observation_dim(&self) -> usize {
        10
    }

    /// Own position and velocity, then goal, obstacle and teammate relative
    /// to the agent.
    fn observation(&self, x: &[f64], agent: usize) -> Vec<f64> {
        let p = Self::pos(x, agent);
        let other = Self::pos(x, 1 - agent);
        let g = self.layout.goals[agent];
        let o = self.layout.obstacle;
        vec![
            p[0],
            p[1],
            x[4 * agent + 2],
            x[4 * agent + 3],
            g[0] - p[0],
            g[1] - p[1],
            o[0] - p[0],
            o[1] - p[1],
            other[0] - p[0],
            other[1] - p[1],
        ]
    }

    fn sample_initial_state(&self, rng: &mut EpiRng) -> Vec<f64> {
        let s = self.start_noise;
        let mut x = vec![0.0; 4 * N_AGENTS];
        for i in 0..N_AGENTS {
            x[4 * i] = self.layout.starts[i][0] + rng.random_range(-s..=s);
            x[4 * i + 1] = self.layout.starts[i][1] + rng.random_range(-s..=s);
        }
        x
    }

    fn distance_to_target(&self, x: &[f64]) -> Option<f64> {
        Some(-self.goal_rewards(x).iter().sum::<f64>() / N_AGENTS as f64)
    }
}
