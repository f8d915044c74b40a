//! Auxiliary cost-budget state `z`, the composite epigraph value and the
//! closed-form outer problem for the minimal feasible budget `z*`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::DenseNet;

/// Physical state augmented with the cost budget and the clock.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub x: Vec<f64>,
    pub z: f64,
    pub t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZRange {
    pub min: f64,
    pub max: f64,
}

impl ZRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if min.is_finite() && max.is_finite() && min <= max {
            Ok(Self { min, max })
        } else {
            Err(Error::InvalidArgument(format!("invalid z range [{min}, {max}]")))
        }
    }

    pub fn clip(&self, z: f64) -> f64 {
        z.clamp(self.min, self.max)
    }
}

impl AugmentedState {
    pub fn clip_z(&mut self, range: ZRange) {
        self.z = range.clip(self.z);
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidDiscount(gamma))
    }
}

/// `zdot = -l - ln(gamma) z`.
pub fn z_dynamics(z: f64, stage_cost: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(-stage_cost - gamma.ln() * z)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZIntegrator {
    /// `z' = z gamma^-dt - l dt gamma^(-dt/2)`: exact decay with a midpoint-weighted source.
    #[default]
    Exponential,
    Euler,
}

/// Advance `z` over one decision interval with the stage cost held constant.
pub fn z_step(z: f64, stage_cost: f64, gamma: f64, dt: f64, scheme: ZIntegrator) -> Result<f64> {
    Ok(ZStepper::new(gamma, dt, scheme)?.step(z, stage_cost))
}

/// The budget update for a fixed discount and interval, `z' = grow z - weight l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZStepper {
    grow: f64,
    weight: f64,
}

impl ZStepper {
    pub fn new(gamma: f64, dt: f64, scheme: ZIntegrator) -> Result<Self> {
        check_gamma(gamma)?;
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::InvalidTimeStep(dt));
        }
        Ok(match scheme {
            ZIntegrator::Exponential => Self {
                grow: gamma.powf(-dt),
                weight: dt * gamma.powf(-0.5 * dt),
            },
            ZIntegrator::Euler => Self {
                grow: 1.0 - gamma.ln() * dt,
                weight: dt,
            },
        })
    }

    #[inline]
    pub fn step(&self, z: f64, stage_cost: f64) -> f64 {
        z * self.grow - stage_cost * self.weight
    }

    /// Per-interval discount implied by the update (`z = weight/grow l + z'/grow`).
    pub fn discount(&self) -> f64 {
        1.0 / self.grow
    }

    /// Weight of the stage cost in the one-interval discounted sum.
    pub fn cost_weight(&self) -> f64 {
        self.weight / self.grow
    }
}

/// Which term of `max{V_cons, V_ret - z}` is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Return,
    Constraint,
}

impl Branch {
    pub fn as_str(self) -> &'static str {
        match self {
            Branch::Return => "return",
            Branch::Constraint => "constraint",
        }
    }

    /// Subgradient of the composite value with respect to `z`.
    pub fn dz(self) -> f64 {
        match self {
            Branch::Return => -1.0,
            Branch::Constraint => 0.0,
        }
    }
}

/// Outputs of the two z-independent critic heads at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeadValues {
    pub ret: f64,
    pub cons: f64,
}

impl HeadValues {
    /// `max{V_cons, V_ret - z}`; ties go to the return branch.
    pub fn composite(&self, z: f64) -> (f64, Branch) {
        let ret = self.ret - z;
        if ret >= self.cons {
            (ret, Branch::Return)
        } else {
            (self.cons, Branch::Constraint)
        }
    }

    /// `1{V_ret - z >= V_cons}`.
    pub fn branch_indicator(&self, z: f64) -> u8 {
        u8::from(self.ret - z >= self.cons)
    }

    /// Minimal `z` with `max{V_cons, V_ret - z} <= 0`, clipped to `range`.
    ///
    /// The return term is decreasing in `z`, so the answer is `V_ret` whenever
    /// `V_cons <= 0`; otherwise no budget is feasible and `range.max` is used.
    pub fn z_star(&self, range: ZRange) -> ZStar {
        if self.cons > 0.0 {
            return ZStar {
                z: range.max,
                feasible: false,
            };
        }
        ZStar {
            z: range.clip(self.ret),
            feasible: self.ret <= range.max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZStar {
    pub z: f64,
    pub feasible: bool,
}

/// Anything that can produce the two head values at a state.
pub trait ValueHeads {
    fn heads(&self, x: &[f64]) -> Result<HeadValues>;
}

pub fn composite_value<C: ValueHeads + ?Sized>(critic: &C, x: &[f64], z: f64) -> Result<(f64, Branch)> {
    Ok(critic.heads(x)?.composite(z))
}

pub fn solve_z_star<C: ValueHeads + ?Sized>(critic: &C, x: &[f64], range: ZRange) -> Result<ZStar> {
    Ok(critic.heads(x)?.z_star(range))
}

pub fn branch_indicator<C: ValueHeads + ?Sized>(critic: &C, x: &[f64], z: f64) -> Result<u8> {
    Ok(critic.heads(x)?.branch_indicator(z))
}

/// Return and constraint value networks, both functions of `x` only.
#[derive(Debug, Clone, PartialEq)]
pub struct EpiCritic {
    pub ret: DenseNet,
    pub cons: DenseNet,
    pub gamma: f64,
}

impl EpiCritic {
    pub fn new(ret: DenseNet, cons: DenseNet, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        for net in [&ret, &cons] {
            if net.output_dim() != 1 {
                return Err(Error::InvalidArgument("critic heads must have scalar output".into()));
            }
        }
        if ret.input_dim() != cons.input_dim() {
            return Err(Error::InvalidArgument("critic heads disagree on state dimension".into()));
        }
        Ok(Self { ret, cons, gamma })
    }

    pub fn state_dim(&self) -> usize {
        self.ret.input_dim()
    }

    pub fn head(&self, branch: Branch) -> &DenseNet {
        match branch {
            Branch::Return => &self.ret,
            Branch::Constraint => &self.cons,
        }
    }
}

impl ValueHeads for EpiCritic {
    fn heads(&self, x: &[f64]) -> Result<HeadValues> {
        Ok(HeadValues {
            ret: self.ret.forward(x)?[0],
            cons: self.cons.forward(x)?[0],
        })
    }
}

impl ValueHeads for HeadValues {
    fn heads(&self, _x: &[f64]) -> Result<HeadValues> {
        Ok(*self)
    }
}
