//! Critic, model and actor objectives.
//!
//! Each objective is split into an evaluation, generic over [`ScalarField`]
//! heads and a [`LearnedModel`] so analytic references can stand in for the
//! networks, and a parameter-gradient routine specialised to [`DenseNet`].

use serde::{Deserialize, Serialize};

use crate::epigraph::{Branch, EpiCritic, HeadValues};
use crate::error::{check_len, Error, Result};
use crate::nn::{Activation, DenseNet};
use crate::policy::{GaussianPolicy, PolicyGrads};
use crate::rollout::{suffix_targets, HeadTargets, Rollout};
use crate::EpiRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_res: f64,
    pub lambda_tgt: f64,
    pub lambda_vgi: f64,
    pub lambda_head: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_res: 1.0,
            lambda_tgt: 1.0,
            lambda_vgi: 1.0,
            lambda_head: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_res", self.lambda_res),
            ("lambda_tgt", self.lambda_tgt),
            ("lambda_vgi", self.lambda_vgi),
            ("lambda_head", self.lambda_head),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar function of the state with its input gradient.
pub trait ScalarField: Sync {
    fn value(&self, x: &[f64]) -> Result<f64>;
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl ScalarField for DenseNet {
    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.forward(x)?[0])
    }

    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let trace = self.forward_trace(x)?;
        let v = trace.output()[0];
        Ok((v, self.backward_trace(&trace, &[1.0])?.d_input))
    }
}

/// Borrowed pair of heads with the discount.
#[derive(Clone, Copy)]
pub struct CriticView<'a> {
    pub ret: &'a dyn ScalarField,
    pub cons: &'a dyn ScalarField,
    pub gamma: f64,
}

impl<'a> From<&'a EpiCritic> for CriticView<'a> {
    fn from(c: &'a EpiCritic) -> Self {
        Self {
            ret: &c.ret,
            cons: &c.cons,
            gamma: c.gamma,
        }
    }
}

/// `V~(x, z)` with its active branch, input gradient and `dV~/dz`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEval {
    pub value: f64,
    pub branch: Branch,
    pub grad_x: Vec<f64>,
    pub dz: f64,
}

pub fn composite_eval(critic: &CriticView, x: &[f64], z: f64) -> Result<CompositeEval> {
    let (ret, g_ret) = critic.ret.value_grad(x)?;
    let (cons, g_cons) = critic.cons.value_grad(x)?;
    let (value, branch) = HeadValues { ret, cons }.composite(z);
    let grad_x = match branch {
        Branch::Return => g_ret,
        Branch::Constraint => g_cons,
    };
    Ok(CompositeEval {
        value,
        branch,
        grad_x,
        dz: branch.dz(),
    })
}

/// Learned (or reference) transition and cost models in rate form.
/// Actions are in normalized `[-1, 1]` coordinates.
pub trait LearnedModel: Sync {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// `(x' - x) / dt`.
    fn rate(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>;
    /// Stage cost rate.
    fn cost(&self, x: &[f64], u: &[f64], dt: f64) -> Result<f64>;
    /// `J[i][j] = d x'_i / d x_j`.
    fn transition_jacobian(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<Vec<f64>>>;
    fn cost_grad_x(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>>;
    /// `d/du [w . rate + a cost]`.
    fn surrogate_grad_u(&self, x: &[f64], u: &[f64], dt: f64, w: &[f64], a: f64) -> Result<Vec<f64>>;
}

/// Dynamics and cost networks on `[x | u | dt]`. The dynamics net outputs
/// the rate, so the predicted next state is `x + dt f`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelNets {
    pub dyn_net: DenseNet,
    pub cost_net: DenseNet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub dyn_net: Vec<f64>,
    pub cost_net: Vec<f64>,
}

impl ModelNets {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut EpiRng) -> Result<Self> {
        let n_in = state_dim + action_dim + 1;
        let mut dyn_net = DenseNet::new(&[n_in, hidden, hidden, state_dim], Activation::Relu)?;
        let mut cost_net = DenseNet::new(&[n_in, hidden, hidden, 1], Activation::Relu)?;
        dyn_net.init_uniform(rng);
        cost_net.init_uniform(rng);
        Ok(Self { dyn_net, cost_net })
    }

    pub fn from_nets(dyn_net: DenseNet, cost_net: DenseNet) -> Result<Self> {
        let d = dyn_net.output_dim();
        if dyn_net.input_dim() <= d + 1 || cost_net.input_dim() != dyn_net.input_dim() || cost_net.output_dim() != 1 {
            return Err(Error::InvalidArgument("model networks must share the [x | u | dt] input".into()));
        }
        Ok(Self { dyn_net, cost_net })
    }

    pub fn input(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        check_len("model state", self.state_dim(), x.len())?;
        check_len("model action", self.action_dim(), u.len())?;
        let mut v = Vec::with_capacity(x.len() + u.len() + 1);
        v.extend_from_slice(x);
        v.extend_from_slice(u);
        v.push(dt);
        Ok(v)
    }

    pub fn predict_next(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let r = self.rate(x, u, dt)?;
        Ok(x.iter().zip(&r).map(|(a, b)| a + dt * b).collect())
    }
}

impl LearnedModel for ModelNets {
    fn state_dim(&self) -> usize {
        self.dyn_net.output_dim()
    }

    fn action_dim(&self) -> usize {
        self.dyn_net.input_dim() - self.state_dim() - 1
    }

    fn rate(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        self.dyn_net.forward(&self.input(x, u, dt)?)
    }

    fn cost(&self, x: &[f64], u: &[f64], dt: f64) -> Result<f64> {
        Ok(self.cost_net.forward(&self.input(x, u, dt)?)?[0])
    }

    fn transition_jacobian(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<Vec<f64>>> {
        let d = self.state_dim();
        let jac = self.dyn_net.input_jacobian(&self.input(x, u, dt)?)?;
        Ok((0..d)
            .map(|i| (0..d).map(|j| f64::from(u8::from(i == j)) + dt * jac[i][j]).collect())
            .collect())
    }

    fn cost_grad_x(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
        let g = self.cost_net.backward(&self.input(x, u, dt)?, &[1.0])?;
        Ok(g.d_input[..self.state_dim()].to_vec())
    }

    fn surrogate_grad_u(&self, x: &[f64], u: &[f64], dt: f64, w: &[f64], a: f64) -> Result<Vec<f64>> {
        let input = self.input(x, u, dt)?;
        let (d, m) = (self.state_dim(), self.action_dim());
        let gd = self.dyn_net.backward(&input, w)?;
        let gc = self.cost_net.backward(&input, &[a])?;
        Ok((d..d + m).map(|k| gd.d_input[k] + gc.d_input[k]).collect())
    }
}

/// `(|f(x,u,dt) - x'|^2, (l(x,u,dt) - l)^2)` with parameter gradients.
pub fn model_regression_loss(
    models: &ModelNets,
    x: &[f64],
    u: &[f64],
    dt: f64,
    x_next: &[f64],
    stage_cost: f64,
) -> Result<(f64, f64, ModelGrads)> {
    check_len("next state", models.state_dim(), x_next.len())?;
    let input = models.input(x, u, dt)?;
    let rate = models.dyn_net.forward(&input)?;
    let err: Vec<f64> = (0..x.len()).map(|i| x[i] + dt * rate[i] - x_next[i]).collect();
    let dyn_loss = err.iter().map(|e| e * e).sum();
    let up: Vec<f64> = err.iter().map(|e| 2.0 * e * dt).collect();
    let gd = models.dyn_net.backward(&input, &up)?;
    let c_err = models.cost_net.forward(&input)?[0] - stage_cost;
    let gc = models.cost_net.backward(&input, &[2.0 * c_err])?;
    Ok((
        dyn_loss,
        c_err * c_err,
        ModelGrads {
            dyn_net: gd.d_params,
            cost_net: gc.d_params,
        },
    ))
}

/// Parameter gradients of both heads.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticGrads {
    pub ret: Vec<f64>,
    pub cons: Vec<f64>,
}

impl CriticGrads {
    pub fn zeros(c: &EpiCritic) -> Self {
        Self {
            ret: vec![0.0; c.ret.params().len()],
            cons: vec![0.0; c.cons.params().len()],
        }
    }

    pub fn head_mut(&mut self, b: Branch) -> &mut Vec<f64> {
        match b {
            Branch::Return => &mut self.ret,
            Branch::Constraint => &mut self.cons,
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &CriticGrads, s: f64) {
        for (a, b) in self.ret.iter_mut().zip(&other.ret) {
            *a += s * b;
        }
        for (a, b) in self.cons.iter_mut().zip(&other.cons) {
            *a += s * b;
        }
    }

    fn add_head(&mut self, b: Branch, g: &[f64], s: f64) {
        for (a, v) in self.head_mut(b).iter_mut().zip(g) {
            *a += s * v;
        }
    }
}

/// Value of the epigraph Hamiltonian `grad V~ . f - dV~/dz l + ln(gamma) V~`.
fn hamiltonian(ce: &CompositeEval, rate: &[f64], cost: f64, gamma: f64) -> f64 {
    crate::nn::dot(&ce.grad_x, rate) - ce.dz * cost + gamma.ln() * ce.value
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualEval {
    pub loss: f64,
    /// `max{c - V~, min_u H}`.
    pub residual: f64,
    /// Whether the Hamiltonian term attains the max.
    pub hamiltonian_active: bool,
    pub best_candidate: usize,
    pub rate: Vec<f64>,
    pub composite: CompositeEval,
}

/// Squared epigraph HJB residual at `(x, z*)` with the Hamiltonian minimised
/// over the candidate actions.
pub fn residual_eval(
    critic: &CriticView,
    models: &dyn LearnedModel,
    x: &[f64],
    z_star: f64,
    c: f64,
    candidates: &[Vec<f64>],
    dt: f64,
) -> Result<ResidualEval> {
    if candidates.is_empty() {
        return Err(Error::Empty("action candidates"));
    }
    let ce = composite_eval(critic, x, z_star)?;
    let mut best = (f64::INFINITY, 0, Vec::new());
    for (k, u) in candidates.iter().enumerate() {
        let rate = models.rate(x, u, dt)?;
        let h = hamiltonian(&ce, &rate, models.cost(x, u, dt)?, critic.gamma);
        if h < best.0 {
            best = (h, k, rate);
        }
    }
    let cons_term = c - ce.value;
    let hamiltonian_active = best.0 >= cons_term;
    let residual = best.0.max(cons_term);
    Ok(ResidualEval {
        loss: residual * residual,
        residual,
        hamiltonian_active,
        best_candidate: best.1,
        rate: best.2,
        composite: ce,
    })
}

pub fn residual_loss(
    critic: &CriticView,
    models: &dyn LearnedModel,
    x: &[f64],
    z_star: f64,
    c: f64,
    candidates: &[Vec<f64>],
    dt: f64,
) -> Result<f64> {
    Ok(residual_eval(critic, models, x, z_star, c, candidates, dt)?.loss)
}

/// Head gradients of [`ResidualEval::loss`]; models and `z*` are constants.
pub fn residual_grads(critic: &EpiCritic, x: &[f64], eval: &ResidualEval) -> Result<CriticGrads> {
    let mut out = CriticGrads::zeros(critic);
    let branch = eval.composite.branch;
    let head = critic.head(branch);
    let g = if eval.hamiltonian_active {
        head.directional_backward(x, &eval.rate, &[critic.gamma.ln()], &[1.0])?
    } else {
        head.backward(x, &[-1.0])?
    };
    out.add_head(branch, &g.d_params, 2.0 * eval.residual);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetEval {
    pub loss: f64,
    /// `V~(x, z*) - target`.
    pub error: f64,
    pub target: f64,
    pub branch: Branch,
}

/// `(V~(x, z*) - max{cons, ret - z*})^2`.
pub fn target_eval(critic: &CriticView, x: &[f64], z_star: f64, targets: HeadTargets) -> Result<TargetEval> {
    let heads = HeadValues {
        ret: critic.ret.value(x)?,
        cons: critic.cons.value(x)?,
    };
    let (v, branch) = heads.composite(z_star);
    let target = targets.composite(z_star);
    let error = v - target;
    Ok(TargetEval {
        loss: error * error,
        error,
        target,
        branch,
    })
}

/// Target loss at `t_index`, bootstrapping with `V_ret` at the terminal state when `bootstrap` is set.
pub fn target_loss(critic: &EpiCritic, rollout: &Rollout, t_index: usize, z_star: f64, bootstrap: bool) -> Result<f64> {
    let step = rollout.steps.get(t_index).ok_or(Error::Empty("rollout suffix"))?;
    let tail = match (bootstrap, rollout.terminal_state()) {
        (true, Some(xt)) => critic.ret.forward(xt)?[0],
        _ => 0.0,
    };
    let targets = suffix_targets(rollout, critic.gamma, tail)?;
    Ok(target_eval(&critic.into(), &step.x, z_star, targets[t_index])?.loss)
}

pub fn target_grads(critic: &EpiCritic, x: &[f64], eval: &TargetEval) -> Result<CriticGrads> {
    let mut out = CriticGrads::zeros(critic);
    let g = critic.head(eval.branch).backward(x, &[2.0 * eval.error])?;
    out.add_head(eval.branch, &g.d_params, 1.0);
    Ok(out)
}

/// `(V_ret - ret)^2 + (V_cons - cons)^2` with gradients.
pub fn head_regression_loss(critic: &EpiCritic, x: &[f64], targets: HeadTargets) -> Result<(f64, CriticGrads)> {
    let (a, mut out) = head_loss(critic, Branch::Return, x, targets.ret)?;
    let (b, g) = head_loss(critic, Branch::Constraint, x, targets.cons)?;
    out.add_scaled(&g, 1.0);
    Ok((a + b, out))
}

/// Squared error of a single head.
pub fn head_loss(critic: &EpiCritic, branch: Branch, x: &[f64], target: f64) -> Result<(f64, CriticGrads)> {
    let mut out = CriticGrads::zeros(critic);
    let head = critic.head(branch);
    let e = head.forward(x)?[0] - target;
    out.add_head(branch, &head.backward(x, &[2.0 * e])?.d_params, 1.0);
    Ok((e * e, out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct VgiEval {
    pub loss: f64,
    /// `g_t - target`.
    pub error: Vec<f64>,
    pub branch: Branch,
}

/// One transition of the value-gradient recursion.
#[derive(Debug, Clone, Copy)]
pub struct VgiInput<'a> {
    pub x: &'a [f64],
    pub u: &'a [f64],
    pub dt: f64,
    pub z_star: f64,
    pub x_next: &'a [f64],
    pub z_star_next: f64,
    /// Analytic `grad c(x)`.
    pub grad_c: &'a [f64],
}

/// `|g_t - [grad(chi l + (1 - chi) c) dt + gamma^dt J' g_next]|^2` with `g_next` held fixed.
pub fn vgi_eval(critic: &CriticView, models: &dyn LearnedModel, inp: VgiInput) -> Result<VgiEval> {
    vgi_eval_split(critic, critic, models, inp)
}

/// [`vgi_eval`] with the bootstrap gradient taken from `next_critic`.
pub fn vgi_eval_split(
    critic: &CriticView,
    next_critic: &CriticView,
    models: &dyn LearnedModel,
    inp: VgiInput,
) -> Result<VgiEval> {
    let d = inp.x.len();
    check_len("constraint gradient", d, inp.grad_c.len())?;
    let now = composite_eval(critic, inp.x, inp.z_star)?;
    let next = composite_eval(next_critic, inp.x_next, inp.z_star_next)?;
    let stage = match now.branch {
        Branch::Return => models.cost_grad_x(inp.x, inp.u, inp.dt)?,
        Branch::Constraint => inp.grad_c.to_vec(),
    };
    let jac = models.transition_jacobian(inp.x, inp.u, inp.dt)?;
    let disc = critic.gamma.powf(inp.dt);
    let error: Vec<f64> = (0..d)
        .map(|j| {
            let back: f64 = (0..d).map(|i| jac[i][j] * next.grad_x[i]).sum();
            now.grad_x[j] - (stage[j] * inp.dt + disc * back)
        })
        .collect();
    Ok(VgiEval {
        loss: error.iter().map(|e| e * e).sum(),
        error,
        branch: now.branch,
    })
}

pub fn vgi_loss(critic: &CriticView, models: &dyn LearnedModel, inp: VgiInput) -> Result<f64> {
    Ok(vgi_eval(critic, models, inp)?.loss)
}

pub fn vgi_grads(critic: &EpiCritic, x: &[f64], eval: &VgiEval) -> Result<CriticGrads> {
    let mut out = CriticGrads::zeros(critic);
    let w: Vec<f64> = eval.error.iter().map(|e| 2.0 * e).collect();
    let head = critic.head(eval.branch);
    let g = head.directional_backward(x, &w, &[0.0], &[1.0])?;
    out.add_head(eval.branch, &g.d_params, 1.0);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageEval {
    pub value: f64,
    pub grad_u: Vec<f64>,
    pub hamiltonian_active: bool,
}

/// `A = max{c - V~, grad V~ . f - dV~/dz l + ln(gamma) V~}` given a
/// precomputed composite at `(x, z*)`; differentiable in `u` through the models.
pub fn advantage_from_composite(
    ce: &CompositeEval,
    gamma: f64,
    models: &dyn LearnedModel,
    x: &[f64],
    c: f64,
    u: &[f64],
    dt: f64,
) -> Result<AdvantageEval> {
    let rate = models.rate(x, u, dt)?;
    let h = hamiltonian(ce, &rate, models.cost(x, u, dt)?, gamma);
    let cons_term = c - ce.value;
    if h >= cons_term {
        Ok(AdvantageEval {
            value: h,
            grad_u: models.surrogate_grad_u(x, u, dt, &ce.grad_x, -ce.dz)?,
            hamiltonian_active: true,
        })
    } else {
        Ok(AdvantageEval {
            value: cons_term,
            grad_u: vec![0.0; u.len()],
            hamiltonian_active: false,
        })
    }
}

pub fn epigraph_advantage(
    critic: &CriticView,
    models: &dyn LearnedModel,
    x: &[f64],
    z_star: f64,
    c: f64,
    u: &[f64],
    dt: f64,
) -> Result<AdvantageEval> {
    let ce = composite_eval(critic, x, z_star)?;
    advantage_from_composite(&ce, critic.gamma, models, x, c, u, dt)
}

/// Advantage over a batch of states as a function of the joint action.
pub trait AdvantageFn: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// `(A, dA/du)` for batch entry `sample`.
    fn advantage(&self, sample: usize, u: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// State data for one actor-batch entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorState {
    pub x: Vec<f64>,
    pub z_star: f64,
    pub c: f64,
    pub dt: f64,
}

/// [`epigraph_advantage`] over a batch, with the critic evaluated once per state.
pub struct EpiAdvantage<'a> {
    gamma: f64,
    models: &'a dyn LearnedModel,
    states: &'a [ActorState],
    composites: Vec<CompositeEval>,
}

impl<'a> EpiAdvantage<'a> {
    pub fn new(critic: &CriticView, models: &'a dyn LearnedModel, states: &'a [ActorState]) -> Result<Self> {
        let composites = states
            .iter()
            .map(|s| composite_eval(critic, &s.x, s.z_star))
            .collect::<Result<_>>()?;
        Ok(Self {
            gamma: critic.gamma,
            models,
            states,
            composites,
        })
    }
}

impl AdvantageFn for EpiAdvantage<'_> {
    fn len(&self) -> usize {
        self.states.len()
    }

    fn advantage(&self, sample: usize, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let s = &self.states[sample];
        let a = advantage_from_composite(&self.composites[sample], self.gamma, self.models, &s.x, s.c, u, s.dt)?;
        Ok((a.value, a.grad_u))
    }
}

/// Mean advantage over reparameterized draws. `inputs[b][i]` is agent
/// `i`'s policy input for entry `b`; `noise[b][k]` is the joint standard
/// normal draw `k` for entry `b`.
pub fn actor_loss_with_noise(
    policies: &[GaussianPolicy],
    inputs: &[Vec<Vec<f64>>],
    noise: &[Vec<Vec<f64>>],
    adv: &dyn AdvantageFn,
) -> Result<(f64, Vec<PolicyGrads>)> {
    if inputs.is_empty() {
        return Err(Error::Empty("actor batch"));
    }
    check_len("actor batch", adv.len(), inputs.len())?;
    check_len("actor noise", inputs.len(), noise.len())?;
    let dims: Vec<usize> = policies.iter().map(GaussianPolicy::action_dim).collect();
    let total: usize = dims.iter().sum();
    let n_terms: usize = noise.iter().map(Vec::len).sum();
    if n_terms == 0 {
        return Err(Error::Empty("actor noise draws"));
    }
    let scale = 1.0 / n_terms as f64;
    let mut grads: Vec<PolicyGrads> = policies.iter().map(PolicyGrads::zeros).collect();
    let mut loss = 0.0;
    for (b, agent_inputs) in inputs.iter().enumerate() {
        check_len("agents", policies.len(), agent_inputs.len())?;
        for eps in &noise[b] {
            check_len("joint noise", total, eps.len())?;
            let mut u = Vec::with_capacity(total);
            let mut off = 0;
            for (p, inp) in policies.iter().zip(agent_inputs) {
                u.extend(p.act_with_noise(inp, &eps[off..off + p.action_dim()])?);
                off += p.action_dim();
            }
            let (a, da) = adv.advantage(b, &u)?;
            loss += a * scale;
            let mut off = 0;
            for ((p, inp), g) in policies.iter().zip(agent_inputs).zip(grads.iter_mut()) {
                let n = p.action_dim();
                let du: Vec<f64> = da[off..off + n].iter().map(|v| v * scale).collect();
                p.accumulate_grad(inp, &eps[off..off + n], &du, g)?;
                off += n;
            }
        }
    }
    Ok((loss, grads))
}

/// [`actor_loss_with_noise`] with `draws` fresh draws per entry.
pub fn actor_loss(
    policies: &[GaussianPolicy],
    inputs: &[Vec<Vec<f64>>],
    adv: &dyn AdvantageFn,
    draws: usize,
    rng: &mut EpiRng,
) -> Result<(f64, Vec<PolicyGrads>)> {
    let noise: Vec<Vec<Vec<f64>>> = inputs
        .iter()
        .map(|_| {
            (0..draws)
                .map(|_| policies.iter().flat_map(|p| p.sample_noise(rng)).collect())
                .collect()
        })
        .collect();
    actor_loss_with_noise(policies, inputs, &noise, adv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::epigraph::EpiCritic;
    use rand::{Rng, SeedableRng};

    fn linear(w: &[f64], b: f64) -> DenseNet {
        let mut n = DenseNet::new(&[w.len(), 1], Activation::Linear).unwrap();
        let mut p = w.to_vec();
        p.push(b);
        n.set_params(&p).unwrap();
        n
    }

    fn zero_net(widths: &[usize]) -> DenseNet {
        DenseNet::new(widths, Activation::Tanh).unwrap()
    }

    /// `rate = a x + b u`, `cost = q x^2 + r u^2` on a scalar state.
    struct LinearModel {
        a: f64,
        b: f64,
        q: f64,
        r: f64,
    }

    impl LearnedModel for LinearModel {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn rate(&self, x: &[f64], u: &[f64], _dt: f64) -> Result<Vec<f64>> {
            Ok(vec![self.a * x[0] + self.b * u[0]])
        }
        fn cost(&self, x: &[f64], u: &[f64], _dt: f64) -> Result<f64> {
            Ok(self.q * x[0] * x[0] + self.r * u[0] * u[0])
        }
        fn transition_jacobian(&self, _x: &[f64], _u: &[f64], dt: f64) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![1.0 + dt * self.a]])
        }
        fn cost_grad_x(&self, x: &[f64], _u: &[f64], _dt: f64) -> Result<Vec<f64>> {
            Ok(vec![2.0 * self.q * x[0]])
        }
        fn surrogate_grad_u(&self, _x: &[f64], u: &[f64], _dt: f64, w: &[f64], a: f64) -> Result<Vec<f64>> {
            Ok(vec![w[0] * self.b + a * 2.0 * self.r * u[0]])
        }
    }

    struct Quadratic(f64);

    impl ScalarField for Quadratic {
        fn value(&self, x: &[f64]) -> Result<f64> {
            Ok(self.0 * x[0] * x[0])
        }
        fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.0 * x[0] * x[0], vec![2.0 * self.0 * x[0]]))
        }
    }

    struct Constant(f64);

    impl ScalarField for Constant {
        fn value(&self, _x: &[f64]) -> Result<f64> {
            Ok(self.0)
        }
        fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.0, vec![0.0; x.len()]))
        }
    }

    fn toy_model() -> LinearModel {
        LinearModel {
            a: 0.0,
            b: 1.0,
            q: 1.0,
            r: 1.0,
        }
    }

    #[test]
    fn zero_critic_residual_vanishes() {
        let critic = EpiCritic::new(zero_net(&[1, 8, 1]), zero_net(&[1, 8, 1]), 0.99).unwrap();
        let cands = vec![vec![0.3], vec![-0.9]];
        let r = residual_eval(&(&critic).into(), &toy_model(), &[0.4], 0.0, -1.0, &cands, 0.1).unwrap();
        // V~ = 0 at z = 0 on the return branch; H = l >= 0 with the best candidate.
        let expect = toy_model().cost(&[0.4], &[0.3], 0.1).unwrap();
        assert!((r.residual - expect).abs() < 1e-15);
        let stationary = LinearModel { q: 0.0, r: 0.0, ..toy_model() };
        let r = residual_eval(&(&critic).into(), &stationary, &[0.4], 0.0, -1.0, &cands, 0.1).unwrap();
        assert_eq!(r.loss, 0.0);
    }

    #[test]
    fn constraint_branch_ignores_cost() {
        let ret = linear(&[0.5], 0.0);
        let cons = linear(&[1.0], 2.0);
        let critic = EpiCritic::new(ret, cons, 0.99).unwrap();
        let cands = vec![vec![0.5]];
        let cheap = LinearModel { q: 0.0, r: 0.0, ..toy_model() };
        let pricey = LinearModel { q: 50.0, r: 50.0, ..toy_model() };
        let a = residual_eval(&(&critic).into(), &cheap, &[0.2], 1.0, 0.0, &cands, 0.1).unwrap();
        let b = residual_eval(&(&critic).into(), &pricey, &[0.2], 1.0, 0.0, &cands, 0.1).unwrap();
        assert_eq!(a.composite.branch, Branch::Constraint);
        assert_eq!(a.loss, b.loss);
    }

    #[test]
    fn residual_hand_evaluation() {
        // V_ret = 2x + 1, V_cons = -3, z = 0.5, x = 0.25, f = u, l = x^2 + u^2.
        let critic = EpiCritic::new(linear(&[2.0], 1.0), linear(&[0.0], -3.0), 0.9).unwrap();
        let cands = vec![vec![-1.0], vec![0.0], vec![-0.5]];
        let r = residual_eval(&(&critic).into(), &toy_model(), &[0.25], 0.5, -0.2, &cands, 0.1).unwrap();
        let v = 2.0 * 0.25 + 1.0 - 0.5;
        let h = |u: f64| 2.0 * u + (0.0625 + u * u) + 0.9f64.ln() * v;
        let hmin = h(-1.0).min(h(0.0)).min(h(-0.5));
        let expect = hmin.max(-0.2 - v);
        assert!((r.residual - expect).abs() < 1e-14);
        assert_eq!(r.best_candidate, 0);
        assert!(r.hamiltonian_active);
    }

    fn random_critic(rng: &mut EpiRng, d: usize) -> EpiCritic {
        let mut ret = DenseNet::new(&[d, 6, 6, 1], Activation::Tanh).unwrap();
        let mut cons = DenseNet::new(&[d, 6, 6, 1], Activation::Tanh).unwrap();
        ret.init_uniform(rng);
        cons.init_uniform(rng);
        EpiCritic::new(ret, cons, 0.95).unwrap()
    }

    fn check_grads(critic: &EpiCritic, grads: &CriticGrads, f: impl Fn(&EpiCritic) -> f64) {
        let h = 1e-6;
        for branch in [Branch::Return, Branch::Constraint] {
            let n = critic.head(branch).params().len();
            for i in (0..n).step_by(7) {
                let mut c = critic.clone();
                let head = match branch {
                    Branch::Return => &mut c.ret,
                    Branch::Constraint => &mut c.cons,
                };
                head.params_mut()[i] += h;
                let up = f(&c);
                let head = match branch {
                    Branch::Return => &mut c.ret,
                    Branch::Constraint => &mut c.cons,
                };
                head.params_mut()[i] -= 2.0 * h;
                let fd = (up - f(&c)) / (2.0 * h);
                let an = match branch {
                    Branch::Return => grads.ret[i],
                    Branch::Constraint => grads.cons[i],
                };
                assert!((fd - an).abs() <= 1e-5 * (1.0 + fd.abs()), "{branch:?}[{i}]: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn residual_gradients_match_finite_differences() {
        let mut rng = EpiRng::seed_from_u64(12);
        let critic = random_critic(&mut rng, 2);
        let models = ModelNets::new(2, 1, 8, &mut rng).unwrap();
        let x = [0.3, -0.4];
        let cands = vec![vec![0.2], vec![-0.7], vec![0.9]];
        for (z, c) in [(0.1, -2.0), (-3.0, -2.0), (5.0, 3.0)] {
            let e = residual_eval(&(&critic).into(), &models, &x, z, c, &cands, 0.05).unwrap();
            let g = residual_grads(&critic, &x, &e).unwrap();
            check_grads(&critic, &g, |cr| {
                residual_eval(&cr.into(), &models, &x, z, c, &cands, 0.05).unwrap().loss
            });
        }
    }

    #[test]
    fn target_and_head_gradients_match_finite_differences() {
        let mut rng = EpiRng::seed_from_u64(13);
        let critic = random_critic(&mut rng, 2);
        let x = [0.1, 0.5];
        let t = HeadTargets { ret: 0.7, cons: -0.2 };
        for z in [-1.0, 0.3, 4.0] {
            let e = target_eval(&(&critic).into(), &x, z, t).unwrap();
            let g = target_grads(&critic, &x, &e).unwrap();
            check_grads(&critic, &g, |cr| target_eval(&cr.into(), &x, z, t).unwrap().loss);
        }
        let (_, g) = head_regression_loss(&critic, &x, t).unwrap();
        check_grads(&critic, &g, |cr| head_regression_loss(cr, &x, t).unwrap().0);
    }

    #[test]
    fn vgi_gradients_match_finite_differences() {
        let mut rng = EpiRng::seed_from_u64(14);
        let critic = random_critic(&mut rng, 2);
        let models = ModelNets::new(2, 1, 8, &mut rng).unwrap();
        for (z, zn) in [(0.0, 0.1), (-4.0, -4.0)] {
            let inp = VgiInput {
                x: &[0.3, 0.2],
                u: &[0.5],
                dt: 0.1,
                z_star: z,
                x_next: &[0.33, 0.18],
                z_star_next: zn,
                grad_c: &[1.0, -1.0],
            };
            let e = vgi_eval(&(&critic).into(), &models, inp).unwrap();
            let g = vgi_grads(&critic, inp.x, &e).unwrap();
            let fixed: CriticView = (&critic).into();
            check_grads(&critic, &g, |cr| {
                vgi_eval_split(&cr.into(), &fixed, &models, inp).unwrap().loss
            });
        }
    }

    #[test]
    fn target_loss_zero_network_cases() {
        let critic = EpiCritic::new(zero_net(&[1, 4, 1]), zero_net(&[1, 4, 1]), 1.0).unwrap();
        let r = crate::rollout::tests::synthetic(&[1.0, 2.0], &[-1.0, -0.5], 1.0, -1.0);
        // V~ = max{0, 0 - 0.5} = 0, target 2.5
        assert!((target_loss(&critic, &r, 0, 0.5, false).unwrap() - 6.25).abs() < 1e-12);
        let r = crate::rollout::tests::synthetic(&[0.0, 0.0], &[-1.0, -0.5], 0.1, -0.7);
        assert_eq!(target_loss(&critic, &r, 0, 0.0, true).unwrap(), 0.0);
        assert!(target_loss(&critic, &r, 5, 0.0, true).is_err());
    }

    #[test]
    fn vgi_reductions() {
        let critic = EpiCritic::new(linear(&[0.7], 0.0), linear(&[0.0], -5.0), 1.0).unwrap();
        let stat = LinearModel {
            a: 0.0,
            b: 0.0,
            q: 0.0,
            r: 0.0,
        };
        let inp = VgiInput {
            x: &[0.3],
            u: &[0.1],
            dt: 0.1,
            z_star: 0.0,
            x_next: &[0.3],
            z_star_next: 0.0,
            grad_c: &[0.0],
        };
        assert_eq!(vgi_loss(&(&critic).into(), &stat, inp).unwrap(), 0.0);
        let zero = EpiCritic::new(linear(&[0.0], 0.0), linear(&[0.0], -5.0), 0.9).unwrap();
        let m = toy_model();
        let l = vgi_loss(&(&zero).into(), &m, inp).unwrap();
        let stage = m.cost_grad_x(inp.x, inp.u, inp.dt).unwrap()[0];
        assert!((l - stage * stage * 0.01).abs() < 1e-15);
    }

    /// Discounted LQ value for `xdot = u`, `l = x^2 + u^2`:
    /// `ln(g) P + 1 - P^2 = 0` from the standard discounted HJB.
    fn lq_p(gamma: f64) -> f64 {
        let lg = gamma.ln();
        0.5 * (lg + (lg * lg + 4.0).sqrt())
    }

    #[test]
    fn vgi_of_analytic_lq_gradient_shrinks_quadratically() {
        let gamma = 0.9;
        let p = lq_p(gamma);
        let q = Quadratic(p);
        let model = toy_model();
        let err = |dt: f64| {
            let mut worst: f64 = 0.0;
            for &x0 in &[-0.8, -0.3, 0.4, 0.9] {
                let u = -p * x0;
                // exact closed-loop flow of xdot = -p x
                let x1 = x0 * (-p * dt).exp();
                let inp = VgiInput {
                    x: &[x0],
                    u: &[u],
                    dt,
                    z_star: 10.0,
                    x_next: &[x1],
                    z_star_next: 10.0,
                    grad_c: &[0.0],
                };
                let view = CriticView {
                    ret: &q,
                    cons: &Constant(-100.0),
                    gamma,
                };
                worst = worst.max(vgi_loss(&view, &ClosedLoop { p, inner: &model }, inp).unwrap().sqrt());
            }
            worst
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!(e2 <= e1 / 4.0 * 1.1, "{e1} {e2}");
    }

    /// Model seen by the gradient recursion under `u = -p x`.
    struct ClosedLoop<'a> {
        p: f64,
        inner: &'a LinearModel,
    }

    impl LearnedModel for ClosedLoop<'_> {
        fn state_dim(&self) -> usize {
            1
        }
        fn action_dim(&self) -> usize {
            1
        }
        fn rate(&self, x: &[f64], u: &[f64], dt: f64) -> Result<Vec<f64>> {
            self.inner.rate(x, u, dt)
        }
        fn cost(&self, x: &[f64], u: &[f64], dt: f64) -> Result<f64> {
            self.inner.cost(x, u, dt)
        }
        fn transition_jacobian(&self, _x: &[f64], _u: &[f64], dt: f64) -> Result<Vec<Vec<f64>>> {
            Ok(vec![vec![(-self.p * dt).exp()]])
        }
        fn cost_grad_x(&self, x: &[f64], _u: &[f64], _dt: f64) -> Result<Vec<f64>> {
            // total derivative of x^2 + p^2 x^2 along the feedback
            Ok(vec![2.0 * (1.0 + self.p * self.p) * x[0]])
        }
        fn surrogate_grad_u(&self, x: &[f64], u: &[f64], dt: f64, w: &[f64], a: f64) -> Result<Vec<f64>> {
            self.inner.surrogate_grad_u(x, u, dt, w, a)
        }
    }

    #[test]
    fn residual_discriminates_analytic_lq_value() {
        // At z = V_ret the return branch is active with V~ = 0, so the residual
        // is the undiscounted Hamiltonian min_u [V' u + x^2 + u^2].
        let p = 1.0;
        let model = toy_model();
        let cands: Vec<Vec<f64>> = (0..=40).map(|k| vec![-2.0 + 0.1 * k as f64]).collect();
        let score = |pp: f64| {
            let q = Quadratic(pp);
            let view = CriticView {
                ret: &q,
                cons: &Constant(-100.0),
                gamma: 0.99,
            };
            let mut acc = 0.0;
            let mut scale = 0.0;
            for &x in &[-0.9, -0.5, 0.2, 0.6, 1.0] {
                let z = pp * x * x;
                acc += residual_loss(&view, &model, &[x], z, -1.0, &cands, 0.1).unwrap();
                scale += z * z;
            }
            acc / scale
        };
        let exact = score(p);
        let perturbed = score(1.3);
        assert!(exact <= 1e-3, "{exact}");
        assert!(perturbed >= 10.0 * exact.max(1e-12), "{perturbed} vs {exact}");
    }

    #[test]
    fn advantage_cases() {
        let zero = EpiCritic::new(zero_net(&[1, 4, 1]), zero_net(&[1, 4, 1]), 0.99).unwrap();
        let m = LinearModel { q: 0.0, r: 0.0, ..toy_model() };
        let a = epigraph_advantage(&(&zero).into(), &m, &[0.3], 0.0, -1.0, &[0.2], 0.1).unwrap();
        assert_eq!(a.value, 0.0);
        // constraint term dominates
        let c = epigraph_advantage(&(&zero).into(), &toy_model(), &[0.3], 0.0, 50.0, &[0.2], 0.1).unwrap();
        assert!(!c.hamiltonian_active);
        assert_eq!(c.grad_u, vec![0.0]);
        // hand evaluation with linear heads and models
        let critic = EpiCritic::new(linear(&[1.5], 0.2), linear(&[0.0], -2.0), 0.9).unwrap();
        let model = LinearModel {
            a: -0.5,
            b: 2.0,
            q: 1.0,
            r: 0.3,
        };
        let (x, z) = (0.4, 0.1);
        for u in [-1.0, 0.0, 0.6] {
            let a = epigraph_advantage(&(&critic).into(), &model, &[x], z, -0.3, &[u], 0.1).unwrap();
            let v = 1.5 * x + 0.2 - z;
            let h = 1.5 * (-0.5 * x + 2.0 * u) + (x * x + 0.3 * u * u) + 0.9f64.ln() * v;
            assert!((a.value - h.max(-0.3 - v)).abs() < 1e-14);
            let expect = if a.hamiltonian_active { 3.0 + 0.6 * u } else { 0.0 };
            assert_eq!(a.hamiltonian_active, h >= -0.3 - v);
            assert!((a.grad_u[0] - expect).abs() < 1e-14);
        }
    }

    struct QuadAdv {
        target: f64,
        n: usize,
    }

    impl AdvantageFn for QuadAdv {
        fn len(&self) -> usize {
            self.n
        }
        fn advantage(&self, _s: usize, u: &[f64]) -> Result<(f64, Vec<f64>)> {
            let d = u[0] - self.target;
            Ok((d * d, vec![2.0 * d]))
        }
    }

    struct ZeroAdv(usize);

    impl AdvantageFn for ZeroAdv {
        fn len(&self) -> usize {
            self.0
        }
        fn advantage(&self, _s: usize, u: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((0.0, vec![0.0; u.len()]))
        }
    }

    fn batch(rng: &mut EpiRng, n: usize) -> Vec<Vec<Vec<f64>>> {
        (0..n).map(|_| vec![vec![rng.random_range(-1.0..1.0), 0.05]]).collect()
    }

    #[test]
    fn actor_loss_properties() {
        let mut rng = EpiRng::seed_from_u64(31);
        let policy = GaussianPolicy::new(2, 1, -1.0, &mut rng).unwrap();
        let inputs = batch(&mut rng, 6);
        let (l, g) = actor_loss(std::slice::from_ref(&policy), &inputs, &ZeroAdv(6), 4, &mut rng).unwrap();
        assert_eq!(l, 0.0);
        assert!(g[0].net.iter().chain(&g[0].log_std).all(|&v| v == 0.0));

        // the output bias moves the mean action; descent must move it toward the minimizer
        let target = 0.6;
        let (_, g) = actor_loss(
            std::slice::from_ref(&policy),
            &inputs,
            &QuadAdv { target, n: 6 },
            8,
            &mut rng,
        )
        .unwrap();
        let n = policy.net.params().len();
        let mean_u: f64 = inputs.iter().map(|i| policy.act_deterministic(&i[0]).unwrap()[0]).sum::<f64>() / 6.0;
        assert!(-g[0].net[n - 1] * (target - mean_u) > 0.0);

        let noise: Vec<Vec<Vec<f64>>> = (0..6).map(|_| vec![vec![rng.random_range(-1.0..1.0)]; 3]).collect();
        let adv = QuadAdv { target, n: 6 };
        let (a, _) = actor_loss_with_noise(std::slice::from_ref(&policy), &inputs, &noise, &adv).unwrap();
        let perm = [3, 0, 5, 1, 4, 2];
        let pi: Vec<_> = perm.iter().map(|&k| inputs[k].clone()).collect();
        let pn: Vec<_> = perm.iter().map(|&k| noise[k].clone()).collect();
        let (b, _) = actor_loss_with_noise(std::slice::from_ref(&policy), &pi, &pn, &adv).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(
            actor_loss_with_noise(std::slice::from_ref(&policy), &[], &[], &ZeroAdv(0)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn model_regression_cases() {
        let mut rng = EpiRng::seed_from_u64(5);
        let mut m = ModelNets::new(2, 1, 8, &mut rng).unwrap();
        m.dyn_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        m.cost_net.params_mut().iter_mut().for_each(|p| *p = 0.0);
        let (d, c, _) = model_regression_loss(&m, &[0.0, 0.0], &[0.3], 0.1, &[1.0, 0.0], 0.0).unwrap();
        assert_eq!((d, c), (1.0, 0.0));
        // exact predictor after setting the final bias to the observed rate
        let n = m.dyn_net.params().len();
        m.dyn_net.params_mut()[n - 2] = 10.0;
        let (d, _, _) = model_regression_loss(&m, &[0.0, 0.0], &[0.3], 0.1, &[1.0, 0.0], 0.0).unwrap();
        assert!(d < 1e-24);
    }

    #[test]
    fn model_regression_gradient_matches_finite_differences() {
        let mut rng = EpiRng::seed_from_u64(6);
        let m = ModelNets::new(2, 1, 8, &mut rng).unwrap();
        let args = ([0.2, -0.1], [0.4], 0.07, [0.25, -0.05], 0.3);
        let f = |m: &ModelNets| {
            let (d, c, _) = model_regression_loss(m, &args.0, &args.1, args.2, &args.3, args.4).unwrap();
            d + c
        };
        let (_, _, g) = model_regression_loss(&m, &args.0, &args.1, args.2, &args.3, args.4).unwrap();
        let h = 1e-6;
        for i in (0..m.dyn_net.params().len()).step_by(5) {
            let mut q = m.clone();
            q.dyn_net.params_mut()[i] += h;
            let up = f(&q);
            q.dyn_net.params_mut()[i] -= 2.0 * h;
            let fd = (up - f(&q)) / (2.0 * h);
            assert!((fd - g.dyn_net[i]).abs() < 1e-7 * (1.0 + fd.abs()));
        }
        for i in (0..m.cost_net.params().len()).step_by(5) {
            let mut q = m.clone();
            q.cost_net.params_mut()[i] += h;
            let up = f(&q);
            q.cost_net.params_mut()[i] -= 2.0 * h;
            let fd = (up - f(&q)) / (2.0 * h);
            assert!((fd - g.cost_net[i]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn model_jacobian_and_action_gradient_match_finite_differences() {
        let mut rng = EpiRng::seed_from_u64(7);
        let m = ModelNets::new(2, 2, 8, &mut rng).unwrap();
        let (x, u, dt) = ([0.3, -0.2], [0.1, -0.6], 0.05);
        let jac = m.transition_jacobian(&x, &u, dt).unwrap();
        let h = 1e-6;
        for j in 0..2 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let (p, q) = (m.predict_next(&xp, &u, dt).unwrap(), m.predict_next(&xm, &u, dt).unwrap());
            for i in 0..2 {
                assert!(((p[i] - q[i]) / (2.0 * h) - jac[i][j]).abs() < 1e-8);
            }
        }
        let w = [0.7, -1.2];
        let a = 0.4;
        let s = |u: &[f64]| crate::nn::dot(&w, &m.rate(&x, u, dt).unwrap()) + a * m.cost(&x, u, dt).unwrap();
        let g = m.surrogate_grad_u(&x, &u, dt, &w, a).unwrap();
        for k in 0..2 {
            let mut up = u;
            up[k] += h;
            let mut um = u;
            um[k] -= h;
            assert!(((s(&up) - s(&um)) / (2.0 * h) - g[k]).abs() < 1e-7);
        }
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::default().validate().is_ok());
        let w = LossWeights {
            lambda_vgi: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
