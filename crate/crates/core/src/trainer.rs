//! Episode loop: rollout, budget solve, model, critic and actor updates.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::env::{
    scale_action, step_continuous, step_noisy, DtPolicy, Oscillator, ParticleLayout,
    ParticleTarget, SystemModel,
};
use crate::epigraph::{solve_z_star, Branch, EpiCritic, HeadValues, ValueHeads, ZIntegrator, ZRange};
use crate::error::{check_finite, Error, Result};
use crate::grid::OracleConfig;
use crate::losses::{
    actor_loss, head_loss, model_regression_loss, residual_eval, residual_grads, target_eval, target_grads,
    vgi_eval, vgi_grads, ActorState, CriticGrads, CriticView, EpiAdvantage, LossWeights, ModelNets, ScalarField,
    VgiInput,
};
use crate::nn::{clip_global_norm, load_checkpoint, save_checkpoint, Activation, Adam, AdamStep, DenseNet};
use crate::policy::GaussianPolicy;
use crate::rollout::{suffix_targets, HeadTargets, Rollout, Step};
use crate::EpiRng;

/// Hidden width of the critic heads and the model networks.
pub const HIDDEN: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Oscillator,
    Particle,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oscillator" => Ok(Self::Oscillator),
            "particle" => Ok(Self::Particle),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

/// `off` trains the return head alone on `l + w 1{c > 0}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpigraphMode {
    On,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub env: EnvKind,
    pub seed: u64,
    pub episodes: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub z_integrator: ZIntegrator,
    pub lr_actor: f64,
    pub lr_critic_ret: f64,
    pub lr_critic_cons: f64,
    pub lr_dyn: f64,
    pub lr_cost: f64,
    /// Environment steps with uniform random actions at the start of training.
    pub exploration_steps: usize,
    pub save_interval: usize,
    /// Episodes between in-training evaluations; 0 disables them.
    pub eval_interval: usize,
    pub n_eval: usize,
    pub critic_passes: usize,
    pub model_passes: usize,
    pub actor_passes: usize,
    /// Policy samples added to the mean when minimizing the Hamiltonian.
    pub hamiltonian_samples: usize,
    /// Reparameterized draws per state in the actor loss.
    pub actor_draws: usize,
    pub grad_clip: f64,
    pub init_log_std: f64,
    pub min_log_std: f64,
    pub max_log_std: f64,
    /// Add the critic's own estimate at the final state to the return targets.
    /// Off by default: without a lagged copy the estimate feeds back into its
    /// own target and drifts far above the true discounted cost.
    pub bootstrap_tail: bool,
    pub epigraph: EpigraphMode,
    pub penalty_weight: f64,
    /// Multiplies the stage cost seen by the learner; metrics use the raw cost.
    pub cost_scale: f64,
    /// Variance of the additive state noise; 0 is deterministic.
    pub sigma2: f64,
    pub dt: DtPolicy,
    pub loss: LossWeights,
    pub oscillator: Oscillator,
    pub particle: ParticleTarget,
    /// Grid-oracle run on the double-integrator toy.
    pub oracle: OracleConfig,
}

impl TrainConfig {
    pub fn for_env(env: EnvKind) -> Self {
        let (episodes, horizon, z_max, dt, cost_scale) = match env {
            EnvKind::Oscillator => (3000, 30, 2.0, DtPolicy::Fixed { dt: 0.1 }, 1.0 / 30.0),
            EnvKind::Particle => (30000, 50, 10.0, DtPolicy::Uniform { low: 0.02, high: 0.2 }, 1.0),
        };
        Self {
            env,
            seed: 113,
            episodes,
            horizon,
            gamma: 0.99,
            z_min: 0.0,
            z_max,
            z_integrator: ZIntegrator::Exponential,
            lr_actor: 1e-4,
            lr_critic_ret: 1e-3,
            lr_critic_cons: 1e-3,
            lr_dyn: 1e-3,
            lr_cost: 1e-3,
            exploration_steps: 1000,
            save_interval: 1000,
            eval_interval: 0,
            n_eval: 100,
            critic_passes: 4,
            model_passes: 4,
            actor_passes: 1,
            hamiltonian_samples: 8,
            actor_draws: 4,
            grad_clip: 10.0,
            init_log_std: -0.5,
            min_log_std: -5.0,
            max_log_std: 1.0,
            bootstrap_tail: false,
            epigraph: EpigraphMode::On,
            penalty_weight: 10.0,
            cost_scale,
            sigma2: 0.0,
            dt,
            loss: LossWeights::default(),
            oscillator: Oscillator::default(),
            particle: ParticleTarget::default(),
            oracle: OracleConfig::default(),
        }
    }

    /// Parses a TOML document over the defaults of its `env` (oscillator if absent).
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let env = match user.get("env") {
            None => EnvKind::Oscillator,
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("env must be a string, got {v}"))),
        };
        let mut base = toml::Table::try_from(Self::for_env(env)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidDiscount(self.gamma));
        }
        for (name, v) in [
            ("lr_actor", self.lr_actor),
            ("lr_critic_ret", self.lr_critic_ret),
            ("lr_critic_cons", self.lr_critic_cons),
            ("lr_dyn", self.lr_dyn),
            ("lr_cost", self.lr_cost),
            ("grad_clip", self.grad_clip),
            ("cost_scale", self.cost_scale),
        ] {
            positive(name, v)?;
        }
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(self.sigma2.is_finite() && self.sigma2 >= 0.0) {
            return Err(Error::Config(format!("sigma2 must be >= 0, got {}", self.sigma2)));
        }
        if !(self.min_log_std <= self.init_log_std && self.init_log_std <= self.max_log_std) {
            return Err(Error::Config("init_log_std must lie in [min_log_std, max_log_std]".into()));
        }
        self.dt.validate()?;
        self.loss.validate()?;
        self.z_range()?;
        Ok(())
    }

    pub fn z_range(&self) -> Result<ZRange> {
        ZRange::new(self.z_min, self.z_max).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn build_env(&self) -> Box<dyn SystemModel> {
        match self.env {
            EnvKind::Oscillator => Box::new(self.oscillator.clone()),
            EnvKind::Particle => Box::new(ParticleTarget {
                layout: ParticleLayout::from_seed(self.seed),
                ..self.particle.clone()
            }),
        }
    }
}

fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) if k != "dt" => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Independent deterministic stream `stream` of the run seeded by `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> EpiRng {
    let mut rng = EpiRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) const STREAM_INIT: u64 = 0;
pub(crate) const STREAM_ROLLOUT: u64 = 1 << 40;
pub(crate) const STREAM_UPDATE: u64 = 2 << 40;
pub(crate) const STREAM_EVAL: u64 = 3 << 40;

/// All trainable networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub critic: EpiCritic,
    pub models: ModelNets,
    pub policies: Vec<GaussianPolicy>,
}

/// How actions are drawn from the policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Deterministic,
    Stochastic,
    Uniform,
}

impl Learner {
    pub fn new(env: &dyn SystemModel, gamma: f64, init_log_std: f64, rng: &mut EpiRng) -> Result<Self> {
        let d = env.state_dim();
        let head = |rng: &mut EpiRng| -> Result<DenseNet> {
            let mut n = DenseNet::new(&[d, HIDDEN, HIDDEN, 1], Activation::Tanh)?;
            n.init_uniform(rng);
            Ok(n)
        };
        let critic = EpiCritic::new(head(rng)?, head(rng)?, gamma)?;
        let models = ModelNets::new(d, env.action_dim(), HIDDEN, rng)?;
        let policies = (0..env.n_agents())
            .map(|_| GaussianPolicy::new(env.observation_dim() + 1, env.action_dim_per_agent(), init_log_std, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            critic,
            models,
            policies,
        })
    }

    /// Per-agent policy inputs: local observation followed by `dt`.
    pub fn policy_inputs(env: &dyn SystemModel, x: &[f64], dt: f64) -> Vec<Vec<f64>> {
        (0..env.n_agents())
            .map(|i| {
                let mut o = env.observation(x, i);
                o.push(dt);
                o
            })
            .collect()
    }

    /// Joint action in normalized coordinates.
    pub fn act(&self, inputs: &[Vec<f64>], mode: ActMode, rng: &mut EpiRng) -> Result<Vec<f64>> {
        let mut u = Vec::new();
        for (p, inp) in self.policies.iter().zip(inputs) {
            match mode {
                ActMode::Deterministic => u.extend(p.act_deterministic(inp)?),
                ActMode::Stochastic => u.extend(p.sample(inp, rng)?),
                ActMode::Uniform => u.extend((0..p.action_dim()).map(|_| rng.random_range(-1.0..=1.0))),
            }
        }
        Ok(u)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let log_std: Vec<DenseNet> = self.policies.iter().map(|p| log_std_net(&p.log_std)).collect::<Result<_>>()?;
        let names: Vec<(String, String)> = (0..self.policies.len())
            .map(|i| (format!("policy_{i}"), format!("log_std_{i}")))
            .collect();
        let mut nets: Vec<(&str, &DenseNet)> = vec![
            ("critic_ret", &self.critic.ret),
            ("critic_cons", &self.critic.cons),
            ("dyn", &self.models.dyn_net),
            ("cost", &self.models.cost_net),
        ];
        for ((p, s), (pn, sn)) in self.policies.iter().zip(&log_std).zip(&names) {
            nets.push((pn, &p.net));
            nets.push((sn, s));
        }
        save_checkpoint(path, &nets)
    }

    /// Loads a checkpoint and checks it against the environment's dimensions.
    pub fn load(path: &Path, env: &dyn SystemModel, gamma: f64) -> Result<Self> {
        let mut nets = load_checkpoint(path)?;
        let mut take = |name: &str| -> Result<DenseNet> {
            let k = nets
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing network {name}")))?;
            Ok(nets.swap_remove(k).1)
        };
        let critic = EpiCritic::new(take("critic_ret")?, take("critic_cons")?, gamma)?;
        let models = ModelNets::from_nets(take("dyn")?, take("cost")?)?;
        let mut policies = Vec::new();
        for i in 0..env.n_agents() {
            let net = take(&format!("policy_{i}"))?;
            let log_std = take(&format!("log_std_{i}"))?.params()[env.action_dim_per_agent()..].to_vec();
            policies.push(GaussianPolicy { net, log_std });
        }
        let learner = Self {
            critic,
            models,
            policies,
        };
        learner.check_env(env)?;
        Ok(learner)
    }

    pub fn check_env(&self, env: &dyn SystemModel) -> Result<()> {
        let d = env.state_dim();
        let ok = self.critic.state_dim() == d
            && self.models.dyn_net.output_dim() == d
            && self.models.dyn_net.input_dim() == d + env.action_dim() + 1
            && self.policies.len() == env.n_agents()
            && self.policies.iter().all(|p| {
                p.net.input_dim() == env.observation_dim() + 1
                    && p.net.output_dim() == env.action_dim_per_agent()
                    && p.log_std.len() == env.action_dim_per_agent()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint(format!("networks do not match the {} environment", env.name())))
        }
    }
}

/// `log_std` stored as the bias of a zero-weight linear layer.
fn log_std_net(log_std: &[f64]) -> Result<DenseNet> {
    let mut n = DenseNet::new(&[1, log_std.len()], Activation::Linear)?;
    let mut p = vec![0.0; log_std.len()];
    p.extend_from_slice(log_std);
    n.set_params(&p)?;
    Ok(n)
}

/// Stage cost seen by the learner.
fn learner_cost(cfg: &TrainConfig, l: f64, penalty: f64) -> f64 {
    let l = cfg.cost_scale * l;
    match cfg.epigraph {
        EpigraphMode::On => l,
        EpigraphMode::Off => l + if penalty > 0.0 { cfg.penalty_weight } else { 0.0 },
    }
}

/// One episode. Actions are uniform in the box while `explore` is set.
pub fn collect_rollout(
    env: &dyn SystemModel,
    learner: &Learner,
    cfg: &TrainConfig,
    episode: usize,
    mode: ActMode,
    rng: &mut EpiRng,
) -> Result<Rollout> {
    let (low, high) = (env.action_low(), env.action_high());
    let mut x = env.sample_initial_state(rng);
    let mut steps = Vec::with_capacity(cfg.horizon);
    let mut t = 0.0;
    for _ in 0..cfg.horizon {
        let dt = cfg.dt.sample(rng);
        let obs = Learner::policy_inputs(env, &x, dt);
        let u_norm = learner.act(&obs, mode, rng)?;
        let u = scale_action(&low, &high, &u_norm);
        let r = if cfg.sigma2 > 0.0 {
            step_noisy(env, &x, &u, dt, cfg.sigma2, rng)?
        } else {
            step_continuous(env, &x, &u, dt)?
        };
        steps.push(Step {
            t,
            dt,
            constraint: env.constraint(&x),
            x,
            obs,
            u,
            u_norm,
            stage_cost: r.stage_cost,
            penalty: r.violation_penalty,
            next_x: r.next_state.clone(),
        });
        x = r.next_state;
        t += dt;
    }
    Ok(Rollout {
        episode,
        seed: cfg.seed,
        steps,
        terminal_constraint: env.constraint(&x),
    })
}

/// One training-log row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub score: f64,
    pub violations: usize,
    pub loss_res: f64,
    pub loss_tgt: f64,
    pub loss_vgi: f64,
    pub loss_head: f64,
    pub loss_dyn: f64,
    pub loss_cost: f64,
    pub loss_actor: f64,
    pub mean_zstar: f64,
    pub skipped: bool,
}

pub const TRAIN_HEADER: [&str; 11] = [
    "episode",
    "score",
    "violations",
    "loss_res",
    "loss_tgt",
    "loss_vgi",
    "loss_head",
    "loss_dyn",
    "loss_cost",
    "loss_actor",
    "mean_zstar",
];

impl EpisodeLog {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.episode.to_string(), self.score.to_string(), self.violations.to_string()];
        r.extend(
            [
                self.loss_res,
                self.loss_tgt,
                self.loss_vgi,
                self.loss_head,
                self.loss_dyn,
                self.loss_cost,
                self.loss_actor,
                self.mean_zstar,
            ]
            .iter()
            .map(f64::to_string),
        );
        r
    }
}

/// A head that is identically `-inf`; stands in for `V_cons` without the epigraph.
struct NegInf;

impl ScalarField for NegInf {
    fn value(&self, _x: &[f64]) -> Result<f64> {
        Ok(f64::NEG_INFINITY)
    }
    fn value_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((f64::NEG_INFINITY, vec![0.0; x.len()]))
    }
}

struct Optimizers {
    ret: Adam,
    cons: Adam,
    dyn_net: Adam,
    cost: Adam,
    policy: Vec<(Adam, Adam)>,
}

impl Optimizers {
    fn new(l: &Learner) -> Self {
        Self {
            ret: Adam::new(l.critic.ret.params().len()),
            cons: Adam::new(l.critic.cons.params().len()),
            dyn_net: Adam::new(l.models.dyn_net.params().len()),
            cost: Adam::new(l.models.cost_net.params().len()),
            policy: l
                .policies
                .iter()
                .map(|p| (Adam::new(p.net.params().len()), Adam::new(p.log_std.len())))
                .collect(),
        }
    }
}

/// Mutable training state.
pub struct Trainer {
    pub cfg: TrainConfig,
    env: Box<dyn SystemModel>,
    learner: Learner,
    opt: Optimizers,
    env_steps: usize,
    nonfinite_streak: usize,
    skipped: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let env = cfg.build_env();
        let mut rng = stream_rng(cfg.seed, STREAM_INIT);
        let learner = Learner::new(env.as_ref(), cfg.gamma, cfg.init_log_std, &mut rng)?;
        let opt = Optimizers::new(&learner);
        Ok(Self {
            cfg,
            env,
            learner,
            opt,
            env_steps: 0,
            nonfinite_streak: 0,
            skipped: 0,
        })
    }

    pub fn learner(&self) -> &Learner {
        &self.learner
    }

    pub fn env(&self) -> &dyn SystemModel {
        self.env.as_ref()
    }

    pub fn skipped_episodes(&self) -> usize {
        self.skipped
    }

    fn cons_view(&self) -> CriticView<'_> {
        match self.cfg.epigraph {
            EpigraphMode::On => (&self.learner.critic).into(),
            EpigraphMode::Off => CriticView {
                ret: &self.learner.critic.ret,
                cons: &NegInf,
                gamma: self.learner.critic.gamma,
            },
        }
    }

    /// `c(x)` as seen by the losses.
    fn loss_constraint(&self, c: f64) -> f64 {
        match self.cfg.epigraph {
            EpigraphMode::On => c,
            EpigraphMode::Off => f64::NEG_INFINITY,
        }
    }

    fn z_star(&self, x: &[f64], range: ZRange) -> Result<f64> {
        Ok(match self.cfg.epigraph {
            EpigraphMode::On => solve_z_star(&self.learner.critic, x, range)?.z,
            EpigraphMode::Off => HeadValues {
                ret: self.learner.critic.ret.forward(x)?[0],
                cons: f64::NEG_INFINITY,
            }
            .z_star(range)
            .z,
        })
    }

    /// Collects one episode and applies every update.
    pub fn run_episode(&mut self, episode: usize) -> Result<EpisodeLog> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_ROLLOUT | episode as u64);
        let mode = if self.env_steps < self.cfg.exploration_steps {
            ActMode::Uniform
        } else {
            ActMode::Stochastic
        };
        let mut rollout = collect_rollout(self.env.as_ref(), &self.learner, &self.cfg, episode, mode, &mut rng)?;
        self.env_steps += rollout.len();
        let score = -rollout.episode_cost();
        let violations = rollout.violations();
        for s in &mut rollout.steps {
            s.stage_cost = learner_cost(&self.cfg, s.stage_cost, s.penalty);
        }
        let mut rng = stream_rng(self.cfg.seed, STREAM_UPDATE | episode as u64);
        let snapshot = (self.learner.clone(), self.opt_snapshot());
        let out = self.update(&rollout, &mut rng);
        let mut log = EpisodeLog {
            episode,
            score,
            violations,
            loss_res: f64::NAN,
            loss_tgt: f64::NAN,
            loss_vgi: f64::NAN,
            loss_head: f64::NAN,
            loss_dyn: f64::NAN,
            loss_cost: f64::NAN,
            loss_actor: f64::NAN,
            mean_zstar: f64::NAN,
            skipped: false,
        };
        match out {
            Ok(l) => {
                self.nonfinite_streak = 0;
                log = EpisodeLog { score, violations, ..l };
            }
            Err(Error::NonFinite(_)) => {
                self.learner = snapshot.0;
                self.restore_opt(snapshot.1);
                self.nonfinite_streak += 1;
                self.skipped += 1;
                log.skipped = true;
                if self.nonfinite_streak > 100 {
                    return Err(Error::TrainingDiverged(self.nonfinite_streak));
                }
            }
            Err(e) => return Err(e),
        }
        Ok(log)
    }

    fn opt_snapshot(&self) -> Vec<Adam> {
        let mut v = vec![
            self.opt.ret.clone(),
            self.opt.cons.clone(),
            self.opt.dyn_net.clone(),
            self.opt.cost.clone(),
        ];
        for (a, b) in &self.opt.policy {
            v.push(a.clone());
            v.push(b.clone());
        }
        v
    }

    fn restore_opt(&mut self, mut v: Vec<Adam>) {
        let mut it = v.drain(..);
        self.opt.ret = it.next().unwrap();
        self.opt.cons = it.next().unwrap();
        self.opt.dyn_net = it.next().unwrap();
        self.opt.cost = it.next().unwrap();
        for p in &mut self.opt.policy {
            p.0 = it.next().unwrap();
            p.1 = it.next().unwrap();
        }
    }

    fn update(&mut self, rollout: &Rollout, rng: &mut EpiRng) -> Result<EpisodeLog> {
        let range = self.cfg.z_range()?;
        let n = rollout.len();
        let mut states: Vec<&[f64]> = rollout.steps.iter().map(|s| s.x.as_slice()).collect();
        states.push(rollout.terminal_state().ok_or(Error::Empty("rollout"))?);
        let z_star: Vec<f64> = states.iter().map(|x| self.z_star(x, range)).collect::<Result<_>>()?;
        let mean_zstar = z_star[..n].iter().sum::<f64>() / n as f64;

        let (loss_dyn, loss_cost) = self.update_models(rollout)?;

        let candidates: Vec<Vec<Vec<f64>>> = rollout
            .steps
            .iter()
            .map(|s| {
                let mut c = vec![self.learner.act(&s.obs, ActMode::Deterministic, rng)?];
                for _ in 0..self.cfg.hamiltonian_samples {
                    c.push(self.learner.act(&s.obs, ActMode::Stochastic, rng)?);
                }
                Ok(c)
            })
            .collect::<Result<_>>()?;
        let mut critic_losses = [0.0; 4];
        for _ in 0..self.cfg.critic_passes {
            critic_losses = self.update_critic(rollout, &z_star, &candidates)?;
        }
        let mut loss_actor = f64::NAN;
        for _ in 0..self.cfg.actor_passes {
            loss_actor = self.update_actor(rollout, &z_star, rng)?;
        }
        Ok(EpisodeLog {
            episode: rollout.episode,
            score: 0.0,
            violations: 0,
            loss_res: critic_losses[0],
            loss_tgt: critic_losses[1],
            loss_vgi: critic_losses[2],
            loss_head: critic_losses[3],
            loss_dyn,
            loss_cost,
            loss_actor,
            mean_zstar,
            skipped: false,
        })
    }

    fn update_models(&mut self, rollout: &Rollout) -> Result<(f64, f64)> {
        let n = rollout.len() as f64;
        let mut last = (0.0, 0.0);
        for _ in 0..self.cfg.model_passes {
            let m = &self.learner.models;
            let mut gd = vec![0.0; m.dyn_net.params().len()];
            let mut gc = vec![0.0; m.cost_net.params().len()];
            let (mut ld, mut lc) = (0.0, 0.0);
            for s in &rollout.steps {
                let (d, c, g) = model_regression_loss(m, &s.x, &s.u_norm, s.dt, &s.next_x, s.stage_cost)?;
                ld += d / n;
                lc += c / n;
                axpy(&mut gd, &g.dyn_net, 1.0 / n);
                axpy(&mut gc, &g.cost_net, 1.0 / n);
            }
            check_finite("model loss", &[ld, lc])?;
            clip_global_norm(&mut [&mut gd], self.cfg.grad_clip);
            clip_global_norm(&mut [&mut gc], self.cfg.grad_clip);
            let m = &mut self.learner.models;
            applied(self.opt.dyn_net.step(m.dyn_net.params_mut(), &gd, self.cfg.lr_dyn)?)?;
            applied(self.opt.cost.step(m.cost_net.params_mut(), &gc, self.cfg.lr_cost)?)?;
            last = (ld, lc);
        }
        Ok(last)
    }

    /// One gradient step on the weighted critic objective; returns the
    /// per-term means before the step.
    fn update_critic(&mut self, rollout: &Rollout, z_star: &[f64], candidates: &[Vec<Vec<f64>>]) -> Result<[f64; 4]> {
        let n = rollout.len();
        let w = self.cfg.loss;
        let critic = &self.learner.critic;
        let view = self.cons_view();
        let tail = match (self.cfg.bootstrap_tail, rollout.terminal_state()) {
            (true, Some(xt)) => critic.ret.forward(xt)?[0],
            _ => 0.0,
        };
        let targets = suffix_targets(rollout, critic.gamma, tail)?;
        let mut grads = CriticGrads::zeros(critic);
        let mut sums = [0.0; 4];
        let scale = 1.0 / n as f64;
        for (t, s) in rollout.steps.iter().enumerate() {
            let c = self.loss_constraint(s.constraint);
            let res = residual_eval(&view, &self.learner.models, &s.x, z_star[t], c, &candidates[t], s.dt)?;
            let mut tgt_targets = targets[t];
            if self.cfg.epigraph == EpigraphMode::Off {
                tgt_targets.cons = f64::NEG_INFINITY;
            }
            let tgt = target_eval(&view, &s.x, z_star[t], tgt_targets)?;
            let vgi = vgi_eval(
                &view,
                &self.learner.models,
                VgiInput {
                    x: &s.x,
                    u: &s.u_norm,
                    dt: s.dt,
                    z_star: z_star[t],
                    x_next: &s.next_x,
                    z_star_next: z_star[t + 1],
                    grad_c: &self.env.constraint_grad(&s.x),
                },
            )?;
            let (head, head_g) = self.head_terms(&s.x, targets[t])?;
            let terms = [res.loss, tgt.loss, vgi.loss, head];
            check_finite("critic loss", &terms)?;
            for (acc, v) in sums.iter_mut().zip(terms) {
                *acc += v * scale;
            }
            grads.add_scaled(&residual_grads(critic, &s.x, &res)?, w.lambda_res * scale);
            grads.add_scaled(&target_grads(critic, &s.x, &tgt)?, w.lambda_tgt * scale);
            grads.add_scaled(&vgi_grads(critic, &s.x, &vgi)?, w.lambda_vgi * scale);
            grads.add_scaled(&head_g, w.lambda_head * scale);
        }
        clip_global_norm(&mut [&mut grads.ret, &mut grads.cons], self.cfg.grad_clip);
        let critic = &mut self.learner.critic;
        applied(self.opt.ret.step(critic.ret.params_mut(), &grads.ret, self.cfg.lr_critic_ret)?)?;
        if self.cfg.epigraph == EpigraphMode::On {
            applied(self.opt.cons.step(critic.cons.params_mut(), &grads.cons, self.cfg.lr_critic_cons)?)?;
        }
        Ok(sums)
    }

    fn head_terms(&self, x: &[f64], targets: HeadTargets) -> Result<(f64, CriticGrads)> {
        let critic = &self.learner.critic;
        let (mut loss, mut g) = head_loss(critic, Branch::Return, x, targets.ret)?;
        if self.cfg.epigraph == EpigraphMode::On {
            let (l, gc) = head_loss(critic, Branch::Constraint, x, targets.cons)?;
            loss += l;
            g.add_scaled(&gc, 1.0);
        }
        Ok((loss, g))
    }

    fn update_actor(&mut self, rollout: &Rollout, z_star: &[f64], rng: &mut EpiRng) -> Result<f64> {
        let states: Vec<ActorState> = rollout
            .steps
            .iter()
            .zip(z_star)
            .map(|(s, &z)| ActorState {
                x: s.x.clone(),
                z_star: z,
                c: self.loss_constraint(s.constraint),
                dt: s.dt,
            })
            .collect();
        let inputs: Vec<Vec<Vec<f64>>> = rollout.steps.iter().map(|s| s.obs.clone()).collect();
        let adv = EpiAdvantage::new(&self.cons_view(), &self.learner.models, &states)?;
        let (loss, mut grads) = actor_loss(&self.learner.policies, &inputs, &adv, self.cfg.actor_draws, rng)?;
        check_finite("actor loss", &[loss])?;
        {
            let mut parts: Vec<&mut [f64]> = Vec::new();
            for g in &mut grads {
                parts.push(&mut g.net);
                parts.push(&mut g.log_std);
            }
            clip_global_norm(&mut parts, self.cfg.grad_clip);
        }
        for ((p, g), (on, os)) in self.learner.policies.iter_mut().zip(&grads).zip(&mut self.opt.policy) {
            applied(on.step(p.net.params_mut(), &g.net, self.cfg.lr_actor)?)?;
            applied(os.step(&mut p.log_std, &g.log_std, self.cfg.lr_actor)?)?;
            for s in &mut p.log_std {
                *s = s.clamp(self.cfg.min_log_std, self.cfg.max_log_std);
            }
        }
        Ok(loss)
    }
}

fn axpy(acc: &mut [f64], g: &[f64], s: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += s * b;
    }
}

fn applied(step: AdamStep) -> Result<()> {
    match step {
        AdamStep::Applied => Ok(()),
        AdamStep::SkippedNonFinite => Err(Error::NonFinite("gradient")),
    }
}

/// Result of [`train`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub log: Vec<EpisodeLog>,
    pub checkpoints: Vec<PathBuf>,
    pub skipped_episodes: usize,
    pub final_learner: Learner,
}

pub fn checkpoint_path(out: &Path, episode: usize) -> PathBuf {
    out.join(format!("ckpt_{episode}"))
}

/// Runs `cfg.episodes` episodes, writing `train.csv` and `ckpt_<episode>`
/// files under `out`. A checkpoint is always written after the last episode.
pub fn train(cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out)?;
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut writer = csv::Writer::from_path(out.join("train.csv"))?;
    writer.write_record(TRAIN_HEADER)?;
    let mut log = Vec::with_capacity(cfg.episodes);
    let mut checkpoints = Vec::new();
    for episode in 1..=cfg.episodes {
        let row = trainer.run_episode(episode)?;
        writer.write_record(row.record())?;
        log.push(row);
        let last = episode == cfg.episodes;
        if (cfg.save_interval > 0 && episode % cfg.save_interval == 0) || last {
            let p = checkpoint_path(out, episode);
            trainer.learner.save(&p)?;
            checkpoints.push(p);
        }
        if cfg.eval_interval > 0 && episode % cfg.eval_interval == 0 {
            let report = crate::eval::evaluate_learner(&trainer.learner, trainer.env(), cfg, cfg.n_eval, cfg.seed)?;
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(out.join("eval_during.csv"))?;
            writeln!(f, "{episode},{},{}", report.mean_score, report.violation_rate)?;
        }
    }
    writer.flush()?;
    Ok(TrainSummary {
        log,
        checkpoints,
        skipped_episodes: trainer.skipped_episodes(),
        final_learner: trainer.learner,
    })
}

/// Constraint value, budget and active branch along one replayed episode.
#[derive(Debug, Clone, PartialEq)]
pub struct ZStarRow {
    pub t: f64,
    pub z_star: f64,
    pub branch: Branch,
    pub feasible: bool,
}

/// Replays one deterministic episode with the learner and records `z*` and the
/// active branch at every visited state.
pub fn zstar_trace(learner: &Learner, env: &dyn SystemModel, cfg: &TrainConfig, episode_seed: u64) -> Result<Vec<ZStarRow>> {
    learner.check_env(env)?;
    let range = cfg.z_range()?;
    let mut rng = stream_rng(episode_seed, STREAM_EVAL);
    let r = collect_rollout(env, learner, cfg, 0, ActMode::Deterministic, &mut rng)?;
    trace_rows(&learner.critic, &r, range)
}

pub(crate) fn trace_rows<C: ValueHeads + ?Sized>(critic: &C, r: &Rollout, range: ZRange) -> Result<Vec<ZStarRow>> {
    r.steps
        .iter()
        .map(|s| {
            let h = critic.heads(&s.x)?;
            let zs = h.z_star(range);
            Ok(ZStarRow {
                t: s.t,
                z_star: zs.z,
                branch: h.composite(zs.z).1,
                feasible: zs.feasible,
            })
        })
        .collect()
}

pub fn write_zstar_csv(path: &Path, rows: &[ZStarRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["t", "zstar", "branch", "feasible"])?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.z_star.to_string(),
            r.branch.as_str().to_string(),
            u8::from(r.feasible).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
