//! Minimal PPO with a diagonal-Gaussian mixture-of-experts actor on a
//! continual point-mass reaching task.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::entk;
use crate::error::{Error, Result};
use crate::harness::{
    dormant_ratio, feature_norm, specialization_metrics, MetricsRecord, Protocol, RunRecord, StepTiming, TaskFinal,
};
use crate::linalg::Matrix;
use crate::moe::{self, init_model, MoeConfig, MoeModel};
use crate::optim::{clip_global_norm, Optimizer, OptimizerConfig};
use crate::sphere::{self, SphereConfig};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

fn d_horizon() -> usize {
    50
}
fn d_dt() -> f64 {
    0.1
}
fn d_one() -> f64 {
    1.0
}
fn d_noise() -> f64 {
    0.1
}
fn d_radius() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_dt")]
    pub dt: f64,
    /// Actions are clamped to `[-action_limit, action_limit]` per axis.
    #[serde(default = "d_one")]
    pub action_limit: f64,
    /// Standard deviation of the start position around the origin.
    #[serde(default = "d_noise")]
    pub start_noise: f64,
    /// Final distance below which an episode counts as a success.
    #[serde(default = "d_radius")]
    pub success_radius: f64,
    /// Reward added on every step spent inside the success radius.
    #[serde(default = "d_one")]
    pub success_bonus: f64,
    /// Distance of the goals from the origin.
    #[serde(default = "d_one")]
    pub goal_radius: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: d_horizon(),
            dt: d_dt(),
            action_limit: d_one(),
            start_noise: d_noise(),
            success_radius: d_radius(),
            success_bonus: d_one(),
            goal_radius: d_one(),
        }
    }
}

/// Planar double integrator. The observation is `(x, y, vx, vy)`; the goal is
/// not observed, so tasks differ only through the reward.
#[derive(Clone, Debug)]
pub struct PointMassEnv {
    cfg: EnvConfig,
    goal: [f64; 2],
    state: [f64; STATE_DIM],
    t: usize,
    rng: ChaCha8Rng,
}

impl PointMassEnv {
    pub fn new(cfg: EnvConfig, goal: [f64; 2], seed: u64) -> Self {
        let mut env = PointMassEnv { cfg, goal, state: [0.0; STATE_DIM], t: 0, rng: ChaCha8Rng::seed_from_u64(seed) };
        env.reset();
        env
    }

    pub fn reset(&mut self) -> [f64; STATE_DIM] {
        let s = self.cfg.start_noise;
        let mut draw = || s * Distribution::<f64>::sample(&StandardNormal, &mut self.rng);
        self.state = [draw(), draw(), 0.0, 0.0];
        self.t = 0;
        self.state
    }

    pub fn state(&self) -> [f64; STATE_DIM] {
        self.state
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn distance(&self) -> f64 {
        (self.state[0] - self.goal[0]).hypot(self.state[1] - self.goal[1])
    }

    /// Advances one step; returns `(observation, reward, done)`.
    pub fn step(&mut self, action: &[f64]) -> ([f64; STATE_DIM], f64, bool) {
        let lim = self.cfg.action_limit;
        let dt = self.cfg.dt;
        for d in 0..2 {
            let a = if action[d].is_finite() { action[d].clamp(-lim, lim) } else { 0.0 };
            self.state[2 + d] += dt * a;
            self.state[d] += dt * self.state[2 + d];
        }
        self.t += 1;
        let dist = self.distance();
        let mut reward = -dist;
        if dist < self.cfg.success_radius {
            reward += self.cfg.success_bonus;
        }
        (self.state, reward, self.t >= self.cfg.horizon)
    }
}

/// Goals spread around a circle by the golden angle.
pub fn goal_sequence(num: usize, radius: f64) -> Vec<[f64; 2]> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..num).map(|k| [radius * (golden * k as f64).cos(), radius * (golden * k as f64).sin()]).collect()
}

fn d_gamma() -> f64 {
    0.99
}
fn d_gae() -> f64 {
    0.95
}
fn d_clip() -> f64 {
    0.2
}
fn d_epochs() -> usize {
    10
}
fn d_rollout() -> usize {
    512
}
fn d_mb() -> usize {
    64
}
fn d_vcoef() -> f64 {
    0.5
}
fn d_envs() -> usize {
    8
}
fn d_iters() -> usize {
    40
}
fn d_eval_eps() -> usize {
    16
}
fn d_log_std() -> f64 {
    -0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "d_gae")]
    pub gae_lambda: f64,
    #[serde(default = "d_clip")]
    pub clip: f64,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    /// Transitions per rollout, summed over environments.
    #[serde(default = "d_rollout")]
    pub rollout_steps: usize,
    /// Minibatch size.
    #[serde(default = "d_mb")]
    pub batch: usize,
    #[serde(default = "d_vcoef")]
    pub value_coef: f64,
    #[serde(default)]
    pub entropy_coef: f64,
    #[serde(default = "d_envs")]
    pub num_envs: usize,
    /// Rollout/update iterations per task.
    #[serde(default = "d_iters")]
    pub iterations_per_task: usize,
    #[serde(default = "d_eval_eps")]
    pub eval_episodes: usize,
    #[serde(default = "d_log_std")]
    pub init_log_std: f64,
    /// Normalize observations with running moments.
    #[serde(default)]
    pub normalize_obs: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: d_gamma(),
            gae_lambda: d_gae(),
            clip: d_clip(),
            epochs: d_epochs(),
            rollout_steps: d_rollout(),
            batch: d_mb(),
            value_coef: d_vcoef(),
            entropy_coef: 0.0,
            num_envs: d_envs(),
            iterations_per_task: d_iters(),
            eval_episodes: d_eval_eps(),
            init_log_std: d_log_std(),
            normalize_obs: false,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config("ppo.gamma must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("ppo.gae_lambda must lie in [0, 1]".into()));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config("ppo.clip must be positive".into()));
        }
        if self.num_envs == 0 || self.rollout_steps < self.num_envs || self.batch == 0 {
            return Err(Error::Config("ppo sizes must be positive with rollout_steps >= num_envs".into()));
        }
        if self.epochs == 0 || self.iterations_per_task == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("ppo iteration counts must be positive".into()));
        }
        Ok(())
    }
}

/// Running mean and variance of observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningMoments {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningMoments {
    pub fn new(dim: usize) -> Self {
        RunningMoments { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *s += d * (v - *m);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        if self.count < 2.0 {
            return x.to_vec();
        }
        x.iter()
            .zip(&self.mean)
            .zip(&self.m2)
            .map(|((v, m), s)| ((v - m) / (s / self.count + 1e-8).sqrt()).clamp(-10.0, 10.0))
            .collect()
    }
}

/// Gaussian actor with a mixture-of-experts mean and a state-independent
/// log standard deviation, plus a dense critic.
#[derive(Clone, Debug)]
pub struct ActorCritic {
    pub actor: MoeModel,
    pub log_std: Vec<f64>,
    pub critic: MoeModel,
    pub obs_moments: Option<RunningMoments>,
}

const LOG_2PI: f64 = 1.837_877_066_409_345_3;

impl ActorCritic {
    pub fn new(actor_cfg: &MoeConfig, critic_widths: &[usize], init_log_std: f64, normalize_obs: bool) -> Result<Self> {
        let mut a = actor_cfg.clone();
        a.input_dim = STATE_DIM;
        a.output_dim = ACTION_DIM;
        let c = MoeConfig {
            input_dim: STATE_DIM,
            output_dim: 1,
            num_experts: 1,
            top_k: 1,
            expert_widths: critic_widths.to_vec(),
            gate_widths: vec![],
            temperature: 1.0,
            activation: a.activation,
            seed: a.seed.wrapping_add(0x5151),
        };
        Ok(ActorCritic {
            actor: init_model(&a)?,
            log_std: vec![init_log_std; ACTION_DIM],
            critic: init_model(&c)?,
            obs_moments: normalize_obs.then(|| RunningMoments::new(STATE_DIM)),
        })
    }

    pub fn param_count(&self) -> usize {
        self.actor.param_count() + ACTION_DIM + self.critic.param_count()
    }

    /// Actor parameters, then log standard deviations, then critic parameters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.actor.flat_params();
        p.extend(&self.log_std);
        p.extend(self.critic.flat_params());
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!("{} parameters for {}", p.len(), self.param_count())));
        }
        let pa = self.actor.param_count();
        self.actor.set_flat_params(&p[..pa])?;
        self.log_std.copy_from_slice(&p[pa..pa + ACTION_DIM]);
        self.critic.set_flat_params(&p[pa + ACTION_DIM..])
    }

    pub fn observe(&self, states: &Matrix) -> Matrix {
        match &self.obs_moments {
            Some(m) => Matrix::from_rows(&(0..states.rows()).map(|i| m.normalize(states.row(i))).collect::<Vec<_>>()),
            None => states.clone(),
        }
    }

    pub fn log_prob(&self, mean: &[f64], action: &[f64]) -> f64 {
        mean.iter()
            .zip(action)
            .zip(&self.log_std)
            .map(|((m, a), ls)| -0.5 * ((a - m) / ls.exp()).powi(2) - ls - 0.5 * LOG_2PI)
            .sum()
    }

    pub fn values(&self, obs: &Matrix) -> Result<Vec<f64>> {
        Ok(moe::forward(&self.critic, obs)?.0.into_vec())
    }
}

/// Generalized advantage estimates and returns for one environment's
/// transitions. `last_value` bootstraps a segment that ends mid-episode.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let t = rewards.len();
    let mut adv = vec![0.0; t];
    let mut next_adv = 0.0;
    let mut next_value = last_value;
    for i in (0..t).rev() {
        let keep = if dones[i] { 0.0 } else { 1.0 };
        let delta = rewards[i] + gamma * next_value * keep - values[i];
        next_adv = delta + gamma * lambda * keep * next_adv;
        adv[i] = next_adv;
        next_value = values[i];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Transitions from one rollout, stored environment-major.
#[derive(Clone, Debug)]
pub struct RolloutBuffer {
    pub observations: Matrix,
    pub actions: Matrix,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Raw GAE advantages; normalized per minibatch during the update.
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

/// Steps every environment `steps_per_env` times under the current policy.
pub fn collect_rollout(
    envs: &mut [PointMassEnv],
    ac: &mut ActorCritic,
    steps_per_env: usize,
    cfg: &PpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutBuffer> {
    let ne = envs.len();
    if ne == 0 || steps_per_env == 0 {
        return Err(Error::invalid("rollouts need at least one environment and one step"));
    }
    let total = ne * steps_per_env;
    let mut obs_rows = vec![vec![0.0; STATE_DIM]; total];
    let mut act_rows = vec![vec![0.0; ACTION_DIM]; total];
    let mut rewards = vec![0.0; total];
    let mut dones = vec![false; total];
    let mut values = vec![0.0; total];
    let mut log_probs = vec![0.0; total];
    let std: Vec<f64> = ac.log_std.iter().map(|l| l.exp()).collect();
    for t in 0..steps_per_env {
        let raw = Matrix::from_rows(&envs.iter().map(PointMassEnv::state).collect::<Vec<_>>());
        if let Some(m) = ac.obs_moments.as_mut() {
            (0..ne).for_each(|i| m.update(raw.row(i)));
        }
        let obs = ac.observe(&raw);
        let (mean, _) = moe::forward(&ac.actor, &obs)?;
        let v = ac.values(&obs)?;
        for (e, env) in envs.iter_mut().enumerate() {
            let idx = e * steps_per_env + t;
            let action: Vec<f64> = (0..ACTION_DIM)
                .map(|d| mean[(e, d)] + std[d] * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect();
            obs_rows[idx].copy_from_slice(obs.row(e));
            log_probs[idx] = ac.log_prob(mean.row(e), &action);
            values[idx] = v[e];
            let (_, r, done) = env.step(&action);
            rewards[idx] = r;
            dones[idx] = done;
            act_rows[idx] = action;
            if done {
                env.reset();
            }
        }
    }
    let raw = Matrix::from_rows(&envs.iter().map(PointMassEnv::state).collect::<Vec<_>>());
    let last_values = ac.values(&ac.observe(&raw))?;
    let mut advantages = Vec::with_capacity(total);
    let mut returns = Vec::with_capacity(total);
    for e in 0..ne {
        let r = e * steps_per_env..(e + 1) * steps_per_env;
        let (a, ret) = gae(&rewards[r.clone()], &values[r.clone()], &dones[r], last_values[e], cfg.gamma, cfg.gae_lambda);
        advantages.extend(a);
        returns.extend(ret);
    }
    Ok(RolloutBuffer {
        observations: Matrix::from_rows(&obs_rows),
        actions: Matrix::from_rows(&act_rows),
        rewards,
        dones,
        values,
        log_probs,
        advantages,
        returns,
    })
}

/// Loss pieces of one minibatch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoLoss {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub penalty: f64,
    pub lambda: f64,
    pub total: f64,
    pub clip_fraction: f64,
}

/// Minibatch rows of a buffer.
pub struct Minibatch {
    pub observations: Matrix,
    pub actions: Matrix,
    pub log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Minibatch {
    pub fn from_buffer(buf: &RolloutBuffer, idx: &[usize]) -> Self {
        Minibatch {
            observations: buf.observations.select(idx, &(0..STATE_DIM).collect::<Vec<_>>()),
            actions: buf.actions.select(idx, &(0..ACTION_DIM).collect::<Vec<_>>()),
            log_probs: idx.iter().map(|&i| buf.log_probs[i]).collect(),
            advantages: idx.iter().map(|&i| buf.advantages[i]).collect(),
            returns: idx.iter().map(|&i| buf.returns[i]).collect(),
        }
    }
}

fn normalized(adv: &[f64]) -> Vec<f64> {
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    if adv.len() < 2 || !(var > 0.0) {
        return adv.iter().map(|a| a - mean).collect();
    }
    adv.iter().map(|a| (a - mean) / (var.sqrt() + 1e-8)).collect()
}

/// Clipped-surrogate PPO loss plus value loss plus `λ` times the SPHERE
/// penalty on the actor, and its exact gradient in [`ActorCritic::flat_params`]
/// order. The penalty coefficient is adaptive unless fixed in `sphere_cfg`.
pub fn ppo_loss_and_grad(
    ac: &ActorCritic,
    mb: &Minibatch,
    cfg: &PpoConfig,
    sphere_cfg: &SphereConfig,
) -> Result<(PpoLoss, Vec<f64>)> {
    let b = mb.returns.len();
    let bf = b as f64;
    let adv = normalized(&mb.advantages);
    let std: Vec<f64> = ac.log_std.iter().map(|l| l.exp()).collect();
    let (mean, trace) = moe::forward(&ac.actor, &mb.observations)?;
    let mut dmu = Matrix::zeros(b, ACTION_DIM);
    let mut dlog_std = vec![0.0; ACTION_DIM];
    let (mut policy, mut clipped) = (0.0, 0usize);
    for i in 0..b {
        let logp = ac.log_prob(mean.row(i), mb.actions.row(i));
        let ratio = (logp - mb.log_probs[i]).exp();
        let clip_ratio = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        let (un, cl) = (ratio * adv[i], clip_ratio * adv[i]);
        policy -= un.min(cl) / bf;
        let active = un <= cl || (1.0 - cfg.clip..=1.0 + cfg.clip).contains(&ratio);
        if !active {
            clipped += 1;
            continue;
        }
        // ∂L/∂logp for this sample.
        let g = -adv[i] * ratio / bf;
        for d in 0..ACTION_DIM {
            let z = (mb.actions[(i, d)] - mean[(i, d)]) / std[d];
            dmu[(i, d)] = g * z / std[d];
            dlog_std[d] += g * (z * z - 1.0);
        }
    }
    let entropy: f64 = ac.log_std.iter().map(|l| l + 0.5 * (LOG_2PI + 1.0)).sum();
    dlog_std.iter_mut().for_each(|g| *g -= cfg.entropy_coef);

    let mut actor_grad = moe::backward(&ac.actor, &trace, &dmu)?;
    let (mut penalty, mut lambda) = (0.0, 0.0);
    if !sphere_cfg.is_disabled() {
        let term = sphere::sphere_term(&ac.actor, &trace, &dmu, sphere_cfg)?;
        let gs = moe::backward_with(&ac.actor, &trace, &term.as_cotangents())?;
        lambda = sphere::adaptive_lambda(actor_grad.norm(), gs.norm(), sphere_cfg);
        penalty = term.penalty;
        actor_grad.add_scaled(lambda, &gs);
    }

    let (v, ctrace) = moe::forward(&ac.critic, &mb.observations)?;
    let mut dv = Matrix::zeros(b, 1);
    let mut value = 0.0;
    for i in 0..b {
        let diff = v[(i, 0)] - mb.returns[i];
        value += cfg.value_coef * diff * diff / bf;
        dv[(i, 0)] = 2.0 * cfg.value_coef * diff / bf;
    }
    let critic_grad = moe::backward(&ac.critic, &ctrace, &dv)?;

    let mut grad = actor_grad.flatten();
    grad.extend(dlog_std);
    grad.extend(critic_grad.flatten());
    let total = policy + value - cfg.entropy_coef * entropy + lambda * penalty;
    let loss = PpoLoss {
        policy,
        value,
        entropy,
        penalty,
        lambda,
        total,
        clip_fraction: clipped as f64 / bf,
    };
    Ok((loss, grad))
}

/// Statistics of one [`ppo_update`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateLog {
    pub loss: PpoLoss,
    /// Mean pre-clip gradient norm over minibatches.
    pub grad_norm: f64,
    pub minibatches: usize,
}

/// `epochs` passes of shuffled minibatches over the buffer.
#[allow(clippy::too_many_arguments)]
pub fn ppo_update(
    ac: &mut ActorCritic,
    buffer: &RolloutBuffer,
    cfg: &PpoConfig,
    sphere_cfg: &SphereConfig,
    opt: &mut Optimizer,
    lr: f64,
    max_grad_norm: Option<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<UpdateLog> {
    let mut idx: Vec<usize> = (0..buffer.len()).collect();
    let mut log = UpdateLog::default();
    let mut count = 0.0f64;
    for _ in 0..cfg.epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.batch) {
            let mb = Minibatch::from_buffer(buffer, chunk);
            let (loss, mut grad) = ppo_loss_and_grad(ac, &mb, cfg, sphere_cfg)?;
            if !loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: count as usize });
            }
            let norm = clip_global_norm(&mut [&mut grad], max_grad_norm);
            let mut params = ac.flat_params();
            opt.step(&mut params, &grad, lr);
            ac.set_flat_params(&params)?;
            count += 1.0;
            log.grad_norm += norm;
            log.loss = loss;
        }
    }
    log.grad_norm /= count.max(1.0);
    log.minibatches = count as usize;
    Ok(log)
}

/// Fraction of deterministic (mean-action) episodes ending within the
/// success radius, and their mean return.
pub fn evaluate_policy(ac: &ActorCritic, env_cfg: &EnvConfig, goal: [f64; 2], episodes: usize, seed: u64) -> Result<(f64, f64)> {
    let mut envs: Vec<PointMassEnv> =
        (0..episodes).map(|k| PointMassEnv::new(env_cfg.clone(), goal, seed.wrapping_add(k as u64))).collect();
    let mut returns = vec![0.0; episodes];
    for _ in 0..env_cfg.horizon {
        let raw = Matrix::from_rows(&envs.iter().map(PointMassEnv::state).collect::<Vec<_>>());
        let (mean, _) = moe::forward(&ac.actor, &ac.observe(&raw))?;
        for (k, env) in envs.iter_mut().enumerate() {
            returns[k] += env.step(mean.row(k)).1;
        }
    }
    let hits = envs.iter().filter(|e| e.distance() < env_cfg.success_radius).count();
    Ok((hits as f64 / episodes as f64, returns.iter().sum::<f64>() / episodes as f64))
}

/// Frozen probe states visited by a uniformly random policy on `goal`.
pub fn probe_states(env_cfg: &EnvConfig, goal: [f64; 2], n: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut env = PointMassEnv::new(env_cfg.clone(), goal, seed ^ 0xC0FFEE);
    let lim = env_cfg.action_limit;
    let mut rows = Vec::with_capacity(n);
    while rows.len() < n {
        let a = [rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)];
        let (s, _, done) = env.step(&a);
        if rng.random_bool(0.2) {
            rows.push(s.to_vec());
        }
        if done {
            env.reset();
        }
    }
    Matrix::from_rows(&rows)
}

/// Everything a continual PPO run needs besides the goals.
#[derive(Clone, Debug, PartialEq)]
pub struct CrlSettings {
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub actor: MoeConfig,
    pub critic_widths: Vec<usize>,
    pub sphere: SphereConfig,
    pub optimizer: OptimizerConfig,
    pub protocol: Protocol,
    pub log_every: usize,
}

/// Trains on each goal in turn and records per-goal success and `r_e(K)` of
/// the actor mean on `probe`.
pub fn run_crl_sequence(goals: &[[f64; 2]], settings: &CrlSettings, probe: &Matrix, seed: u64) -> Result<RunRecord> {
    Ok(run_crl_sequence_with_agent(goals, settings, probe, seed)?.0)
}

/// [`run_crl_sequence`] that also returns the final agent.
pub fn run_crl_sequence_with_agent(
    goals: &[[f64; 2]],
    settings: &CrlSettings,
    probe: &Matrix,
    seed: u64,
) -> Result<(RunRecord, ActorCritic)> {
    if goals.len() < 2 {
        return Err(Error::invalid("a continual sequence needs at least two goals"));
    }
    settings.ppo.validate()?;
    let ppo = &settings.ppo;
    let fresh = |s: u64| {
        let actor = MoeConfig { seed: s, ..settings.actor.clone() };
        ActorCritic::new(&actor, &settings.critic_widths, ppo.init_log_std, ppo.normalize_obs)
    };
    let mut ac = fresh(seed)?;
    let mut opt = Optimizer::new(settings.optimizer.kind, ac.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0BAD_5EED);
    let mut record = RunRecord { seed, logs: vec![], finals: vec![], aborted: None, timing: StepTiming::default() };
    let steps_per_env = ppo.rollout_steps / ppo.num_envs;
    let iters = ppo.iterations_per_task;
    for (task, &goal) in goals.iter().enumerate() {
        if settings.protocol == Protocol::Isolated && task > 0 {
            ac = fresh(seed.wrapping_mul(1_000_003).wrapping_add(task as u64))?;
            opt = Optimizer::new(settings.optimizer.kind, ac.param_count());
        }
        let mut envs: Vec<PointMassEnv> = (0..ppo.num_envs)
            .map(|k| PointMassEnv::new(settings.env.clone(), goal, rng.random::<u64>() ^ k as u64))
            .collect();
        for it in 0..iters {
            let buffer = collect_rollout(&mut envs, &mut ac, steps_per_env, ppo, &mut rng)?;
            let lr = settings.optimizer.lr_at(it, iters);
            let clock = Instant::now();
            let update = match ppo_update(
                &mut ac,
                &buffer,
                ppo,
                &settings.sphere,
                &mut opt,
                lr,
                settings.optimizer.max_grad_norm,
                &mut rng,
            ) {
                Ok(u) => u,
                Err(Error::NonFiniteLoss { .. }) => {
                    record.aborted = Some(Error::NonFiniteLoss { step: task * iters + it }.to_string());
                    return Ok((record, ac));
                }
                Err(e) => return Err(e),
            };
            record.timing.seconds += clock.elapsed().as_secs_f64();
            record.timing.steps += update.minibatches;
            let last = it + 1 == iters;
            if last || (settings.log_every > 0 && (it + 1) % settings.log_every == 0) {
                let (success, ret) = evaluate_policy(&ac, &settings.env, goal, ppo.eval_episodes, seed ^ 0xE7A1)?;
                let obs = ac.observe(probe);
                let (_, trace) = moe::forward(&ac.actor, &obs)?;
                record.logs.push(MetricsRecord {
                    seed,
                    task,
                    task_step: it + 1,
                    global_step: task * iters + it + 1,
                    train_loss: update.loss.policy + update.loss.value,
                    penalty: update.loss.penalty,
                    lambda: update.loss.lambda,
                    eval_loss: -ret,
                    eval_success: success,
                    re_k: entk::spectral_plasticity_exact(&ac.actor, &obs)?,
                    dormant_ratio: dormant_ratio(&trace),
                    feature_norm: feature_norm(&trace),
                    grad_norm: update.grad_norm,
                });
            }
        }
        let (success, ret) = evaluate_policy(&ac, &settings.env, goal, ppo.eval_episodes, seed ^ 0xE7A1)?;
        let obs = ac.observe(probe);
        let (_, trace) = moe::forward(&ac.actor, &obs)?;
        record.finals.push(TaskFinal {
            task,
            eval_loss: -ret,
            success,
            re_k: entk::spectral_plasticity_exact(&ac.actor, &obs)?,
            specialization: specialization_metrics(&trace).ok(),
        });
    }
    Ok((record, ac))
}
