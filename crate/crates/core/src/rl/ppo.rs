//! Clipped-surrogate PPO with a separate value network.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::returns::{discounted_return, gae};
use crate::env::{EnvConfig, KickEnv, TaskContext};
use crate::error::{Error, Result};
use crate::nn::{GaussianPolicy, Mlp, Optimizer, Parameters, PolicyGrads};
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lambda: f64,
    pub clip_param: f64,
    pub entropy_coef: f64,
    pub steps_per_batch: usize,
    pub minibatch_size: usize,
    pub epochs_per_batch: usize,
    pub total_timesteps: usize,
    pub learning_rate: f64,
    pub value_coef: f64,
    pub normalize_advantages: bool,
    /// Global L2 norm cap applied to each network's minibatch gradient (0 disables).
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.999,
            lambda: 1.0,
            clip_param: 0.29,
            entropy_coef: 0.01,
            steps_per_batch: 4096,
            minibatch_size: 1024,
            epochs_per_batch: 10,
            total_timesteps: 200_000,
            learning_rate: 3e-4,
            value_coef: 0.5,
            normalize_advantages: true,
            max_grad_norm: 0.5,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("ppo: {m}")));
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.lambda) {
            return bad("gamma and lambda must lie in [0, 1]");
        }
        if !(self.clip_param > 0.0) || !(self.entropy_coef >= 0.0) || !(self.value_coef > 0.0) {
            return bad("clip_param > 0, entropy_coef >= 0, value_coef > 0 required");
        }
        if self.steps_per_batch == 0 || self.minibatch_size == 0 || self.epochs_per_batch == 0 {
            return bad("batch sizes and epochs must be positive");
        }
        if self.minibatch_size > self.steps_per_batch {
            return bad("minibatch_size must not exceed steps_per_batch");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        Ok(())
    }
}

/// Flattened on-policy samples from complete episodes.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_prob_old: Array1<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Array1<f64>,
    pub returns: Array1<f64>,
    /// Undiscounted return of every episode in the batch.
    pub episode_returns: Vec<f64>,
    /// `|final distance - target|` of every episode.
    pub episode_errors: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn mean_episode_return(&self) -> f64 {
        mean(&self.episode_returns)
    }
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// `min(rho * A, clip(rho, 1 - eps, 1 + eps) * A)`
pub fn clipped_objective(ratio: f64, advantage: f64, clip: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip, 1.0 + clip) * advantage)
}

/// Whether the unclipped branch of [`clipped_objective`] is the active one
/// (and so carries gradient).
fn unclipped_active(ratio: f64, advantage: f64, clip: f64) -> bool {
    !((advantage > 0.0 && ratio > 1.0 + clip) || (advantage < 0.0 && ratio < 1.0 - clip))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoDiagnostics {
    pub surrogate: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub first_epoch_clip_fraction: f64,
}

/// Minibatch loss pieces and policy gradients for
/// `-(mean clipped surrogate) - entropy_coef * entropy`.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub surrogate: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grads: PolicyGrads,
}

pub fn surrogate_gradients(
    policy: &GaussianPolicy,
    observations: Array2<f64>,
    actions: &Array2<f64>,
    log_prob_old: &Array1<f64>,
    advantages: &Array1<f64>,
    clip: f64,
    entropy_coef: f64,
) -> Result<SurrogateEval> {
    let n = observations.nrows() as f64;
    let tape = policy.mean.forward_tape(observations)?;
    let logp = policy.log_prob_batch(tape.output.view(), actions.view());
    let mut surrogate = 0.0;
    let mut kl = 0.0;
    let mut clipped = 0usize;
    let mut coef = Array1::zeros(logp.len());
    for i in 0..logp.len() {
        let log_ratio = logp[i] - log_prob_old[i];
        let ratio = log_ratio.exp();
        let adv = advantages[i];
        surrogate += clipped_objective(ratio, adv, clip);
        kl += (ratio - 1.0) - log_ratio;
        if (ratio - 1.0).abs() > clip {
            clipped += 1;
        }
        if unclipped_active(ratio, adv, clip) {
            // d(-rho A / n)/d logp
            coef[i] = -ratio * adv / n;
        }
    }
    if !surrogate.is_finite() {
        return Err(Error::Training("non-finite surrogate".into()));
    }
    let extra = Array1::from_elem(policy.action_dim(), -entropy_coef);
    let grads = policy.backward_log_prob(&tape, actions.view(), coef.view(), extra.view());
    Ok(SurrogateEval {
        surrogate: surrogate / n,
        approx_kl: kl / n,
        clip_fraction: clipped as f64 / n,
        grads,
    })
}

/// Networks and optimizer state of one PPO learner.
#[derive(Debug, Clone)]
pub struct PpoLearner {
    pub policy: GaussianPolicy,
    pub value: Mlp,
    policy_opt: Optimizer,
    value_opt: Optimizer,
}

impl PpoLearner {
    pub fn new(policy: GaussianPolicy, value: Mlp, cfg: &PpoConfig) -> Result<Self> {
        let opt = crate::nn::OptimizerConfig::adam(cfg.learning_rate);
        Ok(PpoLearner {
            policy,
            value,
            policy_opt: Optimizer::new(&opt)?,
            value_opt: Optimizer::new(&opt)?,
        })
    }

    /// Runs `epochs_per_batch` passes of shuffled minibatches over `batch`.
    ///
    /// A non-finite loss restores the networks to their pre-update state.
    pub fn update<R: Rng>(&mut self, batch: &RolloutBatch, cfg: &PpoConfig, rng: &mut R) -> Result<PpoDiagnostics> {
        let snapshot = (self.policy.clone(), self.value.clone(), self.policy_opt.clone(), self.value_opt.clone());
        match self.update_inner(batch, cfg, rng) {
            Ok(d) => Ok(d),
            Err(e) => {
                (self.policy, self.value, self.policy_opt, self.value_opt) = snapshot;
                Err(e)
            }
        }
    }

    fn update_inner<R: Rng>(&mut self, batch: &RolloutBatch, cfg: &PpoConfig, rng: &mut R) -> Result<PpoDiagnostics> {
        let n = batch.len();
        if n == 0 {
            return Ok(PpoDiagnostics::default());
        }
        let mut idx: Vec<usize> = (0..n).collect();
        let mut diag = PpoDiagnostics::default();
        let mut count = 0.0;
        for epoch in 0..cfg.epochs_per_batch {
            idx.shuffle(rng);
            let mut epoch_clipped = 0.0;
            for chunk in idx.chunks(cfg.minibatch_size) {
                let obs = batch.observations.select(Axis(0), chunk);
                let acts = batch.actions.select(Axis(0), chunk);
                let lp_old = batch.log_prob_old.select(Axis(0), chunk);
                let adv = batch.advantages.select(Axis(0), chunk);
                let ret = batch.returns.select(Axis(0), chunk);

                let eval = surrogate_gradients(&self.policy, obs.clone(), &acts, &lp_old, &adv, cfg.clip_param, cfg.entropy_coef)?;

                let vtape = self.value.forward_tape(obs)?;
                let pred = vtape.output.column(0);
                let m = chunk.len() as f64;
                let resid = &pred - &ret;
                let value_loss = resid.mapv(|r| r * r).sum() / m;
                if !value_loss.is_finite() {
                    return Err(Error::Training("non-finite value loss".into()));
                }
                let d_value = (resid * (2.0 * cfg.value_coef / m)).insert_axis(Axis(1));
                let mut vgrads = self.value.backward(&vtape, d_value.view());
                let mut pgrads = eval.grads;
                if cfg.max_grad_norm > 0.0 {
                    clip_grad_norm(&mut pgrads, cfg.max_grad_norm);
                    clip_grad_norm(&mut vgrads, cfg.max_grad_norm);
                }

                self.policy_opt.step(&mut self.policy, &pgrads)?;
                self.value_opt.step(&mut self.value, &vgrads)?;
                if !self.policy.all_finite() || !self.value.all_finite() {
                    return Err(Error::Training("parameters diverged".into()));
                }

                diag.surrogate += eval.surrogate;
                diag.value_loss += value_loss;
                diag.approx_kl += eval.approx_kl;
                diag.clip_fraction += eval.clip_fraction;
                epoch_clipped += eval.clip_fraction * m;
                count += 1.0;
            }
            if epoch == 0 {
                diag.first_epoch_clip_fraction = epoch_clipped / n as f64;
            }
        }
        diag.surrogate /= count;
        diag.value_loss /= count;
        diag.approx_kl /= count;
        diag.clip_fraction /= count;
        diag.entropy = self.policy.entropy();
        Ok(diag)
    }
}

/// Rescales `grads` in place so its global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<P: Parameters>(grads: &mut P, max_norm: f64) -> f64 {
    let norm = grads
        .slices()
        .iter()
        .flat_map(|s| s.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for s in grads.slices_mut() {
            s.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

/// How each episode of a batch picks its task.
#[derive(Debug, Clone)]
pub enum TaskSource {
    Fixed(TaskContext),
    /// Uniform draw from a finite grid per episode.
    Grid(Vec<TaskContext>),
}

impl TaskSource {
    fn pick<R: Rng>(&self, rng: &mut R) -> TaskContext {
        match self {
            TaskSource::Fixed(t) => *t,
            TaskSource::Grid(g) => g[rng.random_range(0..g.len())],
        }
    }
}

/// Episodes advanced together through batched network evaluation.
const EPISODES_PER_CHUNK: usize = 16;

struct ChunkOut {
    observations: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
    rewards: Vec<f64>,
    dones: Vec<bool>,
    episode_returns: Vec<f64>,
    episode_errors: Vec<f64>,
}

/// Collects `n_episodes` complete stochastic episodes.
///
/// Every episode owns an RNG derived from `(seed, episode index)`, so the
/// batch is identical for any worker count.
#[allow(clippy::too_many_arguments)]
pub fn collect_batch(
    policy: &GaussianPolicy,
    value: &Mlp,
    env_cfg: &EnvConfig,
    tasks: &TaskSource,
    include_context: bool,
    n_episodes: usize,
    seed: u64,
    cfg: &PpoConfig,
    exec: Exec,
) -> Result<RolloutBatch> {
    let chunks: Vec<(usize, usize)> = (0..n_episodes)
        .step_by(EPISODES_PER_CHUNK)
        .map(|s| (s, (s + EPISODES_PER_CHUNK).min(n_episodes)))
        .collect();
    let outs = exec.map(&chunks, |&(lo, hi)| {
        collect_chunk(policy, value, env_cfg, tasks, include_context, lo..hi, seed)
    });
    let mut observations = Vec::new();
    let mut actions = Vec::new();
    let mut log_probs = Vec::new();
    let mut values = Vec::new();
    let mut rewards = Vec::new();
    let mut dones = Vec::new();
    let mut episode_returns = Vec::new();
    let mut episode_errors = Vec::new();
    for out in outs {
        let out = out?;
        observations.extend(out.observations);
        actions.extend(out.actions);
        log_probs.extend(out.log_probs);
        values.extend(out.values);
        rewards.extend(out.rewards);
        dones.extend(out.dones);
        episode_returns.extend(out.episode_returns);
        episode_errors.extend(out.episode_errors);
    }

    // advantages per episode; the time limit is terminal because the
    // observation carries the step counter
    let mut advantages = Vec::with_capacity(rewards.len());
    let mut returns = Vec::with_capacity(rewards.len());
    let mut start = 0;
    for end in dones.iter().enumerate().filter(|(_, &d)| d).map(|(i, _)| i + 1) {
        let r = &rewards[start..end];
        let mut v = values[start..end].to_vec();
        v.push(0.0);
        let adv = gae(r, &v, cfg.gamma, cfg.lambda)?;
        if cfg.lambda == 1.0 {
            returns.extend(discounted_return(r, cfg.gamma));
        } else {
            returns.extend(adv.iter().zip(&v).map(|(a, v)| a + v));
        }
        advantages.extend(adv);
        start = end;
    }
    let mut advantages = Array1::from(advantages);
    if cfg.normalize_advantages && advantages.len() > 1 {
        let m = advantages.mean().unwrap_or(0.0);
        let sd = advantages.std(0.0);
        advantages.mapv_inplace(|a| (a - m) / (sd + 1e-8));
    }
    let width_o = observations.first().map_or(0, |o| o.len());
    let width_a = actions.first().map_or(0, |a| a.len());
    Ok(RolloutBatch {
        observations: crate::nn::policy::stack_rows(&observations, width_o),
        actions: crate::nn::policy::stack_rows(&actions, width_a),
        log_prob_old: Array1::from(log_probs),
        rewards,
        values,
        dones,
        advantages,
        returns: Array1::from(returns),
        episode_returns,
        episode_errors,
    })
}

fn collect_chunk(
    policy: &GaussianPolicy,
    value: &Mlp,
    env_cfg: &EnvConfig,
    tasks: &TaskSource,
    include_context: bool,
    episodes: std::ops::Range<usize>,
    seed: u64,
) -> Result<ChunkOut> {
    let k = episodes.len();
    let horizon = env_cfg.horizon;
    let mut envs = Vec::with_capacity(k);
    let mut rngs = Vec::with_capacity(k);
    let mut states = Vec::with_capacity(k);
    let mut task_of = Vec::with_capacity(k);
    for ep in episodes {
        let mut rng = seed::rng(seed::derive(seed, &[ep as u64]));
        let task = tasks.pick(&mut rng);
        let mut env = KickEnv::new(env_cfg.clone())?;
        states.push(env.reset(task, rng.random())?);
        envs.push(env);
        rngs.push(rng);
        task_of.push(task);
    }
    // per-episode step buffers, flattened episode-major at the end
    let mut obs_buf = vec![Vec::with_capacity(horizon); k];
    let mut act_buf = vec![Vec::with_capacity(horizon); k];
    let mut lp_buf = vec![Vec::with_capacity(horizon); k];
    let mut val_buf = vec![Vec::with_capacity(horizon); k];
    let mut rew_buf = vec![Vec::with_capacity(horizon); k];
    for _ in 0..horizon {
        let obs: Vec<Vec<f64>> = (0..k)
            .map(|i| envs[i].observation(&states[i], task_of[i], include_context))
            .collect();
        let obs_m = crate::nn::policy::stack_rows(&obs, obs[0].len());
        let means = policy.mean.forward_batch(obs_m.view())?;
        let vals = value.forward_batch(obs_m.view())?;
        for (i, o) in obs.into_iter().enumerate() {
            let action = policy.sample_action(means.row(i), &mut rngs[i]);
            let lp = crate::nn::gaussian_log_prob(
                means.row(i).as_slice().expect("row-major"),
                policy.log_std.view(),
                &action,
            );
            let res = envs[i].step(&action)?;
            states[i] = res.next_state;
            obs_buf[i].push(o);
            act_buf[i].push(action);
            lp_buf[i].push(lp);
            val_buf[i].push(vals[[i, 0]]);
            rew_buf[i].push(res.reward);
        }
    }
    let mut out = ChunkOut {
        observations: Vec::with_capacity(k * horizon),
        actions: Vec::with_capacity(k * horizon),
        log_probs: Vec::with_capacity(k * horizon),
        values: Vec::with_capacity(k * horizon),
        rewards: Vec::with_capacity(k * horizon),
        dones: Vec::with_capacity(k * horizon),
        episode_returns: Vec::with_capacity(k),
        episode_errors: Vec::with_capacity(k),
    };
    for i in 0..k {
        out.episode_returns.push(rew_buf[i].iter().sum());
        let f = states[i].final_distance.unwrap_or(states[i].ball_position);
        out.episode_errors.push((f - task_of[i].target_distance()).abs());
        out.observations.append(&mut obs_buf[i]);
        out.actions.append(&mut act_buf[i]);
        out.log_probs.append(&mut lp_buf[i]);
        out.values.append(&mut val_buf[i]);
        out.dones.extend((0..horizon).map(|t| t + 1 == horizon));
        out.rewards.append(&mut rew_buf[i]);
    }
    Ok(out)
}

/// One point of a training curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub timestep: usize,
    pub mean_return: f64,
    pub mean_error: f64,
}

/// Rollout/update cycles until `total_timesteps` environment steps are spent.
///
/// Returns the curve (one point per batch, measured before its update) and
/// the number of environment steps spent.
pub fn train_loop(
    learner: &mut PpoLearner,
    env_cfg: &EnvConfig,
    tasks: &TaskSource,
    include_context: bool,
    cfg: &PpoConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<CurvePoint>, usize)> {
    cfg.validate()?;
    let horizon = env_cfg.horizon;
    let episodes_per_batch = cfg.steps_per_batch.div_ceil(horizon).max(1);
    let mut update_rng = seed::rng(seed::derive(seed, &[u64::MAX]));
    let mut curve = Vec::new();
    let mut spent = 0usize;
    let mut iteration = 0u64;
    loop {
        let remaining = cfg.total_timesteps.saturating_sub(spent);
        let n_ep = episodes_per_batch.min(remaining / horizon);
        if n_ep == 0 {
            break;
        }
        let batch = collect_batch(
            &learner.policy,
            &learner.value,
            env_cfg,
            tasks,
            include_context,
            n_ep,
            seed::derive(seed, &[iteration]),
            cfg,
            exec,
        )?;
        curve.push(CurvePoint {
            timestep: spent,
            mean_return: batch.mean_episode_return(),
            mean_error: mean(&batch.episode_errors),
        });
        spent += batch.len();
        let diag = learner.update(&batch, cfg, &mut update_rng)?;
        log::debug!(
            "iter {iteration} t={spent} return={:.4} err={:.3} kl={:.4} clip={:.3}",
            batch.mean_episode_return(),
            mean(&batch.episode_errors),
            diag.approx_kl,
            diag.clip_fraction
        );
        iteration += 1;
    }
    Ok((curve, spent))
}
