//! Single-task experts: imitation warm start from a scripted kick, then PPO.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::ppo::{train_loop, CurvePoint, PpoConfig, PpoLearner, TaskSource};
use crate::env::{reference_plan, ActionPlan, EnvConfig, KickEnv, TaskContext};
use crate::error::{Error, Result};
use crate::nn::{GaussianPolicy, Mlp, MlpSpec, Optimizer, OptimizerConfig};
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub hidden_layers: Vec<usize>,
    pub value_hidden_layers: Vec<usize>,
    pub init_log_std: f64,
    /// Distance of the scripted kick imitated before PPO.
    pub reference_target: f64,
    pub bc_epochs: usize,
    pub bc_learning_rate: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        ExpertConfig {
            hidden_layers: vec![64, 64, 64],
            value_hidden_layers: vec![64, 64],
            init_log_std: 0.1f64.ln(),
            reference_target: 12.0,
            bc_epochs: 300,
            bc_learning_rate: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertMetadata {
    pub task: f64,
    pub seed: u64,
    pub timesteps: usize,
    pub final_mean_return: f64,
    pub final_mean_error: f64,
    /// Whether the last training batch beat the first one.
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertPolicy {
    pub task: TaskContext,
    pub policy: GaussianPolicy,
    pub metadata: ExpertMetadata,
    pub curve: Vec<CurvePoint>,
}

impl ExpertPolicy {
    /// Deterministic (mean-action) plan for the expert's own task.
    pub fn plan(&self, env_cfg: &EnvConfig) -> Result<ActionPlan> {
        let env = KickEnv::new(env_cfg.clone())?;
        let obs = env.observation_schedule(self.task, false);
        self.policy.mean.forward_batch(obs.view())
    }
}

/// Outcome of the imitation phase.
#[derive(Debug, Clone)]
pub struct Bootstrap {
    pub policy: GaussianPolicy,
    /// Full-batch imitation loss before every epoch.
    pub losses: Vec<f64>,
}

/// Fits the policy mean to a scripted reference kick by behavior cloning.
///
/// `observations` holds one row per counter value (as the policy will see
/// them) and `reference` the matching actions. The exploration log-std is
/// left at its initial value so PPO starts with the configured noise.
pub fn bootstrap_expert(
    policy: GaussianPolicy,
    observations: &Array2<f64>,
    reference: &ActionPlan,
    bc_epochs: usize,
    learning_rate: f64,
) -> Result<Bootstrap> {
    if observations.nrows() != reference.nrows() {
        return Err(Error::shape(reference.nrows(), observations.nrows()));
    }
    let mut policy = policy;
    let mut opt = Optimizer::new(&OptimizerConfig::adam(learning_rate))?;
    let n = reference.nrows() as f64;
    let mut losses = Vec::with_capacity(bc_epochs);
    for _ in 0..bc_epochs {
        let tape = policy.mean.forward_tape(observations.clone())?;
        let lp = policy.log_prob_batch(tape.output.view(), reference.view());
        let loss = -lp.sum() / n;
        if !loss.is_finite() {
            return Err(Error::Training("non-finite imitation loss".into()));
        }
        losses.push(loss);
        let coef = Array1::from_elem(reference.nrows(), -1.0 / n);
        let mut grads = policy.backward_log_prob(&tape, reference.view(), coef.view(), Array1::zeros(policy.action_dim()).view());
        grads.log_std.fill(0.0);
        opt.step(&mut policy, &grads)?;
    }
    Ok(Bootstrap { policy, losses })
}

/// Scripted reference kick checked to land within 1 m of its target with no
/// launch noise.
pub fn checked_reference(env_cfg: &EnvConfig, target: f64) -> Result<ActionPlan> {
    let plan = reference_plan(env_cfg, target)?;
    let env = KickEnv::new(env_cfg.clone())?;
    let landed = env.noiseless_distance(&plan);
    if (landed - target).abs() > 1.0 {
        return Err(Error::Config(format!(
            "reference controller lands at {landed:.3} m, wanted {target} +/- 1 m"
        )));
    }
    Ok(plan)
}

/// Freshly initialized policy and value networks for `input_dim` observations.
pub(crate) fn init_networks(
    input_dim: usize,
    action_dim: usize,
    hidden: &[usize],
    expert: &ExpertConfig,
    seed: u64,
) -> Result<(GaussianPolicy, Mlp)> {
    let mut rng = seed::rng(seed::derive(seed, &[0x1417]));
    let policy = GaussianPolicy::new(MlpSpec::tanh(input_dim, hidden, action_dim), expert.init_log_std, &mut rng)?;
    let value = Mlp::new(MlpSpec::tanh(input_dim, &expert.value_hidden_layers, 1), &mut rng)?;
    Ok((policy, value))
}

/// Trains a single-task expert: imitation of the reference kick, then PPO
/// until `total_timesteps` environment steps are spent.
pub fn train_expert(
    task: TaskContext,
    ppo: &PpoConfig,
    expert: &ExpertConfig,
    env_cfg: &EnvConfig,
    seed: u64,
    exec: Exec,
) -> Result<ExpertPolicy> {
    ppo.validate()?;
    let task = TaskContext::new(task.target_distance())?;
    let (policy, value) = init_networks(1, env_cfg.action_dim, &expert.hidden_layers, expert, seed)?;
    let policy = if expert.bc_epochs > 0 {
        let reference = checked_reference(env_cfg, expert.reference_target)?;
        let obs = KickEnv::new(env_cfg.clone())?.observation_schedule(task, false);
        bootstrap_expert(policy, &obs, &reference, expert.bc_epochs, expert.bc_learning_rate)?.policy
    } else {
        policy
    };
    let mut learner = PpoLearner::new(policy, value, ppo)?;
    let (curve, timesteps) = train_loop(&mut learner, env_cfg, &TaskSource::Fixed(task), false, ppo, seed, exec)?;
    let (first, last) = (curve.first().copied(), curve.last().copied());
    let improved = match (first, last) {
        (Some(f), Some(l)) => l.mean_return > f.mean_return,
        _ => false,
    };
    if !improved && !curve.is_empty() {
        log::warn!("expert for {:.2} m did not improve over its first batch", task.target_distance());
    }
    Ok(ExpertPolicy {
        task,
        metadata: ExpertMetadata {
            task: task.target_distance(),
            seed,
            timesteps,
            final_mean_return: last.map_or(f64::NAN, |c| c.mean_return),
            final_mean_error: last.map_or(f64::NAN, |c| c.mean_error),
            improved,
        },
        policy: learner.policy,
        curve,
    })
}
