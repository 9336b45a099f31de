//! Multi-task PPO baseline: one context-conditioned policy trained directly on
//! episodes whose target is redrawn from the training grid every episode.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::expert::{bootstrap_expert, checked_reference, init_networks, ExpertConfig};
use super::ppo::{collect_batch, train_loop, CurvePoint, PpoConfig, PpoLearner, TaskSource};
use crate::env::{ActionPlan, EnvConfig, KickEnv, TaskContext};
use crate::error::{Error, Result};
use crate::eval::bootstrap_ci;
use crate::nn::GaussianPolicy;
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub hidden_layers: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Baseline budget as a fraction of the summed expert budgets.
    pub budget_fraction: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden_layers: vec![64, 64, 64],
            seeds: vec![0, 1, 2],
            budget_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineRun {
    pub seed: u64,
    pub policy: GaussianPolicy,
    pub curve: Vec<CurvePoint>,
    pub timesteps: usize,
}

impl BaselineRun {
    /// Deterministic plan for `task`, context included.
    pub fn plan(&self, env_cfg: &EnvConfig, task: TaskContext) -> Result<ActionPlan> {
        let obs = KickEnv::new(env_cfg.clone())?.observation_schedule(task, true);
        self.policy.mean.forward_batch(obs.view())
    }
}

/// Trains one baseline per seed on `tasks` with `ppo.total_timesteps` each.
///
/// Every run imitates the scripted reference kick first, with the context
/// input held at the reference distance.
pub fn train_multitask_baseline(
    tasks: &[TaskContext],
    ppo: &PpoConfig,
    expert: &ExpertConfig,
    baseline: &BaselineConfig,
    env_cfg: &EnvConfig,
    exec: Exec,
) -> Result<Vec<BaselineRun>> {
    if tasks.is_empty() || baseline.seeds.is_empty() {
        return Err(Error::Config("baseline needs at least one task and one seed".into()));
    }
    ppo.validate()?;
    let env = KickEnv::new(env_cfg.clone())?;
    let mut runs = Vec::with_capacity(baseline.seeds.len());
    for &seed in &baseline.seeds {
        let (policy, value) = init_networks(2, env_cfg.action_dim, &baseline.hidden_layers, expert, seed)?;
        let policy = if expert.bc_epochs > 0 {
            let reference = checked_reference(env_cfg, expert.reference_target)?;
            let obs = env.observation_schedule(TaskContext::new(expert.reference_target)?, true);
            bootstrap_expert(policy, &obs, &reference, expert.bc_epochs, expert.bc_learning_rate)?.policy
        } else {
            policy
        };
        let source = TaskSource::Grid(tasks.to_vec());
        let mut learner = PpoLearner::new(policy, value, ppo)?;
        let (mut curve, timesteps) = train_loop(&mut learner, env_cfg, &source, true, ppo, seed, exec)?;
        if curve.is_empty() {
            // nothing trained: report the starting policy's return
            let n = ppo.steps_per_batch.div_ceil(env_cfg.horizon).max(1);
            let batch = collect_batch(
                &learner.policy,
                &learner.value,
                env_cfg,
                &source,
                true,
                n,
                seed::derive(seed, &[0xe7a1]),
                ppo,
                exec,
            )?;
            curve.push(CurvePoint {
                timestep: 0,
                mean_return: batch.mean_episode_return(),
                mean_error: batch.episode_errors.iter().sum::<f64>() / n as f64,
            });
        }
        log::info!(
            "baseline seed {seed}: {timesteps} steps, final mean return {:.3}",
            curve.last().map_or(f64::NAN, |c| c.mean_return)
        );
        runs.push(BaselineRun {
            seed,
            policy: learner.policy,
            curve,
            timesteps,
        });
    }
    Ok(runs)
}

/// One row of a reward-curve CSV. `seed` is `None` for the across-seed aggregate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub seed: Option<u64>,
    pub timestep: usize,
    pub mean_return: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

/// Rows of a single seed's curve (band collapsed onto the value).
pub fn seed_curve_rows(seed: u64, curve: &[CurvePoint]) -> Vec<CurveRow> {
    curve
        .iter()
        .map(|p| CurveRow {
            seed: Some(seed),
            timestep: p.timestep,
            mean_return: p.mean_return,
            ci_low: p.mean_return,
            ci_high: p.mean_return,
        })
        .collect()
}

/// Across-seed mean curve with a bootstrap band at every point.
///
/// Curves are aligned by index and truncated to the shortest one.
pub fn aggregate_curves(curves: &[&[CurvePoint]], confidence: f64, resamples: usize, seed: u64) -> Result<Vec<CurveRow>> {
    let len = curves.iter().map(|c| c.len()).min().unwrap_or(0);
    if curves.is_empty() {
        return Err(Error::Data("no curves to aggregate".into()));
    }
    (0..len)
        .map(|i| {
            let samples: Vec<f64> = curves.iter().map(|c| c[i].mean_return).collect();
            let (ci_low, ci_high) = bootstrap_ci(&samples, confidence, resamples, seed::derive(seed, &[i as u64]))?;
            Ok(CurveRow {
                seed: None,
                timestep: curves[0][i].timestep,
                mean_return: samples.iter().sum::<f64>() / samples.len() as f64,
                ci_low,
                ci_high,
            })
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("seed,timestep,mean_return,ci_low,ci_high\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "all".to_string(), |s| s.to_string());
        let _ = writeln!(out, "{seed},{},{},{},{}", r.timestep, r.mean_return, r.ci_low, r.ci_high);
    }
    out
}
