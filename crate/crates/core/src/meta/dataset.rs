//! Expert demonstrations tagged with their task context.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{EnvConfig, KickEnv, TaskContext, Trajectory};
use crate::error::{Error, Result};
use crate::rl::ExpertPolicy;
use crate::seed;

/// Rolls out `k` episodes of the expert's mean action on `task`.
pub fn collect_rollouts(
    expert: &ExpertPolicy,
    task: TaskContext,
    k: usize,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if expert.task != task {
        return Err(Error::Data(format!(
            "expert trained for {} m asked to demonstrate {} m",
            expert.task.target_distance(),
            task.target_distance()
        )));
    }
    let plan = expert.plan(env_cfg)?;
    let mut env = KickEnv::new(env_cfg.clone())?;
    (0..k)
        .map(|i| {
            let s = seed::derive(seed, &[seed::omega_tag(task.target_distance()), i as u64]);
            env.run_plan(task, s, false, &plan)
        })
        .collect()
}

/// One demonstration step with its context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextRecord {
    /// Context the step is labelled with; always its source task's target.
    pub omega: f64,
    /// Index of the source trajectory within the aggregated input.
    pub trajectory: usize,
    pub step: usize,
    /// Expert observation (without context).
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContextualDataset {
    pub records: Vec<ContextRecord>,
}

/// Labels every step with its trajectory's target and concatenates all of them.
pub fn contextualize_and_aggregate(trajectories: &[Trajectory]) -> ContextualDataset {
    let records = trajectories
        .iter()
        .enumerate()
        .flat_map(|(id, traj)| {
            let omega = traj.task.target_distance();
            traj.steps.iter().enumerate().map(move |(t, s)| ContextRecord {
                omega,
                trajectory: id,
                step: t,
                observation: s.observation.clone(),
                action: s.action.clone(),
                reward: s.reward,
            })
        })
        .collect();
    ContextualDataset { records }
}

/// Line format shared with trajectory dumps.
#[derive(Debug, Serialize, Deserialize)]
struct StepLine {
    episode: usize,
    task: Option<f64>,
    counter: usize,
    observation: Vec<f64>,
    action: Vec<f64>,
    reward: f64,
}

impl ContextualDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct contexts, ascending.
    pub fn contexts(&self) -> Vec<f64> {
        let mut c: Vec<f64> = self.records.iter().map(|r| r.omega).collect();
        c.sort_by(f64::total_cmp);
        c.dedup();
        c
    }

    pub fn observation_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.observation.len())
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.records.first().map(|r| r.action.len())
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            let line = StepLine {
                episode: r.trajectory,
                task: Some(r.omega),
                counter: r.step,
                observation: r.observation.clone(),
                action: r.action.clone(),
                reward: r.reward,
            };
            let _ = writeln!(out, "{}", serde_json::to_string(&line)?);
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let s: StepLine =
                serde_json::from_str(line).map_err(|e| Error::Data(format!("dataset line {}: {e}", i + 1)))?;
            let omega = s
                .task
                .ok_or_else(|| Error::Data(format!("dataset line {}: step has no task tag", i + 1)))?;
            TaskContext::new(omega).map_err(|e| Error::Data(format!("dataset line {}: {e}", i + 1)))?;
            records.push(ContextRecord {
                omega,
                trajectory: s.episode,
                step: s.counter,
                observation: s.observation,
                action: s.action,
                reward: s.reward,
            });
        }
        Ok(ContextualDataset { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Step;
    use proptest::prelude::*;

    fn traj(omega: f64, len: usize, salt: f64) -> Trajectory {
        Trajectory {
            task: TaskContext::new(omega).unwrap(),
            steps: (0..len)
                .map(|t| Step {
                    observation: vec![t as f64 / 40.0],
                    action: vec![salt + t as f64, -salt],
                    reward: -0.1 * t as f64,
                })
                .collect(),
            final_distance: omega,
        }
    }

    #[test]
    fn twenty_three_single_trajectories_give_920_records() {
        let trajs: Vec<Trajectory> = (0..23).map(|i| traj(7.0 + 0.5 * i as f64, 40, i as f64)).collect();
        let d = contextualize_and_aggregate(&trajs);
        assert_eq!(d.len(), 920);
        assert_eq!(d.contexts().len(), 23);
    }

    #[test]
    fn empty_input_gives_empty_dataset() {
        assert!(contextualize_and_aggregate(&[]).is_empty());
    }

    #[test]
    fn single_task_tags_every_record() {
        let d = contextualize_and_aggregate(&[traj(7.0, 40, 0.0), traj(7.0, 40, 1.0)]);
        assert!(d.records.iter().all(|r| r.omega == 7.0));
    }

    #[test]
    fn jsonl_round_trip() {
        let d = contextualize_and_aggregate(&[traj(9.5, 3, 0.25), traj(14.0, 2, -1.0)]);
        assert_eq!(ContextualDataset::from_jsonl(&d.to_jsonl().unwrap()).unwrap(), d);
    }

    #[test]
    fn missing_task_tag_is_a_data_error() {
        let line = r#"{"episode":0,"counter":0,"observation":[0.0],"action":[0.1],"reward":0.0}"#;
        assert!(matches!(ContextualDataset::from_jsonl(line), Err(Error::Data(_))));
        let null = r#"{"episode":0,"task":null,"counter":0,"observation":[0.0],"action":[0.1],"reward":0.0}"#;
        assert!(matches!(ContextualDataset::from_jsonl(null), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn aggregation_is_lossless(
            tasks in prop::collection::vec((7.0f64..=18.0, 1usize..6, -2.0f64..2.0), 0..8),
        ) {
            let trajs: Vec<Trajectory> = tasks.iter().map(|&(w, n, s)| traj(w, n, s)).collect();
            let d = contextualize_and_aggregate(&trajs);
            prop_assert_eq!(d.len(), trajs.iter().map(|t| t.steps.len()).sum::<usize>());
            let mut it = d.records.iter();
            for (id, t) in trajs.iter().enumerate() {
                for (k, s) in t.steps.iter().enumerate() {
                    let r = it.next().unwrap();
                    prop_assert_eq!(r.omega, t.task.target_distance());
                    prop_assert_eq!((r.trajectory, r.step), (id, k));
                    prop_assert_eq!(&r.observation, &s.observation);
                    prop_assert_eq!(&r.action, &s.action);
                }
            }
            prop_assert!(it.next().is_none());
        }
    }
}
