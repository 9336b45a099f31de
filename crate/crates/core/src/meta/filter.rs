//! Policy filtering: evaluate a meta-policy under nearby contexts on the test
//! task and keep the context with the lowest online error.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::train::MetaPolicy;
use crate::env::{ActionPlan, EnvConfig, TaskContext, MAX_TARGET, MIN_TARGET};
use crate::error::{Error, Result};
use crate::eval::kick_errors;
use crate::par::Exec;
use crate::seed;

/// Evenly spaced targets `i / per_meter` within `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub lo: f64,
    pub hi: f64,
    pub per_meter: u32,
}

impl GridSpec {
    pub fn points(&self) -> Vec<f64> {
        lattice(self.lo, self.hi, self.per_meter)
    }
}

/// Lattice points `i / per_meter` in `[lo, hi]`, built from integers so
/// coarser lattices are exact subsets of finer ones.
fn lattice(lo: f64, hi: f64, per_meter: u32) -> Vec<f64> {
    let d = per_meter as f64;
    let first = (lo * d - 1e-9).ceil() as i64;
    let last = (hi * d + 1e-9).floor() as i64;
    (first..=last).map(|i| i as f64 / d).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskGrids {
    pub meta_train: GridSpec,
    pub meta_test: GridSpec,
    /// Candidate lattice resolution in normal mode (points per meter).
    pub normal_per_meter: u32,
    pub high_rate_per_meter: u32,
}

impl Default for TaskGrids {
    fn default() -> Self {
        TaskGrids {
            meta_train: GridSpec {
                lo: MIN_TARGET,
                hi: MAX_TARGET,
                per_meter: 2,
            },
            meta_test: GridSpec {
                lo: MIN_TARGET,
                hi: MAX_TARGET,
                per_meter: 10,
            },
            normal_per_meter: 10,
            high_rate_per_meter: 100,
        }
    }
}

impl TaskGrids {
    pub fn validate(&self) -> Result<()> {
        for g in [&self.meta_train, &self.meta_test] {
            if g.per_meter == 0 || !(MIN_TARGET..=MAX_TARGET).contains(&g.lo) || !(g.lo..=MAX_TARGET).contains(&g.hi) {
                return Err(Error::Config(format!("grid {g:?} must lie inside [7, 18]")));
            }
        }
        if self.normal_per_meter == 0 || self.high_rate_per_meter == 0 {
            return Err(Error::Config("candidate resolutions must be positive".into()));
        }
        Ok(())
    }

    pub fn meta_train_tasks(&self) -> Result<Vec<TaskContext>> {
        self.meta_train.points().into_iter().map(TaskContext::new).collect()
    }

    pub fn meta_test_tasks(&self) -> Result<Vec<TaskContext>> {
        self.meta_test.points().into_iter().map(TaskContext::new).collect()
    }

    pub fn spacing(&self, mode: SampleRate) -> f64 {
        1.0 / self.per_meter(mode) as f64
    }

    fn per_meter(&self, mode: SampleRate) -> u32 {
        match mode {
            SampleRate::Normal => self.normal_per_meter,
            SampleRate::HighRate => self.high_rate_per_meter,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleRate {
    Normal,
    HighRate,
}

/// Where candidate contexts come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateScope {
    /// Lattice points within `radius` of the test target.
    Neighborhood,
    /// The whole task interval, regardless of the radius.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub mode: SampleRate,
    pub radius: f64,
    /// Evaluation episodes per candidate.
    pub episodes: usize,
    pub scope: CandidateScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode: SampleRate::Normal,
            radius: 1.0,
            episodes: 3,
            scope: CandidateScope::Neighborhood,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 || !self.radius.is_finite() {
            return Err(Error::Config("filter: episodes must be positive and radius finite".into()));
        }
        Ok(())
    }
}

/// The test target plus every lattice point within `radius`, clipped to the
/// task interval, sorted and deduplicated. A non-positive radius yields only
/// the test target.
pub fn sample_candidate_contexts(test: TaskContext, grids: &TaskGrids, mode: SampleRate, radius: f64) -> Vec<f64> {
    neighborhood(test, grids, mode, radius, CandidateScope::Neighborhood)
}

fn neighborhood(test: TaskContext, grids: &TaskGrids, mode: SampleRate, radius: f64, scope: CandidateScope) -> Vec<f64> {
    let omega = test.target_distance();
    let mut out = vec![omega];
    let (lo, hi) = match scope {
        CandidateScope::Global => (MIN_TARGET, MAX_TARGET),
        CandidateScope::Neighborhood if radius > 0.0 => ((omega - radius).max(MIN_TARGET), (omega + radius).min(MAX_TARGET)),
        CandidateScope::Neighborhood => return out,
    };
    out.extend(lattice(lo, hi, grids.per_meter(mode)));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Mean absolute landing error of `plan` over `episodes` noisy executions on `test`.
pub fn evaluate_candidate(env_cfg: &EnvConfig, plan: &ActionPlan, test: TaskContext, episodes: usize, seed: u64) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::Config("candidate evaluation needs at least one episode".into()));
    }
    let errors = kick_errors(env_cfg, plan, test, episodes, seed)?;
    Ok(errors.iter().sum::<f64>() / episodes as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateLoss {
    pub model: usize,
    pub context: f64,
    pub loss: f64,
}

/// Outcome of filtering one test task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub omega: f64,
    pub candidates: Vec<CandidateLoss>,
    pub selected: CandidateLoss,
}

/// Lowest loss; ties go to the context nearest `omega`, then the lower
/// context, then the lower model index.
pub fn select(candidates: &[CandidateLoss], omega: f64) -> Option<CandidateLoss> {
    candidates.iter().copied().min_by(|a, b| {
        a.loss
            .total_cmp(&b.loss)
            .then((a.context - omega).abs().total_cmp(&(b.context - omega).abs()))
            .then(a.context.total_cmp(&b.context))
            .then(a.model.cmp(&b.model))
    })
}

impl FilterReport {
    pub fn from_candidates(omega: f64, candidates: Vec<CandidateLoss>) -> Result<Self> {
        let selected =
            select(&candidates, omega).ok_or_else(|| Error::Data(format!("no candidates evaluated for {omega} m")))?;
        Ok(FilterReport {
            omega,
            candidates,
            selected,
        })
    }

    /// Loss of `model` conditioned on the test target itself.
    pub fn central_loss(&self, model: usize) -> Option<f64> {
        self.candidates
            .iter()
            .find(|c| c.model == model && c.context == self.omega)
            .map(|c| c.loss)
    }

    /// Selection restricted to one model's candidates.
    pub fn model_selection(&self, model: usize) -> Option<CandidateLoss> {
        let own: Vec<CandidateLoss> = self.candidates.iter().copied().filter(|c| c.model == model).collect();
        select(&own, self.omega)
    }
}

/// Precomputed plans for every `(model, context)` pair a sweep may need.
pub struct PlanBook {
    plans: HashMap<(usize, u64), ActionPlan>,
}

/// Contexts per batched forward pass.
const CONTEXTS_PER_PASS: usize = 64;

impl PlanBook {
    pub fn build(models: &[&MetaPolicy], contexts: &[f64], env_cfg: &EnvConfig, exec: Exec) -> Result<Self> {
        let mut uniq = contexts.to_vec();
        uniq.sort_by(f64::total_cmp);
        uniq.dedup();
        let jobs: Vec<(usize, &[f64])> = (0..models.len())
            .flat_map(|m| uniq.chunks(CONTEXTS_PER_PASS).map(move |c| (m, c)))
            .collect();
        let outs = exec.map(&jobs, |&(m, ctx)| models[m].plans(env_cfg, ctx));
        let mut plans = HashMap::new();
        for ((m, ctx), out) in jobs.iter().zip(outs) {
            for (&c, p) in ctx.iter().zip(out?) {
                plans.insert((*m, seed::omega_tag(c)), p);
            }
        }
        Ok(PlanBook { plans })
    }

    pub fn get(&self, model: usize, context: f64) -> Option<&ActionPlan> {
        self.plans.get(&(model, seed::omega_tag(context)))
    }
}

fn filter_task(
    book: &PlanBook,
    n_models: usize,
    test: TaskContext,
    contexts: &[f64],
    cfg: &FilterConfig,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<FilterReport> {
    let mut candidates = Vec::with_capacity(n_models * contexts.len());
    for model in 0..n_models {
        for &context in contexts {
            let plan = book
                .get(model, context)
                .ok_or_else(|| Error::Data(format!("no plan for model {model} at {context} m")))?;
            let loss = evaluate_candidate(env_cfg, plan, test, cfg.episodes, seed)?;
            candidates.push(CandidateLoss { model, context, loss });
        }
    }
    FilterReport::from_candidates(test.target_distance(), candidates)
}

/// Candidate contexts for `test` under `cfg`.
pub fn candidates_for(test: TaskContext, grids: &TaskGrids, cfg: &FilterConfig) -> Vec<f64> {
    neighborhood(test, grids, cfg.mode, cfg.radius, cfg.scope)
}

/// Filters every test task with all `models` as one ensemble.
///
/// Every candidate of a task is scored on the same episode seeds, which are
/// derived from `seed` and the test target only.
pub fn filter_sweep(
    models: &[&MetaPolicy],
    tests: &[TaskContext],
    grids: &TaskGrids,
    cfg: &FilterConfig,
    env_cfg: &EnvConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<FilterReport>> {
    cfg.validate()?;
    if models.is_empty() {
        return Err(Error::Config("policy filtering needs at least one model".into()));
    }
    let per_task: Vec<Vec<f64>> = tests.iter().map(|&t| candidates_for(t, grids, cfg)).collect();
    let all: Vec<f64> = per_task.iter().flatten().copied().collect();
    let book = PlanBook::build(models, &all, env_cfg, exec)?;
    let idx: Vec<usize> = (0..tests.len()).collect();
    exec.map(&idx, |&i| filter_task(&book, models.len(), tests[i], &per_task[i], cfg, env_cfg, seed))
        .into_iter()
        .collect()
}

/// Filters a single test task.
pub fn policy_filter(
    models: &[&MetaPolicy],
    test: TaskContext,
    grids: &TaskGrids,
    cfg: &FilterConfig,
    env_cfg: &EnvConfig,
    seed: u64,
) -> Result<FilterReport> {
    Ok(filter_sweep(models, &[test], grids, cfg, env_cfg, seed, Exec::Sequential)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Dense, GaussianPolicy, Mlp, MlpSpec};
    use ndarray::{array, Array1, Array2};

    fn grids() -> TaskGrids {
        TaskGrids::default()
    }

    #[test]
    fn default_grid_sizes() {
        let g = grids();
        assert_eq!(g.meta_train.points().len(), 23);
        assert_eq!(g.meta_test.points().len(), 111);
        assert_eq!(g.meta_test.points()[0], 7.0);
        assert_eq!(*g.meta_test.points().last().unwrap(), 18.0);
    }

    #[test]
    fn coarse_grids_are_exact_subsets_of_fine_ones() {
        let fine = lattice(7.0, 18.0, 100);
        for p in lattice(7.0, 18.0, 10) {
            assert!(fine.contains(&p), "{p}");
        }
    }

    #[test]
    fn zero_radius_keeps_only_the_center() {
        let t = TaskContext::new(12.05).unwrap();
        assert_eq!(sample_candidate_contexts(t, &grids(), SampleRate::Normal, 0.0), vec![12.05]);
        assert_eq!(sample_candidate_contexts(t, &grids(), SampleRate::Normal, -1.0), vec![12.05]);
    }

    #[test]
    fn unit_radius_normal_has_21_lattice_points() {
        let t = TaskContext::new(12.0).unwrap();
        let c = sample_candidate_contexts(t, &grids(), SampleRate::Normal, 1.0);
        // the center is itself a lattice point
        assert_eq!(c.len(), 21);
        assert!(c.iter().all(|&x| (11.0..=13.0).contains(&x)));
        let off = sample_candidate_contexts(TaskContext::new(12.05).unwrap(), &grids(), SampleRate::Normal, 1.0);
        assert_eq!(off.len(), 21);
        assert!(off.contains(&12.05));
    }

    #[test]
    fn candidates_clipped_to_interval() {
        let c = sample_candidate_contexts(TaskContext::new(7.05).unwrap(), &grids(), SampleRate::Normal, 1.0);
        assert!(c.iter().all(|&x| x >= 7.0));
        assert_eq!(c[0], 7.0);
    }

    #[test]
    fn high_rate_is_a_superset() {
        let t = TaskContext::new(15.3).unwrap();
        let n = sample_candidate_contexts(t, &grids(), SampleRate::Normal, 0.5);
        let h = sample_candidate_contexts(t, &grids(), SampleRate::HighRate, 0.5);
        assert_eq!(h.len(), 101);
        assert!(n.iter().all(|x| h.contains(x)));
    }

    #[test]
    fn global_scope_covers_the_interval() {
        let cfg = FilterConfig {
            scope: CandidateScope::Global,
            ..FilterConfig::default()
        };
        let c = candidates_for(TaskContext::new(12.34).unwrap(), &grids(), &cfg);
        assert_eq!(c.len(), 112);
    }

    #[test]
    fn argmin_and_tie_break() {
        let c = |model, context, loss| CandidateLoss { model, context, loss };
        let picked = select(&[c(0, 11.0, 0.9), c(0, 12.0, 0.2), c(0, 13.0, 0.4)], 12.0).unwrap();
        assert_eq!(picked.context, 12.0);
        let tie = select(&[c(0, 11.5, 0.3), c(0, 12.3, 0.3), c(0, 11.6, 0.3)], 12.0).unwrap();
        assert_eq!(tie.context, 12.3);
        let sym = select(&[c(0, 12.5, 0.3), c(0, 11.5, 0.3)], 12.0).unwrap();
        assert_eq!(sym.context, 11.5);
        let models = select(&[c(1, 12.0, 0.3), c(0, 12.0, 0.3)], 12.0).unwrap();
        assert_eq!(models.model, 0);
        let ens = select(&[c(0, 11.9, 0.3), c(1, 12.1, 0.5)], 12.0).unwrap();
        assert_eq!(ens.model, 0);
    }

    /// Meta-policy with a constant action level that ignores its inputs.
    fn constant(level: f64) -> MetaPolicy {
        let spec = MlpSpec::tanh(2, &[], 6);
        let layer = Dense {
            weight: Array2::zeros((2, 6)),
            bias: Array1::from_elem(6, level),
        };
        MetaPolicy::new(GaussianPolicy {
            mean: Mlp::from_layers(spec, vec![layer]).unwrap(),
            log_std: Array1::zeros(6),
        })
        .unwrap()
    }

    /// Meta-policy whose kick distance increases with the context input.
    fn contextual() -> MetaPolicy {
        let spec = MlpSpec::tanh(2, &[], 6);
        let layer = Dense {
            weight: array![[0.0; 6], [0.2; 6]],
            bias: Array1::from_elem(6, 0.05),
        };
        MetaPolicy::new(GaussianPolicy {
            mean: Mlp::from_layers(spec, vec![layer]).unwrap(),
            log_std: Array1::zeros(6),
        })
        .unwrap()
    }

    #[test]
    fn noiseless_loss_ignores_episode_count() {
        let env_cfg = EnvConfig::default().with_noise(0.0);
        let plan = contextual().plan(&env_cfg, 10.0).unwrap();
        let t = TaskContext::new(11.0).unwrap();
        let a = evaluate_candidate(&env_cfg, &plan, t, 1, 3).unwrap();
        let b = evaluate_candidate(&env_cfg, &plan, t, 7, 99).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn exact_candidate_has_zero_loss() {
        let env_cfg = EnvConfig::default().with_noise(0.0);
        let plan = crate::env::reference_plan(&env_cfg, 13.0).unwrap();
        let loss = evaluate_candidate(&env_cfg, &plan, TaskContext::new(13.0).unwrap(), 4, 0).unwrap();
        assert!(loss < 1e-9);
    }

    #[test]
    fn loss_is_the_mean_of_episode_errors() {
        let env_cfg = EnvConfig::default();
        let plan = contextual().plan(&env_cfg, 12.0).unwrap();
        let t = TaskContext::new(12.0).unwrap();
        let mut env = crate::env::KickEnv::new(env_cfg.clone()).unwrap();
        let by_hand: f64 = (0..5)
            .map(|e| (env.plan_distance(t, crate::eval::episode_seed(42, 12.0, e), &plan).unwrap() - 12.0).abs())
            .sum::<f64>()
            / 5.0;
        assert_eq!(evaluate_candidate(&env_cfg, &plan, t, 5, 42).unwrap(), by_hand);
    }

    #[test]
    fn radius_zero_single_model_selects_center() {
        let env_cfg = EnvConfig::default();
        let m = contextual();
        let cfg = FilterConfig {
            radius: 0.0,
            ..FilterConfig::default()
        };
        let t = TaskContext::new(9.3).unwrap();
        let r = policy_filter(&[&m], t, &grids(), &cfg, &env_cfg, 5).unwrap();
        assert_eq!(r.candidates.len(), 1);
        assert_eq!(r.selected.context, 9.3);
        let plan = m.plan(&env_cfg, 9.3).unwrap();
        assert_eq!(r.selected.loss, evaluate_candidate(&env_cfg, &plan, t, 3, 5).unwrap());
    }

    #[test]
    fn filtering_dominates_center_and_ensembles_dominate_members() {
        let env_cfg = EnvConfig::default();
        let a = contextual();
        let b = constant(0.09);
        let cfg = FilterConfig::default();
        let tests: Vec<TaskContext> = [7.4, 10.0, 12.7, 16.1].iter().map(|&w| TaskContext::new(w).unwrap()).collect();
        let solo_a = filter_sweep(&[&a], &tests, &grids(), &cfg, &env_cfg, 1, Exec::Sequential).unwrap();
        let solo_b = filter_sweep(&[&b], &tests, &grids(), &cfg, &env_cfg, 1, Exec::Sequential).unwrap();
        let ens = filter_sweep(&[&a, &b], &tests, &grids(), &cfg, &env_cfg, 1, Exec::default()).unwrap();
        let high = FilterConfig {
            mode: SampleRate::HighRate,
            ..cfg.clone()
        };
        let fine = filter_sweep(&[&a], &tests, &grids(), &high, &env_cfg, 1, Exec::default()).unwrap();
        for i in 0..tests.len() {
            assert!(solo_a[i].selected.loss <= solo_a[i].central_loss(0).unwrap());
            assert!(ens[i].selected.loss <= solo_a[i].selected.loss.min(solo_b[i].selected.loss));
            assert_eq!(ens[i].model_selection(0), Some(solo_a[i].selected));
            assert!(fine[i].selected.loss <= solo_a[i].selected.loss);
        }
    }
}
