//! Synthetic parameterized kick environment.
//!
//! An episode runs for `horizon` steps. Actions taken before `contact_step`
//! are folded into a scalar launch drive through a fixed smooth kernel; at
//! contact the ball is launched to `gain * softplus(drive) * (1 + eps)` meters
//! and travels there linearly over `flight_steps` steps, then rests. Reward is
//! zero until contact and `-reward_scale * |ball - target|` afterwards.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const MIN_TARGET: f64 = 7.0;
pub const MAX_TARGET: f64 = 18.0;
pub const BALL_START: f64 = 0.2;

/// Kick target distance in meters, the task context.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct TaskContext(f64);

impl TaskContext {
    pub fn new(target_distance: f64) -> Result<Self> {
        if (MIN_TARGET..=MAX_TARGET).contains(&target_distance) {
            Ok(TaskContext(target_distance))
        } else {
            Err(Error::Range(target_distance))
        }
    }

    pub fn target_distance(self) -> f64 {
        self.0
    }

    /// Context scaled to [0, 1] over the task interval.
    pub fn normalized(self) -> f64 {
        (self.0 - MIN_TARGET) / (MAX_TARGET - MIN_TARGET)
    }
}

impl TryFrom<f64> for TaskContext {
    type Error = Error;
    fn try_from(v: f64) -> Result<Self> {
        TaskContext::new(v)
    }
}

impl From<TaskContext> for f64 {
    fn from(t: TaskContext) -> f64 {
        t.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub contact_step: usize,
    pub flight_steps: usize,
    pub action_dim: usize,
    pub noise_std: f64,
    pub reward_scale: f64,
    pub distance_gain: f64,
    /// L1 mass of the launch kernel.
    pub kernel_mass: f64,
    /// Soft saturation level of the launch drive.
    pub drive_cap: f64,
    pub rng_seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            horizon: 40,
            contact_step: 25,
            flight_steps: 5,
            action_dim: 6,
            noise_std: 0.02,
            reward_scale: 0.1,
            distance_gain: 7.0,
            kernel_mass: 10.0,
            drive_cap: 6.0,
            rng_seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.horizon == 0 || self.action_dim == 0 || self.flight_steps == 0 {
            return bad("horizon, action_dim and flight_steps must be positive");
        }
        if self.contact_step == 0 || self.contact_step >= self.horizon {
            return bad("contact_step must lie in [1, horizon)");
        }
        if !(self.noise_std >= 0.0) || !(self.reward_scale > 0.0) || !(self.distance_gain > 0.0) {
            return bad("noise_std >= 0, reward_scale > 0 and distance_gain > 0 required");
        }
        if !(self.kernel_mass > 0.0) || !(self.drive_cap > 0.0) {
            return bad("kernel_mass and drive_cap must be positive");
        }
        Ok(())
    }

    pub fn with_noise(mut self, noise_std: f64) -> Self {
        self.noise_std = noise_std;
        self
    }

    /// Smooth, strictly increasing squashing of the drive into `(-drive_cap, drive_cap)`.
    pub fn saturate(&self, drive: f64) -> f64 {
        self.drive_cap * (drive / self.drive_cap).tanh()
    }

    /// Largest distance the ball can ever be reported at.
    pub fn distance_cap(&self) -> f64 {
        2.0 * self.distance_gain * softplus(self.drive_cap)
    }

    /// Lower bound of any single-step reward.
    pub fn reward_floor(&self) -> f64 {
        -self.reward_scale * self.distance_cap().max(MAX_TARGET)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub counter: usize,
    pub ball_position: f64,
    pub launched: bool,
    pub final_distance: Option<f64>,
    /// Kernel-weighted sum of the pre-contact actions so far.
    pub drive: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub observation: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub task: TaskContext,
    pub steps: Vec<Step>,
    pub final_distance: f64,
}

impl Trajectory {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Deterministic action sequence, one row per counter value.
pub type ActionPlan = Array2<f64>;

#[derive(Debug, Clone)]
pub struct KickEnv {
    config: EnvConfig,
    kernel: Array2<f64>,
    task: Option<TaskContext>,
    state: EnvState,
    rng: ChaCha8Rng,
}

impl KickEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let kernel = launch_kernel(&config);
        Ok(KickEnv {
            kernel,
            task: None,
            state: initial_state(),
            rng: seed::rng(config.rng_seed),
            config,
        })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Launch kernel, `contact_step x action_dim`.
    pub fn kernel(&self) -> &Array2<f64> {
        &self.kernel
    }

    pub fn state(&self) -> &EnvState {
        &self.state
    }

    pub fn task(&self) -> Option<TaskContext> {
        self.task
    }

    pub fn reset(&mut self, task: TaskContext, seed: u64) -> Result<EnvState> {
        // re-validate in case the context was built by hand
        let task = TaskContext::new(task.target_distance())?;
        self.task = Some(task);
        self.state = initial_state();
        self.rng = seed::rng(seed::derive(self.config.rng_seed, &[seed]));
        Ok(self.state.clone())
    }

    pub fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        let task = self.task.ok_or(Error::Lifecycle("step before reset"))?;
        if self.state.counter >= self.config.horizon {
            return Err(Error::Lifecycle("step on a finished episode"));
        }
        if action.len() != self.config.action_dim {
            return Err(Error::shape(self.config.action_dim, action.len()));
        }
        let cfg = self.config.clone();
        let t = self.state.counter;
        let mut reward = 0.0;
        if t < cfg.contact_step {
            let k = self.kernel.row(t);
            self.state.drive += k.iter().zip(action).map(|(k, a)| k * a).sum::<f64>();
        }
        self.state.counter += 1;
        if self.state.counter == cfg.contact_step {
            let distance = self.launch(self.state.drive);
            self.state.launched = true;
            self.state.final_distance = Some(distance);
        } else if t >= cfg.contact_step {
            let f = self.state.final_distance.expect("launched state has a distance");
            let frac = ((t - cfg.contact_step + 1) as f64 / cfg.flight_steps as f64).min(1.0);
            self.state.ball_position = BALL_START + (f - BALL_START) * frac;
            reward = -cfg.reward_scale * (self.state.ball_position - task.target_distance()).abs();
        }
        Ok(StepResult {
            next_state: self.state.clone(),
            reward,
            done: self.state.counter == cfg.horizon,
        })
    }

    fn launch(&mut self, drive: f64) -> f64 {
        let cfg = &self.config;
        let drive = cfg.saturate(drive);
        let eps = if cfg.noise_std > 0.0 {
            Normal::new(0.0, cfg.noise_std)
                .expect("validated noise")
                .sample(&mut self.rng)
        } else {
            0.0
        };
        (cfg.distance_gain * softplus(drive) * (1.0 + eps).clamp(0.0, 2.0)).min(cfg.distance_cap())
    }

    /// Zero-noise landing distance of a full action plan.
    pub fn noiseless_distance(&self, plan: &ActionPlan) -> f64 {
        let c = self.config.contact_step;
        let drive: f64 = plan
            .rows()
            .into_iter()
            .take(c)
            .zip(self.kernel.rows())
            .map(|(a, k)| a.dot(&k))
            .sum();
        let drive = self.config.saturate(drive);
        self.config.distance_gain * softplus(drive)
    }

    pub fn observation(&self, state: &EnvState, task: TaskContext, include_context: bool) -> Vec<f64> {
        observation(&self.config, state.counter, task, include_context)
    }

    pub fn observation_dim(&self, include_context: bool) -> usize {
        1 + include_context as usize
    }

    /// Observations for every counter value of an episode.
    ///
    /// Observations depend only on the counter and the task, so a deterministic
    /// policy evaluated on these rows yields exactly the closed-loop actions.
    pub fn observation_schedule(&self, task: TaskContext, include_context: bool) -> Array2<f64> {
        let dim = self.observation_dim(include_context);
        Array2::from_shape_fn((self.config.horizon, dim), |(t, j)| {
            observation(&self.config, t, task, include_context)[j]
        })
    }

    /// Rolls out an episode with a closed-loop policy.
    pub fn rollout<F>(&mut self, task: TaskContext, seed: u64, include_context: bool, mut policy: F) -> Result<Trajectory>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        let mut state = self.reset(task, seed)?;
        let mut steps = Vec::with_capacity(self.config.horizon);
        loop {
            let observation = self.observation(&state, task, include_context);
            let action = policy(&observation);
            let res = self.step(&action)?;
            steps.push(Step {
                observation,
                action,
                reward: res.reward,
            });
            state = res.next_state;
            if res.done {
                break;
            }
        }
        Ok(Trajectory {
            task,
            steps,
            final_distance: state.final_distance.unwrap_or(state.ball_position),
        })
    }

    /// Replays an open-loop plan (`horizon x action_dim`).
    pub fn run_plan(&mut self, task: TaskContext, seed: u64, include_context: bool, plan: &ActionPlan) -> Result<Trajectory> {
        if plan.nrows() != self.config.horizon {
            return Err(Error::shape(self.config.horizon, plan.nrows()));
        }
        let mut t = 0;
        self.rollout(task, seed, include_context, |_| {
            let a = plan.row(t).to_vec();
            t += 1;
            a
        })
    }

    /// Final landing distance of a plan without recording the trajectory.
    pub fn plan_distance(&mut self, task: TaskContext, seed: u64, plan: &ActionPlan) -> Result<f64> {
        if plan.nrows() != self.config.horizon {
            return Err(Error::shape(self.config.horizon, plan.nrows()));
        }
        let mut state = self.reset(task, seed)?;
        for row in plan.rows() {
            let row = row.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| row.to_vec());
            state = self.step(&row)?.next_state;
        }
        Ok(state.final_distance.unwrap_or(state.ball_position))
    }
}

pub fn observation(config: &EnvConfig, counter: usize, task: TaskContext, include_context: bool) -> Vec<f64> {
    let progress = counter as f64 / config.horizon as f64;
    if include_context {
        vec![progress, task.normalized()]
    } else {
        vec![progress]
    }
}

fn initial_state() -> EnvState {
    EnvState {
        counter: 0,
        ball_position: BALL_START,
        launched: false,
        final_distance: None,
        drive: 0.0,
    }
}

/// Separable kernel: a half-sine bump over the wind-up steps times linearly
/// decreasing per-joint weights, scaled to total mass `kernel_mass`.
fn launch_kernel(config: &EnvConfig) -> Array2<f64> {
    let c = config.contact_step;
    let d = config.action_dim;
    let bump: Vec<f64> = (0..c)
        .map(|t| (std::f64::consts::PI * (t as f64 + 0.5) / c as f64).sin())
        .collect();
    let weights: Vec<f64> = (0..d).map(|j| (d - j) as f64).collect();
    let norm = bump.iter().sum::<f64>() * weights.iter().sum::<f64>();
    Array2::from_shape_fn((c, d), |(t, j)| config.kernel_mass * bump[t] * weights[j] / norm)
}

/// Scripted reference kick: a constant action on every joint that lands at
/// `target` in the zero-noise environment.
pub fn reference_plan(config: &EnvConfig, target: f64) -> Result<ActionPlan> {
    let y = target / config.distance_gain;
    if !(y > 0.0) {
        return Err(Error::Config(format!("reference target {target} not reachable")));
    }
    let squashed = softplus_inverse(y);
    if squashed.abs() >= config.drive_cap {
        return Err(Error::Config(format!("reference target {target} exceeds the drive cap")));
    }
    let drive = config.drive_cap * (squashed / config.drive_cap).atanh();
    // constant actions collect the full kernel mass
    let level = drive / config.kernel_mass;
    Ok(Array2::from_elem((config.horizon, config.action_dim), level))
}

/// Samples a uniformly random task from the interval.
pub fn sample_task<R: Rng>(rng: &mut R) -> TaskContext {
    TaskContext(rng.random_range(MIN_TARGET..=MAX_TARGET))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(noise: f64) -> KickEnv {
        KickEnv::new(EnvConfig::default().with_noise(noise)).unwrap()
    }

    fn t(x: f64) -> TaskContext {
        TaskContext::new(x).unwrap()
    }

    #[test]
    fn reset_places_ball() {
        let mut e = env(0.02);
        let s = e.reset(t(12.0), 0).unwrap();
        assert_eq!(s.counter, 0);
        assert_eq!(s.ball_position, 0.2);
        assert!(!s.launched);
    }

    #[test]
    fn out_of_range_task() {
        assert!(matches!(TaskContext::new(6.0), Err(Error::Range(_))));
        assert!(TaskContext::new(18.0).is_ok());
        assert!(TaskContext::new(f64::NAN).is_err());
    }

    #[test]
    fn pre_contact_rewards_are_zero_and_launch_flag_tracks_counter() {
        let mut e = env(0.02);
        e.reset(t(12.0), 3).unwrap();
        let cfg = e.config().clone();
        for _ in 0..cfg.horizon {
            let before = e.state().counter;
            let r = e.step(&[0.5; 6]).unwrap();
            if before < cfg.contact_step {
                assert_eq!(r.reward, 0.0);
            }
            assert_eq!(r.next_state.launched, r.next_state.counter >= cfg.contact_step);
            if !r.next_state.launched {
                assert_eq!(r.next_state.ball_position, BALL_START);
            }
            assert_eq!(r.done, r.next_state.counter == cfg.horizon);
        }
        assert!(matches!(e.step(&[0.0; 6]), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn dimension_mismatch() {
        let mut e = env(0.0);
        e.reset(t(12.0), 0).unwrap();
        assert!(matches!(e.step(&[0.0; 5]), Err(Error::Shape { expected: 6, got: 5 })));
    }

    #[test]
    fn reward_is_scaled_distance_after_contact() {
        let cfg = EnvConfig::default().with_noise(0.0);
        let mut e = KickEnv::new(cfg.clone()).unwrap();
        // lands at exactly 12 m, target 10 m: resting reward -0.1 * 2
        let plan = reference_plan(&cfg, 12.0).unwrap();
        let traj = e.run_plan(t(10.0), 0, false, &plan).unwrap();
        assert!((traj.final_distance - 12.0).abs() < 1e-9);
        let last = traj.steps.last().unwrap().reward;
        assert!((last - (-0.2)).abs() < 1e-9, "{last}");
        let traj = e.run_plan(t(12.0), 0, false, &plan).unwrap();
        assert!(traj.steps.last().unwrap().reward.abs() < 1e-9);
    }

    #[test]
    fn observation_bounds() {
        let cfg = EnvConfig::default();
        assert_eq!(observation(&cfg, 0, t(7.0), true), vec![0.0, 0.0]);
        assert_eq!(observation(&cfg, cfg.horizon, t(18.0), true), vec![1.0, 1.0]);
        assert_eq!(observation(&cfg, cfg.horizon / 2, t(9.0), false), vec![0.5]);
    }

    #[test]
    fn return_peaks_at_target() {
        let cfg = EnvConfig::default().with_noise(0.0);
        let mut e = KickEnv::new(cfg.clone()).unwrap();
        let ret = |e: &mut KickEnv, land: f64| {
            let plan = reference_plan(&cfg, land).unwrap();
            e.run_plan(t(12.0), 0, false, &plan).unwrap().total_return()
        };
        let at = ret(&mut e, 12.0);
        for land in [10.0, 11.5, 11.9, 12.1, 12.5, 14.0, 17.0] {
            assert!(ret(&mut e, land) < at, "landing at {land}");
        }
    }

    #[test]
    fn noiseless_distance_matches_episode() {
        let cfg = EnvConfig::default().with_noise(0.0);
        let mut e = KickEnv::new(cfg.clone()).unwrap();
        let plan = Array2::from_shape_fn((40, 6), |(i, j)| ((i * 7 + j) as f64 * 0.37).sin());
        let d = e.plan_distance(t(9.0), 4, &plan).unwrap();
        assert!((d - e.noiseless_distance(&plan)).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn constant(level: f64) -> ActionPlan {
            Array2::from_elem((40, 6), level)
        }

        proptest! {
            #[test]
            fn same_seed_same_trajectory(w in 7.0f64..=18.0, seed in any::<u64>(), level in -1.0f64..1.0) {
                let mut a = env(0.05);
                let mut b = env(0.05);
                let plan = constant(level);
                prop_assert_eq!(a.run_plan(t(w), seed, true, &plan).unwrap(), b.run_plan(t(w), seed, true, &plan).unwrap());
            }

            #[test]
            fn distance_grows_with_constant_action(lo in -1.0f64..1.0, delta in 0.0f64..1.0) {
                let e = env(0.0);
                prop_assert!(e.noiseless_distance(&constant(lo)) <= e.noiseless_distance(&constant(lo + delta)));
            }

            #[test]
            fn rewards_stay_within_bounds(w in 7.0f64..=18.0, seed in any::<u64>(), level in -3.0f64..3.0) {
                let mut e = env(0.3);
                let cfg = e.config().clone();
                let traj = e.run_plan(t(w), seed, false, &constant(level)).unwrap();
                for s in &traj.steps {
                    prop_assert!(s.reward <= 0.0 && s.reward >= cfg.reward_floor());
                }
            }

            #[test]
            fn every_target_is_reachable_without_noise(w in 7.0f64..=18.0) {
                // bisection over constant plans, independent of the closed-form reference
                let e = env(0.0);
                let (mut lo, mut hi) = (-2.0f64, 2.0f64);
                prop_assert!(e.noiseless_distance(&constant(lo)) < w && e.noiseless_distance(&constant(hi)) > w);
                for _ in 0..80 {
                    let mid = 0.5 * (lo + hi);
                    if e.noiseless_distance(&constant(mid)) < w { lo = mid } else { hi = mid }
                }
                prop_assert!((e.noiseless_distance(&constant(lo)) - w).abs() < 1e-6);
                let reference = reference_plan(e.config(), w).unwrap();
                prop_assert!((e.noiseless_distance(&reference) - w).abs() < 1e-6);
            }
        }
    }
}
