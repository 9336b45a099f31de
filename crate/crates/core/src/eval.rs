//! Kick statistics, bootstrap bands, generalization sweeps and model comparison.

use std::fmt::Write as _;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{ActionPlan, EnvConfig, KickEnv, TaskContext};
use crate::error::{Error, Result};
use crate::par::Exec;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Repetitions per task.
    pub repetitions: usize,
    /// A kick counts as accurate when its absolute error is at most this many meters.
    pub accuracy_threshold: f64,
    /// Tasks below this accuracy are left out of the footnote mean error.
    pub footnote_accuracy: f64,
    pub ci_confidence: f64,
    pub ci_resamples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            repetitions: 100,
            accuracy_threshold: 1.0,
            footnote_accuracy: 0.7,
            ci_confidence: 0.95,
            ci_resamples: 1000,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Config("eval: repetitions must be positive".into()));
        }
        if !(self.accuracy_threshold >= 0.0) || !(0.0..=1.0).contains(&self.footnote_accuracy) {
            return Err(Error::Config("eval: bad accuracy threshold".into()));
        }
        if !(self.ci_confidence > 0.0 && self.ci_confidence < 1.0) || self.ci_resamples == 0 {
            return Err(Error::Config("eval: bad bootstrap settings".into()));
        }
        Ok(())
    }
}

/// Per-task error statistics over repeated kicks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KickStats {
    pub omega: f64,
    pub n: usize,
    pub accuracy: f64,
    pub mean_error: f64,
    /// Sample standard deviation of the errors (0 for a single kick).
    pub std_error: f64,
    /// `100 * mean_error / omega`.
    pub mean_relative_error: f64,
}

impl KickStats {
    pub fn from_errors(omega: f64, errors: &[f64], threshold: f64) -> Result<Self> {
        if errors.is_empty() {
            return Err(Error::Data(format!("no kicks recorded for {omega} m")));
        }
        let n = errors.len();
        let mean = errors.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let hits = errors.iter().filter(|&&e| e <= threshold).count();
        Ok(KickStats {
            omega,
            n,
            accuracy: hits as f64 / n as f64,
            mean_error: mean,
            std_error: std,
            mean_relative_error: 100.0 * mean / omega,
        })
    }
}

/// Seed of repetition `rep` of an evaluation on `omega`.
pub fn episode_seed(seed: u64, omega: f64, rep: usize) -> u64 {
    seed::derive(seed, &[seed::omega_tag(omega), rep as u64])
}

/// Absolute landing errors of `n` noisy executions of a deterministic plan.
pub fn kick_errors(env_cfg: &EnvConfig, plan: &ActionPlan, task: TaskContext, n: usize, seed: u64) -> Result<Vec<f64>> {
    let mut env = KickEnv::new(env_cfg.clone())?;
    let omega = task.target_distance();
    (0..n)
        .map(|rep| Ok((env.plan_distance(task, episode_seed(seed, omega, rep), plan)? - omega).abs()))
        .collect()
}

/// Runs `n` stochastic episodes of `plan` on `task` and summarizes the errors.
pub fn kick_statistics(
    env_cfg: &EnvConfig,
    plan: &ActionPlan,
    task: TaskContext,
    n: usize,
    seed: u64,
    threshold: f64,
) -> Result<KickStats> {
    let errors = kick_errors(env_cfg, plan, task, n, seed)?;
    KickStats::from_errors(task.target_distance(), &errors, threshold)
}

/// Percentile bootstrap band for the mean of `samples`.
///
/// The band is widened, if needed, to contain the sample mean itself.
pub fn bootstrap_ci(samples: &[f64], confidence: f64, resamples: usize, seed: u64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::Data("bootstrap over an empty sample".into()));
    }
    if !(confidence > 0.0 && confidence < 1.0) || resamples == 0 {
        return Err(Error::Config("bootstrap confidence must be in (0, 1) with resamples > 0".into()));
    }
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let mut rng = seed::rng(seed);
    let mut means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| samples[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    means.sort_by(f64::total_cmp);
    let tail = (1.0 - confidence) / 2.0;
    let low = quantile(&means, tail);
    let high = quantile(&means, 1.0 - tail);
    Ok((low.min(mean), high.max(mean)))
}

/// Linear interpolation between order statistics of a sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Per-task statistics over a grid, rows sorted by target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<KickStats>,
}

pub const SWEEP_CSV_HEADER: &str = "omega,n,accuracy,mean_error,std_error,rel_error_pct";

impl SweepReport {
    pub fn new(mut rows: Vec<KickStats>) -> Self {
        rows.sort_by(|a, b| a.omega.total_cmp(&b.omega));
        SweepReport { rows }
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.omega).collect()
    }

    fn mean_of(&self, f: impl Fn(&KickStats) -> f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().map(f).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.mean_of(|r| r.accuracy)
    }

    /// Mean over tasks of the per-task mean error.
    pub fn mean_error(&self) -> f64 {
        self.mean_of(|r| r.mean_error)
    }

    /// Mean over tasks of the per-task error standard deviation.
    pub fn mean_std_error(&self) -> f64 {
        self.mean_of(|r| r.std_error)
    }

    /// Spread of the per-task mean errors across the grid.
    pub fn across_task_std(&self) -> f64 {
        let m = self.mean_error();
        if self.rows.len() < 2 {
            return 0.0;
        }
        (self.rows.iter().map(|r| (r.mean_error - m).powi(2)).sum::<f64>() / (self.rows.len() - 1) as f64).sqrt()
    }

    pub fn mean_relative_error(&self) -> f64 {
        self.mean_of(|r| r.mean_relative_error)
    }

    /// Fraction of tasks whose accuracy exceeds `min_accuracy`.
    pub fn fraction_above(&self, min_accuracy: f64) -> f64 {
        if self.rows.is_empty() {
            return f64::NAN;
        }
        self.rows.iter().filter(|r| r.accuracy > min_accuracy).count() as f64 / self.rows.len() as f64
    }

    /// Mean error restricted to tasks with accuracy above `min_accuracy`.
    pub fn footnote_mean_error(&self, min_accuracy: f64) -> Option<f64> {
        let kept: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.accuracy > min_accuracy)
            .map(|r| r.mean_error)
            .collect();
        (!kept.is_empty()).then(|| kept.iter().sum::<f64>() / kept.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(SWEEP_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            // `{}` prints the shortest representation that parses back exactly
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.omega, r.n, r.accuracy, r.mean_error, r.std_error, r.mean_relative_error
            );
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some(SWEEP_CSV_HEADER) {
            return Err(Error::Data("sweep csv: missing or unexpected header".into()));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 6 {
                return Err(Error::Data(format!("sweep csv line {}: expected 6 columns", i + 2)));
            }
            let num = |j: usize| -> Result<f64> {
                cols[j]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("sweep csv line {}: bad number {:?}", i + 2, cols[j])))
            };
            rows.push(KickStats {
                omega: num(0)?,
                n: cols[1]
                    .trim()
                    .parse()
                    .map_err(|_| Error::Data(format!("sweep csv line {}: bad count", i + 2)))?,
                accuracy: num(2)?,
                mean_error: num(3)?,
                std_error: num(4)?,
                mean_relative_error: num(5)?,
            });
        }
        Ok(SweepReport::new(rows))
    }

    /// Aligned table with an aggregate footer.
    pub fn to_text(&self, footnote_accuracy: f64) -> String {
        let mut out = format!(
            "{:>8} {:>5} {:>9} {:>10} {:>10} {:>10}\n",
            "omega", "n", "accuracy", "error_m", "std_m", "rel_pct"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>8.2} {:>5} {:>9.3} {:>10.4} {:>10.4} {:>10.3}",
                r.omega, r.n, r.accuracy, r.mean_error, r.std_error, r.mean_relative_error
            );
        }
        let _ = writeln!(
            out,
            "tasks={} mean_accuracy={:.4} mean_error={:.4} across_task_std={:.4} rel_error_pct={:.3} above_{footnote_accuracy}={:.3}",
            self.rows.len(),
            self.mean_accuracy(),
            self.mean_error(),
            self.across_task_std(),
            self.mean_relative_error(),
            self.fraction_above(footnote_accuracy),
        );
        if let Some(e) = self.footnote_mean_error(footnote_accuracy) {
            let _ = writeln!(out, "mean_error over tasks with accuracy > {footnote_accuracy}: {e:.4}");
        }
        out
    }
}

/// Evaluates one deterministic plan per task, `n` repetitions each.
pub fn generalization_sweep(
    env_cfg: &EnvConfig,
    plans: &[(TaskContext, ActionPlan)],
    n: usize,
    seed: u64,
    threshold: f64,
    exec: Exec,
) -> Result<SweepReport> {
    if plans.is_empty() {
        return Err(Error::Data("generalization sweep over an empty grid".into()));
    }
    let rows = exec.map(plans, |(task, plan)| kick_statistics(env_cfg, plan, *task, n, seed, threshold));
    Ok(SweepReport::new(rows.into_iter().collect::<Result<_>>()?))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub mean_accuracy: f64,
    pub mean_error: f64,
    pub across_task_std: f64,
    pub mean_relative_error: f64,
    /// Reduction of mean error relative to the first report (positive is better).
    pub improvement: f64,
}

/// A claim that one report should be no worse than another, task by task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominanceCheck {
    pub better: String,
    pub worse: String,
    /// Targets where `better` has the larger mean error.
    pub violations: Vec<f64>,
    pub aggregate_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub checks: Vec<DominanceCheck>,
}

/// Side-by-side summary of sweeps over the same grid.
///
/// `claims` lists `(better, worse)` index pairs whose per-task dominance is
/// checked and reported.
pub fn compare_models(reports: &[(String, SweepReport)], claims: &[(usize, usize)]) -> Result<Comparison> {
    if reports.len() < 2 {
        return Err(Error::Data("comparison needs at least two reports".into()));
    }
    let grid = reports[0].1.omegas();
    for (name, r) in &reports[1..] {
        if r.omegas() != grid {
            return Err(Error::Data(format!("report {name:?} covers a different task grid")));
        }
    }
    let base = reports[0].1.mean_error();
    let rows = reports
        .iter()
        .map(|(name, r)| ComparisonRow {
            name: name.clone(),
            mean_accuracy: r.mean_accuracy(),
            mean_error: r.mean_error(),
            across_task_std: r.across_task_std(),
            mean_relative_error: r.mean_relative_error(),
            improvement: base - r.mean_error(),
        })
        .collect();
    let mut checks = Vec::with_capacity(claims.len());
    for &(b, w) in claims {
        let (better, worse) = match (reports.get(b), reports.get(w)) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(Error::Data(format!("dominance claim ({b}, {w}) out of range"))),
        };
        let violations = better
            .1
            .rows
            .iter()
            .zip(&worse.1.rows)
            .filter(|(x, y)| x.mean_error > y.mean_error)
            .map(|(x, _)| x.omega)
            .collect();
        checks.push(DominanceCheck {
            better: better.0.clone(),
            worse: worse.0.clone(),
            violations,
            aggregate_holds: better.1.mean_error() <= worse.1.mean_error(),
        });
    }
    Ok(Comparison { rows, checks })
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,mean_accuracy,mean_error,across_task_std,rel_error_pct,improvement\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.name, r.mean_accuracy, r.mean_error, r.across_task_std, r.mean_relative_error, r.improvement
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        let mut out = format!(
            "{:<width$} {:>9} {:>10} {:>10} {:>9} {:>12}\n",
            "model", "accuracy", "error_m", "std_m", "rel_pct", "improvement"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$} {:>9.3} {:>10.4} {:>10.4} {:>9.3} {:>12.4}",
                r.name, r.mean_accuracy, r.mean_error, r.across_task_std, r.mean_relative_error, r.improvement
            );
        }
        for c in &self.checks {
            if c.violations.is_empty() {
                let _ = writeln!(out, "dominance {} <= {}: holds on every task", c.better, c.worse);
            } else {
                let _ = writeln!(
                    out,
                    "dominance {} <= {}: violated on {} task(s), aggregate {}",
                    c.better,
                    c.worse,
                    c.violations.len(),
                    if c.aggregate_holds { "holds" } else { "violated" }
                );
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::reference_plan;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn perfect_noiseless_kick() {
        let cfg = EnvConfig::default().with_noise(0.0);
        let plan = reference_plan(&cfg, 12.0).unwrap();
        let s = kick_statistics(&cfg, &plan, TaskContext::new(12.0).unwrap(), 20, 1, 1.0).unwrap();
        assert_eq!(s.accuracy, 1.0);
        assert!(s.mean_error < 1e-9);
    }

    #[test]
    fn single_kick_has_zero_spread() {
        let s = KickStats::from_errors(10.0, &[0.4], 1.0).unwrap();
        assert_eq!(s.std_error, 0.0);
        assert_eq!(s.n, 1);
    }

    #[test]
    fn injected_errors_match_hand_computation() {
        // 100 errors: 0.0, 0.02, ..., 1.98
        let errors: Vec<f64> = (0..100).map(|i| i as f64 * 0.02).collect();
        let s = KickStats::from_errors(11.0, &errors, 1.0).unwrap();
        // 0.00..=1.00 lands inside the threshold: 51 values
        assert_eq!(s.accuracy, 0.51);
        assert!((s.mean_error - 0.99).abs() < 1e-12);
        let var: f64 = errors.iter().map(|e| (e - 0.99f64).powi(2)).sum::<f64>() / 99.0;
        assert!((s.std_error - var.sqrt()).abs() < 1e-12);
        assert!((s.mean_relative_error - 9.0).abs() < 1e-12);
    }

    #[test]
    fn empty_errors_rejected() {
        assert!(KickStats::from_errors(9.0, &[], 1.0).is_err());
    }

    #[test]
    fn identical_samples_give_zero_width() {
        assert_eq!(bootstrap_ci(&[2.5; 6], 0.95, 500, 3).unwrap(), (2.5, 2.5));
    }

    #[test]
    fn two_point_band_is_bounded_and_covers_midpoint() {
        let (lo, hi) = bootstrap_ci(&[0.0, 10.0], 0.95, 5000, 4).unwrap();
        assert!((0.0..=5.0).contains(&lo) && (5.0..=10.0).contains(&hi));
    }

    #[test]
    fn bootstrap_matches_brute_force_resampling() {
        let samples = [1.0, 2.0, 3.0];
        let (lo, hi) = bootstrap_ci(&samples, 0.95, 200, 77).unwrap();
        let mut rng = seed::rng(77);
        let mut means = Vec::new();
        for _ in 0..200 {
            let mut s = 0.0;
            for _ in 0..3 {
                s += samples[rng.random_range(0..3usize)];
            }
            means.push(s / 3.0);
        }
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pick = |q: f64| {
            let p = q * 199.0;
            let (a, b) = (means[p.floor() as usize], means[p.ceil() as usize]);
            a + (b - a) * p.fract()
        };
        assert_eq!((lo, hi), (pick(0.025).min(2.0), pick(0.975).max(2.0)));
    }

    #[test]
    fn empty_bootstrap_is_an_error() {
        assert!(bootstrap_ci(&[], 0.95, 100, 0).is_err());
    }

    fn sample_report() -> SweepReport {
        SweepReport::new(vec![
            KickStats::from_errors(8.0, &[0.1, 0.3, 1.7], 1.0).unwrap(),
            KickStats::from_errors(7.0, &[0.5], 1.0).unwrap(),
            KickStats::from_errors(9.1, &[0.0, 2.0], 1.0).unwrap(),
        ])
    }

    #[test]
    fn csv_round_trip_preserves_aggregates() {
        let r = sample_report();
        let back = SweepReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.mean_error(), r.mean_error());
        assert_eq!(back.omegas(), vec![7.0, 8.0, 9.1]);
    }

    #[test]
    fn single_task_aggregate_equals_its_row() {
        let r = SweepReport::new(vec![KickStats::from_errors(12.0, &[0.2, 0.4], 1.0).unwrap()]);
        assert_eq!(r.mean_error(), r.rows[0].mean_error);
        assert_eq!(r.mean_accuracy(), r.rows[0].accuracy);
    }

    #[test]
    fn footnote_mean_skips_inaccurate_tasks() {
        let r = sample_report();
        // accuracies: 7.0 -> 1, 8.0 -> 2/3, 9.1 -> 1/2
        assert_eq!(r.footnote_mean_error(0.7), Some(0.5));
        assert_eq!(r.footnote_mean_error(1.0), None);
        assert!((r.fraction_above(0.6) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn comparison_reports_improvement() {
        let a = SweepReport::new(vec![KickStats::from_errors(10.0, &[0.72], 1.0).unwrap()]);
        let b = SweepReport::new(vec![KickStats::from_errors(10.0, &[0.45], 1.0).unwrap()]);
        let c = compare_models(&[("meta".into(), a.clone()), ("filtered".into(), b)], &[(1, 0)]).unwrap();
        assert!((c.rows[1].improvement - 0.27).abs() < 1e-12);
        assert!(c.checks[0].violations.is_empty() && c.checks[0].aggregate_holds);
        let same = compare_models(&[("x".into(), a.clone()), ("y".into(), a)], &[]).unwrap();
        assert_eq!(same.rows[1].improvement, 0.0);
    }

    #[test]
    fn comparison_rejects_mismatched_grids() {
        let a = SweepReport::new(vec![KickStats::from_errors(10.0, &[0.7], 1.0).unwrap()]);
        let b = SweepReport::new(vec![KickStats::from_errors(10.5, &[0.7], 1.0).unwrap()]);
        assert!(compare_models(&[("a".into(), a.clone()), ("b".into(), b)], &[]).is_err());
        assert!(compare_models(&[("a".into(), a)], &[]).is_err());
    }

    proptest! {
        #[test]
        fn band_contains_the_mean(samples in prop::collection::vec(-50.0f64..50.0, 1..30), seed in any::<u64>()) {
            let (lo, hi) = bootstrap_ci(&samples, 0.95, 200, seed).unwrap();
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            prop_assert!(lo <= mean && mean <= hi);
        }

        #[test]
        fn accuracy_monotone_in_threshold(
            errors in prop::collection::vec(0.0f64..5.0, 1..50),
            t1 in 0.0f64..5.0,
            dt in 0.0f64..5.0,
        ) {
            let a = KickStats::from_errors(10.0, &errors, t1).unwrap().accuracy;
            let b = KickStats::from_errors(10.0, &errors, t1 + dt).unwrap().accuracy;
            prop_assert!(a <= b);
            prop_assert_eq!(KickStats::from_errors(10.0, &errors, f64::INFINITY).unwrap().accuracy, 1.0);
        }

        #[test]
        fn relative_error_identity(omega in 7.0f64..=18.0, errors in prop::collection::vec(0.0f64..3.0, 1..20)) {
            let s = KickStats::from_errors(omega, &errors, 1.0).unwrap();
            prop_assert!((s.mean_relative_error * omega / 100.0 - s.mean_error).abs() < 1e-12);
        }
    }
}
