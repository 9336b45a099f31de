//! Behavior-cloning meta-training of a context-conditioned policy.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{ContextRecord, ContextualDataset};
use crate::env::{observation, ActionPlan, EnvConfig, TaskContext};
use crate::error::{Error, Result};
use crate::nn::{Algorithm, GaussianPolicy, MlpSpec, Optimizer, OptimizerConfig, PolicyGrads};
use crate::seed;

/// Published meta-policy network shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "4x256")]
    Wide,
    #[serde(rename = "11x128")]
    Deep,
}

impl Preset {
    pub const ALL: [Preset; 2] = [Preset::Wide, Preset::Deep];

    pub fn hidden_layers(self) -> Vec<usize> {
        match self {
            Preset::Wide => vec![256; 4],
            Preset::Deep => vec![128; 11],
        }
    }

    pub fn spec(self, observation_dim: usize, action_dim: usize) -> MlpSpec {
        MlpSpec::tanh(observation_dim + 1, &self.hidden_layers(), action_dim)
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Wide => "4x256",
            Preset::Deep => "11x128",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown network preset {s:?} (expected 4x256 or 11x128)")))
    }
}

/// Policy over expert observations extended by the normalized context.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaPolicy {
    pub policy: GaussianPolicy,
}

impl MetaPolicy {
    pub fn new(policy: GaussianPolicy) -> Result<Self> {
        if policy.spec().input_dim < 2 {
            return Err(Error::Config("meta-policy input must hold an observation and the context".into()));
        }
        Ok(MetaPolicy { policy })
    }

    pub fn input_dim(&self) -> usize {
        self.policy.spec().input_dim
    }

    /// Mean-action plans for several contexts from one batched forward pass.
    pub fn plans(&self, env_cfg: &EnvConfig, contexts: &[f64]) -> Result<Vec<ActionPlan>> {
        let horizon = env_cfg.horizon;
        let dim = self.input_dim();
        let mut x = Array2::zeros((horizon * contexts.len(), dim));
        for (c, &omega) in contexts.iter().enumerate() {
            let task = TaskContext::new(omega)?;
            for t in 0..horizon {
                let obs = observation(env_cfg, t, task, true);
                if obs.len() != dim {
                    return Err(Error::shape(dim, obs.len()));
                }
                x.row_mut(c * horizon + t).assign(&Array1::from(obs));
            }
        }
        let out = self.policy.mean.forward_batch(x.view())?;
        Ok((0..contexts.len())
            .map(|c| out.slice(ndarray::s![c * horizon..(c + 1) * horizon, ..]).to_owned())
            .collect())
    }

    pub fn plan(&self, env_cfg: &EnvConfig, context: f64) -> Result<ActionPlan> {
        Ok(self.plans(env_cfg, &[context])?.remove(0))
    }
}

/// Meta-policy input for a record: observation followed by the normalized context.
fn record_input(r: &ContextRecord) -> Result<Vec<f64>> {
    let mut x = r.observation.clone();
    x.push(TaskContext::new(r.omega)?.normalized());
    Ok(x)
}

fn stack(records: &[&ContextRecord], input_dim: usize, action_dim: usize) -> Result<(Array2<f64>, Array2<f64>)> {
    let mut x = Array2::zeros((records.len(), input_dim));
    let mut a = Array2::zeros((records.len(), action_dim));
    for (i, r) in records.iter().enumerate() {
        let input = record_input(r)?;
        if input.len() != input_dim {
            return Err(Error::shape(input_dim, input.len()));
        }
        if r.action.len() != action_dim {
            return Err(Error::shape(action_dim, r.action.len()));
        }
        x.row_mut(i).assign(&Array1::from(input));
        a.row_mut(i).assign(&Array1::from(r.action.clone()));
    }
    Ok((x, a))
}

/// Mean negative log-likelihood of the recorded actions and its gradient.
pub fn bc_loss(meta: &MetaPolicy, records: &[&ContextRecord]) -> Result<(f64, PolicyGrads)> {
    if records.is_empty() {
        return Err(Error::Data("behavior-cloning loss over an empty minibatch".into()));
    }
    let p = &meta.policy;
    let (x, a) = stack(records, meta.input_dim(), p.action_dim())?;
    let tape = p.mean.forward_tape(x)?;
    let n = records.len() as f64;
    let loss = -p.log_prob_batch(tape.output.view(), a.view()).sum() / n;
    if !loss.is_finite() {
        return Err(Error::Training("non-finite behavior-cloning loss".into()));
    }
    let coef = Array1::from_elem(records.len(), -1.0 / n);
    let grads = p.backward_log_prob(&tape, a.view(), coef.view(), Array1::zeros(p.action_dim()).view());
    Ok((loss, grads))
}

/// Loss only, evaluated in chunks to bound memory.
pub fn dataset_loss(meta: &MetaPolicy, dataset: &ContextualDataset) -> Result<f64> {
    let p = &meta.policy;
    let mut total = 0.0;
    for chunk in dataset.records.chunks(1024) {
        let refs: Vec<&ContextRecord> = chunk.iter().collect();
        let (x, a) = stack(&refs, meta.input_dim(), p.action_dim())?;
        let means = p.mean.forward_batch(x.view())?;
        total -= p.log_prob_batch(means.view(), a.view()).sum();
    }
    let loss = total / dataset.len() as f64;
    if !loss.is_finite() {
        return Err(Error::Training("non-finite behavior-cloning loss".into()));
    }
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Epochs without a new best loss before the learning rate decays.
    pub patience: usize,
    pub init_log_std: f64,
    pub presets: Vec<Preset>,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            epochs: 2000,
            batch_size: 128,
            algorithm: Algorithm::Adam,
            learning_rate: 1e-3,
            decay_factor: 0.8,
            patience: 20,
            init_log_std: 0.1f64.ln(),
            presets: Preset::ALL.to_vec(),
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("meta: batch_size and patience must be positive".into()));
        }
        if !self.init_log_std.is_finite() {
            return Err(Error::Config("meta: init_log_std must be finite".into()));
        }
        Optimizer::new(&self.optimizer()).map(|_| ())
    }

    fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            algorithm: self.algorithm,
            learning_rate: self.learning_rate,
            decay_factor: self.decay_factor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MetaTraining {
    /// Parameters with the lowest full-dataset loss seen.
    pub best: MetaPolicy,
    pub best_epoch: usize,
    /// Full-dataset loss before training (index 0) and after every epoch.
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

impl MetaTraining {
    pub fn best_loss(&self) -> f64 {
        self.losses[self.best_epoch]
    }

    pub fn loss_csv(&self) -> String {
        let mut out = String::from("epoch,loss,learning_rate\n");
        for (e, (l, lr)) in self.losses.iter().zip(&self.learning_rates).enumerate() {
            out.push_str(&format!("{e},{l},{lr}\n"));
        }
        out
    }
}

/// Relative improvement below which an epoch counts toward a plateau.
const PLATEAU_TOLERANCE: f64 = 1e-4;

/// Minibatch behavior cloning on the aggregated dataset.
pub fn meta_train(dataset: &ContextualDataset, spec: MlpSpec, cfg: &MetaTrainConfig, seed: u64) -> Result<MetaTraining> {
    cfg.validate()?;
    let (obs_dim, act_dim) = match (dataset.observation_dim(), dataset.action_dim()) {
        (Some(o), Some(a)) => (o, a),
        _ => return Err(Error::Data("meta-training on an empty dataset".into())),
    };
    if spec.input_dim != obs_dim + 1 || spec.output_dim != act_dim {
        return Err(Error::Config(format!(
            "network {}->{} does not fit dataset observations {obs_dim} (+1 context) and actions {act_dim}",
            spec.input_dim, spec.output_dim
        )));
    }
    if dataset.contexts().len() < 2 {
        log::warn!("dataset holds a single context; the meta-policy cannot learn to generalize");
    }
    let mut rng = seed::rng(seed::derive(seed, &[0x3e7a]));
    let mut meta = MetaPolicy::new(GaussianPolicy::new(spec, cfg.init_log_std, &mut rng)?)?;
    let mut opt = Optimizer::new(&cfg.optimizer())?;
    let mut order: Vec<usize> = (0..dataset.len()).collect();

    let mut losses = vec![dataset_loss(&meta, dataset)?];
    let mut learning_rates = vec![opt.learning_rate()];
    let mut best = meta.clone();
    let mut best_epoch = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let refs: Vec<&ContextRecord> = batch.iter().map(|&i| &dataset.records[i]).collect();
            let (_, grads) = bc_loss(&meta, &refs)?;
            opt.step(&mut meta.policy, &grads)?;
        }
        let loss = dataset_loss(&meta, dataset)?;
        losses.push(loss);
        let reference = losses[best_epoch];
        if loss < reference - PLATEAU_TOLERANCE * reference.abs().max(1.0) {
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                opt.decay_learning_rate();
                stale = 0;
            }
        }
        if loss < reference {
            best = meta.clone();
            best_epoch = epoch;
        }
        learning_rates.push(opt.learning_rate());
    }
    Ok(MetaTraining {
        best,
        best_epoch,
        losses,
        learning_rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{Step, Trajectory};
    use crate::meta::dataset::contextualize_and_aggregate;
    use crate::nn::policy::LOG_2PI;
    use crate::nn::{Dense, Mlp};
    use ndarray::array;
    use proptest::prelude::*;

    fn record(omega: f64, obs: f64, action: Vec<f64>) -> ContextRecord {
        ContextRecord {
            omega,
            trajectory: 0,
            step: 0,
            observation: vec![obs],
            action,
            reward: 0.0,
        }
    }

    /// Linear meta-policy `mean = x W + b` with unit standard deviation.
    fn linear(weight: Array2<f64>, bias: Array1<f64>, log_std: f64) -> MetaPolicy {
        let spec = MlpSpec::tanh(weight.nrows(), &[], weight.ncols());
        let dim = weight.ncols();
        MetaPolicy::new(GaussianPolicy {
            mean: Mlp::from_layers(spec, vec![Dense { weight, bias }]).unwrap(),
            log_std: Array1::from_elem(dim, log_std),
        })
        .unwrap()
    }

    #[test]
    fn presets_map_to_layer_lists() {
        assert_eq!("4x256".parse::<Preset>().unwrap().hidden_layers(), vec![256; 4]);
        assert_eq!("11x128".parse::<Preset>().unwrap().hidden_layers(), vec![128; 11]);
        assert!("3x3".parse::<Preset>().is_err());
    }

    #[test]
    fn exact_fit_loss_is_the_gaussian_constant() {
        // zero weights reproduce an all-zero action of dimension 6
        let meta = linear(Array2::zeros((2, 6)), Array1::zeros(6), 0.0);
        let r = [record(9.0, 0.25, vec![0.0; 6]), record(15.0, 0.5, vec![0.0; 6])];
        let (loss, _) = bc_loss(&meta, &r.iter().collect::<Vec<_>>()).unwrap();
        assert!((loss - 3.0 * LOG_2PI).abs() < 1e-12);
        assert!((loss - 5.5135).abs() < 5e-4);
    }

    #[test]
    fn duplicating_records_keeps_the_loss() {
        let meta = linear(array![[0.3, -0.2], [1.0, 0.5]], array![0.1, 0.0], -0.5);
        let r = [record(8.0, 0.1, vec![0.4, 0.2]), record(17.0, 0.9, vec![-0.3, 1.0])];
        let once: Vec<&ContextRecord> = r.iter().collect();
        let twice: Vec<&ContextRecord> = r.iter().chain(r.iter()).collect();
        let (a, _) = bc_loss(&meta, &once).unwrap();
        let (b, _) = bc_loss(&meta, &twice).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn matches_per_record_density_average() {
        let mut rng = seed::rng(21);
        let meta = MetaPolicy::new(GaussianPolicy::new(MlpSpec::tanh(2, &[3], 2), -0.3, &mut rng).unwrap()).unwrap();
        let r = [
            record(7.0, 0.0, vec![0.1, -0.2]),
            record(10.5, 0.3, vec![0.5, 0.0]),
            record(13.0, 0.6, vec![-1.0, 0.3]),
            record(18.0, 1.0, vec![0.2, 0.2]),
        ];
        let (loss, _) = bc_loss(&meta, &r.iter().collect::<Vec<_>>()).unwrap();
        let mut oracle = 0.0;
        for rec in &r {
            let x = [rec.observation[0], (rec.omega - 7.0) / 11.0];
            let mu = meta.policy.mean.forward(&x).unwrap();
            let sigma = (-0.3f64).exp();
            let mut lp = 0.0;
            for (a, m) in rec.action.iter().zip(&mu) {
                let z = (a - m) / sigma;
                lp += -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
            }
            oracle -= lp / 4.0;
        }
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn empty_minibatch_rejected() {
        let meta = linear(Array2::zeros((2, 1)), Array1::zeros(1), 0.0);
        assert!(bc_loss(&meta, &[]).is_err());
    }

    fn toy_dataset() -> ContextualDataset {
        let trajs: Vec<Trajectory> = [8.0, 11.0, 14.0]
            .iter()
            .map(|&w| Trajectory {
                task: TaskContext::new(w).unwrap(),
                steps: (0..10)
                    .map(|t| Step {
                        observation: vec![t as f64 / 10.0],
                        action: vec![0.01 * w + 0.05 * t as f64, -0.02 * w],
                        reward: 0.0,
                    })
                    .collect(),
                final_distance: w,
            })
            .collect();
        contextualize_and_aggregate(&trajs)
    }

    fn toy_cfg(epochs: usize) -> MetaTrainConfig {
        MetaTrainConfig {
            epochs,
            batch_size: 8,
            patience: 3,
            ..MetaTrainConfig::default()
        }
    }

    #[test]
    fn best_checkpoint_never_worse_than_start() {
        let d = toy_dataset();
        let t = meta_train(&d, MlpSpec::tanh(2, &[16, 16], 2), &toy_cfg(40), 4).unwrap();
        assert_eq!(t.losses.len(), 41);
        assert!(t.best_loss() <= t.losses[0]);
        assert!(t.best_loss() < t.losses[0] - 1.0);
        assert_eq!(dataset_loss(&t.best, &d).unwrap(), t.best_loss());
    }

    #[test]
    fn fixed_seed_is_bit_reproducible() {
        let d = toy_dataset();
        let spec = MlpSpec::tanh(2, &[8], 2);
        let a = meta_train(&d, spec.clone(), &toy_cfg(10), 9).unwrap();
        let b = meta_train(&d, spec, &toy_cfg(10), 9).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.losses, b.losses);
    }

    #[test]
    fn mismatched_network_rejected() {
        let d = toy_dataset();
        assert!(matches!(
            meta_train(&d, MlpSpec::tanh(3, &[4], 2), &toy_cfg(1), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn plateau_decays_learning_rate() {
        let d = toy_dataset();
        let cfg = MetaTrainConfig {
            learning_rate: 1e-9,
            ..toy_cfg(12)
        };
        let t = meta_train(&d, MlpSpec::tanh(2, &[4], 2), &cfg, 1).unwrap();
        let last = *t.learning_rates.last().unwrap();
        assert!(last < 1e-9, "{:?}", t.learning_rates);
    }

    #[test]
    fn batched_plans_match_single_forward() {
        let mut rng = seed::rng(2);
        let meta = MetaPolicy::new(GaussianPolicy::new(MlpSpec::tanh(2, &[5], 6), 0.0, &mut rng).unwrap()).unwrap();
        let env_cfg = EnvConfig::default();
        let plans = meta.plans(&env_cfg, &[7.0, 12.3]).unwrap();
        let obs = observation(&env_cfg, 17, TaskContext::new(12.3).unwrap(), true);
        assert_eq!(plans[1].row(17).to_vec(), meta.policy.mean.forward(&obs).unwrap());
        assert_eq!(plans[0].dim(), (env_cfg.horizon, 6));
    }

    proptest! {
        #[test]
        fn shifting_actions_and_bias_keeps_loss(shift in -3.0f64..3.0, seed_v in 0u64..1000) {
            let mut rng = seed::rng(seed_v);
            let meta = MetaPolicy::new(GaussianPolicy::new(MlpSpec::tanh(2, &[4], 2), -0.2, &mut rng).unwrap()).unwrap();
            let r = [record(8.0, 0.2, vec![0.3, -0.1]), record(16.0, 0.7, vec![-0.4, 0.6])];
            let (base, _) = bc_loss(&meta, &r.iter().collect::<Vec<_>>()).unwrap();
            let mut shifted = meta.clone();
            let last = shifted.policy.mean.layers_mut().last_mut().unwrap();
            last.bias.mapv_inplace(|b| b + shift);
            let moved: Vec<ContextRecord> = r
                .iter()
                .map(|x| ContextRecord { action: x.action.iter().map(|a| a + shift).collect(), ..x.clone() })
                .collect();
            let (other, _) = bc_loss(&shifted, &moved.iter().collect::<Vec<_>>()).unwrap();
            prop_assert!((base - other).abs() < 1e-9);
        }
    }
}
