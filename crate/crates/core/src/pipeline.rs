//! Pipeline stages over a run directory with a content-hashed manifest.
//!
//! Layout under `<output>/<run-id>/`:
//!
//! ```text
//! config.toml  manifest.json
//! experts/   expert_<omega>.bin, .toml metadata, _curve.csv
//! datasets/  dataset.jsonl, manifest.json
//! meta/      <preset>.bin, <preset>_loss.csv, <preset>.toml
//! filter/    <name>.jsonl (one filtering record per test task)
//! eval/      sweep and comparison CSVs, baseline curves and checkpoints
//! ```
//!
//! Every artifact is registered in `manifest.json` with its SHA-256; stages
//! refuse inputs whose bytes no longer match.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::env::{ActionPlan, KickEnv, TaskContext};
use crate::error::{Error, Result};
use crate::eval::{compare_models, generalization_sweep, Comparison, SweepReport};
use crate::meta::{
    collect_rollouts, contextualize_and_aggregate, CandidateScope, filter_sweep, meta_train, ContextualDataset, FilterConfig,
    FilterReport, MetaPolicy, MetaTraining, Preset, SampleRate,
};
use crate::nn::checkpoint::{decode_policy, encode_policy};
use crate::par::Exec;
use crate::rl::baseline::seed_curve_rows;
use crate::rl::{
    aggregate_curves, curve_csv, train_expert, train_multitask_baseline, BaselineRun, CurveRow, ExpertMetadata,
    ExpertPolicy,
};
use crate::seed;

/// Environment variable overriding the configured output root.
pub const OUTPUT_DIR_ENV: &str = "BUMPS_OUTPUT_DIR";

const STREAM_EXPERT: u64 = 1;
const STREAM_DATASET: u64 = 2;
const STREAM_META: u64 = 3;
const STREAM_FILTER: u64 = 4;
const STREAM_EVAL: u64 = 5;
const STREAM_CURVES: u64 = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub stage: String,
    pub sha256: String,
    pub bytes: u64,
    pub created_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub config_hash: String,
    /// Keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, Artifact>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Source artifacts and provenance written next to every report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub run_id: String,
    pub config_hash: String,
    pub sources: BTreeMap<String, String>,
}

/// An opened run directory.
pub struct Run {
    pub config: RunConfig,
    root: PathBuf,
    manifest: Manifest,
    exec: Exec,
}

impl Run {
    /// Opens (creating if needed) the run directory for `config` under
    /// `output_root`, or the configured output directory.
    pub fn open(config: RunConfig, output_root: Option<&Path>, exec: Exec) -> Result<Self> {
        config.validate()?;
        let config_hash = config.hash()?;
        let run_id = config.run_id()?;
        let root = output_root.unwrap_or(&config.output_dir).join(&run_id);
        for dir in ["experts", "datasets", "meta", "filter", "eval"] {
            let p = root.join(dir);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        write_file(&root.join("config.toml"), config.to_toml()?.as_bytes())?;
        let manifest_path = root.join("manifest.json");
        let manifest = if manifest_path.exists() {
            let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            let m: Manifest = serde_json::from_str(&text)?;
            if m.config_hash != config_hash {
                return Err(Error::Integrity {
                    path: manifest_path,
                    reason: "manifest belongs to a different configuration".into(),
                });
            }
            m
        } else {
            Manifest {
                run_id,
                config_hash,
                artifacts: BTreeMap::new(),
            }
        };
        let run = Run {
            config,
            root,
            manifest,
            exec,
        };
        run.save_manifest()?;
        Ok(run)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn save_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_file(&self.root.join("manifest.json"), text.as_bytes())
    }

    /// Writes an artifact and registers its hash.
    fn record(&mut self, stage: &str, rel: &str, bytes: &[u8]) -> Result<()> {
        write_file(&self.path(rel), bytes)?;
        let created_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        self.manifest.artifacts.insert(
            rel.to_string(),
            Artifact {
                stage: stage.to_string(),
                sha256: sha256_hex(bytes),
                bytes: bytes.len() as u64,
                created_unix,
            },
        );
        self.save_manifest()
    }

    pub fn has(&self, rel: &str) -> bool {
        self.manifest.artifacts.contains_key(rel)
    }

    /// Reads a registered artifact, checking it against the manifest.
    pub fn read_verified(&self, rel: &str) -> Result<Vec<u8>> {
        let entry = self
            .manifest
            .artifacts
            .get(rel)
            .ok_or_else(|| Error::Data(format!("{rel} is not recorded in the run manifest")))?;
        let path = self.path(rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Integrity {
                path,
                reason: "content hash differs from the manifest".into(),
            });
        }
        Ok(bytes)
    }

    fn artifacts_with(&self, prefix: &str, suffix: &str) -> Vec<String> {
        self.manifest
            .artifacts
            .keys()
            .filter(|k| k.starts_with(prefix) && k.ends_with(suffix))
            .cloned()
            .collect()
    }

    fn provenance(&self, sources: &[String]) -> Result<ReportProvenance> {
        let mut map = BTreeMap::new();
        for s in sources {
            let entry = self
                .manifest
                .artifacts
                .get(s)
                .ok_or_else(|| Error::Data(format!("{s} is not recorded in the run manifest")))?;
            map.insert(s.clone(), entry.sha256.clone());
        }
        Ok(ReportProvenance {
            run_id: self.manifest.run_id.clone(),
            config_hash: self.manifest.config_hash.clone(),
            sources: map,
        })
    }

    /// Writes a report and its provenance sidecar.
    fn record_report(&mut self, rel: &str, text: &str, sources: &[String]) -> Result<()> {
        let prov = serde_json::to_string_pretty(&self.provenance(sources)?)?;
        self.record("eval", rel, text.as_bytes())?;
        self.record("eval", &format!("{rel}.meta.json"), prov.as_bytes())
    }

    fn seed(&self, stream: u64, tags: &[u64]) -> u64 {
        let mut path = vec![stream];
        path.extend_from_slice(tags);
        seed::derive(self.config.seed, &path)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn expert_stem(omega: f64) -> String {
    format!("experts/expert_{omega:05.2}")
}

/// Outcome of the expert stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ExpertSummary {
    pub trained: Vec<f64>,
    pub skipped: Vec<f64>,
    pub failed: Vec<(f64, String)>,
}

/// Trains every missing expert on the meta-training grid (or `only`).
///
/// Completed experts whose checkpoint still matches the manifest are kept.
/// A failing task does not stop the others; the stage reports a training
/// error afterwards if any task failed.
pub fn train_experts(run: &mut Run, only: Option<&[f64]>) -> Result<ExpertSummary> {
    let grid = run.config.grids.meta_train_tasks()?;
    let tasks: Vec<TaskContext> = match only {
        Some(list) => list.iter().map(|&w| TaskContext::new(w)).collect::<Result<_>>()?,
        None => grid,
    };
    let mut summary = ExpertSummary::default();
    for task in tasks {
        let omega = task.target_distance();
        let stem = expert_stem(omega);
        let bin = format!("{stem}.bin");
        if run.has(&bin) && run.read_verified(&bin).is_ok() {
            summary.skipped.push(omega);
            continue;
        }
        let cfg = &run.config;
        let seed = run.seed(STREAM_EXPERT, &[seed::omega_tag(omega)]);
        match train_expert(task, &cfg.ppo, &cfg.expert, &cfg.env, seed, run.exec) {
            Ok(expert) => {
                log::info!(
                    "expert {omega:.2} m: final mean error {:.3} m after {} steps",
                    expert.metadata.final_mean_error,
                    expert.metadata.timesteps
                );
                let meta = toml::to_string(&expert.metadata).map_err(|e| Error::Config(e.to_string()))?;
                let curve = curve_csv(&seed_curve_rows(seed, &expert.curve));
                run.record("experts", &bin, &encode_policy(&expert.policy))?;
                run.record("experts", &format!("{stem}.toml"), meta.as_bytes())?;
                run.record("experts", &format!("{stem}_curve.csv"), curve.as_bytes())?;
                summary.trained.push(omega);
            }
            Err(e) => {
                log::error!("expert {omega:.2} m failed: {e}");
                summary.failed.push((omega, e.to_string()));
            }
        }
    }
    if !summary.failed.is_empty() {
        let list: Vec<String> = summary.failed.iter().map(|(w, e)| format!("{w} m: {e}")).collect();
        return Err(Error::Training(format!("expert training failed for {}", list.join("; "))));
    }
    Ok(summary)
}

/// Loads the verified expert for `omega`.
pub fn load_expert(run: &Run, omega: f64) -> Result<ExpertPolicy> {
    let stem = expert_stem(omega);
    let bin = format!("{stem}.bin");
    if !run.has(&bin) {
        return Err(Error::Data(format!("no expert checkpoint for the {omega} m task")));
    }
    let policy = decode_policy(&run.read_verified(&bin)?)?;
    let meta_bytes = run.read_verified(&format!("{stem}.toml"))?;
    let metadata: ExpertMetadata = toml::from_str(&String::from_utf8_lossy(&meta_bytes))
        .map_err(|e| Error::Data(format!("{stem}.toml: {e}")))?;
    Ok(ExpertPolicy {
        task: TaskContext::new(omega)?,
        policy,
        metadata,
        curve: Vec::new(),
    })
}

pub const DATASET: &str = "datasets/dataset.jsonl";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tasks: Vec<f64>,
    pub trajectories_per_task: usize,
    pub records: usize,
    pub env_hash: String,
}

/// Rolls out every expert and writes the contextual dataset.
pub fn build_dataset(run: &mut Run) -> Result<ContextualDataset> {
    let tasks = run.config.grids.meta_train_tasks()?;
    let k = run.config.dataset.trajectories_per_task;
    let mut trajectories = Vec::with_capacity(tasks.len() * k);
    for &task in &tasks {
        let expert = load_expert(run, task.target_distance())?;
        let seed = run.seed(STREAM_DATASET, &[]);
        trajectories.extend(collect_rollouts(&expert, task, k, &run.config.env, seed)?);
    }
    let dataset = contextualize_and_aggregate(&trajectories);
    let expected = tasks.len() * k * run.config.env.horizon;
    if dataset.len() != expected {
        return Err(Error::Data(format!("dataset holds {} records, expected {expected}", dataset.len())));
    }
    let env_toml = toml::to_string(&run.config.env).map_err(|e| Error::Config(e.to_string()))?;
    let manifest = DatasetManifest {
        tasks: tasks.iter().map(|t| t.target_distance()).collect(),
        trajectories_per_task: k,
        records: dataset.len(),
        env_hash: sha256_hex(env_toml.as_bytes()),
    };
    run.record("datasets", DATASET, dataset.to_jsonl()?.as_bytes())?;
    run.record("datasets", "datasets/manifest.json", serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(dataset)
}

pub fn load_dataset(run: &Run) -> Result<ContextualDataset> {
    let bytes = run.read_verified(DATASET)?;
    let dataset = ContextualDataset::from_jsonl(&String::from_utf8_lossy(&bytes))?;
    let m: DatasetManifest = serde_json::from_slice(&run.read_verified("datasets/manifest.json")?)?;
    if m.records != dataset.len() {
        return Err(Error::Integrity {
            path: run.path(DATASET),
            reason: format!("{} records, dataset manifest says {}", dataset.len(), m.records),
        });
    }
    Ok(dataset)
}

pub fn meta_checkpoint(preset: Preset) -> String {
    format!("meta/{preset}.bin")
}

/// Meta-trains one preset on the stored dataset.
pub fn train_meta(run: &mut Run, preset: Preset) -> Result<MetaTraining> {
    let dataset = load_dataset(run)?;
    let spec = preset.spec(
        dataset.observation_dim().unwrap_or(0),
        dataset.action_dim().unwrap_or(run.config.env.action_dim),
    );
    let index = Preset::ALL.iter().position(|&p| p == preset).unwrap_or(0) as u64;
    let training = meta_train(&dataset, spec, &run.config.meta, run.seed(STREAM_META, &[index]))?;
    log::info!(
        "meta {preset}: best loss {:.4} at epoch {} (start {:.4})",
        training.best_loss(),
        training.best_epoch,
        training.losses[0]
    );
    #[derive(Serialize)]
    struct MetaInfo {
        preset: String,
        epochs: usize,
        best_epoch: usize,
        best_loss: f64,
        dataset_sha256: String,
    }
    let info = MetaInfo {
        preset: preset.to_string(),
        epochs: run.config.meta.epochs,
        best_epoch: training.best_epoch,
        best_loss: training.best_loss(),
        dataset_sha256: run.manifest.artifacts[DATASET].sha256.clone(),
    };
    run.record("meta", &meta_checkpoint(preset), &encode_policy(&training.best.policy))?;
    run.record("meta", &format!("meta/{preset}_loss.csv"), training.loss_csv().as_bytes())?;
    run.record(
        "meta",
        &format!("meta/{preset}.toml"),
        toml::to_string(&info).map_err(|e| Error::Config(e.to_string()))?.as_bytes(),
    )?;
    Ok(training)
}

pub fn load_meta(run: &Run, preset: Preset) -> Result<MetaPolicy> {
    let rel = meta_checkpoint(preset);
    if !run.has(&rel) {
        return Err(Error::Data(format!("no meta-policy checkpoint for preset {preset}")));
    }
    MetaPolicy::new(decode_policy(&run.read_verified(&rel)?)?)
}

/// One filtering record as persisted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FilterRecord {
    pub models: Vec<Preset>,
    pub mode: SampleRate,
    pub radius: f64,
    pub episodes: usize,
    #[serde(flatten)]
    pub report: FilterReport,
}

pub fn filter_name(presets: &[Preset], cfg: &FilterConfig) -> String {
    let models: Vec<&str> = presets.iter().map(|p| p.name()).collect();
    let mode = match cfg.mode {
        SampleRate::Normal => "normal",
        SampleRate::HighRate => "high_rate",
    };
    match cfg.scope {
        CandidateScope::Neighborhood => format!("{}_{mode}_r{}", models.join("+"), cfg.radius),
        CandidateScope::Global => format!("{}_{mode}_global", models.join("+")),
    }
}

/// Filters every meta-test task with `presets` as one ensemble.
pub fn run_filter(run: &mut Run, presets: &[Preset], cfg: &FilterConfig) -> Result<Vec<FilterReport>> {
    if presets.is_empty() {
        return Err(Error::Config("filtering needs at least one meta-policy".into()));
    }
    let models: Vec<MetaPolicy> = presets.iter().map(|&p| load_meta(run, p)).collect::<Result<_>>()?;
    let refs: Vec<&MetaPolicy> = models.iter().collect();
    let tests = run.config.grids.meta_test_tasks()?;
    let seed = run.seed(STREAM_FILTER, &[]);
    let reports = filter_sweep(&refs, &tests, &run.config.grids, cfg, &run.config.env, seed, run.exec)?;
    let mut out = String::new();
    for r in &reports {
        let rec = FilterRecord {
            models: presets.to_vec(),
            mode: cfg.mode,
            radius: cfg.radius,
            episodes: cfg.episodes,
            report: r.clone(),
        };
        let _ = writeln!(out, "{}", serde_json::to_string(&rec)?);
    }
    run.record("filter", &format!("filter/{}.jsonl", filter_name(presets, cfg)), out.as_bytes())?;
    Ok(reports)
}

pub fn load_filter(run: &Run, rel: &str) -> Result<Vec<FilterRecord>> {
    let bytes = run.read_verified(rel)?;
    String::from_utf8_lossy(&bytes)
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Trains the multi-task baseline and writes its curves and checkpoints.
pub fn run_baseline(run: &mut Run) -> Result<Vec<BaselineRun>> {
    let cfg = run.config.clone();
    let tasks = cfg.grids.meta_train_tasks()?;
    let mut ppo = cfg.ppo.clone();
    let budget = cfg.baseline.budget_fraction * (tasks.len() * cfg.ppo.total_timesteps) as f64;
    ppo.total_timesteps = budget.round() as usize;
    let runs = train_multitask_baseline(&tasks, &ppo, &cfg.expert, &cfg.baseline, &cfg.env, run.exec)?;
    let mut all_rows: Vec<CurveRow> = Vec::new();
    for r in &runs {
        let rows = seed_curve_rows(r.seed, &r.curve);
        run.record("eval", &format!("eval/baseline_seed{}.bin", r.seed), &encode_policy(&r.policy))?;
        run.record("eval", &format!("eval/baseline_curve_seed{}.csv", r.seed), curve_csv(&rows).as_bytes())?;
        all_rows.extend(rows);
    }
    let curves: Vec<&[crate::rl::CurvePoint]> = runs.iter().map(|r| r.curve.as_slice()).collect();
    let agg = aggregate_curves(
        &curves,
        cfg.eval.ci_confidence,
        cfg.eval.ci_resamples,
        run.seed(STREAM_CURVES, &[]),
    )?;
    run.record("eval", "eval/baseline_curve_all.csv", curve_csv(&agg).as_bytes())?;
    all_rows.extend(agg);
    run.record("eval", "eval/baseline_curves.csv", curve_csv(&all_rows).as_bytes())?;
    Ok(runs)
}

/// Everything the evaluation stage produced.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub experts: SweepReport,
    /// Named meta-test sweeps: unfiltered meta-policies, filtered selections, baselines.
    pub sweeps: Vec<(String, SweepReport)>,
    pub comparison: Option<Comparison>,
}

/// Sweeps every available model and writes the comparison tables.
pub fn evaluate(run: &mut Run) -> Result<Evaluation> {
    let cfg = run.config.clone();
    let eval_seed = run.seed(STREAM_EVAL, &[]);
    let (n, threshold) = (cfg.eval.repetitions, cfg.eval.accuracy_threshold);

    let train_tasks = cfg.grids.meta_train_tasks()?;
    let mut expert_plans = Vec::with_capacity(train_tasks.len());
    let mut expert_sources = Vec::new();
    for &t in &train_tasks {
        let e = load_expert(run, t.target_distance())?;
        expert_plans.push((t, e.plan(&cfg.env)?));
        expert_sources.push(format!("{}.bin", expert_stem(t.target_distance())));
    }
    let experts = generalization_sweep(&cfg.env, &expert_plans, n, eval_seed, threshold, run.exec)?;
    run.record_report("eval/experts.csv", &experts.to_csv(), &expert_sources)?;

    let tests = cfg.grids.meta_test_tasks()?;
    let mut sweeps: Vec<(String, SweepReport)> = Vec::new();
    let mut claims = Vec::new();
    let mut unfiltered_index = BTreeMap::new();
    for preset in Preset::ALL {
        if !run.has(&meta_checkpoint(preset)) {
            continue;
        }
        let meta = load_meta(run, preset)?;
        let contexts: Vec<f64> = tests.iter().map(|t| t.target_distance()).collect();
        let plans: Vec<(TaskContext, ActionPlan)> = tests.iter().copied().zip(meta.plans(&cfg.env, &contexts)?).collect();
        let report = generalization_sweep(&cfg.env, &plans, n, eval_seed, threshold, run.exec)?;
        let name = format!("meta_{preset}");
        run.record_report(&format!("eval/{name}.csv"), &report.to_csv(), &[meta_checkpoint(preset)])?;
        unfiltered_index.insert(preset, sweeps.len());
        sweeps.push((name, report));
    }

    for rel in run.artifacts_with("filter/", ".jsonl") {
        let records = load_filter(run, &rel)?;
        let Some(first) = records.first() else { continue };
        let models: Vec<MetaPolicy> = first.models.iter().map(|&p| load_meta(run, p)).collect::<Result<_>>()?;
        let mut plans = Vec::with_capacity(records.len());
        for r in &records {
            let sel = r.report.selected;
            let model = models
                .get(sel.model)
                .ok_or_else(|| Error::Data(format!("{rel}: selection names unknown model {}", sel.model)))?;
            plans.push((TaskContext::new(r.report.omega)?, model.plan(&cfg.env, sel.context)?));
        }
        let report = generalization_sweep(&cfg.env, &plans, n, eval_seed, threshold, run.exec)?;
        let stem = rel.trim_start_matches("filter/").trim_end_matches(".jsonl");
        let name = format!("filtered_{stem}");
        let mut sources = vec![rel.clone()];
        sources.extend(first.models.iter().map(|&p| meta_checkpoint(p)));
        run.record_report(&format!("eval/{name}.csv"), &report.to_csv(), &sources)?;
        if let [only] = first.models[..] {
            if let Some(&u) = unfiltered_index.get(&only) {
                claims.push((sweeps.len(), u));
            }
        }
        sweeps.push((name, report));
    }

    for rel in run.artifacts_with("eval/baseline_seed", ".bin") {
        let policy = decode_policy(&run.read_verified(&rel)?)?;
        let env = KickEnv::new(cfg.env.clone())?;
        let mut plans = Vec::with_capacity(tests.len());
        for &t in &tests {
            let obs = env.observation_schedule(t, true);
            plans.push((t, policy.mean.forward_batch(obs.view())?));
        }
        let report = generalization_sweep(&cfg.env, &plans, n, eval_seed, threshold, run.exec)?;
        let name = rel.trim_start_matches("eval/").trim_end_matches(".bin").to_string();
        run.record_report(&format!("eval/{name}.csv"), &report.to_csv(), std::slice::from_ref(&rel))?;
        sweeps.push((name, report));
    }

    let comparison = if sweeps.len() >= 2 {
        let c = compare_models(&sweeps, &claims)?;
        let sources: Vec<String> = sweeps.iter().map(|(name, _)| format!("eval/{name}.csv")).collect();
        run.record_report("eval/comparison.csv", &c.to_csv(), &sources)?;
        run.record_report("eval/comparison.txt", &c.to_text(), &sources)?;
        Some(c)
    } else {
        None
    };
    Ok(Evaluation {
        experts,
        sweeps,
        comparison,
    })
}
