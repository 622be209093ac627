use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::rc::Rc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::contribution::{estimate_from_trace, ContributionProfile, StatsEstimate};
use crate::denoiser::Denoiser;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::guidance::NetworkModel;
use crate::toytask::Dataset;

use super::pipeline::{
    baseline_config, collect_trace, datasets, evaluate, network_model, resolve_profile, train_model,
    CheckpointScore, EvalReport, ProfileSpec,
};
use super::ExperimentConfig;

/// One configuration of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// JSON form of a grid: a base config plus per-cell dot-path overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSpec {
    #[serde(default)]
    pub base: ExperimentConfig,
    pub cells: Vec<CellOverrides>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellOverrides {
    pub label: String,
    #[serde(default)]
    pub set: Vec<String>,
}

impl AblationSpec {
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        self.cells
            .iter()
            .map(|c| {
                Ok(AblationCell {
                    label: c.label.clone(),
                    config: self.base.with_overrides(&c.set)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum RunOutcome {
    Completed {
        eval: EvalReport,
        final_loss: Option<f64>,
        /// Weights the run trained with, when a profile was used.
        profile: Option<Vec<f64>>,
    },
    Failed {
        error: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRun {
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub outcome: RunOutcome,
    /// Trained network; not serialized. Cells with identical training share it.
    #[serde(skip)]
    pub model: Option<Rc<Denoiser>>,
}

impl CellRun {
    pub fn eval(&self) -> Option<&EvalReport> {
        match &self.outcome {
            RunOutcome::Completed { eval, .. } => Some(eval),
            RunOutcome::Failed { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub label: String,
    pub completed: usize,
    pub failed: usize,
    pub mean_oiou: Option<f64>,
    pub std_oiou: Option<f64>,
    /// Seed-averaged per-checkpoint oIoU; the last entry is the final output.
    pub curve: Vec<CheckpointScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Dot paths whose values differ between cells.
    pub varied_keys: Vec<String>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSummary>,
    pub runs: Vec<CellRun>,
    /// Statistics estimates computed for `stats` profiles, by seed.
    pub estimates: Vec<SeedEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEstimate {
    pub seed: u64,
    pub r_squared: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&CellSummary> {
        self.cells.iter().find(|c| c.label == label)
    }

    pub fn run(&self, label: &str, seed: u64) -> Option<&CellRun> {
        self.runs.iter().find(|r| r.label == label && r.seed == seed)
    }

    /// One row per cell: `label,completed,failed,mean_oiou,std_oiou`.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("label,completed,failed,mean_oiou,std_oiou\n");
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in &self.cells {
            let _ = writeln!(out, "{},{},{},{},{}", c.label, c.completed, c.failed, f(c.mean_oiou), f(c.std_oiou));
        }
        out
    }

    /// Seed-averaged curves: `label,step,t,mean_oiou`.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("label,step,t,mean_oiou\n");
        for c in &self.cells {
            for p in &c.curve {
                let _ = writeln!(out, "{},{},{},{:.6}", c.label, p.step, p.t, p.oiou);
            }
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("report.json", serde_json::to_string_pretty(self)?),
            ("summary.csv", self.summary_csv()),
            ("curves.csv", self.curves_csv()),
        ];
        for (name, body) in files {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Dot paths at which the configs disagree.
pub fn varied_keys(configs: &[&ExperimentConfig]) -> Result<Vec<String>> {
    fn walk(prefix: &str, values: &[&Value], out: &mut BTreeSet<String>) {
        if values.iter().all(|v| v.is_object()) {
            let keys: BTreeSet<&String> = values.iter().flat_map(|v| v.as_object().unwrap().keys()).collect();
            for k in keys {
                let sub: Vec<&Value> = values.iter().map(|v| v.get(k).unwrap_or(&Value::Null)).collect();
                let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk(&p, &sub, out);
            }
        } else if values.windows(2).any(|w| w[0] != w[1]) {
            out.insert(prefix.to_string());
        }
    }
    let values = configs.iter().map(|c| serde_json::to_value(c)).collect::<std::result::Result<Vec<_>, _>>()?;
    let refs: Vec<&Value> = values.iter().collect();
    let mut out = BTreeSet::new();
    walk("", &refs, &mut out);
    Ok(out.into_iter().collect())
}

/// Progress events emitted while an ablation runs.
#[derive(Debug, Clone)]
pub enum Progress<'a> {
    Training { label: &'a str, seed: u64 },
    Reused { label: &'a str, seed: u64 },
    Estimating { seed: u64 },
    Evaluated { label: &'a str, seed: u64, oiou: f64, seconds: f64 },
    Failed { label: &'a str, seed: u64, error: &'a str },
}

/// Trains and evaluates every (cell, seed), reusing identical trainings.
///
/// `train.seed` of each cell is replaced by the run seed. Cells may only
/// differ in training, augmentation and guidance settings so that all runs
/// share datasets and evaluation protocol.
pub fn run_ablation(
    cells: &[AblationCell],
    seeds: &[u64],
    mut progress: impl FnMut(Progress<'_>),
) -> Result<AblationReport> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Empty("ablation grid"));
    }
    let configs: Vec<&ExperimentConfig> = cells.iter().map(|c| &c.config).collect();
    let varied = varied_keys(&configs)?;
    if let Some(bad) = varied.iter().find(|k| {
        !(k.starts_with("train.") || k.starts_with("augment.") || k.starts_with("guidance."))
            || k.as_str() == "train.seed"
    }) {
        return Err(Error::Config(format!(
            "ablation cells may only vary train/augment/guidance keys (other than the seed), found `{bad}`"
        )));
    }
    let first = &cells[0].config;
    let schedule = first.schedule.build()?;
    let (train, val) = datasets(first)?;
    let mut cache = ModelCache::default();
    let mut runs = Vec::new();
    let mut estimates = Vec::new();

    for &seed in seeds {
        for cell in cells {
            let mut cfg = cell.config.clone();
            cfg.train.seed = seed;
            let start = Instant::now();
            let mut trained = None;
            let outcome = (|| -> Result<RunOutcome> {
                let stats = if ProfileSpec::of(&cfg) == ProfileSpec::Stats {
                    let base = baseline_config(&cfg);
                    let key = training_key(&base, None);
                    if !cache.estimates.contains_key(&key) {
                        let (net, _) = cache.train(&base, None, &schedule, &train, &mut progress, "baseline")?;
                        progress(Progress::Estimating { seed });
                        let est = estimate_stats(&base, &net, &schedule, &train)?;
                        estimates.push(SeedEstimate {
                            seed,
                            r_squared: est.r_squared.clone(),
                            weights: est.profile.weights.clone(),
                        });
                        cache.estimates.insert(key.clone(), est.profile);
                    }
                    cache.estimates.get(&key).cloned()
                } else {
                    None
                };
                let profile = resolve_profile(&cfg, &schedule, stats.as_ref())?;
                let (net, final_loss) = cache.train(&cfg, profile.clone(), &schedule, &train, &mut progress, &cell.label)?;
                let model = network_model(&cfg, (*net).clone());
                trained = Some(net);
                let eval = evaluate_config(&cfg, &model, &schedule, &val)?;
                Ok(RunOutcome::Completed {
                    eval,
                    final_loss,
                    profile: profile.map(|p| p.weights),
                })
            })();
            let outcome = match outcome {
                Ok(o) => o,
                Err(e @ Error::Divergence { .. }) => {
                    let error = e.to_string();
                    progress(Progress::Failed { label: &cell.label, seed, error: &error });
                    RunOutcome::Failed { error }
                }
                Err(e) => return Err(e),
            };
            if let RunOutcome::Completed { eval, .. } = &outcome {
                progress(Progress::Evaluated {
                    label: &cell.label,
                    seed,
                    oiou: eval.final_oiou,
                    seconds: start.elapsed().as_secs_f64(),
                });
            }
            runs.push(CellRun {
                label: cell.label.clone(),
                seed,
                config_hash: cfg.config_hash(),
                outcome,
                model: trained,
            });
        }
    }
    let summaries = cells.iter().map(|c| summarize(&c.label, &runs)).collect();
    Ok(AblationReport {
        varied_keys: varied,
        seeds: seeds.to_vec(),
        cells: summaries,
        runs,
        estimates,
    })
}

/// Evaluation of a trained model with the protocol of its config.
pub fn evaluate_config(
    cfg: &ExperimentConfig,
    model: &NetworkModel,
    schedule: &NoiseSchedule,
    val: &Dataset,
) -> Result<EvalReport> {
    evaluate(
        model,
        schedule,
        val,
        cfg.eval.steps,
        &cfg.eval.checkpoint_steps,
        cfg.guidance,
        cfg.extraction()?,
        cfg.eval.seed,
    )
}

/// Statistics profile of a model from a trace over the head of `data`.
pub fn estimate_stats(
    cfg: &ExperimentConfig,
    net: &Denoiser,
    schedule: &NoiseSchedule,
    data: &Dataset,
) -> Result<StatsEstimate> {
    let model = network_model(cfg, net.clone());
    let trace = collect_trace(
        &model,
        schedule,
        &data.head(cfg.eval.trace_samples),
        cfg.eval.trace_steps,
        cfg.eval.groups,
        cfg.guidance,
        cfg.extraction()?,
        cfg.eval.seed,
    )?;
    estimate_from_trace(&trace, cfg.eval.floor)
}

fn summarize(label: &str, runs: &[CellRun]) -> CellSummary {
    let evals: Vec<&EvalReport> = runs.iter().filter(|r| r.label == label).filter_map(CellRun::eval).collect();
    let failed = runs.iter().filter(|r| r.label == label).count() - evals.len();
    let n = evals.len() as f64;
    let (mean, std) = if evals.is_empty() {
        (None, None)
    } else {
        let m = evals.iter().map(|e| e.final_oiou).sum::<f64>() / n;
        let var = if evals.len() > 1 {
            evals.iter().map(|e| (e.final_oiou - m).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (Some(m), Some(var.sqrt()))
    };
    let curve = match evals.first() {
        None => Vec::new(),
        Some(e0) => {
            let points = e0.checkpoints.len() + 1;
            (0..points)
                .map(|j| {
                    let pick = |e: &EvalReport| {
                        if j < e.checkpoints.len() {
                            e.checkpoints[j]
                        } else {
                            CheckpointScore { step: e.steps + 1, t: 0, oiou: e.final_oiou }
                        }
                    };
                    let p = pick(e0);
                    CheckpointScore {
                        oiou: evals.iter().map(|e| pick(e).oiou).sum::<f64>() / n,
                        ..p
                    }
                })
                .collect()
        }
    };
    CellSummary {
        label: label.to_string(),
        completed: evals.len(),
        failed,
        mean_oiou: mean,
        std_oiou: std,
        curve,
    }
}

/// Digest of everything that determines the trained weights. Augmentation
/// that cannot change a sample is normalized away so such runs share a key.
fn training_key(cfg: &ExperimentConfig, profile: Option<&ContributionProfile>) -> String {
    let mut aug = cfg.augment.clone();
    if !aug.enabled || aug.intensity_multiplier == 0.0 {
        aug = Default::default();
    }
    let mut train = cfg.train.clone();
    train.profile = None;
    let value = serde_json::json!({
        "schedule": cfg.schedule,
        "task": cfg.task,
        "model": cfg.model,
        "train": train,
        "augment": aug,
        "profile": profile.map(|p| (&p.group_bounds, &p.weights)),
    });
    let digest = Sha256::digest(value.to_string().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct ModelCache {
    models: HashMap<String, (Rc<Denoiser>, Option<f64>)>,
    estimates: HashMap<String, ContributionProfile>,
}

impl ModelCache {
    fn train(
        &mut self,
        cfg: &ExperimentConfig,
        profile: Option<ContributionProfile>,
        schedule: &NoiseSchedule,
        data: &Dataset,
        progress: &mut impl FnMut(Progress<'_>),
        label: &str,
    ) -> Result<(Rc<Denoiser>, Option<f64>)> {
        let key = training_key(cfg, profile.as_ref());
        if let Some((net, loss)) = self.models.get(&key) {
            progress(Progress::Reused { label, seed: cfg.train.seed });
            return Ok((net.clone(), *loss));
        }
        progress(Progress::Training { label, seed: cfg.train.seed });
        let (net, log) = train_model(cfg, schedule, data, profile, |_, _| Ok(None))?;
        let entry = (Rc::new(net), log.final_loss());
        self.models.insert(key, entry.clone());
        Ok(entry)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn varied_keys_lists_differences() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["train.strategy=prob_scaling", "train.profile=schedule"]).unwrap();
        let c = a.with_overrides(&["augment.enabled=true"]).unwrap();
        assert_eq!(
            varied_keys(&[&a, &b, &c]).unwrap(),
            vec!["augment.enabled", "train.profile", "train.strategy"]
        );
        assert!(varied_keys(&[&a, &a]).unwrap().is_empty());
    }

    #[test]
    fn inactive_augmentation_shares_training() {
        let a = ExperimentConfig::default();
        let zero = a.with_overrides(&["augment.enabled=true", "augment.intensity_multiplier=0"]).unwrap();
        let on = a.with_overrides(&["augment.enabled=true"]).unwrap();
        assert_eq!(training_key(&a, None), training_key(&zero, None));
        assert_ne!(training_key(&a, None), training_key(&on, None));
        let guided = a.with_overrides(&["guidance.w_d=5"]).unwrap();
        assert_eq!(training_key(&a, None), training_key(&guided, None));
    }

    #[test]
    fn rejects_task_changes() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["task.max_objects=3"]).unwrap();
        let cells = [
            AblationCell { label: "a".into(), config: a },
            AblationCell { label: "b".into(), config: b },
        ];
        assert!(matches!(run_ablation(&cells, &[0], |_| {}), Err(Error::Config(_))));
    }

    #[test]
    fn spec_json() {
        let text = r#"{"cells": [{"label": "u"}, {"label": "p", "set": ["train.strategy=prob_scaling", "train.profile=stats"]}], "seeds": [0, 1]}"#;
        let spec: AblationSpec = serde_json::from_str(text).unwrap();
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[1].config.train.profile.as_deref(), Some("stats"));
    }
}
