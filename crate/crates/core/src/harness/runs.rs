use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::contribution::{ContributionProfile, MetricTrace};
use crate::denoiser::{CheckpointMeta, Denoiser, TrainLog};
use crate::error::{Error, Result};

use super::pipeline::{baseline_config, datasets, resolve_profile, train_model, ProfileSpec};
use super::{estimate_stats, evaluate_config, network_model, EvalReport, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const TRACE_FILE: &str = "trace.csv";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PROFILE_FILE: &str = "profile.json";
const RECORD_FILE: &str = "run.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// Metadata of one run directory `<root>/<run_id>/`. Artifact fields hold
/// file names relative to that directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub status: RunStatus,
    pub created_unix: u64,
    pub finished_unix: Option<u64>,
    pub checkpoint: Option<String>,
    pub train_log: Option<String>,
    pub profile: Option<String>,
    pub traces: Vec<String>,
    pub report: Option<String>,
    pub error: Option<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunRecord {
    /// Creates a fresh run directory holding `config.json`.
    pub fn create(root: &Path, cfg: &ExperimentConfig) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let hash = cfg.config_hash();
        let stem = format!("{}-s{}", &hash[..10], cfg.train.seed);
        let mut n = 0;
        let run_id = loop {
            let id = if n == 0 { stem.clone() } else { format!("{stem}-{n}") };
            // create_dir fails if the id is taken, which keeps ids unique
            match std::fs::create_dir(root.join(&id)) {
                Ok(()) => break id,
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
                Err(e) => return Err(Error::io(&root.join(&id), e)),
            }
        };
        let record = Self {
            run_id,
            config_hash: hash,
            seed: cfg.train.seed,
            status: RunStatus::Running,
            created_unix: now(),
            finished_unix: None,
            checkpoint: None,
            train_log: None,
            profile: None,
            traces: Vec::new(),
            report: None,
            error: None,
        };
        cfg.save(&record.dir(root).join(CONFIG_FILE))?;
        record.save(root)?;
        Ok(record)
    }

    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join(&self.run_id)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let p = self.dir(root).join(RECORD_FILE);
        std::fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    pub fn config(&self, root: &Path) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.dir(root).join(CONFIG_FILE))
    }

    pub fn load_model(&self, root: &Path) -> Result<Denoiser> {
        let name = self.checkpoint.as_deref().ok_or(Error::Empty("run checkpoint"))?;
        Ok(Denoiser::load(&self.dir(root).join(name))?.0)
    }

    pub fn mark(&mut self, root: &Path, status: RunStatus) -> Result<()> {
        self.status = status;
        self.finished_unix = (status != RunStatus::Running).then(now);
        self.save(root)
    }

    /// Loads a record and, for complete runs, re-validates every artifact
    /// it references.
    pub fn load(root: &Path, run_id: &str) -> Result<Self> {
        let dir = root.join(run_id);
        let p = dir.join(RECORD_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let record: Self = serde_json::from_str(&text)?;
        if record.run_id != run_id {
            return Err(Error::format("run record", format!("{} names run {}", p.display(), record.run_id)));
        }
        let cfg = record.config(root)?;
        if cfg.config_hash() != record.config_hash {
            return Err(Error::format("run record", format!("{run_id}: config hash mismatch")));
        }
        if record.status == RunStatus::Complete {
            if let Some(c) = &record.checkpoint {
                let (net, meta) = Denoiser::load(&dir.join(c))?;
                if *net.config() != cfg.model || meta.config_hash != record.config_hash {
                    return Err(Error::format("checkpoint", format!("{run_id}: does not match its config")));
                }
            }
            if let Some(p) = &record.profile {
                ContributionProfile::read_json(&dir.join(p))?.validate()?;
            }
            for t in &record.traces {
                MetricTrace::read_csv(&dir.join(t), cfg.schedule.steps)?;
            }
            if let Some(r) = &record.report {
                let path = dir.join(r);
                let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
                serde_json::from_str::<EvalReport>(&text)?;
            }
            if let Some(l) = &record.train_log {
                let path = dir.join(l);
                std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(record)
    }

    /// Every run under `root`, sorted by id. Unreadable entries are skipped.
    pub fn list(root: &Path) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let entries = match std::fs::read_dir(root) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(Error::io(root, e)),
        };
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(root, e))?;
            if let Some(id) = entry.file_name().to_str() {
                if let Ok(r) = Self::load(root, id) {
                    out.push(r);
                }
            }
        }
        out.sort_by(|a, b| a.run_id.cmp(&b.run_id));
        Ok(out)
    }
}

/// What [`run_experiment`] should do after training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunPlan {
    pub evaluate: bool,
    pub trace: bool,
}

/// Trains one config into a new run directory, then optionally evaluates
/// and traces it. A `stats` profile first trains and traces the uniform
/// baseline.
pub fn run_experiment(
    root: &Path,
    cfg: &ExperimentConfig,
    plan: RunPlan,
    mut log: impl FnMut(&str),
) -> Result<RunRecord> {
    cfg.validate()?;
    let mut record = RunRecord::create(root, cfg)?;
    let result = (|| -> Result<()> {
        let dir = record.dir(root);
        let schedule = cfg.schedule.build()?;
        let (train, val) = datasets(cfg)?;
        let stats = if ProfileSpec::of(cfg) == ProfileSpec::Stats {
            log("training uniform baseline for the stats profile");
            let base = baseline_config(cfg);
            let (net, _) = train_model(&base, &schedule, &train, None, |_, _| Ok(None))?;
            log("tracing baseline");
            Some(estimate_stats(&base, &net, &schedule, &train)?.profile)
        } else {
            None
        };
        let profile = resolve_profile(cfg, &schedule, stats.as_ref())?;
        if let Some(p) = &profile {
            p.write_json(&dir.join(PROFILE_FILE))?;
            record.profile = Some(PROFILE_FILE.into());
        }
        let (net, train_log) = train_model(cfg, &schedule, &train, profile, |epoch, _| {
            log(&format!("epoch {epoch}/{}", cfg.train.epochs));
            Ok(None)
        })?;
        write_train_log(&dir.join(TRAIN_LOG_FILE), &train_log)?;
        record.train_log = Some(TRAIN_LOG_FILE.into());
        let meta = CheckpointMeta {
            config_hash: record.config_hash.clone(),
            seed: cfg.train.seed,
            target: Some(cfg.train.target_kind.parameterization()),
            note: String::new(),
        };
        net.save(&dir.join(CHECKPOINT_FILE), &meta)?;
        record.checkpoint = Some(CHECKPOINT_FILE.into());
        record.save(root)?;
        let model = network_model(cfg, net);
        if plan.evaluate {
            log("evaluating");
            let report = evaluate_config(cfg, &model, &schedule, &val)?;
            let p = dir.join(REPORT_FILE);
            std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
            record.report = Some(REPORT_FILE.into());
        }
        if plan.trace {
            log("tracing");
            let trace = super::collect_trace(
                &model,
                &schedule,
                &train.head(cfg.eval.trace_samples),
                cfg.eval.trace_steps,
                cfg.eval.groups,
                cfg.guidance,
                cfg.extraction()?,
                cfg.eval.seed,
            )?;
            trace.write_csv(&dir.join(TRACE_FILE))?;
            record.traces.push(TRACE_FILE.into());
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            record.mark(root, RunStatus::Complete)?;
            Ok(record)
        }
        Err(e) => {
            record.error = Some(e.to_string());
            record.mark(root, RunStatus::Failed)?;
            Err(e)
        }
    }
}

pub fn write_train_log(path: &Path, log: &TrainLog) -> Result<()> {
    std::fs::write(path, log.to_csv()).map_err(|e| Error::io(path, e))
}
