use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augmentation::AugmentationSpec;
use crate::contribution::{DEFAULT_FLOOR, DEFAULT_GROUPS};
use crate::denoiser::{ModelConfig, TrainConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::guidance::GuidanceWeights;
use crate::toytask::{MaskExtractionConfig, TaskConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// DDIM steps used for evaluation.
    pub steps: usize,
    /// 1-based step indices at which intermediate masks are scored.
    pub checkpoint_steps: Vec<usize>,
    /// Validation scenes scored (0 means the whole split).
    pub samples: usize,
    /// Timestep groups used for the contribution profile.
    pub groups: usize,
    pub floor: f64,
    /// Trajectories per metric trace.
    pub trace_samples: usize,
    pub trace_steps: usize,
    /// Seed of the initial noise.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            checkpoint_steps: vec![2, 20, 40, 60, 80, 100],
            samples: 0,
            groups: DEFAULT_GROUPS,
            floor: DEFAULT_FLOOR,
            trace_samples: 1000,
            trace_steps: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkflowConfig {
    pub k: usize,
    pub hard_only: bool,
}

impl Default for WorkflowConfig {
    fn default() -> Self {
        Self { k: 3, hard_only: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augment: AugmentationSpec,
    pub eval: EvalConfig,
    pub guidance: GuidanceWeights,
    pub workflow: WorkflowConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn extraction(&self) -> Result<MaskExtractionConfig> {
        MaskExtractionConfig::with_delta(self.task.mask_delta)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.guidance.check()?;
        if self.model.grid != self.task.grid {
            return Err(Error::Config(format!(
                "model grid {} differs from task grid {}",
                self.model.grid, self.task.grid
            )));
        }
        let e = &self.eval;
        if e.steps == 0 || e.steps > self.schedule.steps || e.trace_steps == 0 || e.trace_steps > self.schedule.steps {
            return Err(Error::Config("eval steps must lie in 1..=schedule.steps".into()));
        }
        if e.groups == 0 || self.schedule.steps % e.groups != 0 {
            return Err(Error::Config(format!(
                "{} groups do not divide {} timesteps",
                e.groups, self.schedule.steps
            )));
        }
        if e.trace_steps < e.groups {
            return Err(Error::Config("trace_steps must be at least the group count".into()));
        }
        if let Some(bad) = e.checkpoint_steps.iter().find(|s| **s == 0 || **s > e.steps) {
            return Err(Error::Config(format!("checkpoint step {bad} outside 1..={}", e.steps)));
        }
        if self.workflow.k == 0 {
            return Err(Error::Config("workflow.k must be positive".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form (keys sorted, no whitespace).
    pub fn config_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Applies `section.key=value` overrides. The value is parsed as JSON
    /// when possible, otherwise taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut root = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (path, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{item}` is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut root, path, value)?;
        }
        let cfg: Self = serde_json::from_value(root)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path `{path}`")));
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        node = node
            .get_mut(*key)
            .filter(|v| v.is_object())
            .ok_or_else(|| Error::Config(format!("unknown config section `{key}` in `{path}`")))?;
    }
    let last = keys[keys.len() - 1];
    match node.as_object_mut() {
        Some(map) if map.contains_key(last) => {
            map.insert(last.to_string(), value);
            Ok(())
        }
        _ => Err(Error::Config(format!("unknown config key `{path}`"))),
    }
}
