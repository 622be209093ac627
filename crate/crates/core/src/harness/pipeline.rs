use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::contribution::{
    even_group_bounds, schedule_profile, ContributionProfile, MetricTrace,
};
use crate::denoiser::{Denoiser, TrainLog, Trainer};
use crate::diffusion::{ddim_timesteps, NoiseSchedule};
use crate::error::{Error, Result};
use crate::guidance::{
    run_workflows, sample_trajectories, DenoiseModel, GuidanceWeights, NetworkModel, RuleBasedAdvisor,
    SamplerConfig, TrajectoryRequest, WorkflowItem,
};
use crate::strategy::{StrategyKind, TimestepStrategy};
use crate::toytask::{derive_seed, Dataset, MaskExtractionConfig, OiouAccumulator};

use super::ExperimentConfig;

/// Seed stream of the initial noise of evaluation trajectories.
const EVAL_STREAM: u64 = 200;
const TRACE_STREAM: u64 = 201;

/// Training and validation splits of a config.
pub fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::train_split(&cfg.task)?;
    let mut val = Dataset::val_split(&cfg.task)?;
    if cfg.eval.samples > 0 {
        val = val.head(cfg.eval.samples);
    }
    Ok((train, val))
}

/// Where the contribution profile of a training run comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProfileSpec {
    None,
    Schedule,
    /// Estimated from a uniform baseline trained with the same seed.
    Stats,
    File(String),
}

impl ProfileSpec {
    pub fn of(cfg: &ExperimentConfig) -> ProfileSpec {
        match cfg.train.profile.as_deref() {
            None => ProfileSpec::None,
            Some("schedule") => ProfileSpec::Schedule,
            Some("stats") => ProfileSpec::Stats,
            Some(path) => ProfileSpec::File(path.to_string()),
        }
    }
}

/// The config of the uniform baseline a `stats` profile is estimated from:
/// same task, model, schedule and seed, no augmentation.
pub fn baseline_config(cfg: &ExperimentConfig) -> ExperimentConfig {
    let mut base = cfg.clone();
    base.train.strategy = StrategyKind::Uniform;
    base.train.profile = None;
    base.augment = Default::default();
    base
}

/// Resolves the profile for `cfg`. `stats` needs the estimate from the
/// baseline run, passed as `stats`.
pub fn resolve_profile(
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    stats: Option<&ContributionProfile>,
) -> Result<Option<ContributionProfile>> {
    let profile = match ProfileSpec::of(cfg) {
        ProfileSpec::None => None,
        ProfileSpec::Schedule => Some(schedule_profile(schedule, cfg.eval.groups)?.floored(cfg.eval.floor)?),
        ProfileSpec::Stats => Some(
            stats
                .cloned()
                .ok_or_else(|| Error::Config("a stats profile needs a baseline estimate".into()))?,
        ),
        ProfileSpec::File(path) => Some(ContributionProfile::read_json(Path::new(&path))?),
    };
    if cfg.train.strategy != StrategyKind::Uniform && profile.is_none() {
        return Err(Error::Config(format!(
            "strategy {:?} needs train.profile",
            cfg.train.strategy
        )));
    }
    Ok(profile)
}

/// Trains a network from the seeded initial weights.
pub fn train_model(
    cfg: &ExperimentConfig,
    schedule: &NoiseSchedule,
    train: &Dataset,
    profile: Option<ContributionProfile>,
    validate: impl FnMut(usize, &Denoiser) -> Result<Option<f64>>,
) -> Result<(Denoiser, TrainLog)> {
    let strategy = TimestepStrategy::new(cfg.train.strategy, schedule.steps(), profile)?;
    let net = Trainer::initial_model(cfg.model, cfg.train.seed)?;
    let mut trainer = Trainer::new(net, cfg.train.clone(), strategy, cfg.augment.clone(), schedule)?;
    let log = trainer.train(train, validate)?;
    Ok((trainer.into_model(), log))
}

pub fn network_model(cfg: &ExperimentConfig, net: Denoiser) -> NetworkModel {
    NetworkModel {
        net,
        kind: cfg.train.target_kind.parameterization(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckpointScore {
    /// 1-based DDIM step; `steps + 1` for the final output.
    pub step: usize,
    /// Timestep of the snapshot; 0 for the final output.
    pub t: usize,
    pub oiou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub steps: usize,
    pub weights: GuidanceWeights,
    /// Intermediate snapshots in denoising order.
    pub checkpoints: Vec<CheckpointScore>,
    pub final_oiou: f64,
    pub mean_iou: f64,
    /// Best of the checkpoints and the final output.
    pub best: CheckpointScore,
}

impl EvalReport {
    /// How much the final output lost against the best snapshot.
    pub fn late_drop(&self) -> f64 {
        self.best.oiou - self.final_oiou
    }
}

/// Guided sampling on every example with per-checkpoint oIoU.
pub fn evaluate(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    data: &Dataset,
    steps: usize,
    checkpoint_steps: &[usize],
    weights: GuidanceWeights,
    extraction: MaskExtractionConfig,
    seed: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut sampler = SamplerConfig::new(steps, weights).at_step_indices(schedule.steps(), checkpoint_steps)?;
    sampler.extraction = extraction;
    sampler.checkpoints.sort_unstable_by(|a, b| b.cmp(a));
    sampler.checkpoints.dedup();
    let requests: Vec<TrajectoryRequest> = data
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| TrajectoryRequest {
            image: &ex.scene.image,
            condition: ex.condition,
            negative: None,
            truth: Some(&ex.mask),
            seed: derive_seed(seed, EVAL_STREAM, i as u64),
        })
        .collect();
    let trajectories = sample_trajectories(model, schedule, &requests, &sampler)?;
    let mut per_ckpt = vec![OiouAccumulator::default(); sampler.checkpoints.len()];
    let mut fin = OiouAccumulator::default();
    let mut iou_sum = 0.0;
    for (tr, ex) in trajectories.iter().zip(&data.examples) {
        for (acc, c) in per_ckpt.iter_mut().zip(&tr.checkpoints) {
            acc.add(&c.mask, &ex.mask)?;
        }
        fin.add(&tr.final_mask, &ex.mask)?;
        iou_sum += tr.final_iou.unwrap_or(0.0);
    }
    let grid = ddim_timesteps(schedule.steps(), steps)?;
    let checkpoints: Vec<CheckpointScore> = sampler
        .checkpoints
        .iter()
        .zip(&per_ckpt)
        .map(|(&t, acc)| CheckpointScore {
            step: grid.iter().position(|g| *g == t).expect("on grid") + 1,
            t,
            oiou: acc.value(),
        })
        .collect();
    let final_score = CheckpointScore {
        step: steps + 1,
        t: 0,
        oiou: fin.value(),
    };
    let best = checkpoints
        .iter()
        .copied()
        .chain(std::iter::once(final_score))
        .fold(final_score, |b, c| if c.oiou > b.oiou { c } else { b });
    Ok(EvalReport {
        samples: data.len(),
        steps,
        weights,
        checkpoints,
        final_oiou: final_score.oiou,
        mean_iou: iou_sum / data.len() as f64,
        best,
    })
}

/// Checkpoint timesteps of a metric trace: the smallest grid timestep in
/// each group, ordered from the `t = T` side.
pub fn trace_timesteps(total: usize, steps: usize, groups: usize) -> Result<Vec<usize>> {
    let grid = ddim_timesteps(total, steps)?;
    let bounds = even_group_bounds(total, groups)?;
    (0..groups)
        .rev()
        .map(|b| {
            grid.iter()
                .copied()
                .filter(|t| *t > bounds[b] && *t <= bounds[b + 1])
                .min()
                .ok_or_else(|| Error::Config(format!("no {steps}-step grid timestep in group {b}")))
        })
        .collect()
}

/// Per-sample IoU of the `x̂₀` mask at each group checkpoint and of the
/// final output.
pub fn collect_trace(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    data: &Dataset,
    steps: usize,
    groups: usize,
    weights: GuidanceWeights,
    extraction: MaskExtractionConfig,
    seed: u64,
) -> Result<MetricTrace> {
    if data.is_empty() {
        return Err(Error::Empty("trace dataset"));
    }
    let timesteps = trace_timesteps(schedule.steps(), steps, groups)?;
    let mut sampler = SamplerConfig::new(steps, weights);
    sampler.checkpoints = timesteps.clone();
    sampler.extraction = extraction;
    let requests: Vec<TrajectoryRequest> = data
        .examples
        .iter()
        .enumerate()
        .map(|(i, ex)| TrajectoryRequest {
            image: &ex.scene.image,
            condition: ex.condition,
            negative: None,
            truth: Some(&ex.mask),
            seed: derive_seed(seed, TRACE_STREAM, i as u64),
        })
        .collect();
    let trajectories = sample_trajectories(model, schedule, &requests, &sampler)?;
    let metrics = trajectories
        .iter()
        .map(|tr| tr.checkpoints.iter().map(|c| c.iou.expect("truth given")).collect())
        .collect();
    let finals = trajectories.iter().map(|tr| tr.final_iou.expect("truth given")).collect();
    MetricTrace::new(schedule.steps(), timesteps, metrics, finals)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowReport {
    pub samples: usize,
    pub k: usize,
    pub plain_oiou: f64,
    pub workflow_oiou: f64,
    /// Examples for which the advisor proposed at least one negative.
    pub corrected: usize,
}

/// Plain guidance against the correction workflow on the same scenes.
pub fn evaluate_workflow(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    data: &Dataset,
    k: usize,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<WorkflowReport> {
    if data.is_empty() {
        return Err(Error::Empty("workflow dataset"));
    }
    let seeds: Vec<u64> = (0..data.len()).map(|i| derive_seed(seed, EVAL_STREAM, i as u64)).collect();
    let requests: Vec<TrajectoryRequest> = data
        .examples
        .iter()
        .zip(&seeds)
        .map(|(ex, &seed)| TrajectoryRequest {
            image: &ex.scene.image,
            condition: ex.condition,
            negative: None,
            truth: Some(&ex.mask),
            seed,
        })
        .collect();
    let plain = sample_trajectories(model, schedule, &requests, sampler)?;
    let items: Vec<WorkflowItem> = data
        .examples
        .iter()
        .zip(&seeds)
        .map(|(ex, &seed)| WorkflowItem {
            scene: &ex.scene,
            condition: ex.condition,
            truth: Some(&ex.mask),
            seed,
        })
        .collect();
    let results = run_workflows(model, schedule, &items, k, sampler, &RuleBasedAdvisor)?;
    let mut p = OiouAccumulator::default();
    let mut w = OiouAccumulator::default();
    for ((tr, res), ex) in plain.iter().zip(&results).zip(&data.examples) {
        p.add(&tr.final_mask, &ex.mask)?;
        w.add(&res.mask, &ex.mask)?;
    }
    Ok(WorkflowReport {
        samples: data.len(),
        k,
        plain_oiou: p.value(),
        workflow_oiou: w.value(),
        corrected: results.iter().filter(|r| !r.provenance.negatives.is_empty()).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{Parameterization, Sample};
    use crate::guidance::Query;
    use crate::toytask::{extract_mask, render_target, TaskConfig};

    /// Returns the true target once `t` drops to a per-example threshold,
    /// a blank image before that.
    struct Planted {
        targets: Vec<Sample>,
        thresholds: Vec<usize>,
    }

    impl DenoiseModel for Planted {
        fn parameterization(&self) -> Parameterization {
            Parameterization::X0
        }

        fn predict(&self, queries: &[Query<'_>]) -> Result<Vec<Sample>> {
            Ok(queries
                .iter()
                .map(|q| {
                    if q.t <= self.thresholds[q.key] {
                        self.targets[q.key].clone()
                    } else {
                        q.x_t.map(|_| 0.0)
                    }
                })
                .collect())
        }
    }

    #[test]
    fn trace_records_planted_answers() {
        let data = Dataset::generate(&TaskConfig::default(), 4, 0, 6).unwrap();
        let thresholds = vec![1000, 750, 450, 150, 1, 0];
        let targets: Vec<Sample> =
            data.examples.iter().map(|ex| render_target(&ex.scene.image, &ex.mask).unwrap()).collect();
        let model = Planted { targets: targets.clone(), thresholds: thresholds.clone() };
        let extraction = MaskExtractionConfig::default();
        let schedule = NoiseSchedule::default();
        let trace =
            collect_trace(&model, &schedule, &data, 10, 3, GuidanceWeights::default(), extraction, 0).unwrap();
        assert_eq!(trace.timesteps(), &[701, 401, 1]);
        assert_eq!(trace.sample_count(), 6);
        for (i, ex) in data.examples.iter().enumerate() {
            let hit = extract_mask(&targets[i], &extraction).unwrap().iou(&ex.mask).unwrap();
            let miss = extract_mask(&Sample::zeros(3, 16, 16), &extraction).unwrap().iou(&ex.mask).unwrap();
            let expect: Vec<f64> =
                trace.timesteps().iter().map(|t| if *t <= thresholds[i] { hit } else { miss }).collect();
            assert_eq!(trace.checkpoint_metrics()[i], expect, "example {i}");
            // the last DDIM step runs at t = 1
            assert_eq!(trace.final_metrics()[i], if thresholds[i] >= 1 { hit } else { miss });
        }
    }

    #[test]
    fn training_reduces_loss() {
        let cfg = ExperimentConfig::default().with_overrides(&["train.epochs=5"]).unwrap();
        let schedule = cfg.schedule.build().unwrap();
        let train = Dataset::train_split(&cfg.task).unwrap();
        let (mut first, mut last) = (0.0, 0.0);
        for seed in 0..3 {
            let mut c = cfg.clone();
            c.train.seed = seed;
            let (_, log) = train_model(&c, &schedule, &train, None, |_, _| Ok(None)).unwrap();
            first += log.epochs[0].loss;
            last += log.epochs[4].loss;
        }
        assert!(last < first, "epoch 5 mean loss {} vs epoch 1 {}", last / 3.0, first / 3.0);
    }

    #[test]
    fn strategy_cells_differ_only_in_strategy() {
        let a = ExperimentConfig::default();
        let b = a.with_overrides(&["train.strategy=prob_scaling", "train.profile=stats"]).unwrap();
        let keys = super::super::varied_keys(&[&a, &b]).unwrap();
        assert_eq!(keys, vec!["train.profile", "train.strategy"]);
        assert_eq!(baseline_config(&b), a);
    }
}
