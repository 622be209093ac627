use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::toytask::{derive_seed, Condition, Mask, Qualifier, ToyScene};

use super::{sample_trajectories, GuidanceWeights, SamplerConfig, TrajectoryRequest};

/// Seed stream for workflow branches.
const BRANCH_STREAM: u64 = 0x6272_616e_6368;

/// Suggests conditions describing objects the model may confuse with the
/// referred one.
pub trait NegativeAdvisor: Sync {
    fn propose(&self, scene: &ToyScene, cond: &Condition, k: usize) -> Vec<Condition>;
}

/// Attribute-overlap scorer: same color 2 points, same shape 2, lying on
/// the qualifier's side of the image 1 (always for `any`). Ties go to the
/// larger visible area, then the lower index.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleBasedAdvisor;

impl NegativeAdvisor for RuleBasedAdvisor {
    fn propose(&self, scene: &ToyScene, cond: &Condition, k: usize) -> Vec<Condition> {
        propose_negatives(scene, cond, k)
    }
}

fn qualifier_compatible(q: Qualifier, scene: &ToyScene, i: usize) -> bool {
    let o = &scene.objects[i];
    let mid = (scene.grid as i64 - 1) as f64 / 2.0;
    match q {
        Qualifier::Any => true,
        Qualifier::Left => (o.cx as f64) < mid,
        Qualifier::Right => (o.cx as f64) > mid,
        Qualifier::Top => (o.cy as f64) < mid,
        Qualifier::Bottom => (o.cy as f64) > mid,
    }
}

pub fn propose_negatives(scene: &ToyScene, cond: &Condition, k: usize) -> Vec<Condition> {
    let referred = match cond.referents(scene).as_slice() {
        [one] => *one,
        _ => return Vec::new(),
    };
    let target = &scene.objects[referred];
    let mut ranked: Vec<(u32, usize, usize)> = (0..scene.objects.len())
        .filter(|i| *i != referred)
        .map(|i| {
            let o = &scene.objects[i];
            let score = 2 * (o.color == target.color) as u32
                + 2 * (o.shape == target.shape) as u32
                + qualifier_compatible(cond.qualifier, scene, i) as u32;
            (score, scene.masks[i].area(), i)
        })
        .collect();
    ranked.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)).then(a.2.cmp(&b.2)));
    let mut out: Vec<Condition> = Vec::new();
    for (_, _, i) in ranked {
        let o = &scene.objects[i];
        let c = Condition::new(Some(o.shape), Some(o.color), Qualifier::Any).negate();
        if !out.contains(&c) {
            out.push(c);
        }
        if out.len() == k {
            break;
        }
    }
    out
}

/// Pixel on iff strictly more than half of the masks are on.
pub fn majority_vote(masks: &[Mask]) -> Result<Mask> {
    let first = masks.first().ok_or(Error::Empty("mask list"))?;
    let (h, w) = (first.height(), first.width());
    let mut counts = vec![0usize; h * w];
    for m in masks {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape {
                expected: vec![h, w],
                actual: vec![m.height(), m.width()],
            });
        }
        for (c, b) in counts.iter_mut().zip(m.bits()) {
            *c += *b as usize;
        }
    }
    Mask::from_bits(h, w, counts.iter().map(|c| 2 * c > masks.len()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub condition: Condition,
    pub negatives: Vec<Condition>,
    pub seeds: Vec<u64>,
    pub branch_ious: Vec<Option<f64>>,
    pub weights: GuidanceWeights,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowResult {
    pub mask: Mask,
    pub iou: Option<f64>,
    pub branch_masks: Vec<Mask>,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Copy)]
pub struct WorkflowItem<'a> {
    pub scene: &'a ToyScene,
    pub condition: Condition,
    pub truth: Option<&'a Mask>,
    pub seed: u64,
}

/// Runs the correction workflow for many items, sharing lockstep batches.
pub fn run_workflows(
    model: &dyn super::DenoiseModel,
    schedule: &NoiseSchedule,
    items: &[WorkflowItem<'_>],
    k: usize,
    cfg: &SamplerConfig,
    advisor: &dyn NegativeAdvisor,
) -> Result<Vec<WorkflowResult>> {
    if k == 0 {
        return Err(Error::Config("workflow needs k >= 1".into()));
    }
    let mut requests = Vec::new();
    let mut plan = Vec::with_capacity(items.len());
    for item in items {
        let negatives = advisor.propose(item.scene, &item.condition, k);
        let start = requests.len();
        let branches: Vec<Option<Condition>> = if negatives.is_empty() {
            vec![None]
        } else {
            negatives.iter().copied().map(Some).collect()
        };
        for (b, neg) in branches.into_iter().enumerate() {
            requests.push(TrajectoryRequest {
                image: &item.scene.image,
                condition: item.condition,
                negative: neg,
                truth: item.truth,
                seed: derive_seed(item.seed, BRANCH_STREAM, b as u64),
            });
        }
        plan.push((start..requests.len(), negatives));
    }
    let trajectories = sample_trajectories(model, schedule, &requests, cfg)?;
    items
        .iter()
        .zip(plan)
        .map(|(item, (span, negatives))| {
            let branch = &trajectories[span];
            let branch_masks: Vec<Mask> = branch.iter().map(|t| t.final_mask.clone()).collect();
            let mask = majority_vote(&branch_masks)?;
            let iou = item.truth.map(|g| mask.iou(g)).transpose()?;
            Ok(WorkflowResult {
                iou,
                provenance: Provenance {
                    condition: item.condition,
                    negatives,
                    seeds: branch.iter().map(|t| t.seed).collect(),
                    branch_ious: branch.iter().map(|t| t.final_iou).collect(),
                    weights: cfg.weights,
                    steps: cfg.steps,
                },
                branch_masks,
                mask,
            })
        })
        .collect()
}

pub fn run_correction_workflow(
    model: &dyn super::DenoiseModel,
    schedule: &NoiseSchedule,
    item: &WorkflowItem<'_>,
    k: usize,
    cfg: &SamplerConfig,
    advisor: &dyn NegativeAdvisor,
) -> Result<WorkflowResult> {
    Ok(run_workflows(model, schedule, std::slice::from_ref(item), k, cfg, advisor)?.remove(0))
}
