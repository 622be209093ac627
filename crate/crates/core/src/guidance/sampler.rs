use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{ddim_timesteps, predict_eps, split_prediction, NoiseSchedule, Sample};
use crate::error::{Error, Result};
use crate::toytask::{extract_mask, Condition, Mask, MaskExtractionConfig};

use super::{compose_guidance, DenoiseModel, GuidanceWeights, Query};

/// Trajectories evaluated together in one lockstep batch.
const LOCKSTEP_CHUNK: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub weights: GuidanceWeights,
    /// Grid timesteps at which to record a snapshot.
    pub checkpoints: Vec<usize>,
    pub extraction: MaskExtractionConfig,
    /// Keep `x_t` and `x̂₀` images in checkpoints (masks are always kept).
    pub keep_images: bool,
    /// Clamp `x̂₀` to this range before re-noising; `None` disables.
    pub clip: Option<(f64, f64)>,
}

impl SamplerConfig {
    pub fn new(steps: usize, weights: GuidanceWeights) -> Self {
        Self {
            steps,
            weights,
            checkpoints: Vec::new(),
            extraction: MaskExtractionConfig::default(),
            keep_images: false,
            clip: Some((-1.0, 1.0)),
        }
    }

    /// Checkpoints at the given 1-based positions along the step grid.
    pub fn at_step_indices(mut self, total: usize, indices: &[usize]) -> Result<Self> {
        let grid = ddim_timesteps(total, self.steps)?;
        self.checkpoints = indices
            .iter()
            .map(|i| {
                grid.get(i.wrapping_sub(1)).copied().ok_or_else(|| {
                    Error::Config(format!("step index {i} outside 1..={}", self.steps))
                })
            })
            .collect::<Result<_>>()?;
        Ok(self)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRequest<'a> {
    pub image: &'a Sample,
    pub condition: Condition,
    pub negative: Option<Condition>,
    pub truth: Option<&'a Mask>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub t: usize,
    /// 1-based position along the step grid.
    pub step: usize,
    pub x_t: Option<Sample>,
    pub x0_hat: Option<Sample>,
    pub mask: Mask,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub checkpoints: Vec<Checkpoint>,
    pub final_image: Sample,
    pub final_mask: Mask,
    pub final_iou: Option<f64>,
    pub seed: u64,
    pub weights: GuidanceWeights,
    pub steps: usize,
}

struct Lane {
    x: Sample,
    checkpoints: Vec<Checkpoint>,
}

/// Guided DDIM runs for many requests, evaluated in lockstep batches.
pub fn sample_trajectories(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    requests: &[TrajectoryRequest<'_>],
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    let grid = ddim_timesteps(schedule.steps(), cfg.steps)?;
    if let Some(bad) = cfg.checkpoints.iter().find(|t| !grid.contains(t)) {
        return Err(Error::Config(format!(
            "checkpoint t={bad} is not on the {}-step grid",
            cfg.steps
        )));
    }
    cfg.weights.check()?;
    let mut out = Vec::with_capacity(requests.len());
    for (c, chunk) in requests.chunks(LOCKSTEP_CHUNK).enumerate() {
        out.extend(run_chunk(model, schedule, chunk, c * LOCKSTEP_CHUNK, &grid, cfg)?);
    }
    Ok(out)
}

pub fn sample_trajectory(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    request: &TrajectoryRequest<'_>,
    cfg: &SamplerConfig,
) -> Result<Trajectory> {
    Ok(sample_trajectories(model, schedule, std::slice::from_ref(request), cfg)?.remove(0))
}

fn run_chunk(
    model: &dyn DenoiseModel,
    schedule: &NoiseSchedule,
    requests: &[TrajectoryRequest<'_>],
    key_offset: usize,
    grid: &[usize],
    cfg: &SamplerConfig,
) -> Result<Vec<Trajectory>> {
    let kind = model.parameterization();
    let mut lanes: Vec<Lane> = requests
        .iter()
        .map(|r| {
            let (c, h, w) = (r.image.channels(), r.image.height(), r.image.width());
            let mut rng = ChaCha8Rng::seed_from_u64(r.seed);
            let data = (0..c * h * w).map(|_| rng.sample(StandardNormal)).collect();
            Lane {
                x: Sample::from_vec(c, h, w, data).expect("shape from image"),
                checkpoints: Vec::new(),
            }
        })
        .collect();
    let mut finals: Vec<Option<Sample>> = vec![None; requests.len()];

    for (k, &t) in grid.iter().enumerate() {
        let t_prev = grid.get(k + 1).copied().unwrap_or(0);
        let mut queries = Vec::with_capacity(requests.len() * 4);
        // pass layout per lane: uncond, image-only, [negative], full
        let mut spans = Vec::with_capacity(requests.len());
        for (i, (r, lane)) in requests.iter().zip(&lanes).enumerate() {
            let start = queries.len();
            let key = key_offset + i;
            let q = |image, cond| Query { x_t: &lane.x, image, cond, t, key };
            queries.push(q(None, None));
            queries.push(q(Some(r.image), None));
            if let Some(neg) = r.negative.as_ref() {
                queries.push(q(Some(r.image), Some(neg)));
            }
            queries.push(q(Some(r.image), Some(&r.condition)));
            spans.push(start..queries.len());
        }
        let outs = model.predict(&queries)?;
        drop(queries);
        for (i, span) in spans.into_iter().enumerate() {
            let o = &outs[span];
            let (neg, full) = if o.len() == 4 { (Some(&o[2]), &o[3]) } else { (None, &o[2]) };
            let guided = compose_guidance(&o[0], &o[1], neg, full, &cfg.weights)?;
            let lane = &mut lanes[i];
            let (mut x0_hat, mut eps_hat) = split_prediction(&lane.x, &guided, kind, t, schedule)?;
            if let Some((lo, hi)) = cfg.clip {
                x0_hat = x0_hat.map(|v| v.clamp(lo, hi));
                eps_hat = predict_eps(&lane.x, &x0_hat, t, schedule)?;
            }
            if cfg.checkpoints.contains(&t) {
                let mask = extract_mask(&x0_hat, &cfg.extraction)?;
                let iou = requests[i].truth.map(|g| mask.iou(g)).transpose()?;
                lane.checkpoints.push(Checkpoint {
                    t,
                    step: k + 1,
                    x_t: cfg.keep_images.then(|| lane.x.clone()),
                    x0_hat: cfg.keep_images.then(|| x0_hat.clone()),
                    mask,
                    iou,
                });
            }
            if t_prev == 0 {
                finals[i] = Some(x0_hat);
            } else {
                let ab = schedule.alpha_bar(t_prev)?;
                lane.x = x0_hat.lincomb(ab.sqrt(), &eps_hat, (1.0 - ab).sqrt())?;
            }
        }
    }

    requests
        .iter()
        .zip(lanes)
        .zip(finals)
        .map(|((r, lane), fin)| {
            let final_image = fin.expect("grid ends at t_prev = 0");
            let final_mask = extract_mask(&final_image, &cfg.extraction)?;
            let final_iou = r.truth.map(|g| final_mask.iou(g)).transpose()?;
            Ok(Trajectory {
                checkpoints: lane.checkpoints,
                final_image,
                final_mask,
                final_iou,
                seed: r.seed,
                weights: cfg.weights,
                steps: cfg.steps,
            })
        })
        .collect()
}
