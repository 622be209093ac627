//! Classifier-free guidance with an optional correctional (negative)
//! condition, guided DDIM trajectories and the negative-proposal workflow.

mod sampler;
mod workflow;

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, NetInput};
use crate::diffusion::{Parameterization, Sample};
use crate::error::Result;
use crate::toytask::Condition;

pub use sampler::{
    sample_trajectories, sample_trajectory, Checkpoint, SamplerConfig, Trajectory, TrajectoryRequest,
};
pub use workflow::{
    majority_vote, propose_negatives, run_correction_workflow, run_workflows, NegativeAdvisor,
    Provenance, RuleBasedAdvisor, WorkflowItem, WorkflowResult,
};

/// Guidance scales: image `w_i`, condition `w_d`, negative condition
/// `w_d_neg`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceWeights {
    pub w_i: f64,
    pub w_d: f64,
    #[serde(default = "default_w_d_neg")]
    pub w_d_neg: f64,
}

fn default_w_d_neg() -> f64 {
    2.0
}

impl Default for GuidanceWeights {
    fn default() -> Self {
        Self {
            w_i: 1.5,
            w_d: 3.0,
            w_d_neg: 2.0,
        }
    }
}

impl GuidanceWeights {
    /// Finite weights; returns a warning when the negative scale is not
    /// below the condition scale.
    pub fn check(&self) -> Result<Option<String>> {
        if ![self.w_i, self.w_d, self.w_d_neg].iter().all(|w| w.is_finite()) {
            return Err(crate::Error::Config("guidance weights must be finite".into()));
        }
        Ok((self.w_d <= self.w_d_neg).then(|| {
            format!(
                "w_d ({}) should exceed w_d_neg ({}) for correctional guidance",
                self.w_d, self.w_d_neg
            )
        }))
    }
}

/// Combines the network passes of one guided step.
///
/// Without a negative: `u + w_i·(img − u) + w_d·(full − img)`. With one:
/// `u + w_i·(img − u) + w_d_neg·(neg − img) + w_d·(full − neg)`.
pub fn compose_guidance(
    e_uncond: &Sample,
    e_img: &Sample,
    e_neg: Option<&Sample>,
    e_full: &Sample,
    w: &GuidanceWeights,
) -> Result<Sample> {
    e_uncond.ensure_same_shape(e_img)?;
    e_uncond.ensure_same_shape(e_full)?;
    let u = e_uncond.as_slice();
    let i = e_img.as_slice();
    let f = e_full.as_slice();
    let data: Vec<f64> = match e_neg {
        None => (0..u.len())
            .map(|k| u[k] + w.w_i * (i[k] - u[k]) + w.w_d * (f[k] - i[k]))
            .collect(),
        Some(n) => {
            e_uncond.ensure_same_shape(n)?;
            let n = n.as_slice();
            (0..u.len())
                .map(|k| u[k] + w.w_i * (i[k] - u[k]) + w.w_d_neg * (n[k] - i[k]) + w.w_d * (f[k] - n[k]))
                .collect()
        }
    };
    Sample::from_vec(e_uncond.channels(), e_uncond.height(), e_uncond.width(), data)
}

/// One network evaluation inside a batch of trajectories. `key` is the
/// index of the trajectory request the query belongs to.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub x_t: &'a Sample,
    pub image: Option<&'a Sample>,
    pub cond: Option<&'a Condition>,
    pub t: usize,
    pub key: usize,
}

/// Anything that can denoise a batch of queries.
pub trait DenoiseModel: Sync {
    fn parameterization(&self) -> Parameterization;
    fn predict(&self, queries: &[Query<'_>]) -> Result<Vec<Sample>>;
}

/// A trained network together with what its output represents.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub net: Denoiser,
    pub kind: Parameterization,
}

impl DenoiseModel for NetworkModel {
    fn parameterization(&self) -> Parameterization {
        self.kind
    }

    fn predict(&self, queries: &[Query<'_>]) -> Result<Vec<Sample>> {
        let encoded: Vec<_> = queries.iter().map(|q| q.cond.map(Condition::encode)).collect();
        let inputs: Vec<NetInput> = queries
            .iter()
            .zip(&encoded)
            .map(|(q, c)| NetInput {
                x_t: q.x_t.as_slice(),
                image: q.image.map(Sample::as_slice),
                cond: c.as_ref(),
                t: q.t,
            })
            .collect();
        self.net.predict(&inputs)
    }
}
