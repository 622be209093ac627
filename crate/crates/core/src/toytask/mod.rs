//! Synthetic referring-segmentation world: grid scenes of colored shapes,
//! referring conditions, painted targets, mask extraction and metrics.

mod dataset;
mod mask;
mod scene;

use serde::{Deserialize, Serialize};

use crate::diffusion::Sample;
use crate::error::{Error, Result};

pub use dataset::{derive_seed, read_tensor, write_tensor, Dataset, Example, TensorData};
pub use mask::Mask;
pub use scene::{
    generate_scene, Color, Condition, Qualifier, Referral, Shape, TaskConfig, ToyObject, ToyScene,
    CONDITION_DIM,
};

/// Paint color of the target object in rendered targets.
pub const ANCHOR: [f64; 3] = [1.0, -1.0, -1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskExtractionConfig {
    pub anchor: [f64; 3],
    pub delta: f64,
}

impl Default for MaskExtractionConfig {
    fn default() -> Self {
        Self {
            anchor: ANCHOR,
            delta: 0.4,
        }
    }
}

impl MaskExtractionConfig {
    pub fn with_delta(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::Config(format!("mask delta must be positive, got {delta}")));
        }
        Ok(Self {
            delta,
            ..Self::default()
        })
    }
}

/// Scene image with the masked pixels painted in the anchor color.
pub fn render_target(image: &Sample, mask: &Mask) -> Result<Sample> {
    check_image(image, mask)?;
    let mut out = image.clone();
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(y, x) {
                for (c, v) in ANCHOR.iter().enumerate() {
                    out.set(c, y, x, *v);
                }
            }
        }
    }
    Ok(out)
}

fn check_image(image: &Sample, mask: &Mask) -> Result<()> {
    if image.channels() != 3 || image.height() != mask.height() || image.width() != mask.width() {
        return Err(Error::Shape {
            expected: vec![3, mask.height(), mask.width()],
            actual: image.shape().to_vec(),
        });
    }
    Ok(())
}

/// Pixels whose color lies within `delta` (Euclidean) of the anchor.
pub fn extract_mask(image: &Sample, cfg: &MaskExtractionConfig) -> Result<Mask> {
    if image.channels() != 3 {
        return Err(Error::Shape {
            expected: vec![3, image.height(), image.width()],
            actual: image.shape().to_vec(),
        });
    }
    let d2 = cfg.delta * cfg.delta;
    Ok(Mask::from_fn(image.height(), image.width(), |y, x| {
        (0..3)
            .map(|c| (image.get(c, y, x) - cfg.anchor[c]).powi(2))
            .sum::<f64>()
            <= d2
    }))
}

/// Overall IoU: summed intersections over summed unions.
///
/// When every union is empty the score is 1 (all predictions are empty too).
pub fn oiou(predicted: &[Mask], truth: &[Mask]) -> Result<f64> {
    if predicted.is_empty() {
        return Err(Error::Empty("mask list"));
    }
    if predicted.len() != truth.len() {
        return Err(Error::Shape {
            expected: vec![truth.len()],
            actual: vec![predicted.len()],
        });
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        let (i, u) = p.overlap(t)?;
        inter += i;
        union += u;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Running oIoU accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct OiouAccumulator {
    pub intersection: usize,
    pub union: usize,
}

impl OiouAccumulator {
    pub fn add(&mut self, predicted: &Mask, truth: &Mask) -> Result<()> {
        let (i, u) = predicted.overlap(truth)?;
        self.intersection += i;
        self.union += u;
        Ok(())
    }

    pub fn value(&self) -> f64 {
        if self.union == 0 {
            1.0
        } else {
            self.intersection as f64 / self.union as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub abs_rel: f64,
    pub delta1: f64,
}

/// AbsRel and δ1 of a predicted scalar field. With `align`, the prediction
/// is first fitted to the truth by least-squares scale and shift (shift only
/// if the prediction is constant).
pub fn depth_metrics(predicted: &Sample, truth: &Sample, align: bool) -> Result<DepthMetrics> {
    predicted.ensure_same_shape(truth)?;
    if truth.is_empty() {
        return Err(Error::Empty("depth field"));
    }
    let p = predicted.as_slice();
    let g = truth.as_slice();
    let n = g.len() as f64;
    let aligned: Vec<f64> = if align {
        let pm = p.iter().sum::<f64>() / n;
        let gm = g.iter().sum::<f64>() / n;
        let var: f64 = p.iter().map(|v| (v - pm) * (v - pm)).sum();
        if var <= 1e-18 {
            p.iter().map(|v| v - pm + gm).collect()
        } else {
            let cov: f64 = p.iter().zip(g).map(|(a, b)| (a - pm) * (b - gm)).sum();
            let scale = cov / var;
            p.iter().map(|v| scale * (v - pm) + gm).collect()
        }
    } else {
        p.to_vec()
    };
    if g.iter().any(|v| *v <= 0.0) {
        return Err(Error::Config("depth truth must be strictly positive".into()));
    }
    let abs_rel = aligned.iter().zip(g).map(|(a, b)| (a - b).abs() / b).sum::<f64>() / n;
    let delta1 = aligned
        .iter()
        .zip(g)
        .filter(|(a, b)| **a > 0.0 && (*a / *b).max(*b / *a) < 1.25)
        .count() as f64
        / n;
    Ok(DepthMetrics { abs_rel, delta1 })
}
