//! Closed-form DDPM/DDIM scheduler algebra.
//!
//! Timestep `0` is clean data and `T` is (close to) pure noise. Every
//! operation here is a pure function of its inputs and an immutable
//! [`NoiseSchedule`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// β/α/ᾱ tables of a discrete diffusion process.
///
/// `betas[t - 1]` and `alphas[t - 1]` belong to timestep `t` in `1..=T`;
/// `alpha_bars` has `T + 1` entries with `alpha_bars[0] == 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_min` (t = 1) to `beta_max` (t = T).
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Builds a schedule from an explicit beta sequence for `t = 1..=T`.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Config(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    /// ᾱ for `t = 0..=T`.
    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bars.get(t).copied().ok_or(Error::Timestep {
            t,
            max: self.steps(),
        })
    }

    fn check_noisy(&self, t: usize) -> Result<f64> {
        if t == 0 || t > self.steps() {
            return Err(Error::Timestep {
                t,
                max: self.steps(),
            });
        }
        Ok(self.alpha_bars[t])
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }
}

/// Dense `channels × height × width` tensor in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Sample {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Shape {
                expected: vec![channels * height * width],
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Sample) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                expected: self.shape().to_vec(),
                actual: other.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// `a * self + b * other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Sample, b: f64) -> Result<Sample> {
        self.ensure_same_shape(other)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(self.with_data(data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Sample {
        self.with_data(self.data.iter().map(|v| f(*v)).collect())
    }

    pub fn max_abs_diff(&self, other: &Sample) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn squared_distance(&self, other: &Sample) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// A sample with this one's shape and the given data.
    pub(crate) fn with_data(&self, data: Vec<f64>) -> Sample {
        debug_assert_eq!(data.len(), self.data.len());
        Sample {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// What a denoising network's raw output represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    Eps,
    X0,
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_diffuse(x0: &Sample, t: usize, eps: &Sample, schedule: &NoiseSchedule) -> Result<Sample> {
    let ab = schedule.check_noisy(t)?;
    x0.lincomb(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// Clean-data estimate recovered from a noise prediction.
pub fn predict_x0(x_t: &Sample, eps: &Sample, t: usize, schedule: &NoiseSchedule) -> Result<Sample> {
    let ab = schedule.check_noisy(t)?;
    let s = ab.sqrt();
    x_t.lincomb(1.0 / s, eps, -(1.0 - ab).sqrt() / s)
}

/// Noise implied by `x_t` and a clean estimate; inverse of [`predict_x0`].
pub fn predict_eps(x_t: &Sample, x0: &Sample, t: usize, schedule: &NoiseSchedule) -> Result<Sample> {
    let ab = schedule.check_noisy(t)?;
    let s = (1.0 - ab).sqrt();
    x_t.lincomb(1.0 / s, x0, -ab.sqrt() / s)
}

/// Noise target that makes an augmented clean target consistent with the
/// un-augmented one: `eps + √ᾱ_t/√(1−ᾱ_t)·(x0_aug − x0)`.
pub fn corrected_epsilon(
    x0: &Sample,
    x0_aug: &Sample,
    eps: &Sample,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Sample> {
    let ab = schedule.alpha_bar(t)?;
    if ab >= 1.0 {
        return Err(Error::SingularCoefficient(t));
    }
    x0.ensure_same_shape(x0_aug)?;
    x0.ensure_same_shape(eps)?;
    let k = ab.sqrt() / (1.0 - ab).sqrt();
    let data = eps
        .as_slice()
        .iter()
        .zip(x0.as_slice().iter().zip(x0_aug.as_slice()))
        .map(|(e, (a, b))| e + k * (b - a))
        .collect();
    Ok(eps.with_data(data))
}

/// Splits a raw model output into `(x̂0, ε̂)`.
pub fn split_prediction(
    x_t: &Sample,
    model_out: &Sample,
    kind: Parameterization,
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<(Sample, Sample)> {
    x_t.ensure_same_shape(model_out)?;
    match kind {
        Parameterization::Eps => Ok((predict_x0(x_t, model_out, t, schedule)?, model_out.clone())),
        Parameterization::X0 => Ok((model_out.clone(), predict_eps(x_t, model_out, t, schedule)?)),
    }
}

/// Deterministic (η = 0) DDIM update from `t` to `t_prev`.
pub fn ddim_step(
    x_t: &Sample,
    model_out: &Sample,
    kind: Parameterization,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Sample> {
    if t_prev >= t {
        return Err(Error::Ordering { t, t_prev });
    }
    let (x0_hat, eps_hat) = split_prediction(x_t, model_out, kind, t, schedule)?;
    if t_prev == 0 {
        return Ok(x0_hat);
    }
    let ab_prev = schedule.alpha_bar(t_prev)?;
    x0_hat.lincomb(ab_prev.sqrt(), &eps_hat, (1.0 - ab_prev).sqrt())
}

/// DDIM timestep grid, highest first: `1 + k·(T / steps)` for
/// `k = steps−1, …, 0`. The step after the last grid point lands on `t = 0`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Config(format!(
            "sampling steps must be in 1..={total}, got {steps}"
        )));
    }
    let stride = total / steps;
    Ok((0..steps).rev().map(|k| 1 + k * stride).collect())
}
