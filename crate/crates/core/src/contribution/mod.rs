//! Contribution factors `c_t²`: how much of the final perception result each
//! group of denoising timesteps accounts for.
//!
//! Two estimators are provided. [`schedule_profile`] derives the weights from
//! the noise schedule alone (`(1−ᾱ_t)/ᾱ_t`, normalized). [`stats_profile`]
//! measures them from metric traces by regressing the final metric on the
//! checkpoint metrics of a growing set of timestep groups, starting from the
//! group nearest pure noise; each group's weight is the increase in R² it
//! brings.

mod regression;
mod trace;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};

pub use regression::{fit_linear_regression, RegressionFit, RIDGE_LAMBDA};
pub use trace::{MetricTrace, TRACE_CSV_HEADER};

/// Default number of timestep groups.
pub const DEFAULT_GROUPS: usize = 10;
/// Default minimum probability per group.
pub const DEFAULT_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileSource {
    Schedule,
    Statistics,
    Uniform,
}

/// Normalized per-group weights over a partition of `1..=T`.
///
/// Group `b` covers `group_bounds[b] + 1 ..= group_bounds[b + 1]`; group 0 is
/// the one nearest clean data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionProfile {
    pub source: ProfileSource,
    pub group_bounds: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Even partition of `1..=total` into `groups` groups; the last group takes
/// the remainder.
pub fn even_group_bounds(total: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || groups > total {
        return Err(Error::Config(format!(
            "cannot split {total} timesteps into {groups} groups"
        )));
    }
    let width = total / groups;
    let mut bounds: Vec<usize> = (0..groups).map(|b| b * width).collect();
    bounds.push(total);
    Ok(bounds)
}

impl ContributionProfile {
    pub fn uniform(total_steps: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            source: ProfileSource::Uniform,
            group_bounds: even_group_bounds(total_steps, groups)?,
            weights: vec![1.0 / groups as f64; groups],
        })
    }

    pub fn group_count(&self) -> usize {
        self.weights.len()
    }

    pub fn total_steps(&self) -> usize {
        *self.group_bounds.last().expect("validated profile")
    }

    /// Group containing timestep `t` (`1..=T`).
    pub fn group_of(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.total_steps() {
            return Err(Error::Timestep {
                t,
                max: self.total_steps(),
            });
        }
        // bounds are strictly increasing; first bound >= t closes the group
        let idx = self.group_bounds.partition_point(|b| *b < t);
        Ok(idx - 1)
    }

    /// Timesteps `(first, last)` of group `b`.
    pub fn group_range(&self, b: usize) -> (usize, usize) {
        (self.group_bounds[b] + 1, self.group_bounds[b + 1])
    }

    pub fn validate(&self) -> Result<()> {
        let b = self.weights.len();
        if b == 0 || self.group_bounds.len() != b + 1 {
            return Err(Error::Config(format!(
                "profile has {b} weights and {} bounds",
                self.group_bounds.len()
            )));
        }
        if self.group_bounds[0] != 0 || self.group_bounds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(
                "group bounds must start at 0 and increase strictly".into(),
            ));
        }
        if self.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("profile weights must be finite and >= 0".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("profile weights sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Raises weights below `floor` to `floor` and rescales the remaining
    /// weights so the total stays 1; repeats until no weight is below floor.
    pub fn floored(&self, floor: f64) -> Result<Self> {
        Ok(Self {
            weights: apply_floor(&self.weights, floor)?,
            ..self.clone()
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Floor-and-rescale: every output is `>= floor`, the outputs sum to 1, and
/// weights above the floor keep their relative proportions.
pub fn apply_floor(raw: &[f64], floor: f64) -> Result<Vec<f64>> {
    let b = raw.len();
    if b == 0 {
        return Err(Error::Empty("weights"));
    }
    if !(0.0..=1.0 / b as f64).contains(&floor) {
        return Err(Error::Config(format!(
            "floor {floor} infeasible for {b} groups"
        )));
    }
    let raw: Vec<f64> = raw.iter().map(|w| w.max(0.0)).collect();
    if raw.iter().sum::<f64>() <= 0.0 {
        return Ok(vec![1.0 / b as f64; b]);
    }
    let mut pinned = vec![false; b];
    loop {
        let free_mass: f64 = raw
            .iter()
            .zip(&pinned)
            .filter(|(_, p)| !**p)
            .map(|(w, _)| w)
            .sum();
        let pinned_count = pinned.iter().filter(|p| **p).count();
        let budget = 1.0 - floor * pinned_count as f64;
        if free_mass <= 0.0 {
            // everything left is zero mass; spread the budget evenly
            let free = b - pinned_count;
            return Ok(pinned
                .iter()
                .map(|p| if *p { floor } else { budget / free as f64 })
                .collect());
        }
        let scaled: Vec<f64> = raw
            .iter()
            .zip(&pinned)
            .map(|(w, p)| if *p { floor } else { w * budget / free_mass })
            .collect();
        let mut changed = false;
        for (i, v) in scaled.iter().enumerate() {
            if !pinned[i] && *v < floor {
                pinned[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Ok(scaled);
        }
    }
}

/// Schedule-derived weights: per-timestep `(1−ᾱ_t)/ᾱ_t`, summed within each
/// group and normalized.
pub fn schedule_profile(schedule: &NoiseSchedule, groups: usize) -> Result<ContributionProfile> {
    let total = schedule.steps();
    let bounds = even_group_bounds(total, groups)?;
    let ab = schedule.alpha_bars();
    let raw: Vec<f64> = bounds
        .windows(2)
        .map(|w| ((w[0] + 1)..=w[1]).map(|t| (1.0 - ab[t]) / ab[t]).sum())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(ContributionProfile {
        source: ProfileSource::Schedule,
        group_bounds: bounds,
        weights: raw.iter().map(|w| w / sum).collect(),
    })
}

/// Intermediate results of [`stats_profile`], kept for inspection and tests.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsEstimate {
    /// R² after including the first `j` columns (denoising order);
    /// `r_squared[0]` is the dummy all-zero regressor.
    pub r_squared: Vec<f64>,
    /// Raw increments per ascending-t group, before clamping and flooring.
    pub raw: Vec<f64>,
    pub profile: ContributionProfile,
}

/// Statistics-derived weights from a metric trace.
pub fn stats_profile(trace: &MetricTrace, floor: f64) -> Result<ContributionProfile> {
    Ok(estimate_from_trace(trace, floor)?.profile)
}

pub fn estimate_from_trace(trace: &MetricTrace, floor: f64) -> Result<StatsEstimate> {
    let b = trace.group_count();
    let n = trace.sample_count();
    if n < 3 * b {
        return Err(Error::Underdetermined {
            samples: n,
            regressors: b,
        });
    }
    let y = trace.final_metrics();
    let q = trace.checkpoint_metrics();

    // dummy regressor Q_{T+1} = 0
    let dummy: Vec<Vec<f64>> = vec![vec![0.0]; n];
    let mut r_squared = Vec::with_capacity(b + 1);
    r_squared.push(fit_linear_regression(&dummy, y)?.r_squared);
    for j in 1..=b {
        let x: Vec<Vec<f64>> = q.iter().map(|row| row[..j].to_vec()).collect();
        r_squared.push(fit_linear_regression(&x, y)?.r_squared);
    }

    // column j (denoising order) ↔ ascending group b-1-j
    let mut raw = vec![0.0; b];
    for j in 0..b {
        let inc = r_squared[j + 1] - r_squared[j];
        if inc < -1e-9 {
            return Err(Error::Consistency(format!(
                "R² decreased by {} when adding checkpoint t={}",
                -inc,
                trace.timesteps()[j]
            )));
        }
        raw[b - 1 - j] = inc;
    }
    let weights = apply_floor(&raw, floor)?;
    Ok(StatsEstimate {
        r_squared,
        raw,
        profile: ContributionProfile {
            source: ProfileSource::Statistics,
            group_bounds: even_group_bounds(trace.total_steps(), b)?,
            weights,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn schedule_profile_four_steps() {
        let s = NoiseSchedule::linear(4, 0.1, 0.4).unwrap();
        let p = schedule_profile(&s, 4).unwrap();
        let expect = [0.02931, 0.10258, 0.25960, 0.60851];
        for (w, e) in p.weights.iter().zip(expect) {
            assert!((w - e).abs() < 5e-6, "{w} vs {e}");
        }
        assert_eq!(p.source, ProfileSource::Schedule);
        p.validate().unwrap();
    }

    #[test]
    fn schedule_profile_increases_with_t() {
        let p = schedule_profile(&NoiseSchedule::default(), 10).unwrap();
        assert!(p.weights.windows(2).all(|w| w[1] > w[0]));
        let single = schedule_profile(&NoiseSchedule::linear(1, 0.3, 0.3).unwrap(), 1).unwrap();
        assert_eq!(single.weights, vec![1.0]);
    }

    #[test]
    fn group_lookup() {
        let p = ContributionProfile::uniform(1000, 10).unwrap();
        assert_eq!(p.group_of(1).unwrap(), 0);
        assert_eq!(p.group_of(100).unwrap(), 0);
        assert_eq!(p.group_of(101).unwrap(), 1);
        assert_eq!(p.group_of(1000).unwrap(), 9);
        assert!(p.group_of(0).is_err());
        assert_eq!(p.group_range(9), (901, 1000));
        let odd = even_group_bounds(1003, 10).unwrap();
        assert_eq!(odd[9], 900);
        assert_eq!(odd[10], 1003);
    }

    #[test]
    fn floor_keeps_distribution() {
        let w = apply_floor(&[1.0, 0.0, 0.0], 0.01).unwrap();
        assert!((w[0] - 0.98).abs() < 1e-12 && (w[1] - 0.01).abs() < 1e-12);
        let w = apply_floor(&[0.5, 0.495, 0.005], 0.01).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v >= 0.01 - 1e-15));
        assert_eq!(apply_floor(&[0.0, 0.0], 0.01).unwrap(), vec![0.5, 0.5]);
        assert!(apply_floor(&[0.5, 0.5], 0.6).is_err());
    }

    fn trace_from_columns(cols: Vec<Vec<f64>>, q0: Vec<f64>, total: usize) -> MetricTrace {
        let b = cols.len();
        let bounds = even_group_bounds(total, b).unwrap();
        let timesteps = (0..b).map(|j| bounds[b - 1 - j] + 1).collect();
        let n = q0.len();
        let rows = (0..n).map(|i| cols.iter().map(|c| c[i]).collect()).collect();
        MetricTrace::new(total, timesteps, rows, q0).unwrap()
    }

    #[test]
    fn perfect_first_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 30;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.random::<f64>()).collect())
            .collect();
        let q0 = cols[0].clone();
        let est = estimate_from_trace(&trace_from_columns(cols, q0, 300), 0.01).unwrap();
        // raw is ascending-t: T-side group last
        assert!((est.raw[2] - 1.0).abs() < 1e-9);
        assert!(est.raw[0].abs() < 1e-9 && est.raw[1].abs() < 1e-9);
        let w = &est.profile.weights;
        assert!((w[2] - 0.98).abs() < 1e-6 && (w[0] - 0.01).abs() < 1e-6);
    }

    #[test]
    fn constant_final_metric_is_degenerate() {
        let cols = vec![vec![0.1; 12], vec![0.3; 12], vec![0.2; 12]];
        let err = estimate_from_trace(&trace_from_columns(cols, vec![0.5; 12], 300), 0.01);
        assert!(matches!(err, Err(Error::DegenerateTarget)));
    }

    #[test]
    fn variance_shares_are_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 2000;
        let a: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let q0: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.6 * x + 0.4 * y).collect();
        let est = estimate_from_trace(&trace_from_columns(vec![a, b], q0, 100), 0.0).unwrap();
        // noise-free target: full R² = 1, shares 0.36/0.52 and 0.16/0.52
        assert!((est.raw[1] - 0.36 / 0.52).abs() < 0.05, "{:?}", est.raw);
        assert!((est.raw[0] - 0.16 / 0.52).abs() < 0.05, "{:?}", est.raw);
    }

    /// R² by modified Gram-Schmidt projection of the centered target onto
    /// the span of the centered regressors.
    fn gram_schmidt_r2(cols: &[Vec<f64>], y: &[f64]) -> f64 {
        let n = y.len() as f64;
        let center = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / n;
            v.iter().map(|x| x - m).collect::<Vec<f64>>()
        };
        let yc = center(y);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for c in cols {
            let mut v = center(c);
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-10 {
                basis.push(v.iter().map(|a| a / norm).collect());
            }
        }
        let explained: f64 = basis
            .iter()
            .map(|q| q.iter().zip(&yc).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum();
        explained / yc.iter().map(|a| a * a).sum::<f64>()
    }

    #[test]
    fn increments_match_projection_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let (n, b) = (200, 10);
        let latent: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let cols: Vec<Vec<f64>> = (0..b)
            .map(|j| {
                latent
                    .iter()
                    .map(|l| l * (j as f64 + 1.0) / b as f64 + rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let q0: Vec<f64> = (0..n)
            .map(|i| latent[i] + 0.3 * cols[3][i] + 0.2 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let est = estimate_from_trace(&trace_from_columns(cols.clone(), q0.clone(), 1000), 0.0).unwrap();
        for j in 1..=b {
            let oracle = gram_schmidt_r2(&cols[..j], &q0);
            assert!((est.r_squared[j] - oracle).abs() < 1e-9, "j={j}");
        }
        for j in 0..b {
            let oracle = gram_schmidt_r2(&cols[..=j], &q0)
                - if j == 0 { 0.0 } else { gram_schmidt_r2(&cols[..j], &q0) };
            assert!((est.raw[b - 1 - j] - oracle).abs() < 1e-9);
        }
    }

    #[test]
    fn profile_json_round_trip() {
        let p = schedule_profile(&NoiseSchedule::default(), 10).unwrap();
        let text = p.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(v.get("source").is_some() && v.get("group_bounds").is_some() && v.get("weights").is_some());
        let back = ContributionProfile::from_json(&text).unwrap();
        assert_eq!(back.group_bounds, p.group_bounds);
        for (a, b) in back.weights.iter().zip(&p.weights) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
