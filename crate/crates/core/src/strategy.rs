//! Training-time timestep policies built from a [`ContributionProfile`].

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contribution::ContributionProfile;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Uniform,
    LossScaling,
    ProbScaling,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "loss_scaling" => Ok(Self::LossScaling),
            "prob_scaling" => Ok(Self::ProbScaling),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

/// How timesteps are drawn and weighted during training.
#[derive(Debug, Clone)]
pub enum TimestepStrategy {
    Uniform { total_steps: usize },
    /// Uniform draws; the loss of timestep `t` is scaled by its group weight.
    LossScaling(ContributionProfile),
    /// Group drawn from the profile, then `t` uniform inside the group.
    ProbScaling(ContributionProfile),
}

impl TimestepStrategy {
    pub fn new(kind: StrategyKind, total_steps: usize, profile: Option<ContributionProfile>) -> Result<Self> {
        let with_profile = |p: Option<ContributionProfile>| -> Result<ContributionProfile> {
            let p = p.ok_or_else(|| {
                Error::Config(format!("strategy {kind:?} needs a contribution profile"))
            })?;
            p.validate()?;
            if p.total_steps() != total_steps {
                return Err(Error::Config(format!(
                    "profile covers {} timesteps, schedule has {total_steps}",
                    p.total_steps()
                )));
            }
            Ok(p)
        };
        match kind {
            StrategyKind::Uniform => {
                if total_steps == 0 {
                    return Err(Error::Config("uniform strategy over zero timesteps".into()));
                }
                Ok(Self::Uniform { total_steps })
            }
            StrategyKind::LossScaling => Ok(Self::LossScaling(with_profile(profile)?)),
            StrategyKind::ProbScaling => Ok(Self::ProbScaling(with_profile(profile)?)),
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            Self::Uniform { .. } => StrategyKind::Uniform,
            Self::LossScaling(_) => StrategyKind::LossScaling,
            Self::ProbScaling(_) => StrategyKind::ProbScaling,
        }
    }

    pub fn total_steps(&self) -> usize {
        match self {
            Self::Uniform { total_steps } => *total_steps,
            Self::LossScaling(p) | Self::ProbScaling(p) => p.total_steps(),
        }
    }

    pub fn profile(&self) -> Option<&ContributionProfile> {
        match self {
            Self::Uniform { .. } => None,
            Self::LossScaling(p) | Self::ProbScaling(p) => Some(p),
        }
    }

    /// Draws a training timestep in `1..=T`.
    pub fn sample_timestep<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            Self::Uniform { total_steps } => rng.random_range(1..=*total_steps),
            Self::LossScaling(p) => rng.random_range(1..=p.total_steps()),
            Self::ProbScaling(p) => {
                let dist = WeightedIndex::new(&p.weights).expect("validated profile");
                let (lo, hi) = p.group_range(dist.sample(rng));
                rng.random_range(lo..=hi)
            }
        }
    }

    /// Multiplier applied to the loss of timestep `t`.
    ///
    /// Loss scaling uses `c_b² · T / |group b|`, which is `B·c_b²` for equal
    /// groups and has mean one under uniform draws.
    pub fn loss_weight(&self, t: usize) -> Result<f64> {
        let total = self.total_steps();
        if t == 0 || t > total {
            return Err(Error::Timestep { t, max: total });
        }
        match self {
            Self::Uniform { .. } | Self::ProbScaling(_) => Ok(1.0),
            Self::LossScaling(p) => {
                let b = p.group_of(t)?;
                let (lo, hi) = p.group_range(b);
                Ok(p.weights[b] * total as f64 / (hi - lo + 1) as f64)
            }
        }
    }

    /// Probability that [`Self::sample_timestep`] returns `t`.
    pub fn timestep_probability(&self, t: usize) -> Result<f64> {
        let total = self.total_steps();
        if t == 0 || t > total {
            return Err(Error::Timestep { t, max: total });
        }
        match self {
            Self::Uniform { .. } | Self::LossScaling(_) => Ok(1.0 / total as f64),
            Self::ProbScaling(p) => {
                let b = p.group_of(t)?;
                let (lo, hi) = p.group_range(b);
                Ok(p.weights[b] / (hi - lo + 1) as f64)
            }
        }
    }

    /// Exact `E[loss_weight(t)]` under this strategy's own timestep law.
    pub fn expected_loss_weight(&self) -> f64 {
        (1..=self.total_steps())
            .map(|t| self.timestep_probability(t).unwrap() * self.loss_weight(t).unwrap())
            .sum()
    }
}
