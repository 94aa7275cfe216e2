//! Bounded reward functions and temperature scaling.
//!
//! Rewards are a closed enumeration rather than user callbacks so the
//! analytic soft-value path can pattern-match on them; arbitrary rewards can
//! still be pushed through the Monte Carlo estimator via
//! [`crate::value::mc_value_fn`]. Temperature folds into the reward once and
//! for all: the scaled reward is `r = r0 / α` with effective bound
//! `B = B0 / α`, and everything downstream works with `r`.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdDirection {
    Below,
    Above,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RewardKind {
    /// Indicator `1{x_j < θ}` (or `>` for `Above`).
    CoordinateThreshold {
        coordinate: usize,
        threshold: f64,
        direction: ThresholdDirection,
    },
    /// Logistic relaxation of the indicator with finite slope; Lipschitz
    /// with constant `slope / 4`, which the analytic baseline needs.
    SmoothedThreshold {
        coordinate: usize,
        threshold: f64,
        direction: ThresholdDirection,
        slope: f64,
    },
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub kind: RewardKind,
    /// Bound on the raw reward, `|r0| <= B0`.
    pub raw_bound: f64,
    /// Alignment temperature α.
    pub temperature: f64,
}

impl RewardSpec {
    pub fn new(kind: RewardKind, raw_bound: f64, temperature: f64) -> Result<Self> {
        let spec = RewardSpec { kind, raw_bound, temperature };
        spec.validate()?;
        Ok(spec)
    }

    /// The experiment default: `1{x_1 < -7}` at the given temperature.
    pub fn left_tail_indicator(temperature: f64) -> Result<Self> {
        RewardSpec::new(
            RewardKind::CoordinateThreshold {
                coordinate: 0,
                threshold: -7.0,
                direction: ThresholdDirection::Below,
            },
            1.0,
            temperature,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidSpec(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.raw_bound <= 0.0 {
            return Err(Error::InvalidSpec("raw_bound must be positive".into()));
        }
        let implied = match &self.kind {
            RewardKind::CoordinateThreshold { .. } => 1.0,
            RewardKind::SmoothedThreshold { slope, .. } => {
                if *slope <= 0.0 {
                    return Err(Error::InvalidSpec("smoothed threshold slope must be positive".into()));
                }
                1.0
            }
            RewardKind::Constant { value } => value.abs(),
        };
        if self.raw_bound + 1e-12 < implied {
            return Err(Error::InvalidSpec(format!(
                "raw_bound {} is below the reward's actual bound {}",
                self.raw_bound, implied
            )));
        }
        Ok(())
    }

    /// `B = B0 / α`, the bound on the scaled reward and on every soft value.
    pub fn effective_bound(&self) -> f64 {
        self.raw_bound / self.temperature
    }

    pub fn raw_reward(&self, x: &DVector<f64>) -> f64 {
        match &self.kind {
            RewardKind::CoordinateThreshold { coordinate, threshold, direction } => {
                let v = x[*coordinate];
                let hit = match direction {
                    ThresholdDirection::Below => v < *threshold,
                    ThresholdDirection::Above => v > *threshold,
                };
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            RewardKind::SmoothedThreshold { coordinate, threshold, direction, slope } => {
                let v = x[*coordinate];
                let arg = match direction {
                    ThresholdDirection::Below => slope * (threshold - v),
                    ThresholdDirection::Above => slope * (v - threshold),
                };
                1.0 / (1.0 + (-arg).exp())
            }
            RewardKind::Constant { value } => *value,
        }
    }

    pub fn scaled_reward(&self, x: &DVector<f64>) -> f64 {
        self.raw_reward(x) / self.temperature
    }

    /// Largest raw reward the kind can emit; used for reward-region masses.
    pub fn max_raw(&self) -> f64 {
        match &self.kind {
            RewardKind::CoordinateThreshold { .. } | RewardKind::SmoothedThreshold { .. } => 1.0,
            RewardKind::Constant { value } => *value,
        }
    }

    /// Lipschitz constant of the *scaled* reward, where one exists. The
    /// sharp indicator has none.
    pub fn scaled_lipschitz(&self) -> Option<f64> {
        match &self.kind {
            RewardKind::CoordinateThreshold { .. } => None,
            RewardKind::SmoothedThreshold { slope, .. } => Some(slope / (4.0 * self.temperature)),
            RewardKind::Constant { .. } => Some(0.0),
        }
    }
}
