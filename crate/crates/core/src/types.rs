use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Aggregation level for estimands: equal weight per cluster or per
/// participant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Cluster,
    Individual,
}

impl Level {
    pub const ALL: [Level; 2] = [Level::Cluster, Level::Individual];
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Level::Cluster => write!(f, "cluster"),
            Level::Individual => write!(f, "individual"),
        }
    }
}

/// Comparison function defining the effect scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectScale {
    Difference,
    Ratio,
}

impl EffectScale {
    pub fn apply(self, treated: f64, control: f64) -> Result<f64> {
        match self {
            EffectScale::Difference => Ok(treated - control),
            EffectScale::Ratio => {
                if control == 0.0 {
                    Err(Error::RatioDenominatorZero)
                } else {
                    Ok(treated / control)
                }
            }
        }
    }
}

/// Design-known randomization probabilities; never estimated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PropensitySpec {
    treated: f64,
}

impl PropensitySpec {
    pub fn new(treated: f64) -> Result<Self> {
        if !(treated > 0.0 && treated < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "treatment probability must be in (0,1), got {treated}"
            )));
        }
        Ok(PropensitySpec { treated })
    }

    /// pi^(a) for arm a.
    pub fn for_arm(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.treated
        } else {
            1.0 - self.treated
        }
    }
}

impl Default for PropensitySpec {
    fn default() -> Self {
        PropensitySpec { treated: 0.5 }
    }
}
