//! Singly robust comparators: weighted Kaplan-Meier by arm and
//! outcome-regression standardization (g-computation).

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::oracle::OutcomeOracle;
use crate::types::Level;

/// A right-continuous step function over an increasing time grid, with value
/// 1 at t = 0. AIPWCC curves reuse this container and may exit [0, 1]; the
/// nonparametric constructors always stay inside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalCurve {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

impl SurvivalCurve {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Self {
        debug_assert_eq!(grid.len(), values.len());
        debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));
        SurvivalCurve { grid, values }
    }

    /// Step evaluation: the value at the last grid point <= t, or 1 before
    /// the first grid point.
    pub fn value_at(&self, t: f64) -> f64 {
        let k = self.grid.partition_point(|&g| g <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }
}

/// Participant weighting for the stratified Kaplan-Meier estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmWeighting {
    /// w_ij = 1/N_i: targets the cluster-level estimand.
    ClusterInverseSize,
    /// w_ij = 1: targets the individual-level estimand.
    Equal,
}

/// Weighted product-limit estimator on the `{A = arm}` subset: at each event
/// time the factor is 1 - (sum of weighted events) / (weighted risk set).
pub fn weighted_km(dataset: &SurvivalDataset, arm: u8, weighting: KmWeighting) -> Result<SurvivalCurve> {
    struct Row {
        time: f64,
        event: bool,
        weight: f64,
    }
    let mut rows: Vec<Row> = Vec::new();
    for cluster in dataset.clusters() {
        if cluster.arm != arm {
            continue;
        }
        let w = match weighting {
            KmWeighting::ClusterInverseSize => 1.0 / cluster.size() as f64,
            KmWeighting::Equal => 1.0,
        };
        for s in &cluster.subjects {
            rows.push(Row {
                time: s.time,
                event: s.event,
                weight: w,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::NoSubjectsInArm(arm));
    }
    let mut event_times: Vec<f64> = rows
        .iter()
        .filter(|r| r.event)
        .map(|r| r.time)
        .collect();
    event_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    event_times.dedup();

    let mut grid = Vec::with_capacity(event_times.len());
    let mut values = Vec::with_capacity(event_times.len());
    let mut surv = 1.0;
    for &t in &event_times {
        let mut wd = 0.0;
        let mut wy = 0.0;
        for r in &rows {
            if r.time >= t {
                wy += r.weight;
                if r.event && r.time == t {
                    wd += r.weight;
                }
            }
        }
        surv *= 1.0 - wd / wy;
        grid.push(t);
        values.push(surv);
    }
    Ok(SurvivalCurve::new(grid, values))
}

/// Outcome-regression standardization: averages model predictions over the
/// full covariate distribution (all subjects in both arms), with the level's
/// weights.
pub fn standardize_outcome_model(
    oracle: &OutcomeOracle,
    dataset: &SurvivalDataset,
    level: Level,
    t: f64,
) -> f64 {
    let mut idx = 0usize;
    match level {
        Level::Cluster => {
            let mut total = 0.0;
            for cluster in dataset.clusters() {
                let mut within = 0.0;
                for _ in &cluster.subjects {
                    within += oracle.survival(idx, t);
                    idx += 1;
                }
                total += within / cluster.size() as f64;
            }
            total / dataset.n_clusters() as f64
        }
        Level::Individual => {
            let n = dataset.n_subjects();
            let mut total = 0.0;
            for _ in 0..n {
                total += oracle.survival(idx, t);
                idx += 1;
            }
            total / n as f64
        }
    }
}
