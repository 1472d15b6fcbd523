//! The doubly robust estimator core: per-subject augmented inverse
//! probability of censoring weighting contributions, aggregation to cluster-
//! and individual-level survival curves, and SPCE / RMST effects.

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::nonparam::SurvivalCurve;
use crate::oracle::OraclePair;
use crate::types::{EffectScale, Level, PropensitySpec};

/// Floor applied to the estimated censoring survival before it enters a
/// denominator. Hits are counted in [`Diagnostics`].
pub const CENSORING_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// K_c evaluations truncated at the floor.
    pub censoring_floor_hits: usize,
    /// aggregated curve values outside [0, 1] (reported, never clipped)
    pub out_of_range_values: usize,
}

impl Diagnostics {
    pub fn merge(&mut self, other: Diagnostics) {
        self.censoring_floor_hits += other.censoring_floor_hits;
        self.out_of_range_values += other.out_of_range_values;
    }
}

/// Default evaluation grid: 0, every observed event time in either arm, and
/// the requested report times, deduplicated and ascending.
pub fn default_grid(dataset: &SurvivalDataset, report_times: &[f64]) -> Vec<f64> {
    let mut grid = vec![0.0];
    for cluster in dataset.clusters() {
        for s in &cluster.subjects {
            if s.event {
                grid.push(s.time);
            }
        }
    }
    grid.extend_from_slice(report_times);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

/// Per-subject contributions for one arm, evaluated on the whole grid:
/// `out[idx][k]` is the subject's contribution at `grid[k]`, subjects in
/// canonical (cluster, subject) order. The three terms are the inverse
/// probability of censoring weighted survival indicator, the propensity
/// recentering of the outcome-model prediction, and the censoring-martingale
/// augmentation.
pub fn subject_contributions(
    dataset: &SurvivalDataset,
    arm: u8,
    oracles: &OraclePair,
    pi: &PropensitySpec,
    grid: &[f64],
) -> Result<(Vec<Vec<f64>>, Diagnostics)> {
    if oracles.arm() != arm {
        return Err(Error::OracleArmMismatch {
            fitted: oracles.arm(),
            asked: arm,
        });
    }
    debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));
    let pi_a = pi.for_arm(arm);
    let jumps = oracles.censoring.jump_times();
    let mut diagnostics = Diagnostics::default();
    let floored = |k: f64, diag: &mut Diagnostics| -> f64 {
        if k < CENSORING_FLOOR {
            diag.censoring_floor_hits += 1;
            CENSORING_FLOOR
        } else {
            k
        }
    };

    let mut out = Vec::with_capacity(dataset.n_subjects());
    let mut idx = 0usize;
    for cluster in dataset.clusters() {
        let in_arm = cluster.arm == arm;
        for s in &cluster.subjects {
            let mut row = Vec::with_capacity(grid.len());
            if !in_arm {
                // only the recentering term survives: -((0 - pi)/pi) P = P
                for &t in grid {
                    row.push(oracles.outcome.survival(idx, t));
                }
                out.push(row);
                idx += 1;
                continue;
            }
            // prefix sums of dM_c(u_k) / (K_c(u_k) P(u_k)) over jumps at
            // which the subject is still at risk (u_k <= U)
            let n_jumps = jumps.partition_point(|&u| u <= s.time);
            let mut prefix = Vec::with_capacity(n_jumps);
            let mut acc = 0.0;
            for k in 0..n_jumps {
                let u = jumps[k];
                let counting = if !s.event && s.time == u { 1.0 } else { 0.0 };
                let dm = counting - oracles.censoring.increment(idx, k);
                let kc = floored(oracles.censoring.survival(idx, u), &mut diagnostics);
                acc += dm / (kc * oracles.outcome.survival(idx, u));
                prefix.push(acc);
            }
            let c2 = (1.0 - pi_a) / pi_a;
            let mut jp = 0usize; // jumps with u_k <= current t
            for &t in grid {
                while jp < n_jumps && jumps[jp] <= t {
                    jp += 1;
                }
                let p_t = oracles.outcome.survival(idx, t);
                let term1 = if s.time >= t {
                    let kc = floored(oracles.censoring.survival(idx, t), &mut diagnostics);
                    1.0 / (pi_a * kc)
                } else {
                    0.0
                };
                // min(t, U): jumps beyond U were excluded from the prefix
                let aug = if jp == 0 { 0.0 } else { prefix[jp - 1] };
                row.push(term1 - c2 * p_t + aug * p_t / pi_a);
            }
            out.push(row);
            idx += 1;
        }
    }
    Ok((out, diagnostics))
}

/// Single-point convenience wrapper around [`subject_contributions`]:
/// the contribution of the subject at flat index `idx` at time `t`.
pub fn subject_contribution(
    dataset: &SurvivalDataset,
    idx: usize,
    arm: u8,
    oracles: &OraclePair,
    pi: &PropensitySpec,
    t: f64,
) -> Result<f64> {
    let (rows, _) = subject_contributions(dataset, arm, oracles, pi, &[t])?;
    Ok(rows[idx][0])
}

/// Aggregates a subjects x grid contribution matrix with the level's weights,
/// in fixed (cluster, subject) order.
pub fn aggregate(dataset: &SurvivalDataset, contributions: &[Vec<f64>], level: Level) -> Vec<f64> {
    let width = contributions.first().map_or(0, |r| r.len());
    let mut total = vec![0.0; width];
    let mut idx = 0usize;
    match level {
        Level::Cluster => {
            for cluster in dataset.clusters() {
                let mut within = vec![0.0; width];
                for _ in &cluster.subjects {
                    for (w, v) in within.iter_mut().zip(&contributions[idx]) {
                        *w += v;
                    }
                    idx += 1;
                }
                let n = cluster.size() as f64;
                for (t, w) in total.iter_mut().zip(&within) {
                    *t += w / n;
                }
            }
            let m = dataset.n_clusters() as f64;
            total.iter_mut().for_each(|t| *t /= m);
        }
        Level::Individual => {
            for row in contributions {
                for (t, v) in total.iter_mut().zip(row) {
                    *t += v;
                }
            }
            let n = dataset.n_subjects() as f64;
            total.iter_mut().for_each(|t| *t /= n);
        }
    }
    total
}

/// The aggregated survival curve for one arm at one level.
pub fn estimate_survival(
    dataset: &SurvivalDataset,
    oracles: &OraclePair,
    pi: &PropensitySpec,
    level: Level,
    grid: &[f64],
) -> Result<(SurvivalCurve, Diagnostics)> {
    let (contributions, mut diagnostics) =
        subject_contributions(dataset, oracles.arm(), oracles, pi, grid)?;
    let values = aggregate(dataset, &contributions, level);
    diagnostics.out_of_range_values += values
        .iter()
        .filter(|&&v| !(0.0..=1.0).contains(&v))
        .count();
    Ok((SurvivalCurve::new(grid.to_vec(), values), diagnostics))
}

/// f{S^(1)(t), S^(0)(t)} on the chosen scale.
pub fn effect_spce(
    treated: &SurvivalCurve,
    control: &SurvivalCurve,
    scale: EffectScale,
    t: f64,
) -> Result<f64> {
    scale.apply(treated.value_at(t), control.value_at(t))
}

/// Trapezoid nodes over [0, tau]: 0, every grid point in (0, tau], and tau
/// itself (step-evaluated), with the composite trapezoid weights.
fn trapezoid_nodes(grid: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0];
    for &t in grid {
        if t > 0.0 && t <= tau {
            nodes.push(t);
        }
    }
    if *nodes.last().unwrap() < tau {
        nodes.push(tau);
    }
    let k = nodes.len();
    let mut weights = vec![0.0; k];
    for i in 0..k - 1 {
        let h = (nodes[i + 1] - nodes[i]) / 2.0;
        weights[i] += h;
        weights[i + 1] += h;
    }
    (nodes, weights)
}

/// Restricted mean survival time by the trapezoidal rule; times beyond the
/// curve's grid use the step extension (last value carried forward).
pub fn rmst_from_curve(curve: &SurvivalCurve, tau: f64) -> f64 {
    let (nodes, weights) = trapezoid_nodes(&curve.grid, tau);
    nodes
        .iter()
        .zip(&weights)
        .map(|(&t, &w)| w * curve.value_at(t))
        .sum()
}

/// As [`rmst_from_curve`], but rejects tau beyond the grid end instead of
/// extending the last step.
pub fn rmst_from_curve_strict(curve: &SurvivalCurve, tau: f64) -> Result<f64> {
    let grid_end = curve.grid.last().copied().unwrap_or(0.0);
    if tau > grid_end {
        return Err(Error::TauBeyondGrid { tau, grid_end });
    }
    Ok(rmst_from_curve(curve, tau))
}

/// RMST effect from per-subject contributions of both arms on a common grid:
/// the per-subject arm difference is integrated by the trapezoidal rule and
/// aggregated with the level's weights. On the ratio scale the comparison is
/// applied to the aggregated per-arm RMSTs instead.
pub fn effect_rmst(
    dataset: &SurvivalDataset,
    treated: &[Vec<f64>],
    control: &[Vec<f64>],
    grid: &[f64],
    scale: EffectScale,
    tau: f64,
    level: Level,
) -> Result<f64> {
    let (nodes, weights) = trapezoid_nodes(grid, tau);
    let curve_from = |rows: &[Vec<f64>]| {
        let agg = aggregate(dataset, rows, level);
        SurvivalCurve::new(grid.to_vec(), agg)
    };
    match scale {
        EffectScale::Difference => {
            // per-subject integral of the arm difference
            let integrate = |row1: &[f64], row0: &[f64]| -> f64 {
                let step = |row: &[f64], t: f64| {
                    let k = grid.partition_point(|&g| g <= t);
                    if k == 0 {
                        1.0
                    } else {
                        row[k - 1]
                    }
                };
                nodes
                    .iter()
                    .zip(&weights)
                    .map(|(&t, &w)| w * (step(row1, t) - step(row0, t)))
                    .sum()
            };
            let integrals: Vec<Vec<f64>> = treated
                .iter()
                .zip(control)
                .map(|(r1, r0)| vec![integrate(r1, r0)])
                .collect();
            let effect = aggregate(dataset, &integrals, level)[0];
            debug_assert!({
                let check = rmst_from_curve(&curve_from(treated), tau)
                    - rmst_from_curve(&curve_from(control), tau);
                (effect - check).abs() < 1e-10
            });
            Ok(effect)
        }
        EffectScale::Ratio => {
            let mu1 = rmst_from_curve(&curve_from(treated), tau);
            let mu0 = rmst_from_curve(&curve_from(control), tau);
            scale.apply(mu1, mu0)
        }
    }
}

/// Survival summaries for one arm at both aggregation levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: u8,
    pub cluster_curve: SurvivalCurve,
    pub individual_curve: SurvivalCurve,
    /// (tau, rmst) pairs at the requested horizons
    pub rmst_cluster: Vec<(f64, f64)>,
    pub rmst_individual: Vec<(f64, f64)>,
}

/// One effect estimate, optionally with jackknife uncertainty attached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub level: Level,
    /// report time t for SPCE, horizon tau for RMST
    pub time: f64,
    pub estimate: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub se: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ci_upper: Option<f64>,
}

/// Full estimation output: per-arm summaries plus effects on the chosen
/// scale. By construction each reported RMST is the trapezoid of the
/// matching reported curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimandReport {
    pub scale: EffectScale,
    /// treated first, control second
    pub arms: [ArmSummary; 2],
    pub spce: Vec<EffectEstimate>,
    pub rmst: Vec<EffectEstimate>,
    pub diagnostics: Diagnostics,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Subject};
    use crate::oracle::{CensoringOracle, OutcomeOracle};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn subject(time: f64, event: bool) -> Subject {
        Subject {
            time,
            event,
            covariates: vec![],
        }
    }

    fn pair_no_censoring(arm: u8, predictions: Vec<f64>) -> OraclePair {
        let n = predictions.len();
        let outcome = OutcomeOracle::from_predictions(arm, predictions);
        let censoring = CensoringOracle::from_parts(
            arm,
            vec![],
            vec![vec![]; n],
            vec![SurvivalCurve::new(vec![], vec![]); n],
        );
        OraclePair::new(outcome, censoring).unwrap()
    }

    fn toy() -> SurvivalDataset {
        SurvivalDataset::new(
            vec![],
            vec![
                Cluster {
                    id: "t".into(),
                    arm: 1,
                    subjects: vec![subject(2.0, true)],
                },
                Cluster {
                    id: "c".into(),
                    arm: 0,
                    subjects: vec![subject(2.0, true)],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn uncensored_treated_subject_matches_formula() {
        // A = a = 1, pi = 0.5, U >= t, no censoring jumps, P = 0.8:
        // 1/0.5 - (0.5/0.5) 0.8 = 1.2
        let ds = toy();
        let pair = pair_no_censoring(1, vec![0.8, 0.8]);
        let pi = PropensitySpec::default();
        let c = subject_contribution(&ds, 0, 1, &pair, &pi, 1.0).unwrap();
        assert_relative_eq!(c, 1.2, epsilon = 1e-12);
    }

    #[test]
    fn off_arm_subject_contributes_its_prediction() {
        // A = 0, a = 1, pi = 0.5, P = 0.8 -> 0.8
        let ds = toy();
        let pair = pair_no_censoring(1, vec![0.8, 0.8]);
        let pi = PropensitySpec::default();
        let c = subject_contribution(&ds, 1, 1, &pair, &pi, 1.0).unwrap();
        assert_relative_eq!(c, 0.8, epsilon = 1e-12);
    }

    #[test]
    fn censored_subject_scalar_oracle() {
        // Hand-evaluated contribution for a subject censored at u = 1, asked
        // at t = 2 with A = a = 1, pi = 0.5:
        //   dH(1|v) = 0.2, K_c(1) = 0.9, P(1) = 0.8, P(2) = 0.6
        //   term1 = 0 (U < t)
        //   term2 = ((1 - 0.5)/0.5) 0.6 = 0.6
        //   dM(1) = 1 - 0.2 = 0.8
        //   term3 = 2 * 0.6 * 0.8 / (0.9 * 0.8) = 4/3
        //   total = 0 - 0.6 + 4/3 = 11/15
        let ds = SurvivalDataset::new(
            vec![],
            vec![
                Cluster {
                    id: "t".into(),
                    arm: 1,
                    subjects: vec![subject(1.0, false), subject(3.0, true)],
                },
                Cluster {
                    id: "c".into(),
                    arm: 0,
                    subjects: vec![subject(2.0, true)],
                },
            ],
        )
        .unwrap();
        let outcome = OutcomeOracle::from_km(
            1,
            SurvivalCurve::new(vec![1.0, 2.0], vec![0.8, 0.6]),
        );
        // per-subject predictions differ only through the shared step curve
        let k_curve = SurvivalCurve::new(vec![1.0], vec![0.9]);
        let censoring = CensoringOracle::from_parts(
            1,
            vec![1.0],
            vec![vec![0.2]; 3],
            vec![k_curve; 3],
        );
        let pair = OraclePair::new(outcome, censoring).unwrap();
        let pi = PropensitySpec::default();
        let c = subject_contribution(&ds, 0, 1, &pair, &pi, 2.0).unwrap();
        assert_relative_eq!(c, 11.0 / 15.0, epsilon = 1e-12);
    }

    #[test]
    fn aggregation_levels_weigh_clusters_correctly() {
        // clusters of sizes {2, 3} with synthetic contributions {1,0} and
        // {1,1,0}: cluster level (0.5 + 2/3)/2, individual level 3/5
        let ds = SurvivalDataset::new(
            vec![],
            vec![
                Cluster {
                    id: "a".into(),
                    arm: 1,
                    subjects: vec![subject(1.0, true), subject(2.0, false)],
                },
                Cluster {
                    id: "b".into(),
                    arm: 0,
                    subjects: vec![subject(1.0, true), subject(2.0, true), subject(3.0, false)],
                },
            ],
        )
        .unwrap();
        let contributions = vec![vec![1.0], vec![0.0], vec![1.0], vec![1.0], vec![0.0]];
        let c = aggregate(&ds, &contributions, Level::Cluster)[0];
        let i = aggregate(&ds, &contributions, Level::Individual)[0];
        assert_relative_eq!(c, (0.5 + 2.0 / 3.0) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(i, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn balanced_design_reduces_to_empirical_survival() {
        // equal cluster sizes, exactly half treated, no censoring, constant
        // outcome predictions: the recentering terms cancel across arms and
        // the estimate is the treated-arm empirical survival.
        let ds = SurvivalDataset::new(
            vec![],
            vec![
                Cluster {
                    id: "t1".into(),
                    arm: 1,
                    subjects: vec![subject(1.0, true), subject(3.0, true)],
                },
                Cluster {
                    id: "t2".into(),
                    arm: 1,
                    subjects: vec![subject(2.0, true), subject(4.0, true)],
                },
                Cluster {
                    id: "c1".into(),
                    arm: 0,
                    subjects: vec![subject(1.5, true), subject(2.5, true)],
                },
                Cluster {
                    id: "c2".into(),
                    arm: 0,
                    subjects: vec![subject(0.5, true), subject(3.5, true)],
                },
            ],
        )
        .unwrap();
        let pair = pair_no_censoring(1, vec![0.55; 8]);
        let pi = PropensitySpec::default();
        let grid = [0.0, 2.5];
        let (curve, diag) =
            estimate_survival(&ds, &pair, &pi, Level::Individual, &grid).unwrap();
        // treated times {1, 3, 2, 4}: 2 of 4 at risk at t = 2.5
        assert_relative_eq!(curve.value_at(2.5), 0.5, epsilon = 1e-12);
        assert_relative_eq!(curve.value_at(0.0), 1.0, epsilon = 1e-12);
        assert_eq!(diag.censoring_floor_hits, 0);
    }

    #[test]
    fn equal_cluster_sizes_collapse_levels() {
        let ds = SurvivalDataset::new(
            vec![],
            vec![
                Cluster {
                    id: "a".into(),
                    arm: 1,
                    subjects: vec![subject(1.0, true), subject(2.0, false)],
                },
                Cluster {
                    id: "b".into(),
                    arm: 0,
                    subjects: vec![subject(1.5, true), subject(2.5, false)],
                },
            ],
        )
        .unwrap();
        let contributions = vec![vec![0.3], vec![0.9], vec![0.1], vec![0.7]];
        let c = aggregate(&ds, &contributions, Level::Cluster)[0];
        let i = aggregate(&ds, &contributions, Level::Individual)[0];
        assert_relative_eq!(c, i, epsilon = 1e-12);
    }

    #[test]
    fn censoring_floor_is_counted() {
        let ds = toy();
        let outcome = OutcomeOracle::from_predictions(1, vec![0.8, 0.8]);
        // K_c crashes to 0 after t = 1
        let k_curve = SurvivalCurve::new(vec![1.0], vec![0.0]);
        let censoring =
            CensoringOracle::from_parts(1, vec![], vec![vec![]; 2], vec![k_curve; 2]);
        let pair = OraclePair::new(outcome, censoring).unwrap();
        let pi = PropensitySpec::default();
        let (contributions, diag) =
            subject_contributions(&ds, 1, &pair, &pi, &[1.5]).unwrap();
        assert_eq!(diag.censoring_floor_hits, 1);
        // term1 = 1 / (0.5 * 1e-8), term2 recentering unchanged
        assert_relative_eq!(
            contributions[0][0],
            1.0 / (0.5 * CENSORING_FLOOR) - 0.8,
            max_relative = 1e-12
        );
    }

    #[test]
    fn spce_effect_scales() {
        let c1 = SurvivalCurve::new(vec![1.0], vec![0.544]);
        let c0 = SurvivalCurve::new(vec![1.0], vec![0.711]);
        let d = effect_spce(&c1, &c0, EffectScale::Difference, 1.0).unwrap();
        assert_relative_eq!(d, -0.167, epsilon = 1e-12);
        let same = SurvivalCurve::new(vec![1.0], vec![0.5]);
        assert_relative_eq!(
            effect_spce(&same, &same, EffectScale::Ratio, 1.0).unwrap(),
            1.0,
            epsilon = 1e-12
        );
        let zero = SurvivalCurve::new(vec![1.0], vec![0.0]);
        assert!(matches!(
            effect_spce(&c1, &zero, EffectScale::Ratio, 1.0),
            Err(Error::RatioDenominatorZero)
        ));
    }

    #[test]
    fn rmst_rectangle_and_triangle() {
        let flat = SurvivalCurve::new(vec![0.0, 1.0], vec![1.0, 1.0]);
        assert_relative_eq!(rmst_from_curve(&flat, 1.0), 1.0, epsilon = 1e-12);
        let tri = SurvivalCurve::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]);
        assert_relative_eq!(rmst_from_curve(&tri, 1.0), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rmst_approximates_exponential_integral() {
        let n = 1000;
        let grid: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
        let values: Vec<f64> = grid.iter().map(|&t| (-t).exp()).collect();
        let curve = SurvivalCurve::new(grid, values);
        assert_relative_eq!(
            rmst_from_curve(&curve, 1.0),
            1.0 - (-1.0f64).exp(),
            epsilon = 1e-4
        );
    }

    #[test]
    fn rmst_strict_rejects_extrapolation() {
        let curve = SurvivalCurve::new(vec![0.0, 1.0], vec![1.0, 0.5]);
        assert!(rmst_from_curve_strict(&curve, 1.0).is_ok());
        assert!(matches!(
            rmst_from_curve_strict(&curve, 2.0),
            Err(Error::TauBeyondGrid { .. })
        ));
        // default behavior extends the last step
        assert_relative_eq!(rmst_from_curve(&curve, 2.0), 0.75 + 0.5, epsilon = 1e-12);
    }

    #[test]
    fn rmst_effect_trivial_cases() {
        let ds = toy();
        let grid = [0.0, 1.0, 2.0];
        let ones = vec![vec![1.0; 3]; 2];
        let zeros = vec![vec![0.0; 3]; 2];
        for level in Level::ALL {
            let same =
                effect_rmst(&ds, &ones, &ones, &grid, EffectScale::Difference, 2.0, level)
                    .unwrap();
            assert_relative_eq!(same, 0.0, epsilon = 1e-12);
            let gap =
                effect_rmst(&ds, &ones, &zeros, &grid, EffectScale::Difference, 2.0, level)
                    .unwrap();
            assert_relative_eq!(gap, 2.0, epsilon = 1e-12);
        }
    }

    proptest! {
        #[test]
        fn rmst_effect_matches_per_arm_difference(
            vals1 in proptest::collection::vec(-0.2f64..1.2, 10),
            vals0 in proptest::collection::vec(-0.2f64..1.2, 10),
        ) {
            let ds = SurvivalDataset::new(
                vec![],
                vec![
                    Cluster {
                        id: "a".into(),
                        arm: 1,
                        subjects: vec![subject(1.0, true), subject(2.0, false)],
                    },
                    Cluster {
                        id: "b".into(),
                        arm: 0,
                        subjects: vec![subject(1.5, true), subject(2.5, false), subject(0.5, true)],
                    },
                ],
            )
            .unwrap();
            let grid = [0.0, 0.5, 1.0, 2.0];
            let rows = |vals: &[f64]| -> Vec<Vec<f64>> {
                (0..5).map(|i| (0..4).map(|k| vals[(i + k) % vals.len()]).collect()).collect()
            };
            let treated = rows(&vals1);
            let control = rows(&vals0);
            for level in Level::ALL {
                let joint = effect_rmst(&ds, &treated, &control, &grid, EffectScale::Difference, 1.7, level).unwrap();
                let curve = |rows: &[Vec<f64>]| SurvivalCurve::new(grid.to_vec(), aggregate(&ds, rows, level));
                let split = rmst_from_curve(&curve(&treated), 1.7) - rmst_from_curve(&curve(&control), 1.7);
                prop_assert!((joint - split).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregated_trapezoid_equals_trapezoid_of_aggregate(
            vals in proptest::collection::vec(0.0f64..1.0, 12),
        ) {
            // Proposition-1 style identity: integrating each subject's curve
            // and averaging equals integrating the averaged curve.
            let ds = SurvivalDataset::new(
                vec![],
                vec![
                    Cluster { id: "a".into(), arm: 1, subjects: vec![subject(1.0, true)] },
                    Cluster { id: "b".into(), arm: 0, subjects: vec![subject(1.5, true), subject(2.0, false)] },
                ],
            )
            .unwrap();
            let grid = [0.0, 0.7, 1.3, 2.1];
            let rows: Vec<Vec<f64>> = (0..3).map(|i| vals[4 * i..4 * (i + 1)].to_vec()).collect();
            for level in Level::ALL {
                let curve = SurvivalCurve::new(grid.to_vec(), aggregate(&ds, &rows, level));
                let direct = rmst_from_curve(&curve, 2.1);
                let per_subject: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|r| vec![rmst_from_curve(&SurvivalCurve::new(grid.to_vec(), r.clone()), 2.1)])
                    .collect();
                let aggregated = aggregate(&ds, &per_subject, level)[0];
                prop_assert!((direct - aggregated).abs() < 1e-12);
            }
        }
    }
}
