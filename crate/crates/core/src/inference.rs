//! Leave-one-cluster-out jackknife variance with t(M-2) confidence
//! intervals. Every nuisance model is refit on each leave-one-out subset; an
//! infeasible subset aborts the whole run rather than silently shrinking M.

use serde::{Deserialize, Serialize};

use crate::aipwcc::{self, effect_spce, rmst_from_curve};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::numeric::inv_inc_beta;
use crate::pipeline::{CurveSet, Pipeline};
use crate::types::{EffectScale, Level};

/// What to jackknife: a survival-probability contrast at time t or an RMST
/// contrast at horizon t, at one aggregation level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    pub level: Level,
    pub time: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Spce,
    Rmst,
}

/// Jackknife output for one target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetResult {
    pub spec: TargetSpec,
    /// full-sample point estimate on the effect scale
    pub estimate: f64,
    /// per-replicate (treated, control) values of the underlying quantity
    pub replicates: Vec<[f64; 2]>,
    /// 2x2 jackknife covariance of (treated, control)
    pub covariance: [[f64; 2]; 2],
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JackknifeResult {
    pub df: usize,
    pub alpha: f64,
    pub scale: EffectScale,
    pub targets: Vec<TargetResult>,
}

/// Jackknife covariance of paired replicates:
/// ((M-1)/M) sum_g (x_g - x_bar)(x_g - x_bar)'.
pub fn covariance_matrix(replicates: &[[f64; 2]]) -> [[f64; 2]; 2] {
    let m = replicates.len() as f64;
    let mut mean = [0.0; 2];
    for r in replicates {
        mean[0] += r[0];
        mean[1] += r[1];
    }
    mean[0] /= m;
    mean[1] /= m;
    let mut cov = [[0.0; 2]; 2];
    for r in replicates {
        let d = [r[0] - mean[0], r[1] - mean[1]];
        for (i, di) in d.iter().enumerate() {
            for (j, dj) in d.iter().enumerate() {
                cov[i][j] += di * dj;
            }
        }
    }
    let scale = (m - 1.0) / m;
    for row in &mut cov {
        for v in row {
            *v *= scale;
        }
    }
    cov
}

/// Scalar jackknife variance: ((M-1)/M) sum_g (e_g - e_bar)^2.
fn scalar_variance(replicates: &[f64]) -> f64 {
    let m = replicates.len() as f64;
    let mean = replicates.iter().sum::<f64>() / m;
    replicates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() * (m - 1.0) / m
}

/// Inverse CDF of Student's t with `df` degrees of freedom, through the
/// regularized incomplete beta inverse.
pub fn t_quantile(df: f64, p: f64) -> f64 {
    debug_assert!(df > 0.0 && p > 0.0 && p < 1.0);
    if p == 0.5 {
        return 0.0;
    }
    let tail = if p > 0.5 { 1.0 - p } else { p };
    // P(T > t) = I_x(df/2, 1/2) / 2 with x = df / (df + t^2)
    let x = inv_inc_beta(df / 2.0, 0.5, 2.0 * tail);
    let t = (df * (1.0 - x) / x).sqrt();
    if p > 0.5 {
        t
    } else {
        -t
    }
}

/// Runs the full leave-one-cluster-out jackknife for a pipeline. For every
/// cluster g the subset dataset must itself be estimable; otherwise the run
/// aborts naming the offending cluster.
pub fn jackknife(
    dataset: &SurvivalDataset,
    pipeline: &Pipeline,
    targets: &[TargetSpec],
    scale: EffectScale,
    alpha: f64,
) -> Result<JackknifeResult> {
    let m = dataset.n_clusters();
    if m < 3 {
        return Err(Error::TooFewClustersForJackknife(m));
    }
    let max_rmst_tau = targets
        .iter()
        .filter(|t| t.kind == TargetKind::Rmst)
        .map(|t| t.time)
        .fold(f64::NEG_INFINITY, f64::max);
    let report_times: Vec<f64> = targets.iter().map(|t| t.time).collect();
    let mut grid = if max_rmst_tau.is_finite() {
        // RMST needs the curve's full shape up to the largest horizon
        aipwcc::default_grid(dataset, &report_times)
            .into_iter()
            .filter(|&t| t <= max_rmst_tau || report_times.contains(&t))
            .collect()
    } else {
        let mut g = vec![0.0];
        g.extend_from_slice(&report_times);
        g.sort_by(|a, b| a.partial_cmp(b).unwrap());
        g.dedup();
        g
    };
    if grid.first() != Some(&0.0) {
        grid.insert(0, 0.0);
    }

    let full = pipeline.curves(dataset, &grid)?;

    let mut replicate_curves: Vec<CurveSet> = Vec::with_capacity(m);
    for g in 0..m {
        let subset = dataset.without_cluster(g)?;
        let cluster_id = dataset.clusters()[g].id.clone();
        let curves = pipeline
            .curves(&subset, &grid)
            .map_err(|e| Error::LeaveOneOutInfeasible(cluster_id, e.to_string()))?;
        replicate_curves.push(curves);
    }

    let df = m - 2;
    let t_crit = t_quantile(df as f64, 1.0 - alpha / 2.0);
    let mut results = Vec::with_capacity(targets.len());
    for spec in targets {
        let eval = |curves: &CurveSet| -> Result<([f64; 2], f64)> {
            let [treated, control] = curves.at_level(spec.level);
            let pair = match spec.kind {
                TargetKind::Spce => [treated.value_at(spec.time), control.value_at(spec.time)],
                TargetKind::Rmst => [
                    rmst_from_curve(treated, spec.time),
                    rmst_from_curve(control, spec.time),
                ],
            };
            let effect = match spec.kind {
                TargetKind::Spce => effect_spce(treated, control, scale, spec.time)?,
                TargetKind::Rmst => scale.apply(pair[0], pair[1])?,
            };
            Ok((pair, effect))
        };
        let (_, estimate) = eval(&full)?;
        let mut replicates = Vec::with_capacity(m);
        let mut effects = Vec::with_capacity(m);
        for curves in &replicate_curves {
            let (pair, effect) = eval(curves)?;
            replicates.push(pair);
            effects.push(effect);
        }
        let covariance = covariance_matrix(&replicates);
        // on the difference scale this equals [1,-1] Sigma [1,-1]'
        let se = scalar_variance(&effects).sqrt();
        results.push(TargetResult {
            spec: *spec,
            estimate,
            replicates,
            covariance,
            se,
            ci_lower: estimate - t_crit * se,
            ci_upper: estimate + t_crit * se,
        });
    }
    Ok(JackknifeResult {
        df,
        alpha,
        scale,
        targets: results,
    })
}
