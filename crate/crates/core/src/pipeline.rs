//! Estimation strategies as a single recipe type: AIPWCC with either working
//! model backend, outcome-regression standardization, and weighted
//! Kaplan-Meier. The jackknife and the simulation lab both consume this
//! interface so every strategy is refit the same way.

use serde::{Deserialize, Serialize};

use crate::aipwcc::{
    self, aggregate, rmst_from_curve, subject_contributions, ArmSummary, Diagnostics,
    EffectEstimate, EstimandReport,
};
use crate::cox::FitControls;
use crate::data::SurvivalDataset;
use crate::error::Result;
use crate::formula::{ModelFormula, Role};
use crate::nonparam::{standardize_outcome_model, weighted_km, KmWeighting, SurvivalCurve};
use crate::oracle::{CensoringOracle, OraclePair, OutcomeOracle};
use crate::types::{EffectScale, Level, PropensitySpec};

/// Working-model family for model-based strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Marginal,
    Frailty,
}

/// One estimation strategy. Formulas are carried as right-hand-side strings
/// so recipes serialize cleanly; an empty string is the null model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Method {
    /// Doubly robust estimator with fitted outcome and censoring models.
    Aipwcc {
        backend: Backend,
        outcome: String,
        censoring: String,
    },
    /// Standardized outcome-model predictions (g-computation).
    OutcomeRegression { backend: Backend, outcome: String },
    /// Weighted Kaplan-Meier, no covariates.
    KaplanMeier,
}

/// A full estimation recipe: strategy plus design knowledge and fit controls.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub method: Method,
    pub pi: PropensitySpec,
    pub controls: FitControls,
}

/// Survival curves for both arms at both levels on a shared grid.
pub struct CurveSet {
    /// treated first, control second
    pub cluster: [SurvivalCurve; 2],
    pub individual: [SurvivalCurve; 2],
    pub diagnostics: Diagnostics,
}

impl CurveSet {
    pub fn at_level(&self, level: Level) -> &[SurvivalCurve; 2] {
        match level {
            Level::Cluster => &self.cluster,
            Level::Individual => &self.individual,
        }
    }
}

impl Pipeline {
    /// Fits all nuisance models on `dataset` and evaluates both arms' curves
    /// on `grid` (increasing, starting at 0).
    pub fn curves(&self, dataset: &SurvivalDataset, grid: &[f64]) -> Result<CurveSet> {
        match &self.method {
            Method::Aipwcc {
                backend,
                outcome,
                censoring,
            } => {
                let mut diagnostics = Diagnostics::default();
                let mut per_arm = Vec::with_capacity(2);
                for arm in [1u8, 0u8] {
                    let pair = fit_pair(dataset, arm, *backend, outcome, censoring, &self.controls)?;
                    let (rows, diag) =
                        subject_contributions(dataset, arm, &pair, &self.pi, grid)?;
                    diagnostics.merge(diag);
                    per_arm.push(rows);
                }
                let build = |level: Level, rows: &[Vec<f64>]| {
                    SurvivalCurve::new(grid.to_vec(), aggregate(dataset, rows, level))
                };
                let curves = CurveSet {
                    cluster: [
                        build(Level::Cluster, &per_arm[0]),
                        build(Level::Cluster, &per_arm[1]),
                    ],
                    individual: [
                        build(Level::Individual, &per_arm[0]),
                        build(Level::Individual, &per_arm[1]),
                    ],
                    diagnostics,
                };
                Ok(curves)
            }
            Method::OutcomeRegression { backend, outcome } => {
                let formula = ModelFormula::parse(Role::Outcome, outcome)?;
                let mut cluster = Vec::with_capacity(2);
                let mut individual = Vec::with_capacity(2);
                for arm in [1u8, 0u8] {
                    let oracle = match backend {
                        Backend::Marginal => {
                            OutcomeOracle::fit_marginal(dataset, arm, &formula, &self.controls)?
                        }
                        Backend::Frailty => {
                            OutcomeOracle::fit_frailty(dataset, arm, &formula, &self.controls)?
                        }
                    };
                    let values = |level: Level| {
                        grid.iter()
                            .map(|&t| standardize_outcome_model(&oracle, dataset, level, t))
                            .collect::<Vec<_>>()
                    };
                    cluster.push(SurvivalCurve::new(grid.to_vec(), values(Level::Cluster)));
                    individual.push(SurvivalCurve::new(
                        grid.to_vec(),
                        values(Level::Individual),
                    ));
                }
                Ok(CurveSet {
                    cluster: [cluster.remove(0), cluster.remove(0)],
                    individual: [individual.remove(0), individual.remove(0)],
                    diagnostics: Diagnostics::default(),
                })
            }
            Method::KaplanMeier => {
                let on_grid = |curve: &SurvivalCurve| {
                    SurvivalCurve::new(
                        grid.to_vec(),
                        grid.iter().map(|&t| curve.value_at(t)).collect(),
                    )
                };
                let km = |arm: u8, weighting: KmWeighting| -> Result<SurvivalCurve> {
                    Ok(on_grid(&weighted_km(dataset, arm, weighting)?))
                };
                Ok(CurveSet {
                    cluster: [
                        km(1, KmWeighting::ClusterInverseSize)?,
                        km(0, KmWeighting::ClusterInverseSize)?,
                    ],
                    individual: [km(1, KmWeighting::Equal)?, km(0, KmWeighting::Equal)?],
                    diagnostics: Diagnostics::default(),
                })
            }
        }
    }

    /// Point estimation: curves on the default grid plus SPCE effects at
    /// `report_times` and RMST effects at `taus`, without uncertainty.
    pub fn estimate(
        &self,
        dataset: &SurvivalDataset,
        report_times: &[f64],
        taus: &[f64],
        scale: EffectScale,
    ) -> Result<EstimandReport> {
        let mut all_times: Vec<f64> = report_times.to_vec();
        all_times.extend_from_slice(taus);
        let grid = aipwcc::default_grid(dataset, &all_times);
        let curves = self.curves(dataset, &grid)?;

        let mut spce = Vec::new();
        let mut rmst = Vec::new();
        for level in Level::ALL {
            let [treated, control] = curves.at_level(level);
            for &t in report_times {
                spce.push(EffectEstimate {
                    level,
                    time: t,
                    estimate: aipwcc::effect_spce(treated, control, scale, t)?,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                });
            }
            for &tau in taus {
                let mu1 = rmst_from_curve(treated, tau);
                let mu0 = rmst_from_curve(control, tau);
                rmst.push(EffectEstimate {
                    level,
                    time: tau,
                    estimate: scale.apply(mu1, mu0)?,
                    se: None,
                    ci_lower: None,
                    ci_upper: None,
                });
            }
        }
        let summary = |slot: usize, arm: u8| ArmSummary {
            arm,
            cluster_curve: curves.cluster[slot].clone(),
            individual_curve: curves.individual[slot].clone(),
            rmst_cluster: taus
                .iter()
                .map(|&tau| (tau, rmst_from_curve(&curves.cluster[slot], tau)))
                .collect(),
            rmst_individual: taus
                .iter()
                .map(|&tau| (tau, rmst_from_curve(&curves.individual[slot], tau)))
                .collect(),
        };
        Ok(EstimandReport {
            scale,
            arms: [summary(0, 1), summary(1, 0)],
            spce,
            rmst,
            diagnostics: curves.diagnostics,
        })
    }
}

fn fit_pair(
    dataset: &SurvivalDataset,
    arm: u8,
    backend: Backend,
    outcome_rhs: &str,
    censoring_rhs: &str,
    controls: &FitControls,
) -> Result<OraclePair> {
    let outcome_formula = ModelFormula::parse(Role::Outcome, outcome_rhs)?;
    let censoring_formula = ModelFormula::parse(Role::Censoring, censoring_rhs)?;
    let (outcome, censoring) = match backend {
        Backend::Marginal => (
            OutcomeOracle::fit_marginal(dataset, arm, &outcome_formula, controls)?,
            CensoringOracle::fit_marginal(dataset, arm, &censoring_formula, controls)?,
        ),
        Backend::Frailty => (
            OutcomeOracle::fit_frailty(dataset, arm, &outcome_formula, controls)?,
            CensoringOracle::fit_frailty(dataset, arm, &censoring_formula, controls)?,
        ),
    };
    OraclePair::new(outcome, censoring)
}
