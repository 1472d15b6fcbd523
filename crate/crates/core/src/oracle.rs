//! Conditional survival oracles: a uniform front end over marginal-Cox,
//! gamma-frailty, and Kaplan-Meier backends, bound to a dataset so every
//! subject's predictions are cheap to evaluate.

use crate::cox::{fit_cox, CoxFit, FitControls};
use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::formula::{build_design, ModelFormula, Role};
use crate::frailty::{fit_frailty, FrailtyFit};
use crate::nonparam::SurvivalCurve;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendTag {
    MarginalCox,
    Frailty,
    Km,
    Fixed,
}

enum OutcomeBackend {
    Marginal {
        fit: CoxFit,
        risk: Vec<f64>,
    },
    Frailty {
        fit: FrailtyFit,
        risk: Vec<f64>,
        /// cumulative conditional baseline at each jump (inclusive prefix)
        cum: Vec<f64>,
    },
    Km {
        curve: SurvivalCurve,
    },
    /// Fixed per-subject predictions, constant in t (test harness backend).
    Fixed {
        predictions: Vec<f64>,
    },
}

fn baseline_prefix(baseline: &[(f64, f64)]) -> Vec<f64> {
    let mut acc = 0.0;
    baseline
        .iter()
        .map(|&(_, inc)| {
            acc += inc;
            acc
        })
        .collect()
}

fn cumulative_at(baseline: &[(f64, f64)], cum: &[f64], t: f64) -> f64 {
    let k = baseline.partition_point(|&(time, _)| time <= t);
    if k == 0 {
        0.0
    } else {
        cum[k - 1]
    }
}

/// Evaluates P(T >= t | V) for every subject of a dataset under one arm's
/// fitted outcome model.
pub struct OutcomeOracle {
    pub arm: u8,
    backend: OutcomeBackend,
}

impl OutcomeOracle {
    pub fn fit_marginal(
        dataset: &SurvivalDataset,
        arm: u8,
        formula: &ModelFormula,
        controls: &FitControls,
    ) -> Result<Self> {
        debug_assert_eq!(formula.role, Role::Outcome);
        let fit = fit_cox(dataset, arm, formula, controls)?;
        let risk = risk_scores(dataset, formula, &fit.coefficients)?;
        Ok(OutcomeOracle {
            arm,
            backend: OutcomeBackend::Marginal { fit, risk },
        })
    }

    pub fn fit_frailty(
        dataset: &SurvivalDataset,
        arm: u8,
        formula: &ModelFormula,
        controls: &FitControls,
    ) -> Result<Self> {
        debug_assert_eq!(formula.role, Role::Outcome);
        let fit = fit_frailty(dataset, arm, formula, controls)?;
        let risk = risk_scores(dataset, formula, &fit.coefficients)?;
        let cum = baseline_prefix(&fit.baseline);
        Ok(OutcomeOracle {
            arm,
            backend: OutcomeBackend::Frailty { fit, risk, cum },
        })
    }

    pub fn from_km(arm: u8, curve: SurvivalCurve) -> Self {
        OutcomeOracle {
            arm,
            backend: OutcomeBackend::Km { curve },
        }
    }

    pub fn from_predictions(arm: u8, predictions: Vec<f64>) -> Self {
        OutcomeOracle {
            arm,
            backend: OutcomeBackend::Fixed { predictions },
        }
    }

    pub fn backend_tag(&self) -> BackendTag {
        match &self.backend {
            OutcomeBackend::Marginal { .. } => BackendTag::MarginalCox,
            OutcomeBackend::Frailty { .. } => BackendTag::Frailty,
            OutcomeBackend::Km { .. } => BackendTag::Km,
            OutcomeBackend::Fixed { .. } => BackendTag::Fixed,
        }
    }

    /// P(T >= t | V) for the subject at flat index `idx` (canonical order).
    pub fn survival(&self, idx: usize, t: f64) -> f64 {
        match &self.backend {
            OutcomeBackend::Marginal { fit, risk } => {
                (-fit.cumulative_baseline(t) * risk[idx]).exp()
            }
            OutcomeBackend::Frailty { fit, risk, cum } => {
                let shape = fit.frailty_shape;
                let lambda = cumulative_at(&fit.baseline, cum, t) * risk[idx];
                (shape / (shape + lambda)).powf(shape)
            }
            OutcomeBackend::Km { curve } => curve.value_at(t),
            OutcomeBackend::Fixed { predictions } => predictions[idx],
        }
    }
}

enum CensoringBackend {
    Marginal {
        fit: CoxFit,
        risk: Vec<f64>,
    },
    Frailty {
        fit: FrailtyFit,
        risk: Vec<f64>,
        /// cumulative conditional baseline at each jump (inclusive prefix)
        cum: Vec<f64>,
    },
    /// Explicit jump times, per-subject increments, and per-subject survival
    /// curves (test harness backend).
    Fixed {
        jumps: Vec<f64>,
        increments: Vec<Vec<f64>>,
        curves: Vec<SurvivalCurve>,
    },
}

/// Evaluates K_c(t | V) and its hazard increments for every subject under one
/// arm's fitted censoring model. The Kaplan-Meier backend is the null-formula
/// marginal fit (covariate-free Breslow).
pub struct CensoringOracle {
    pub arm: u8,
    km: bool,
    backend: CensoringBackend,
}

impl CensoringOracle {
    pub fn fit_marginal(
        dataset: &SurvivalDataset,
        arm: u8,
        formula: &ModelFormula,
        controls: &FitControls,
    ) -> Result<Self> {
        debug_assert_eq!(formula.role, Role::Censoring);
        let fit = fit_cox(dataset, arm, formula, controls)?;
        let risk = risk_scores(dataset, formula, &fit.coefficients)?;
        Ok(CensoringOracle {
            arm,
            km: false,
            backend: CensoringBackend::Marginal { fit, risk },
        })
    }

    pub fn fit_frailty(
        dataset: &SurvivalDataset,
        arm: u8,
        formula: &ModelFormula,
        controls: &FitControls,
    ) -> Result<Self> {
        debug_assert_eq!(formula.role, Role::Censoring);
        let fit = fit_frailty(dataset, arm, formula, controls)?;
        let risk = risk_scores(dataset, formula, &fit.coefficients)?;
        let cum = baseline_prefix(&fit.baseline);
        Ok(CensoringOracle {
            arm,
            km: false,
            backend: CensoringBackend::Frailty { fit, risk, cum },
        })
    }

    /// Covariate-free censoring model (completely random censoring).
    pub fn fit_km(dataset: &SurvivalDataset, arm: u8, controls: &FitControls) -> Result<Self> {
        let formula = ModelFormula::new(Role::Censoring, vec![]);
        let mut oracle = Self::fit_marginal(dataset, arm, &formula, controls)?;
        oracle.km = true;
        Ok(oracle)
    }

    /// Explicit per-subject censoring model for tests: `increments[idx][k]`
    /// is dH(jumps[k] | V_idx) and `curves[idx]` is K_c(. | V_idx).
    pub fn from_parts(
        arm: u8,
        jumps: Vec<f64>,
        increments: Vec<Vec<f64>>,
        curves: Vec<SurvivalCurve>,
    ) -> Self {
        CensoringOracle {
            arm,
            km: false,
            backend: CensoringBackend::Fixed {
                jumps,
                increments,
                curves,
            },
        }
    }

    pub fn backend_tag(&self) -> BackendTag {
        if self.km {
            return BackendTag::Km;
        }
        match &self.backend {
            CensoringBackend::Marginal { .. } => BackendTag::MarginalCox,
            CensoringBackend::Frailty { .. } => BackendTag::Frailty,
            CensoringBackend::Fixed { .. } => BackendTag::Fixed,
        }
    }

    /// K_c(t | V) for the subject at flat index `idx`.
    pub fn survival(&self, idx: usize, t: f64) -> f64 {
        match &self.backend {
            CensoringBackend::Marginal { fit, risk } => {
                (-fit.cumulative_baseline(t) * risk[idx]).exp()
            }
            CensoringBackend::Frailty { fit, risk, cum } => {
                let shape = fit.frailty_shape;
                let lambda = cumulative_at(&fit.baseline, cum, t) * risk[idx];
                (shape / (shape + lambda)).powf(shape)
            }
            CensoringBackend::Fixed { curves, .. } => curves[idx].value_at(t),
        }
    }

    /// Baseline jump times of the censoring model, ascending.
    pub fn jump_times(&self) -> Vec<f64> {
        match &self.backend {
            CensoringBackend::Marginal { fit, .. } => {
                fit.baseline.iter().map(|&(t, _)| t).collect()
            }
            CensoringBackend::Frailty { fit, .. } => {
                fit.baseline.iter().map(|&(t, _)| t).collect()
            }
            CensoringBackend::Fixed { jumps, .. } => jumps.clone(),
        }
    }

    /// dH(u_k | V) at jump `k` for subject `idx`. For the frailty backend
    /// this is the marginal increment (left-limit frailty-mean scaling).
    pub fn increment(&self, idx: usize, k: usize) -> f64 {
        match &self.backend {
            CensoringBackend::Marginal { fit, risk } => fit.baseline[k].1 * risk[idx],
            CensoringBackend::Frailty { fit, risk, cum } => {
                let cum_before = if k == 0 { 0.0 } else { cum[k - 1] };
                let shape = fit.frailty_shape;
                let mean = shape / (shape + cum_before * risk[idx]);
                mean * fit.baseline[k].1 * risk[idx]
            }
            CensoringBackend::Fixed { increments, .. } => increments[idx][k],
        }
    }

    /// Ordered (u_k, dH(u_k | V)) for one subject.
    pub fn hazard_increments(&self, idx: usize) -> Vec<(f64, f64)> {
        self.jump_times()
            .into_iter()
            .enumerate()
            .map(|(k, t)| (t, self.increment(idx, k)))
            .collect()
    }
}

/// A matched (outcome, censoring) oracle pair for one arm.
pub struct OraclePair {
    pub outcome: OutcomeOracle,
    pub censoring: CensoringOracle,
}

impl OraclePair {
    pub fn new(outcome: OutcomeOracle, censoring: CensoringOracle) -> Result<Self> {
        if outcome.arm != censoring.arm {
            return Err(Error::OracleArmMismatch {
                fitted: outcome.arm,
                asked: censoring.arm,
            });
        }
        Ok(OraclePair { outcome, censoring })
    }

    pub fn arm(&self) -> u8 {
        self.outcome.arm
    }
}

fn risk_scores(
    dataset: &SurvivalDataset,
    formula: &ModelFormula,
    beta: &[f64],
) -> Result<Vec<f64>> {
    let design = build_design(dataset, formula)?;
    Ok(design
        .iter()
        .map(|row| {
            beta.iter()
                .zip(row)
                .map(|(b, v)| b * v)
                .sum::<f64>()
                .exp()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cluster, Subject};
    use approx::assert_relative_eq;

    fn subject(time: f64, event: bool, z: f64) -> Subject {
        Subject {
            time,
            event,
            covariates: vec![z],
        }
    }

    fn dataset() -> SurvivalDataset {
        SurvivalDataset::new(
            vec!["Z".into()],
            vec![
                Cluster {
                    id: "c1".into(),
                    arm: 1,
                    subjects: vec![
                        subject(1.0, true, 0.2),
                        subject(2.0, false, -0.5),
                        subject(3.0, true, 1.0),
                    ],
                },
                Cluster {
                    id: "c2".into(),
                    arm: 1,
                    subjects: vec![subject(1.5, false, 0.0), subject(2.5, true, 0.7)],
                },
                Cluster {
                    id: "c3".into(),
                    arm: 0,
                    subjects: vec![
                        subject(1.2, true, -0.3),
                        subject(2.2, false, 0.4),
                        subject(0.8, true, 0.1),
                    ],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn marginal_outcome_oracle_matches_fit_predictions() {
        let ds = dataset();
        let formula = ModelFormula::parse(Role::Outcome, "Z").unwrap();
        let controls = FitControls::default();
        let oracle = OutcomeOracle::fit_marginal(&ds, 1, &formula, &controls).unwrap();
        let fit = fit_cox(&ds, 1, &formula, &controls).unwrap();
        let design = build_design(&ds, &formula).unwrap();
        for idx in 0..ds.n_subjects() {
            for &t in &[0.0, 0.9, 1.0, 2.4, 5.0] {
                assert_relative_eq!(
                    oracle.survival(idx, t),
                    fit.survival(&design[idx], t),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn frailty_oracles_match_fit_closed_forms() {
        let ds = dataset();
        let formula = ModelFormula::parse(Role::Outcome, "Z").unwrap();
        let controls = FitControls::default();
        let oracle = OutcomeOracle::fit_frailty(&ds, 1, &formula, &controls).unwrap();
        let fit = fit_frailty(&ds, 1, &formula, &controls).unwrap();
        let design = build_design(&ds, &formula).unwrap();
        for idx in 0..ds.n_subjects() {
            for &t in &[0.0, 1.0, 2.6, 4.0] {
                assert_relative_eq!(
                    oracle.survival(idx, t),
                    fit.marginal_survival(&design[idx], t),
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn frailty_censoring_increments_match_marginal_increments() {
        let ds = dataset();
        let formula = ModelFormula::parse(Role::Censoring, "Z").unwrap();
        let controls = FitControls::default();
        let oracle = CensoringOracle::fit_frailty(&ds, 1, &formula, &controls).unwrap();
        let fit = fit_frailty(&ds, 1, &formula, &controls).unwrap();
        let design = build_design(&ds, &formula).unwrap();
        for idx in 0..ds.n_subjects() {
            let expect = fit.marginal_hazard_increments(&design[idx]);
            let got = oracle.hazard_increments(idx);
            assert_eq!(expect.len(), got.len());
            for (e, g) in expect.iter().zip(&got) {
                assert_relative_eq!(e.0, g.0, epsilon = 1e-12);
                assert_relative_eq!(e.1, g.1, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn km_censoring_is_covariate_free() {
        let ds = dataset();
        let controls = FitControls::default();
        let oracle = CensoringOracle::fit_km(&ds, 1, &controls).unwrap();
        assert_eq!(oracle.backend_tag(), BackendTag::Km);
        // identical predictions for every subject, regardless of covariates
        for &t in &[0.5, 1.5, 2.5] {
            let base = oracle.survival(0, t);
            for idx in 1..ds.n_subjects() {
                assert_relative_eq!(oracle.survival(idx, t), base, epsilon = 1e-12);
            }
        }
        // arm 1: censorings at 2.0 and 1.5; risk sets 5 and... at 1.5 the
        // risk set is {2.0, 3.0, 1.5, 2.5} = 4, at 2.0 it is {2.0, 3.0, 2.5} = 3
        let expect = (-(1.0 / 4.0 + 1.0 / 3.0) as f64).exp();
        assert_relative_eq!(oracle.survival(0, 2.0), expect, epsilon = 1e-12);
    }

    #[test]
    fn increments_exhaust_cumulative_hazard() {
        let ds = dataset();
        let formula = ModelFormula::parse(Role::Censoring, "Z").unwrap();
        let controls = FitControls::default();
        for oracle in [
            CensoringOracle::fit_marginal(&ds, 1, &formula, &controls).unwrap(),
            CensoringOracle::fit_km(&ds, 1, &controls).unwrap(),
        ] {
            for idx in 0..ds.n_subjects() {
                let total: f64 = oracle.hazard_increments(idx).iter().map(|&(_, d)| d).sum();
                let surv_end = oracle.survival(idx, 100.0);
                assert_relative_eq!(surv_end, (-total).exp(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn fixed_backend_returns_stored_predictions() {
        let oracle = OutcomeOracle::from_predictions(0, vec![0.25, 0.75]);
        assert_eq!(oracle.backend_tag(), BackendTag::Fixed);
        assert_relative_eq!(oracle.survival(0, 3.0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(oracle.survival(1, 0.1), 0.75, epsilon = 1e-15);
    }

    #[test]
    fn pair_rejects_mismatched_arms() {
        let ds = dataset();
        let controls = FitControls::default();
        let outcome = OutcomeOracle::from_predictions(1, vec![0.5; ds.n_subjects()]);
        let censoring = CensoringOracle::fit_km(&ds, 0, &controls).unwrap();
        assert!(matches!(
            OraclePair::new(outcome, censoring),
            Err(Error::OracleArmMismatch { fitted: 1, asked: 0 })
        ));
    }
}
