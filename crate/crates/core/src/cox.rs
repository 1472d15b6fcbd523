//! Arm-specific Cox proportional hazards fitting under working independence,
//! with Breslow tie handling and Breslow baseline-hazard increments.

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::formula::{build_design, ModelFormula, Role};
use crate::numeric::solve_spd;

/// Optimizer controls for the partial-likelihood Newton solve.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitControls {
    pub gradient_tol: f64,
    pub max_iterations: usize,
    /// Separation guard: if any |beta| exceeds this during iteration the fit
    /// is declared non-convergent instead of silently diverging.
    pub beta_cap: f64,
}

impl Default for FitControls {
    fn default() -> Self {
        FitControls {
            gradient_tol: 1e-8,
            max_iterations: 50,
            beta_cap: 50.0,
        }
    }
}

/// Survival data prepared for partial-likelihood evaluation: rows sorted by
/// descending time so risk sums accumulate in one sweep.
pub(crate) struct CoxData {
    pub time: Vec<f64>,
    pub event: Vec<bool>,
    pub x: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
    /// indices sorted by descending time
    order: Vec<usize>,
    pub p: usize,
}

impl CoxData {
    pub fn new(time: Vec<f64>, event: Vec<bool>, x: Vec<Vec<f64>>, offset: Vec<f64>) -> Self {
        let p = x.first().map_or(0, |r| r.len());
        let mut order: Vec<usize> = (0..time.len()).collect();
        order.sort_by(|&a, &b| time[b].partial_cmp(&time[a]).unwrap());
        CoxData {
            time,
            event,
            x,
            offset,
            order,
            p,
        }
    }

    pub fn n_events(&self) -> usize {
        self.event.iter().filter(|&&e| e).count()
    }

    fn eta(&self, beta: &[f64], i: usize) -> f64 {
        self.offset[i]
            + beta
                .iter()
                .zip(&self.x[i])
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    /// Breslow-ties log partial likelihood, score, and information at `beta`.
    /// One descending-time sweep: risk sums S0, S1, S2 grow as subjects enter
    /// the risk set; each distinct event time contributes its tied events as
    /// a block.
    pub fn loglik_score_info(&self, beta: &[f64]) -> (f64, Vec<f64>, Vec<Vec<f64>>) {
        let p = self.p;
        let mut s0 = 0.0_f64;
        let mut s1 = vec![0.0; p];
        let mut s2 = vec![vec![0.0; p]; p];
        let mut ll = 0.0;
        let mut score = vec![0.0; p];
        let mut info = vec![vec![0.0; p]; p];

        let n = self.order.len();
        let mut k = 0;
        while k < n {
            let t = self.time[self.order[k]];
            // admit everyone with time == t to the risk set
            let mut m = k;
            while m < n && self.time[self.order[m]] == t {
                let i = self.order[m];
                let w = self.eta(beta, i).exp();
                s0 += w;
                for a in 0..p {
                    let xa = self.x[i][a];
                    s1[a] += w * xa;
                    for b in 0..=a {
                        s2[a][b] += w * xa * self.x[i][b];
                    }
                }
                m += 1;
            }
            // events at this time
            let mut d = 0.0;
            for &i in &self.order[k..m] {
                if self.event[i] {
                    d += 1.0;
                    ll += self.eta(beta, i);
                    for a in 0..p {
                        score[a] += self.x[i][a];
                    }
                }
            }
            if d > 0.0 {
                ll -= d * s0.ln();
                for a in 0..p {
                    let ea = s1[a] / s0;
                    score[a] -= d * ea;
                    for b in 0..=a {
                        info[a][b] += d * (s2[a][b] / s0 - ea * s1[b] / s0);
                    }
                }
            }
            k = m;
        }
        for a in 0..p {
            for b in (a + 1)..p {
                info[a][b] = info[b][a];
                s2[a][b] = s2[b][a];
            }
        }
        (ll, score, info)
    }

    pub fn loglik(&self, beta: &[f64]) -> f64 {
        self.loglik_score_info(beta).0
    }

    /// Breslow baseline increments at distinct event times:
    /// d(t) / sum_{at risk at t} exp(eta).
    pub fn breslow_baseline(&self, beta: &[f64]) -> Vec<(f64, f64)> {
        let n = self.order.len();
        let mut s0 = 0.0;
        let mut out: Vec<(f64, f64)> = Vec::new();
        let mut k = 0;
        while k < n {
            let t = self.time[self.order[k]];
            let mut m = k;
            while m < n && self.time[self.order[m]] == t {
                s0 += self.eta(beta, self.order[m]).exp();
                m += 1;
            }
            let d = self.order[k..m]
                .iter()
                .filter(|&&i| self.event[i])
                .count();
            if d > 0 {
                out.push((t, d as f64 / s0));
            }
            k = m;
        }
        out.reverse(); // ascending time
        out
    }

    /// Newton-Raphson with step-halving from beta = 0.
    pub fn newton(&self, controls: &FitControls) -> Result<(Vec<f64>, Convergence)> {
        self.newton_from(vec![0.0; self.p], controls)
    }

    /// Newton-Raphson with step-halving from a warm start.
    pub fn newton_from(
        &self,
        start: Vec<f64>,
        controls: &FitControls,
    ) -> Result<(Vec<f64>, Convergence)> {
        let p = self.p;
        let mut beta = start;
        if p == 0 {
            return Ok((beta, Convergence {
                iterations: 0,
                gradient_norm: 0.0,
            }));
        }
        let (mut ll, mut score, mut info) = self.loglik_score_info(&beta);
        for iter in 1..=controls.max_iterations {
            let grad_norm = score.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
            if grad_norm <= controls.gradient_tol {
                return Ok((beta, Convergence {
                    iterations: iter - 1,
                    gradient_norm: grad_norm,
                }));
            }
            let step = solve_spd(&info, &score).ok_or(Error::SingularInformation)?;
            // Newton decrement: the quadratic-model gain of a full step. Once
            // it falls below the loglik's floating-point resolution no move
            // can produce a detectable improvement, so we are at the numerical
            // optimum even if the absolute gradient tolerance is out of reach.
            let decrement = 0.5 * score.iter().zip(&step).map(|(g, s)| g * s).sum::<f64>();
            if decrement <= 32.0 * f64::EPSILON * (1.0 + ll.abs()) {
                return Ok((beta, Convergence {
                    iterations: iter - 1,
                    gradient_norm: grad_norm,
                }));
            }
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let candidate: Vec<f64> = beta
                    .iter()
                    .zip(&step)
                    .map(|(b, s)| b + scale * s)
                    .collect();
                let cand_ll = self.loglik(&candidate);
                if cand_ll > ll || (cand_ll - ll).abs() < 1e-14 {
                    beta = candidate;
                    accepted = true;
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                // no step improves the likelihood
                return Err(Error::NonConvergence {
                    iterations: iter,
                    gradient_norm: grad_norm,
                });
            }
            if beta.iter().any(|b| b.abs() > controls.beta_cap) {
                // monotone likelihood / separation
                return Err(Error::NonConvergence {
                    iterations: iter,
                    gradient_norm: score.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
                });
            }
            let next = self.loglik_score_info(&beta);
            ll = next.0;
            score = next.1;
            info = next.2;
        }
        let grad_norm = score.iter().fold(0.0_f64, |m, g| m.max(g.abs()));
        if grad_norm <= controls.gradient_tol {
            Ok((beta, Convergence {
                iterations: controls.max_iterations,
                gradient_norm: grad_norm,
            }))
        } else {
            Err(Error::NonConvergence {
                iterations: controls.max_iterations,
                gradient_norm: grad_norm,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Convergence {
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// A fitted arm-specific Cox model for one role (outcome or censoring).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoxFit {
    pub arm: u8,
    pub role: Role,
    pub formula: ModelFormula,
    pub coefficients: Vec<f64>,
    /// (event time, baseline hazard increment), ascending, increments > 0
    pub baseline: Vec<(f64, f64)>,
    /// prefix sums of baseline increments, aligned with `baseline`
    cumulative: Vec<f64>,
    pub convergence: Convergence,
}

impl CoxFit {
    fn from_parts(
        arm: u8,
        role: Role,
        formula: ModelFormula,
        coefficients: Vec<f64>,
        baseline: Vec<(f64, f64)>,
        convergence: Convergence,
    ) -> Self {
        let mut cumulative = Vec::with_capacity(baseline.len());
        let mut acc = 0.0;
        for &(_, inc) in &baseline {
            acc += inc;
            cumulative.push(acc);
        }
        CoxFit {
            arm,
            role,
            formula,
            coefficients,
            baseline,
            cumulative,
            convergence,
        }
    }

    pub fn linear_predictor(&self, v: &[f64]) -> f64 {
        self.coefficients.iter().zip(v).map(|(b, x)| b * x).sum()
    }

    /// Cumulative baseline hazard at `t` (right-continuous step function).
    pub fn cumulative_baseline(&self, t: f64) -> f64 {
        // number of baseline times <= t
        let k = self.baseline.partition_point(|&(time, _)| time <= t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// Cumulative baseline hazard just before `t` (left limit).
    pub fn cumulative_baseline_before(&self, t: f64) -> f64 {
        let k = self.baseline.partition_point(|&(time, _)| time < t);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1]
        }
    }

    /// S(t | v) = exp(-Lambda0(t) exp(beta'v)). Valid for either role; for
    /// role = censoring this is K_c(t | v).
    pub fn survival(&self, v: &[f64], t: f64) -> f64 {
        (-self.cumulative_baseline(t) * self.linear_predictor(v).exp()).exp()
    }

    /// Subject-specific hazard increments (u_k, dH(u_k | v)) at the baseline
    /// jump times. For a censoring fit these feed the martingale integrand.
    pub fn hazard_increments(&self, v: &[f64]) -> Vec<(f64, f64)> {
        let scale = self.linear_predictor(v).exp();
        self.baseline
            .iter()
            .map(|&(t, inc)| (t, inc * scale))
            .collect()
    }
}

/// Fits an arm-specific Cox model by maximizing the Breslow-ties log partial
/// likelihood on the `{A = arm}` subset. For `Role::Censoring` the event
/// indicator is complemented.
pub fn fit_cox(
    dataset: &SurvivalDataset,
    arm: u8,
    formula: &ModelFormula,
    controls: &FitControls,
) -> Result<CoxFit> {
    let data = prepare(dataset, arm, formula)?;
    if data.n_events() == 0 {
        return Err(Error::NoEventsInRole { arm });
    }
    let (beta, convergence) = data.newton(controls)?;
    let baseline = data.breslow_baseline(&beta);
    Ok(CoxFit::from_parts(
        arm,
        formula.role,
        formula.clone(),
        beta,
        baseline,
        convergence,
    ))
}

pub(crate) fn prepare(dataset: &SurvivalDataset, arm: u8, formula: &ModelFormula) -> Result<CoxData> {
    let design = build_design(dataset, formula)?;
    let mut time = Vec::new();
    let mut event = Vec::new();
    let mut x = Vec::new();
    for ((cluster, subject), row) in dataset.subjects().zip(design) {
        if cluster.arm != arm {
            continue;
        }
        time.push(subject.time);
        event.push(match formula.role {
            Role::Outcome => subject.event,
            Role::Censoring => !subject.event,
        });
        x.push(row);
    }
    if time.is_empty() {
        return Err(Error::NoSubjectsInArm(arm));
    }
    let n = time.len();
    Ok(CoxData::new(time, event, x, vec![0.0; n]))
}
