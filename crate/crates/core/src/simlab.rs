//! Scenario-driven simulation lab: cluster-randomized survival data
//! generation, a Monte Carlo truth oracle with closed-form conditional
//! survival, and a study driver scoring estimation strategies by PBias,
//! MCSD, AESE, and CP.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::aipwcc::rmst_from_curve;
use crate::cox::FitControls;
use crate::data::{Cluster, Subject, SurvivalDataset};
use crate::error::{Error, Result};
use crate::inference::{jackknife, TargetKind, TargetSpec};
use crate::nonparam::SurvivalCurve;
use crate::pipeline::{Backend, Method, Pipeline};
use crate::types::{EffectScale, Level, PropensitySpec};

/// Complete data-generating mechanism for one scenario. Serializes as a flat
/// config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub n_clusters: usize,
    /// discrete uniform cluster-size law; [20, 200] gives mean 110 and
    /// coefficient of variation 0.475 (within 0.1%)
    pub size_min: u64,
    pub size_max: u64,
    /// Scenario 1 switches the W2 and Z1 means to constants
    pub covariates_depend_on_size: bool,
    pub beta_a: f64,
    /// coefficients on Q = (W1, W2, Z1, Z2, Z1*Z2, N/50)
    pub beta: [f64; 6],
    pub beta_an: f64,
    pub alpha: [f64; 6],
    pub rho0: f64,
    pub rho1: f64,
    pub delta0: f64,
    /// baseline scaling g(N) = N/100 when true, 1 otherwise
    pub size_scaled_event_baseline: bool,
    pub size_scaled_censoring_baseline: bool,
    pub event_frailty_shape_treated: f64,
    pub event_frailty_shape_control: f64,
    pub censoring_frailty_shape: f64,
    pub administrative_cap: f64,
}

impl ScenarioSpec {
    fn base(name: &str) -> ScenarioSpec {
        ScenarioSpec {
            name: name.into(),
            n_clusters: 50,
            size_min: 20,
            size_max: 200,
            covariates_depend_on_size: true,
            beta_a: 0.0,
            beta: [0.0; 6],
            beta_an: 0.0,
            alpha: [0.0; 6],
            rho0: 0.5,
            rho1: 0.0,
            delta0: 0.0,
            size_scaled_event_baseline: false,
            size_scaled_censoring_baseline: false,
            event_frailty_shape_treated: 2.0,
            event_frailty_shape_control: 4.5,
            censoring_frailty_shape: 9.5,
            administrative_cap: 5.0,
        }
    }

    /// No informative cluster size; ~50% censoring.
    pub fn scenario1() -> ScenarioSpec {
        ScenarioSpec {
            covariates_depend_on_size: false,
            beta_a: -1.5,
            beta: [0.5, 0.8, 0.4, 0.3, 1.0, 0.0],
            alpha: [0.5, 0.3, 0.3, 0.5, 0.5, 0.0],
            rho0: 0.5,
            rho1: 0.2,
            // calibrated by Monte Carlo so the marginal censoring rate is
            // ~50% under the covariate-dependent censoring model above
            delta0: 0.35,
            ..Self::base("scenario1")
        }
    }

    /// Informative cluster size in the event process and treatment effect.
    pub fn scenario2() -> ScenarioSpec {
        ScenarioSpec {
            beta_a: 0.5,
            beta: [0.5, -0.2, 0.4, 0.3, 1.0, 0.4],
            beta_an: -1.5,
            alpha: [0.3, 1.0, 1.0, 0.5, 1.0, 0.0],
            rho0: 0.6,
            rho1: 0.2,
            delta0: 0.001,
            size_scaled_event_baseline: true,
            ..Self::base("scenario2")
        }
    }

    /// Informative cluster size in event, treatment effect, and censoring.
    pub fn scenario3() -> ScenarioSpec {
        ScenarioSpec {
            beta_a: 0.5,
            beta: [0.5, -0.2, 0.4, 0.3, 1.0, 0.4],
            beta_an: -1.5,
            alpha: [0.3, 0.8, 0.6, 0.5, 1.0, 0.4],
            rho0: 0.6,
            rho1: 0.2,
            delta0: 0.001,
            size_scaled_event_baseline: true,
            size_scaled_censoring_baseline: true,
            ..Self::base("scenario3")
        }
    }

    /// Scenario 3 with M = 26 clusters.
    pub fn scenario3a() -> ScenarioSpec {
        ScenarioSpec {
            n_clusters: 26,
            name: "scenario3a".into(),
            ..Self::scenario3()
        }
    }

    /// Scenario 3 tuned to ~25% censoring.
    pub fn scenario3b() -> ScenarioSpec {
        ScenarioSpec {
            rho0: 0.8,
            delta0: 0.0005,
            name: "scenario3b".into(),
            ..Self::scenario3()
        }
    }

    /// Scenario 3 tuned to ~75% censoring.
    pub fn scenario3c() -> ScenarioSpec {
        ScenarioSpec {
            delta0: 0.04,
            name: "scenario3c".into(),
            ..Self::scenario3()
        }
    }

    pub fn by_name(name: &str) -> Option<ScenarioSpec> {
        match name {
            "scenario1" | "1" => Some(Self::scenario1()),
            "scenario2" | "2" => Some(Self::scenario2()),
            "scenario3" | "3" => Some(Self::scenario3()),
            "scenario3a" | "3a" => Some(Self::scenario3a()),
            "scenario3b" | "3b" => Some(Self::scenario3b()),
            "scenario3c" | "3c" => Some(Self::scenario3c()),
            _ => None,
        }
    }

    fn event_baseline(&self, arm: u8, n: f64) -> f64 {
        let g = if self.size_scaled_event_baseline {
            n / 100.0
        } else {
            1.0
        };
        (self.rho0 - self.rho1 * (1.0 - arm as f64)) * g
    }

    fn censoring_baseline(&self, n: f64) -> f64 {
        let g = if self.size_scaled_censoring_baseline {
            n / 100.0
        } else {
            1.0
        };
        self.delta0 * g
    }

    fn event_frailty_shape(&self, arm: u8) -> f64 {
        if arm == 1 {
            self.event_frailty_shape_treated
        } else {
            self.event_frailty_shape_control
        }
    }

    fn event_linear_predictor(&self, arm: u8, q: &[f64; 6]) -> f64 {
        self.beta_a * arm as f64
            + self.beta.iter().zip(q).map(|(b, v)| b * v).sum::<f64>()
            + self.beta_an * arm as f64 * q[5]
    }

    fn censoring_linear_predictor(&self, q: &[f64; 6]) -> f64 {
        self.alpha.iter().zip(q).map(|(a, v)| a * v).sum()
    }
}

/// The full covariate design for model formulas built on generated data.
pub const CORRECT_RHS: &str = "W1 + W2 + Z1 + Z2 + Z1*Z2 + N/50";
/// Mis-specified variant: the interaction and cluster-size terms are omitted.
pub const MISSPECIFIED_RHS: &str = "W1 + W2 + Z1 + Z2";

struct ClusterDraw {
    n: u64,
    w1: f64,
    w2: f64,
}

fn draw_cluster(spec: &ScenarioSpec, rng: &mut impl Rng) -> ClusterDraw {
    let n = rng.gen_range(spec.size_min..=spec.size_max);
    let w1 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    let w2_mean = if spec.covariates_depend_on_size {
        n as f64 / 50.0
    } else {
        1.0
    };
    let w2 = Normal::new(w2_mean, 1.5).unwrap().sample(rng);
    ClusterDraw { n, w1, w2 }
}

fn draw_q(
    spec: &ScenarioSpec,
    cluster: &ClusterDraw,
    rng: &mut impl Rng,
) -> [f64; 6] {
    let z1_mean = if spec.covariates_depend_on_size {
        (cluster.n as f64).ln() / 5.0
    } else {
        1.0
    };
    let z1 = Normal::new(z1_mean, 1.0).unwrap().sample(rng);
    let z2 = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
    [
        cluster.w1,
        cluster.w2,
        z1,
        z2,
        z1 * z2,
        cluster.n as f64 / 50.0,
    ]
}

fn exponential(rate: f64, rng: &mut impl Rng) -> f64 {
    // inverse CDF on an open-interval uniform; exact for constant hazards
    -(1.0 - rng.gen::<f64>()).ln() / rate
}

/// Generates one trial. Fully deterministic given (spec, seed).
pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<SurvivalDataset> {
    SurvivalDataset::new(
        vec!["W1".into(), "W2".into(), "Z1".into(), "Z2".into()],
        generate_clusters(spec, seed),
    )
}

/// Raw clusters for one trial, before dataset validation. Lets diagnostics
/// like `censoring_rate` observe draws that an estimator would reject.
fn generate_clusters(spec: &ScenarioSpec, seed: u64) -> Vec<Cluster> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let censoring_frailty = Gamma::new(
        spec.censoring_frailty_shape,
        1.0 / spec.censoring_frailty_shape,
    )
    .unwrap();
    let mut clusters = Vec::with_capacity(spec.n_clusters);
    for i in 0..spec.n_clusters {
        let arm: u8 = if rng.gen_bool(0.5) { 1 } else { 0 };
        let cluster = draw_cluster(spec, &mut rng);
        let shape = spec.event_frailty_shape(arm);
        let b = Gamma::new(shape, 1.0 / shape).unwrap().sample(&mut rng);
        let r = censoring_frailty.sample(&mut rng);
        let lambda0 = spec.event_baseline(arm, cluster.n as f64);
        let h0 = spec.censoring_baseline(cluster.n as f64);
        let subjects = (0..cluster.n)
            .map(|_| {
                let q = draw_q(spec, &cluster, &mut rng);
                let t = exponential(
                    lambda0 * b * spec.event_linear_predictor(arm, &q).exp(),
                    &mut rng,
                );
                let c = if h0 > 0.0 {
                    exponential(
                        h0 * r * spec.censoring_linear_predictor(&q).exp(),
                        &mut rng,
                    )
                    .min(spec.administrative_cap)
                } else {
                    spec.administrative_cap
                };
                Subject {
                    time: t.min(c),
                    event: t <= c,
                    covariates: vec![q[0], q[1], q[2], q[3]],
                }
            })
            .collect();
        clusters.push(Cluster {
            id: format!("cluster{:03}", i + 1),
            arm,
            subjects,
        });
    }
    clusters
}

/// Empirical marginal censoring rate over `n_reps` generated trials.
pub fn censoring_rate(spec: &ScenarioSpec, n_reps: usize, seed: u64) -> f64 {
    let mut censored = 0usize;
    let mut total = 0usize;
    for rep in 0..n_reps {
        for cluster in generate_clusters(spec, rep_seed(seed, rep)) {
            for s in &cluster.subjects {
                total += 1;
                if !s.event {
                    censored += 1;
                }
            }
        }
    }
    censored as f64 / total as f64
}

/// Monte Carlo truth for the marginal estimands, with per-value MC standard
/// errors from the cluster-level replication.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Truth {
    pub grid: Vec<f64>,
    /// indexed [treated, control] by slot
    pub s_cluster: [Vec<f64>; 2],
    pub s_individual: [Vec<f64>; 2],
    pub se_cluster: [Vec<f64>; 2],
    pub se_individual: [Vec<f64>; 2],
    pub n_clusters: usize,
}

impl Truth {
    fn slot(arm: u8) -> usize {
        if arm == 1 {
            0
        } else {
            1
        }
    }

    pub fn survival_curve(&self, level: Level, arm: u8) -> SurvivalCurve {
        let values = match level {
            Level::Cluster => &self.s_cluster[Self::slot(arm)],
            Level::Individual => &self.s_individual[Self::slot(arm)],
        };
        SurvivalCurve::new(self.grid.clone(), values.clone())
    }

    pub fn standard_error(&self, level: Level, arm: u8, t: f64) -> Option<f64> {
        let k = self.grid.iter().position(|&g| g == t)?;
        Some(match level {
            Level::Cluster => self.se_cluster[Self::slot(arm)][k],
            Level::Individual => self.se_individual[Self::slot(arm)][k],
        })
    }

    /// The true effect for one jackknife target on the given scale. SPCE
    /// times must be grid points; RMST horizons integrate the truth curve.
    pub fn effect(
        &self,
        kind: TargetKind,
        level: Level,
        time: f64,
        scale: EffectScale,
    ) -> Result<f64> {
        let treated = self.survival_curve(level, 1);
        let control = self.survival_curve(level, 0);
        match kind {
            TargetKind::Spce => {
                if !self.grid.contains(&time) {
                    return Err(Error::InvalidConfig(format!(
                        "truth grid does not contain time {time}"
                    )));
                }
                scale.apply(treated.value_at(time), control.value_at(time))
            }
            TargetKind::Rmst => scale.apply(
                rmst_from_curve(&treated, time),
                rmst_from_curve(&control, time),
            ),
        }
    }
}

/// Computes the truth by simulating `n_clusters` synthetic clusters and
/// evaluating the closed-form conditional survival
/// exp{-lambda0 t B exp(mu)} for both counterfactual arms. Outcome frailties
/// are arm-specific, so B^(1) and B^(0) are drawn independently; the
/// marginal estimands are unaffected by their joint law.
pub fn mc_truth(spec: &ScenarioSpec, n_clusters: usize, grid: &[f64], seed: u64) -> Truth {
    debug_assert!(grid.windows(2).all(|w| w[0] < w[1]));
    let g = grid.len();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // separate stream so truth draws never collide with trial generation
    rng.set_stream(0x7472_7574_68);
    let shapes = [
        spec.event_frailty_shape_treated,
        spec.event_frailty_shape_control,
    ];
    let frailty = [
        Gamma::new(shapes[0], 1.0 / shapes[0]).unwrap(),
        Gamma::new(shapes[1], 1.0 / shapes[1]).unwrap(),
    ];

    // per arm-slot, per grid point accumulators
    let mut sum_mean = [vec![0.0; g], vec![0.0; g]]; // within-cluster means
    let mut sum_mean2 = [vec![0.0; g], vec![0.0; g]];
    let mut sum_x = [vec![0.0; g], vec![0.0; g]]; // within-cluster sums
    let mut sum_x2 = [vec![0.0; g], vec![0.0; g]];
    let mut sum_xn = [vec![0.0; g], vec![0.0; g]];
    let mut sum_n = 0.0;
    let mut sum_n2 = 0.0;

    let mut cluster_sums = [vec![0.0; g], vec![0.0; g]];
    for _ in 0..n_clusters {
        let cluster = draw_cluster(spec, &mut rng);
        let n = cluster.n as f64;
        let b = [frailty[0].sample(&mut rng), frailty[1].sample(&mut rng)];
        let rate_base = [
            spec.event_baseline(1, n) * b[0],
            spec.event_baseline(0, n) * b[1],
        ];
        for sums in &mut cluster_sums {
            sums.iter_mut().for_each(|v| *v = 0.0);
        }
        for _ in 0..cluster.n {
            let q = draw_q(spec, &cluster, &mut rng);
            for (slot, arm) in [(0usize, 1u8), (1, 0)] {
                let rate = rate_base[slot] * spec.event_linear_predictor(arm, &q).exp();
                for (k, &t) in grid.iter().enumerate() {
                    cluster_sums[slot][k] += (-rate * t).exp();
                }
            }
        }
        for slot in 0..2 {
            for k in 0..g {
                let x = cluster_sums[slot][k];
                let m = x / n;
                sum_mean[slot][k] += m;
                sum_mean2[slot][k] += m * m;
                sum_x[slot][k] += x;
                sum_x2[slot][k] += x * x;
                sum_xn[slot][k] += x * n;
            }
        }
        sum_n += n;
        sum_n2 += n * n;
    }

    let m = n_clusters as f64;
    let n_bar = sum_n / m;
    let mut truth = Truth {
        grid: grid.to_vec(),
        s_cluster: [vec![0.0; g], vec![0.0; g]],
        s_individual: [vec![0.0; g], vec![0.0; g]],
        se_cluster: [vec![0.0; g], vec![0.0; g]],
        se_individual: [vec![0.0; g], vec![0.0; g]],
        n_clusters,
    };
    for slot in 0..2 {
        for k in 0..g {
            let mean_c = sum_mean[slot][k] / m;
            truth.s_cluster[slot][k] = mean_c;
            let var_c = (sum_mean2[slot][k] / m - mean_c * mean_c).max(0.0) * m / (m - 1.0);
            truth.se_cluster[slot][k] = (var_c / m).sqrt();

            let r = sum_x[slot][k] / sum_n;
            truth.s_individual[slot][k] = r;
            // influence of the ratio estimator: e_g = (x_g - r n_g) / n_bar
            let ss = sum_x2[slot][k] - 2.0 * r * sum_xn[slot][k] + r * r * sum_n2;
            let var_i = ss.max(0.0) / (m - 1.0) / (n_bar * n_bar);
            truth.se_individual[slot][k] = (var_i / m).sqrt();
        }
    }
    truth
}

/// Loads a cached truth if (spec, n_clusters, seed, grid) match; otherwise
/// computes and writes it.
pub fn mc_truth_cached(
    spec: &ScenarioSpec,
    n_clusters: usize,
    grid: &[f64],
    seed: u64,
    cache_dir: &Path,
) -> Result<Truth> {
    #[derive(Serialize, Deserialize)]
    struct Entry {
        spec: ScenarioSpec,
        n_clusters: usize,
        seed: u64,
        truth: Truth,
    }
    let key = format!(
        "{}-{}-{}-{:016x}.json",
        spec.name,
        n_clusters,
        seed,
        fingerprint(&(spec, n_clusters, seed, grid))
    );
    let path = cache_dir.join(key);
    if let Ok(bytes) = std::fs::read(&path) {
        if let Ok(entry) = serde_json::from_slice::<Entry>(&bytes) {
            if &entry.spec == spec
                && entry.n_clusters == n_clusters
                && entry.seed == seed
                && entry.truth.grid == grid
            {
                return Ok(entry.truth);
            }
        }
    }
    let truth = mc_truth(spec, n_clusters, grid, seed);
    std::fs::create_dir_all(cache_dir)?;
    let entry = Entry {
        spec: spec.clone(),
        n_clusters,
        seed,
        truth: truth.clone(),
    };
    std::fs::write(&path, serde_json::to_vec(&entry)?)?;
    Ok(entry.truth)
}

fn fingerprint<T: Serialize>(value: &T) -> u64 {
    use std::hash::{Hash, Hasher};
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    serde_json::to_string(value).unwrap().hash(&mut hasher);
    hasher.finish()
}

/// A named estimation strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub name: String,
    pub method: Method,
}

/// The paper's 13 strategies: each working-model family crossed with
/// correct/mis-specified outcome (o) and censoring (c) formulas, pure
/// outcome-regression standardization with correct (or1) or mis-specified
/// (or0) formulas, and weighted Kaplan-Meier.
pub fn standard_strategies() -> Vec<Strategy> {
    let mut out = Vec::new();
    for (family, backend) in [("marginal", Backend::Marginal), ("frailty", Backend::Frailty)] {
        for (o, outcome) in [("o1", CORRECT_RHS), ("o0", MISSPECIFIED_RHS)] {
            for (c, censoring) in [("c1", CORRECT_RHS), ("c0", MISSPECIFIED_RHS)] {
                out.push(Strategy {
                    name: format!("{family}-{o}{c}"),
                    method: Method::Aipwcc {
                        backend,
                        outcome: outcome.into(),
                        censoring: censoring.into(),
                    },
                });
            }
        }
        for (o, outcome) in [("or1", CORRECT_RHS), ("or0", MISSPECIFIED_RHS)] {
            out.push(Strategy {
                name: format!("{family}-{o}"),
                method: Method::OutcomeRegression {
                    backend,
                    outcome: outcome.into(),
                },
            });
        }
    }
    out.push(Strategy {
        name: "km".into(),
        method: Method::KaplanMeier,
    });
    out
}

pub fn strategies_by_name(names: &[String]) -> Result<Vec<Strategy>> {
    let all = standard_strategies();
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|s| &s.name == n)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("unknown strategy `{n}`")))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    None,
    Jackknife,
}

/// One scored row of the study output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRow {
    pub strategy: String,
    pub kind: TargetKind,
    pub level: Level,
    pub time: f64,
    pub truth: f64,
    /// percentage bias |mean - truth| / |truth| * 100
    pub pbias: f64,
    /// Monte Carlo standard deviation of the estimates
    pub mcsd: f64,
    /// average estimated (jackknife) standard error
    pub aese: Option<f64>,
    /// empirical coverage of the t(M-2) intervals
    pub cp: Option<f64>,
    pub n_reps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsTable {
    pub scenario: String,
    pub rows: Vec<MetricsRow>,
}

impl MetricsTable {
    pub fn to_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record([
            "strategy", "target", "level", "time", "truth", "pbias", "mcsd", "aese", "cp",
            "n_reps",
        ])?;
        for row in &self.rows {
            let target = match row.kind {
                TargetKind::Spce => "spce",
                TargetKind::Rmst => "rmst",
            };
            writer.write_record([
                row.strategy.clone(),
                target.to_string(),
                row.level.to_string(),
                format!("{}", row.time),
                format!("{:.6}", row.truth),
                format!("{:.3}", row.pbias),
                format!("{:.6}", row.mcsd),
                row.aese.map_or(String::new(), |v| format!("{v:.6}")),
                row.cp.map_or(String::new(), |v| format!("{v:.3}")),
                format!("{}", row.n_reps),
            ])?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Plain-text rendering with the PBias, MCSD, AESE, CP column order.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{}\n{:<16} {:<6} {:<11} {:>6} {:>9} {:>8} {:>8} {:>7}\n",
            self.scenario, "strategy", "target", "level", "time", "PBias", "MCSD", "AESE", "CP"
        );
        for row in &self.rows {
            let target = match row.kind {
                TargetKind::Spce => "spce",
                TargetKind::Rmst => "rmst",
            };
            out.push_str(&format!(
                "{:<16} {:<6} {:<11} {:>6} {:>9.3} {:>8.4} {:>8} {:>7}\n",
                row.strategy,
                target,
                row.level.to_string(),
                row.time,
                row.pbias,
                row.mcsd,
                row.aese.map_or("-".to_string(), |v| format!("{v:.4}")),
                row.cp.map_or("-".to_string(), |v| format!("{v:.3}")),
            ));
        }
        out
    }
}

/// Per-rep seed derivation: a fixed odd multiplier mixes the rep index into
/// the master seed so streams are disjoint but reproducible.
pub fn rep_seed(master: u64, rep: usize) -> u64 {
    master ^ (rep as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the scenario study: generate `n_reps` trials, apply each strategy,
/// and score each target against `truth`. Reps failing estimation are
/// tolerated up to 5% of the total; beyond that the study aborts with the
/// first error.
#[allow(clippy::too_many_arguments)]
pub fn run_study(
    spec: &ScenarioSpec,
    n_reps: usize,
    strategies: &[Strategy],
    targets: &[TargetSpec],
    variance: VarianceMode,
    scale: EffectScale,
    truth: &Truth,
    master_seed: u64,
) -> Result<MetricsTable> {
    struct RepRecord {
        /// per (strategy, target): estimate, se, covered
        cells: Vec<(f64, Option<f64>, Option<bool>)>,
    }
    let truths: Vec<f64> = targets
        .iter()
        .map(|t| truth.effect(t.kind, t.level, t.time, scale))
        .collect::<Result<_>>()?;
    let controls = FitControls::default();
    let pi = PropensitySpec::default();

    let mut records: Vec<std::result::Result<RepRecord, Error>> = Vec::with_capacity(n_reps);
    for rep in 0..n_reps {
        let record = (|| -> Result<RepRecord> {
            let ds = generate(spec, rep_seed(master_seed, rep))?;
            let mut cells = Vec::with_capacity(strategies.len() * targets.len());
            for strategy in strategies {
                let pipeline = Pipeline {
                    method: strategy.method.clone(),
                    pi,
                    controls: controls.clone(),
                };
                match variance {
                    VarianceMode::Jackknife => {
                        let result = jackknife(&ds, &pipeline, targets, scale, 0.05)?;
                        for (target, tv) in result.targets.iter().zip(&truths) {
                            let covered = target.ci_lower <= *tv && *tv <= target.ci_upper;
                            cells.push((target.estimate, Some(target.se), Some(covered)));
                        }
                    }
                    VarianceMode::None => {
                        let max_tau = targets
                            .iter()
                            .filter(|t| t.kind == TargetKind::Rmst)
                            .map(|t| t.time)
                            .fold(f64::NEG_INFINITY, f64::max);
                        let times: Vec<f64> = targets.iter().map(|t| t.time).collect();
                        let grid = if max_tau.is_finite() {
                            crate::aipwcc::default_grid(&ds, &times)
                                .into_iter()
                                .filter(|&t| t <= max_tau || times.contains(&t))
                                .collect()
                        } else {
                            let mut g = vec![0.0];
                            g.extend_from_slice(&times);
                            g.sort_by(|a, b| a.partial_cmp(b).unwrap());
                            g.dedup();
                            g
                        };
                        let curves = pipeline.curves(&ds, &grid)?;
                        for target in targets {
                            let [treated, control] = curves.at_level(target.level);
                            let estimate = match target.kind {
                                TargetKind::Spce => scale.apply(
                                    treated.value_at(target.time),
                                    control.value_at(target.time),
                                )?,
                                TargetKind::Rmst => scale.apply(
                                    rmst_from_curve(treated, target.time),
                                    rmst_from_curve(control, target.time),
                                )?,
                            };
                            cells.push((estimate, None, None));
                        }
                    }
                }
            }
            Ok(RepRecord { cells })
        })();
        records.push(record);
    }

    let failed = records.iter().filter(|r| r.is_err()).count();
    if failed * 20 > n_reps {
        let first = records
            .iter()
            .find_map(|r| r.as_ref().err())
            .map(|e| e.to_string())
            .unwrap_or_default();
        return Err(Error::SystematicRepFailure {
            failed,
            total: n_reps,
            first,
        });
    }
    let ok: Vec<&RepRecord> = records.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n_ok = ok.len();

    let mut rows = Vec::with_capacity(strategies.len() * targets.len());
    for (si, strategy) in strategies.iter().enumerate() {
        for (ti, target) in targets.iter().enumerate() {
            let cell = si * targets.len() + ti;
            let estimates: Vec<f64> = ok.iter().map(|r| r.cells[cell].0).collect();
            let mean = estimates.iter().sum::<f64>() / n_ok as f64;
            let truth_value = truths[ti];
            let pbias = (mean - truth_value).abs() / truth_value.abs() * 100.0;
            let mcsd = (estimates
                .iter()
                .map(|e| (e - mean).powi(2))
                .sum::<f64>()
                / (n_ok as f64 - 1.0))
                .sqrt();
            let (aese, cp) = match variance {
                VarianceMode::Jackknife => {
                    let ses: Vec<f64> =
                        ok.iter().filter_map(|r| r.cells[cell].1).collect();
                    let covered = ok
                        .iter()
                        .filter_map(|r| r.cells[cell].2)
                        .filter(|&c| c)
                        .count();
                    (
                        Some(ses.iter().sum::<f64>() / ses.len() as f64),
                        Some(covered as f64 / n_ok as f64),
                    )
                }
                VarianceMode::None => (None, None),
            };
            rows.push(MetricsRow {
                strategy: strategy.name.clone(),
                kind: target.kind,
                level: target.level,
                time: target.time,
                truth: truth_value,
                pbias,
                mcsd,
                aese,
                cp,
                n_reps: n_ok,
            });
        }
    }
    Ok(MetricsTable {
        scenario: spec.name.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn generation_is_deterministic() {
        let spec = ScenarioSpec::scenario1();
        let a = generate(&spec, 42).unwrap();
        let b = generate(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = generate(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn cluster_size_law_matches_mean_and_cv() {
        let spec = ScenarioSpec::scenario1();
        let mut sizes = Vec::new();
        for seed in 0..40 {
            let ds = generate(&spec, seed).unwrap();
            sizes.extend(ds.clusters().iter().map(|c| c.size() as f64));
        }
        let n = sizes.len() as f64;
        let mean = sizes.iter().sum::<f64>() / n;
        let sd = (sizes.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert_relative_eq!(mean, 110.0, max_relative = 0.03);
        assert_relative_eq!(sd / mean, 0.475, max_relative = 0.05);
    }

    #[test]
    fn scenario1_covariate_marginals() {
        let spec = ScenarioSpec::scenario1();
        let mut w2 = Vec::new();
        let mut z1 = Vec::new();
        for seed in 0..20 {
            let ds = generate(&spec, seed).unwrap();
            for cluster in ds.clusters() {
                w2.push(cluster.subjects[0].covariates[1]);
                for s in &cluster.subjects {
                    z1.push(s.covariates[2]);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let sd = |v: &[f64], m: f64| {
            (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
        };
        let mw = mean(&w2);
        assert_relative_eq!(mw, 1.0, epsilon = 0.15);
        assert_relative_eq!(sd(&w2, mw), 1.5, max_relative = 0.1);
        let mz = mean(&z1);
        assert_relative_eq!(mz, 1.0, epsilon = 0.05);
        assert_relative_eq!(sd(&z1, mz), 1.0, max_relative = 0.05);
    }

    #[test]
    fn huge_censoring_hazard_censors_everything() {
        let spec = ScenarioSpec {
            delta0: 5000.0,
            ..ScenarioSpec::scenario1()
        };
        let rate = censoring_rate(&spec, 2, 7);
        assert!(rate > 0.999, "rate was {rate}");
    }

    #[test]
    fn scenario1_censoring_rate_near_half() {
        let rate = censoring_rate(&ScenarioSpec::scenario1(), 10, 11);
        assert!((0.43..0.57).contains(&rate), "rate was {rate}");
    }

    #[test]
    fn scenario3_censoring_rate_near_half() {
        let rate = censoring_rate(&ScenarioSpec::scenario3(), 10, 11);
        assert!((0.4..0.6).contains(&rate), "rate was {rate}");
    }

    #[test]
    fn exponential_sampler_passes_ks() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let rate = 1.7;
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n).map(|_| exponential(rate, &mut rng)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut d_stat: f64 = 0.0;
        for (i, &x) in draws.iter().enumerate() {
            let cdf = 1.0 - (-rate * x).exp();
            let lo = i as f64 / n as f64;
            let hi = (i + 1) as f64 / n as f64;
            d_stat = d_stat.max((cdf - lo).abs()).max((cdf - hi).abs());
        }
        // alpha = 0.01 critical value 1.63 / sqrt(n)
        assert!(d_stat < 1.63 / (n as f64).sqrt(), "D = {d_stat}");
    }

    #[test]
    fn degenerate_truth_is_exponential() {
        // all coefficients zero, lambda0 = 1, near-degenerate frailty
        let spec = ScenarioSpec {
            rho0: 1.0,
            rho1: 0.0,
            event_frailty_shape_treated: 1e6,
            event_frailty_shape_control: 1e6,
            ..ScenarioSpec::base("degenerate")
        };
        let grid = [0.0, 0.5, 1.0, 2.0];
        let truth = mc_truth(&spec, 20_000, &grid, 5);
        for (k, &t) in grid.iter().enumerate() {
            for slot in 0..2 {
                assert_relative_eq!(truth.s_cluster[slot][k], (-t).exp(), epsilon = 5e-3);
                assert_relative_eq!(truth.s_individual[slot][k], (-t).exp(), epsilon = 5e-3);
            }
        }
    }

    #[test]
    fn truth_rmst_is_trapezoid_of_truth_curve() {
        let spec = ScenarioSpec::scenario1();
        let grid: Vec<f64> = (0..=20).map(|k| k as f64 / 10.0).collect();
        let truth = mc_truth(&spec, 2_000, &grid, 9);
        let mu = truth
            .effect(TargetKind::Rmst, Level::Cluster, 1.5, EffectScale::Difference)
            .unwrap();
        let direct = rmst_from_curve(&truth.survival_curve(Level::Cluster, 1), 1.5)
            - rmst_from_curve(&truth.survival_curve(Level::Cluster, 0), 1.5);
        assert_relative_eq!(mu, direct, epsilon = 1e-12);
    }

    #[test]
    fn scenario1_levels_agree_scenario3_diverge() {
        let grid = [0.0, 0.1, 0.5, 1.0];
        let t1 = mc_truth(&ScenarioSpec::scenario1(), 20_000, &grid, 2);
        for k in 1..grid.len() {
            let gap = (t1.s_cluster[0][k] - t1.s_individual[0][k]).abs();
            let se = t1.se_cluster[0][k].hypot(t1.se_individual[0][k]);
            assert!(gap <= 2.5 * se, "gap {gap} vs se {se} at t={}", grid[k]);
        }
        let t3 = mc_truth(&ScenarioSpec::scenario3(), 20_000, &grid, 2);
        let k = 3; // t = 1
        let gap = (t3.s_cluster[0][k] - t3.s_individual[0][k]).abs();
        let se = t3.se_cluster[0][k].hypot(t3.se_individual[0][k]);
        assert!(gap > 3.0 * se, "gap {gap} vs se {se}");
    }

    #[test]
    fn truth_cache_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ScenarioSpec::scenario1();
        let grid = [0.0, 1.0];
        let a = mc_truth_cached(&spec, 500, &grid, 3, dir.path()).unwrap();
        let b = mc_truth_cached(&spec, 500, &grid, 3, dir.path()).unwrap();
        assert_eq!(a.s_cluster, b.s_cluster);
        // different seed misses the cache
        let c = mc_truth_cached(&spec, 500, &grid, 4, dir.path()).unwrap();
        assert_ne!(a.s_cluster, c.s_cluster);
    }

    #[test]
    fn thirteen_standard_strategies() {
        let all = standard_strategies();
        assert_eq!(all.len(), 13);
        let names: Vec<&str> = all.iter().map(|s| s.name.as_str()).collect();
        assert!(names.contains(&"marginal-o1c1"));
        assert!(names.contains(&"frailty-o0c0"));
        assert!(names.contains(&"marginal-or0"));
        assert!(names.contains(&"km"));
        assert!(strategies_by_name(&["nope".into()]).is_err());
    }

    #[test]
    fn spec_serializes_as_toml() {
        let spec = ScenarioSpec::scenario3b();
        let text = toml::to_string(&spec).unwrap();
        let back: ScenarioSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
    }

    fn tiny_spec() -> ScenarioSpec {
        ScenarioSpec {
            n_clusters: 8,
            size_min: 4,
            size_max: 10,
            ..ScenarioSpec::scenario1()
        }
    }

    #[test]
    fn study_plumbing_without_variance() {
        let spec = tiny_spec();
        let grid = [0.0, 1.0];
        let truth = mc_truth(&spec, 2_000, &grid, 1);
        let strategies = strategies_by_name(&["km".into()]).unwrap();
        let targets = [TargetSpec {
            kind: TargetKind::Spce,
            level: Level::Cluster,
            time: 1.0,
        }];
        let table = run_study(
            &spec,
            2,
            &strategies,
            &targets,
            VarianceMode::None,
            EffectScale::Difference,
            &truth,
            77,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 1);
        let row = &table.rows[0];
        assert!(row.pbias.is_finite());
        assert!(row.mcsd >= 0.0);
        assert!(row.aese.is_none() && row.cp.is_none());
        assert_eq!(row.n_reps, 2);
        // determinism
        let again = run_study(
            &spec,
            2,
            &strategies,
            &targets,
            VarianceMode::None,
            EffectScale::Difference,
            &truth,
            77,
        )
        .unwrap();
        assert_eq!(table.rows[0].pbias, again.rows[0].pbias);
        // render and csv outputs exist
        assert!(table.render().contains("PBias"));
        let dir = tempfile::tempdir().unwrap();
        table.to_csv(dir.path().join("metrics.csv")).unwrap();
    }

    #[test]
    fn study_with_jackknife_fills_aese_and_cp() {
        let spec = tiny_spec();
        let grid = [0.0, 1.0];
        let truth = mc_truth(&spec, 2_000, &grid, 1);
        let strategies = strategies_by_name(&["km".into()]).unwrap();
        let targets = [TargetSpec {
            kind: TargetKind::Spce,
            level: Level::Individual,
            time: 1.0,
        }];
        let table = run_study(
            &spec,
            3,
            &strategies,
            &targets,
            VarianceMode::Jackknife,
            EffectScale::Difference,
            &truth,
            5,
        )
        .unwrap();
        let row = &table.rows[0];
        assert!(row.aese.unwrap() > 0.0);
        let cp = row.cp.unwrap();
        assert!((0.0..=1.0).contains(&cp));
    }
}
