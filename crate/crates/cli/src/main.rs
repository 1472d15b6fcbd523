//! `drsurv`: fit doubly robust survival effect estimators on clustered trial
//! data, and drive the simulation lab (generate / truth / evaluate).

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use drsurv_core::aipwcc::EstimandReport;
use drsurv_core::cox::FitControls;
use drsurv_core::inference::{jackknife, t_quantile, TargetKind, TargetSpec};
use drsurv_core::pipeline::{Backend, Method, Pipeline};
use drsurv_core::simlab::{
    self, mc_truth_cached, standard_strategies, strategies_by_name, ScenarioSpec, Truth,
    VarianceMode,
};
use drsurv_core::{
    CsvSchema, EffectScale, Error, Level, PropensitySpec, Result, SurvivalDataset,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "drsurv", version, about = "Doubly robust survival effect estimation for cluster-randomized trials")]
struct Cli {
    /// Upper bound on worker threads for parallel sections.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate survival effects from a CSV dataset.
    Fit(FitArgs),
    /// Generate a synthetic trial from a named scenario.
    Simulate(SimulateArgs),
    /// Compute (and cache) Monte Carlo truth for a scenario.
    Truth(TruthArgs),
    /// Run a simulation study scoring strategies against truth.
    Evaluate(EvaluateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    /// AIPWCC with marginal Cox working models
    Marginal,
    /// AIPWCC with gamma-frailty working models
    Frailty,
    /// weighted Kaplan-Meier (no covariates)
    Km,
    /// outcome-regression standardization (marginal Cox backend)
    OutcomeRegression,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EstimandArg {
    Spce,
    Rmst,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VarianceArg {
    None,
    Jackknife,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScaleArg {
    Difference,
    Ratio,
}

impl ScaleArg {
    fn to_scale(self) -> EffectScale {
        match self {
            ScaleArg::Difference => EffectScale::Difference,
            ScaleArg::Ratio => EffectScale::Ratio,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with one row per participant.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cluster_id")]
    cluster_col: String,
    #[arg(long, default_value = "time")]
    time_col: String,
    #[arg(long, default_value = "event")]
    event_col: String,
    #[arg(long, default_value = "arm")]
    arm_col: String,
    /// Outcome model right-hand side, e.g. "W1 + W2 + Z1*Z2"; empty = null model.
    #[arg(long, default_value = "")]
    outcome: String,
    /// Censoring model right-hand side; the outcome RHS is reused when omitted.
    #[arg(long)]
    censoring: Option<String>,
    #[arg(long, value_enum, default_value_t = MethodArg::Marginal)]
    method: MethodArg,
    #[arg(long, value_enum, default_value_t = EstimandArg::Spce)]
    estimand: EstimandArg,
    /// RMST horizons; required iff --estimand rmst.
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Report times; defaults to the 25/50/75% quantiles of observed times.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Cluster-level treatment probability (design-known).
    #[arg(long, default_value_t = 0.5)]
    pi: f64,
    #[arg(long, value_enum, default_value_t = VarianceArg::None)]
    variance: VarianceArg,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long, value_enum, default_value_t = ScaleArg::Difference)]
    scale: ScaleArg,
    /// Write the JSON report here (human summary always goes to stdout).
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario name: scenario1, scenario2, scenario3, scenario3a/3b/3c.
    #[arg(long)]
    scenario: String,
    /// Override the scenario's cluster count.
    #[arg(long)]
    clusters: Option<usize>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct TruthArgs {
    #[arg(long)]
    scenario: String,
    /// Monte Carlo cluster count (paper scale: 1e6; desk scale: 1e5).
    #[arg(long, default_value_t = 100_000)]
    clusters: usize,
    /// Extra times merged into the evaluation grid.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    #[arg(long, default_value_t = 2.0)]
    grid_max: f64,
    #[arg(long, default_value_t = 80)]
    grid_points: usize,
    #[arg(long, default_value_t = 20260101)]
    seed: u64,
    /// Cache directory; falls back to $DRSURV_CACHE_DIR, then .drsurv-cache.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Output JSON path.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    scenario: String,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    /// Comma-separated strategy names; all 13 when omitted.
    #[arg(long, value_delimiter = ',')]
    strategies: Vec<String>,
    /// SPCE target times.
    #[arg(long, value_delimiter = ',')]
    spce_times: Vec<f64>,
    /// RMST target horizons.
    #[arg(long, value_delimiter = ',')]
    rmst_taus: Vec<f64>,
    #[arg(long, value_enum, default_value_t = VarianceArg::None)]
    variance: VarianceArg,
    #[arg(long, value_enum, default_value_t = ScaleArg::Difference)]
    scale: ScaleArg,
    /// Truth JSON produced by `drsurv truth`; computed (and cached) when omitted.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long, default_value_t = 100_000)]
    truth_clusters: usize,
    #[arg(long, default_value_t = 20260101)]
    seed: u64,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Metrics CSV output path.
    #[arg(long)]
    output: Option<PathBuf>,
}

/// Versioned JSON envelope for `fit`.
#[derive(Serialize, Deserialize)]
struct FitOutput {
    schema_version: u32,
    method: Method,
    estimand: String,
    scale: EffectScale,
    pi_treated: f64,
    outcome_rhs: String,
    censoring_rhs: String,
    clusters: usize,
    subjects: usize,
    report_times: Vec<f64>,
    taus: Vec<f64>,
    report: EstimandReport,
    inference: Option<InferenceOutput>,
}

#[derive(Serialize, Deserialize)]
struct InferenceOutput {
    df: usize,
    alpha: f64,
    /// per (kind, level, time): arm points with jackknife SEs
    arms: Vec<ArmInterval>,
}

#[derive(Serialize, Deserialize)]
struct ArmInterval {
    kind: String,
    level: Level,
    time: f64,
    point_treated: f64,
    point_control: f64,
    se_treated: f64,
    se_control: f64,
}

/// Versioned JSON envelope for `truth`.
#[derive(Serialize, Deserialize)]
struct TruthOutput {
    schema_version: u32,
    scenario: String,
    seed: u64,
    truth: Truth,
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let code = err.exit_code();
        eprintln!(
            "{}",
            serde_json::json!({ "error": err.to_string(), "exit_code": code })
        );
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidConfig("--threads must be at least 1".into()));
    }
    match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Truth(args) => cmd_truth(args),
        Command::Evaluate(args) => cmd_evaluate(args),
    }
}

fn scenario(name: &str) -> Result<ScenarioSpec> {
    ScenarioSpec::by_name(name)
        .ok_or_else(|| Error::InvalidConfig(format!("unknown scenario `{name}`")))
}

fn cache_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os("DRSURV_CACHE_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(".drsurv-cache"))
}

/// Linear-interpolated quantile of a sorted sample.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let pi = PropensitySpec::new(args.pi)?;
    match args.estimand {
        EstimandArg::Rmst if args.tau.is_empty() => {
            return Err(Error::InvalidConfig(
                "--tau is required when --estimand rmst".into(),
            ));
        }
        EstimandArg::Spce if !args.tau.is_empty() => {
            return Err(Error::InvalidConfig(
                "--tau only applies to --estimand rmst".into(),
            ));
        }
        _ => {}
    }
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "alpha must be in (0,1), got {}",
            args.alpha
        )));
    }

    let schema = CsvSchema {
        cluster_id: args.cluster_col.clone(),
        time: args.time_col.clone(),
        event: args.event_col.clone(),
        arm: args.arm_col.clone(),
    };
    let dataset = SurvivalDataset::load_csv(&args.data, &schema)?;

    let censoring_rhs = args.censoring.clone().unwrap_or_else(|| args.outcome.clone());
    let method = match args.method {
        MethodArg::Marginal => Method::Aipwcc {
            backend: Backend::Marginal,
            outcome: args.outcome.clone(),
            censoring: censoring_rhs.clone(),
        },
        MethodArg::Frailty => Method::Aipwcc {
            backend: Backend::Frailty,
            outcome: args.outcome.clone(),
            censoring: censoring_rhs.clone(),
        },
        MethodArg::Km => Method::KaplanMeier,
        MethodArg::OutcomeRegression => Method::OutcomeRegression {
            backend: Backend::Marginal,
            outcome: args.outcome.clone(),
        },
    };
    let pipeline = Pipeline {
        method: method.clone(),
        pi,
        controls: FitControls::default(),
    };

    let times = if args.times.is_empty() {
        let mut observed: Vec<f64> = dataset.subjects().map(|(_, s)| s.time).collect();
        observed.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vec![
            quantile(&observed, 0.25),
            quantile(&observed, 0.50),
            quantile(&observed, 0.75),
        ]
    } else {
        args.times.clone()
    };
    let scale = args.scale.to_scale();
    let mut report = pipeline.estimate(&dataset, &times, &args.tau, scale)?;

    let inference = match args.variance {
        VarianceArg::None => None,
        VarianceArg::Jackknife => {
            let mut targets = Vec::new();
            for level in Level::ALL {
                match args.estimand {
                    EstimandArg::Spce => {
                        for &t in &times {
                            targets.push(TargetSpec {
                                kind: TargetKind::Spce,
                                level,
                                time: t,
                            });
                        }
                    }
                    EstimandArg::Rmst => {
                        for &tau in &args.tau {
                            targets.push(TargetSpec {
                                kind: TargetKind::Rmst,
                                level,
                                time: tau,
                            });
                        }
                    }
                }
            }
            let jk = jackknife(&dataset, &pipeline, &targets, scale, args.alpha)?;
            // fill effect SEs/CIs into the report
            for target in &jk.targets {
                let slot = match target.spec.kind {
                    TargetKind::Spce => &mut report.spce,
                    TargetKind::Rmst => &mut report.rmst,
                };
                if let Some(entry) = slot
                    .iter_mut()
                    .find(|e| e.level == target.spec.level && e.time == target.spec.time)
                {
                    entry.se = Some(target.se);
                    entry.ci_lower = Some(target.ci_lower);
                    entry.ci_upper = Some(target.ci_upper);
                }
            }
            let arms = jk
                .targets
                .iter()
                .map(|target| {
                    let (p1, p0) = arm_points(&report, target.spec);
                    ArmInterval {
                        kind: kind_name(target.spec.kind).into(),
                        level: target.spec.level,
                        time: target.spec.time,
                        point_treated: p1,
                        point_control: p0,
                        se_treated: target.covariance[0][0].sqrt(),
                        se_control: target.covariance[1][1].sqrt(),
                    }
                })
                .collect();
            Some(InferenceOutput {
                df: jk.df,
                alpha: jk.alpha,
                arms,
            })
        }
    };

    let output = FitOutput {
        schema_version: SCHEMA_VERSION,
        method,
        estimand: match args.estimand {
            EstimandArg::Spce => "spce".into(),
            EstimandArg::Rmst => "rmst".into(),
        },
        scale,
        pi_treated: args.pi,
        outcome_rhs: args.outcome.clone(),
        censoring_rhs,
        clusters: dataset.n_clusters(),
        subjects: dataset.n_subjects(),
        report_times: times,
        taus: args.tau.clone(),
        report,
        inference,
    };
    print!("{}", render_fit(&output, &args));
    if let Some(path) = &args.output {
        std::fs::write(path, serde_json::to_vec_pretty(&output)?)?;
    }
    Ok(())
}

fn kind_name(kind: TargetKind) -> &'static str {
    match kind {
        TargetKind::Spce => "spce",
        TargetKind::Rmst => "rmst",
    }
}

/// Arm-wise points for a target, read off the report's curves / RMST tables.
fn arm_points(report: &EstimandReport, spec: TargetSpec) -> (f64, f64) {
    let value = |slot: usize| -> f64 {
        let arm = &report.arms[slot];
        match spec.kind {
            TargetKind::Spce => match spec.level {
                Level::Cluster => arm.cluster_curve.value_at(spec.time),
                Level::Individual => arm.individual_curve.value_at(spec.time),
            },
            TargetKind::Rmst => {
                let table = match spec.level {
                    Level::Cluster => &arm.rmst_cluster,
                    Level::Individual => &arm.rmst_individual,
                };
                table
                    .iter()
                    .find(|(tau, _)| *tau == spec.time)
                    .map(|(_, mu)| *mu)
                    .unwrap_or(f64::NAN)
            }
        }
    };
    (value(0), value(1))
}

fn render_fit(out: &FitOutput, args: &FitArgs) -> String {
    let method_label = match args.method {
        MethodArg::Marginal => "marginal",
        MethodArg::Frailty => "frailty",
        MethodArg::Km => "km",
        MethodArg::OutcomeRegression => "outcome_regression",
    };
    let estimand_label = match args.estimand {
        EstimandArg::Spce => "SPCE",
        EstimandArg::Rmst => "RMST",
    };
    let rhs = |s: &str| if s.is_empty() { "1".to_string() } else { s.to_string() };
    let mut text = format!(
        "drsurv fit: method = {method_label}, estimand = {estimand_label}\n\
         Treatment probs (p0, p1): {:.3}, {:.3}\n\
         Outcome model:   Surv({}, {}) ~ {}\n\
         Censoring model: Surv({}, {} == 0) ~ {}\n\
         Cluster id col:  {}\n\
         Clusters (M):    {}\n\
         Obs (N):         {}\n",
        1.0 - out.pi_treated,
        out.pi_treated,
        args.time_col,
        args.event_col,
        rhs(&out.outcome_rhs),
        args.time_col,
        args.event_col,
        rhs(&out.censoring_rhs),
        args.cluster_col,
        out.clusters,
        out.subjects,
    );

    let (kind, times, labels) = match args.estimand {
        EstimandArg::Spce => (
            TargetKind::Spce,
            &out.report_times,
            ("S1", "S0", effect_label("S1", "S0", out.scale)),
        ),
        EstimandArg::Rmst => (
            TargetKind::Rmst,
            &out.taus,
            ("mu1", "mu0", effect_label("mu1", "mu0", out.scale)),
        ),
    };
    for level in Level::ALL {
        let level_name = match level {
            Level::Cluster => "Cluster-level",
            Level::Individual => "Individual-level",
        };
        text.push_str(&format!("\n{level_name} {estimand_label}:\n"));
        match &out.inference {
            None => {
                text.push_str(&format!(
                    "{:<9} {:>9} {:>9} {:>9}\n",
                    "", labels.0, labels.1, labels.2
                ));
                for &t in times {
                    let spec = TargetSpec { kind, level, time: t };
                    let (p1, p0) = arm_points(&out.report, spec);
                    let effect = effect_entry(out, kind, level, t);
                    text.push_str(&format!(
                        "t={:<7} {:>9.3} {:>9.3} {:>9.3}\n",
                        trim(t),
                        p1,
                        p0,
                        effect.map(|e| e.0).unwrap_or(f64::NAN)
                    ));
                }
            }
            Some(inf) => {
                let t_crit = t_quantile(inf.df as f64, 1.0 - inf.alpha / 2.0);
                text.push_str(&format!(
                    "{:<9} {:<24} {:<24} {:<24}\n",
                    "",
                    format!("{} (LCL, UCL)", labels.0),
                    format!("{} (LCL, UCL)", labels.1),
                    format!("{} (LCL, UCL)", labels.2),
                ));
                for &t in times {
                    let arm = inf
                        .arms
                        .iter()
                        .find(|a| a.level == level && a.time == t && a.kind == kind_name(kind));
                    let effect = effect_entry(out, kind, level, t);
                    let cell = |p: f64, se: f64| {
                        format!("{:.3} ({:.3}, {:.3})", p, p - t_crit * se, p + t_crit * se)
                    };
                    let (c1, c0) = arm
                        .map(|a| {
                            (
                                cell(a.point_treated, a.se_treated),
                                cell(a.point_control, a.se_control),
                            )
                        })
                        .unwrap_or_default();
                    let ce = effect
                        .map(|(e, lo, hi)| format!("{e:.3} ({lo:.3}, {hi:.3})"))
                        .unwrap_or_default();
                    text.push_str(&format!(
                        "t={:<7} {:<24} {:<24} {:<24}\n",
                        trim(t),
                        c1,
                        c0,
                        ce
                    ));
                }
                text.push_str(&format!(
                    "  t-intervals with df = {}, alpha = {:.3}\n",
                    inf.df, inf.alpha
                ));
            }
        }
    }
    text
}

fn effect_label(a: &str, b: &str, scale: EffectScale) -> String {
    match scale {
        EffectScale::Difference => format!("{a}-{b}"),
        EffectScale::Ratio => format!("{a}/{b}"),
    }
}

/// (estimate, ci_lower, ci_upper) for an effect entry; CI NaN without variance.
fn effect_entry(
    out: &FitOutput,
    kind: TargetKind,
    level: Level,
    time: f64,
) -> Option<(f64, f64, f64)> {
    let slot = match kind {
        TargetKind::Spce => &out.report.spce,
        TargetKind::Rmst => &out.report.rmst,
    };
    slot.iter()
        .find(|e| e.level == level && e.time == time)
        .map(|e| {
            (
                e.estimate,
                e.ci_lower.unwrap_or(f64::NAN),
                e.ci_upper.unwrap_or(f64::NAN),
            )
        })
}

fn trim(t: f64) -> String {
    let s = format!("{t}");
    if s.len() > 7 {
        format!("{t:.3}")
    } else {
        s
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let mut spec = scenario(&args.scenario)?;
    if let Some(m) = args.clusters {
        spec.n_clusters = m;
    }
    let dataset = simlab::generate(&spec, args.seed)?;
    dataset.save_csv(&args.output)?;
    let censored = dataset
        .subjects()
        .filter(|(_, s)| !s.event)
        .count();
    println!(
        "wrote {}: {} clusters, {} subjects, {:.1}% censored (seed {})",
        args.output.display(),
        dataset.n_clusters(),
        dataset.n_subjects(),
        100.0 * censored as f64 / dataset.n_subjects() as f64,
        args.seed,
    );
    Ok(())
}

fn build_grid(grid_max: f64, grid_points: usize, extra: &[f64]) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=grid_points)
        .map(|i| grid_max * i as f64 / grid_points as f64)
        .collect();
    grid.extend_from_slice(extra);
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup();
    grid
}

fn cmd_truth(args: TruthArgs) -> Result<()> {
    let spec = scenario(&args.scenario)?;
    if args.grid_points == 0 || args.grid_max <= 0.0 {
        return Err(Error::InvalidConfig(
            "grid must have positive extent and at least one step".into(),
        ));
    }
    let grid = build_grid(args.grid_max, args.grid_points, &args.times);
    let truth = mc_truth_cached(
        &spec,
        args.clusters,
        &grid,
        args.seed,
        &cache_dir(args.cache_dir.clone()),
    )?;
    for &t in &args.times {
        for level in Level::ALL {
            let effect = truth.effect(TargetKind::Spce, level, t, EffectScale::Difference)?;
            println!("SPCE[{level}](t={t}) = {effect:.6}");
        }
    }
    let output = TruthOutput {
        schema_version: SCHEMA_VERSION,
        scenario: spec.name.clone(),
        seed: args.seed,
        truth,
    };
    std::fs::write(&args.output, serde_json::to_vec_pretty(&output)?)?;
    println!(
        "wrote {} ({} clusters, {} grid points)",
        args.output.display(),
        args.clusters,
        grid.len()
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let spec = scenario(&args.scenario)?;
    if args.spce_times.is_empty() && args.rmst_taus.is_empty() {
        return Err(Error::InvalidConfig(
            "at least one of --spce-times / --rmst-taus is required".into(),
        ));
    }
    let strategies = if args.strategies.is_empty() {
        standard_strategies()
    } else {
        strategies_by_name(&args.strategies)?
    };
    let mut targets = Vec::new();
    for level in Level::ALL {
        for &t in &args.spce_times {
            targets.push(TargetSpec {
                kind: TargetKind::Spce,
                level,
                time: t,
            });
        }
        for &tau in &args.rmst_taus {
            targets.push(TargetSpec {
                kind: TargetKind::Rmst,
                level,
                time: tau,
            });
        }
    }

    let truth = match &args.truth {
        Some(path) => {
            let loaded: TruthOutput = serde_json::from_slice(&std::fs::read(path)?)?;
            if loaded.schema_version != SCHEMA_VERSION {
                return Err(Error::InvalidConfig(format!(
                    "truth file schema version {} != {}",
                    loaded.schema_version, SCHEMA_VERSION
                )));
            }
            if loaded.scenario != spec.name {
                return Err(Error::InvalidConfig(format!(
                    "truth file is for scenario `{}`, not `{}`",
                    loaded.scenario, spec.name
                )));
            }
            loaded.truth
        }
        None => {
            let max_time = targets
                .iter()
                .map(|t| t.time)
                .fold(0.0f64, f64::max);
            let all_times: Vec<f64> = targets.iter().map(|t| t.time).collect();
            let grid = build_grid(max_time.max(1.0), 80, &all_times);
            mc_truth_cached(
                &spec,
                args.truth_clusters,
                &grid,
                args.seed ^ 0x7472_7574,
                &cache_dir(args.cache_dir.clone()),
            )?
        }
    };

    let variance = match args.variance {
        VarianceArg::None => VarianceMode::None,
        VarianceArg::Jackknife => VarianceMode::Jackknife,
    };
    let table = simlab::run_study(
        &spec,
        args.reps,
        &strategies,
        &targets,
        variance,
        args.scale.to_scale(),
        &truth,
        args.seed,
    )?;
    print!("{}", table.render());
    if let Some(path) = &args.output {
        table.to_csv(path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
