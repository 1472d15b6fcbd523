//! Doubly robust estimation of treatment effects on survival probabilities
//! and restricted mean survival times in cluster-randomized trials with
//! right-censored outcomes.
//!
//! The pipeline is: load a [`data::SurvivalDataset`], fit per-arm outcome and
//! censoring working models ([`cox`], [`frailty`], or Kaplan-Meier), combine
//! them through the augmented inverse probability of censoring weighting
//! estimator ([`aipwcc`]), and attach cluster-jackknife uncertainty
//! ([`inference`]). The [`simlab`] module generates synthetic trials and
//! scores estimation strategies against Monte Carlo truth.

pub mod aipwcc;
pub mod cox;
pub mod data;
pub mod error;
pub mod formula;
pub mod frailty;
pub mod inference;
pub mod nonparam;
pub mod numeric;
pub mod oracle;
pub mod pipeline;
pub mod simlab;
pub mod types;

pub use data::{Cluster, CsvSchema, Subject, SurvivalDataset};
pub use error::{Error, Result};
pub use formula::{ModelFormula, Role, Term};
pub use nonparam::SurvivalCurve;
pub use types::{EffectScale, Level, PropensitySpec};
