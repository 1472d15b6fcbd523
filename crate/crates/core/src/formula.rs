//! Model formulas: named covariate terms, pairwise products, cluster means
//! of individual covariates, and scaled cluster size.

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

/// Which nuisance model a formula feeds. The censoring role flips the event
/// indicator at fit time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Outcome,
    Censoring,
}

/// One design-matrix column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    /// A covariate column by name.
    Column(String),
    /// Pairwise product of two covariate columns.
    Product(String, String),
    /// Within-cluster mean of a covariate column (contextual effect).
    ClusterMean(String),
    /// Cluster size divided by a constant, e.g. N/50.
    ClusterSize { divisor: f64 },
}

impl Term {
    /// Parses "Z1", "Z1*Z2", "mean(Z1)", "N", or "N/50".
    pub fn parse(s: &str) -> Result<Term> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::UnknownTerm(s.to_string()));
        }
        if let Some(inner) = s.strip_prefix("mean(").and_then(|r| r.strip_suffix(')')) {
            return Ok(Term::ClusterMean(inner.trim().to_string()));
        }
        if s == "N" {
            return Ok(Term::ClusterSize { divisor: 1.0 });
        }
        if let Some(div) = s.strip_prefix("N/") {
            let divisor: f64 = div
                .trim()
                .parse()
                .map_err(|_| Error::UnknownTerm(s.to_string()))?;
            return Ok(Term::ClusterSize { divisor });
        }
        if let Some((a, b)) = s.split_once('*') {
            return Ok(Term::Product(a.trim().to_string(), b.trim().to_string()));
        }
        Ok(Term::Column(s.to_string()))
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Term::Column(c) => write!(f, "{c}"),
            Term::Product(a, b) => write!(f, "{a}*{b}"),
            Term::ClusterMean(c) => write!(f, "mean({c})"),
            Term::ClusterSize { divisor } => {
                if *divisor == 1.0 {
                    write!(f, "N")
                } else {
                    write!(f, "N/{divisor}")
                }
            }
        }
    }
}

/// A model formula: role plus ordered terms. An empty term list yields a
/// null model (Nelson-Aalen baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFormula {
    pub role: Role,
    pub terms: Vec<Term>,
}

impl ModelFormula {
    pub fn new(role: Role, terms: Vec<Term>) -> Self {
        ModelFormula { role, terms }
    }

    /// Parses a "+"-separated term list, e.g. "W1 + Z1 + Z1*Z2 + N/50".
    /// An empty or "1" right-hand side gives the null model.
    pub fn parse(role: Role, rhs: &str) -> Result<Self> {
        let rhs = rhs.trim();
        if rhs.is_empty() || rhs == "1" {
            return Ok(ModelFormula { role, terms: vec![] });
        }
        let terms = rhs
            .split('+')
            .map(Term::parse)
            .collect::<Result<Vec<_>>>()?;
        Ok(ModelFormula { role, terms })
    }

    pub fn rhs(&self) -> String {
        if self.terms.is_empty() {
            "1".to_string()
        } else {
            self.terms
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(" + ")
        }
    }

    pub fn width(&self) -> usize {
        self.terms.len()
    }
}

/// Evaluates the formula for every subject, in canonical (cluster, subject)
/// order. Pure: identical inputs give identical matrices.
pub fn build_design(dataset: &SurvivalDataset, formula: &ModelFormula) -> Result<Vec<Vec<f64>>> {
    // resolve column indices up front so unknown terms fail before evaluation
    let resolve = |name: &str| -> Result<usize> {
        dataset
            .covariate_index(name)
            .ok_or_else(|| Error::UnknownTerm(name.to_string()))
    };
    enum Compiled {
        Column(usize),
        Product(usize, usize),
        ClusterMean(usize),
        ClusterSize(f64),
    }
    let compiled = formula
        .terms
        .iter()
        .map(|t| {
            Ok(match t {
                Term::Column(c) => Compiled::Column(resolve(c)?),
                Term::Product(a, b) => Compiled::Product(resolve(a)?, resolve(b)?),
                Term::ClusterMean(c) => Compiled::ClusterMean(resolve(c)?),
                Term::ClusterSize { divisor } => Compiled::ClusterSize(*divisor),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(dataset.n_subjects());
    for cluster in dataset.clusters() {
        let n = cluster.size() as f64;
        // per-cluster covariate means, computed lazily only if needed
        let mut means: Option<Vec<f64>> = None;
        let mut cluster_mean = |idx: usize, cluster: &crate::data::Cluster| -> f64 {
            let m = means.get_or_insert_with(|| {
                let p = dataset.covariate_names().len();
                let mut acc = vec![0.0; p];
                for s in &cluster.subjects {
                    for (a, v) in acc.iter_mut().zip(&s.covariates) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n);
                acc
            });
            m[idx]
        };
        for subject in &cluster.subjects {
            let row = compiled
                .iter()
                .map(|c| match c {
                    Compiled::Column(i) => subject.covariates[*i],
                    Compiled::Product(i, j) => subject.covariates[*i] * subject.covariates[*j],
                    Compiled::ClusterMean(i) => cluster_mean(*i, cluster),
                    Compiled::ClusterSize(divisor) => n / divisor,
                })
                .collect();
            rows.push(row);
        }
    }
    Ok(rows)
}
