//! Clustered survival dataset: construction, validation, CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One participant: observed time, event indicator, and numeric covariates
/// aligned with `SurvivalDataset::covariate_names`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub time: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// One cluster: treatment arm and its subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: String,
    pub arm: u8,
    pub subjects: Vec<Subject>,
}

impl Cluster {
    pub fn size(&self) -> usize {
        self.subjects.len()
    }
}

/// The observed data: clusters in first-appearance order, each owning its
/// subjects in row order. Immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurvivalDataset {
    covariate_names: Vec<String>,
    clusters: Vec<Cluster>,
}

/// Column mapping for CSV ingestion. Remaining numeric columns become
/// covariates addressable by name in model formulas.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub cluster_id: String,
    pub time: String,
    pub event: String,
    pub arm: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            cluster_id: "cluster_id".into(),
            time: "time".into(),
            event: "event".into(),
            arm: "arm".into(),
        }
    }
}

impl SurvivalDataset {
    /// Validates and builds a dataset from already-grouped clusters.
    pub fn new(covariate_names: Vec<String>, clusters: Vec<Cluster>) -> Result<Self> {
        if clusters.len() < 2 {
            return Err(Error::TooFewClusters(clusters.len()));
        }
        let mut events = [false, false];
        let mut arms = [false, false];
        for c in &clusters {
            if c.subjects.is_empty() {
                return Err(Error::EmptyCluster(c.id.clone()));
            }
            if c.arm > 1 {
                return Err(Error::NonBinaryArm(c.arm.to_string()));
            }
            arms[c.arm as usize] = true;
            for s in &c.subjects {
                if s.time < 0.0 || !s.time.is_finite() {
                    return Err(Error::NegativeTime {
                        cluster: c.id.clone(),
                        time: s.time,
                    });
                }
                if s.covariates.len() != covariate_names.len() {
                    return Err(Error::InvalidValue {
                        column: "covariates".into(),
                        value: format!(
                            "cluster {}: {} covariates, expected {}",
                            c.id,
                            s.covariates.len(),
                            covariate_names.len()
                        ),
                    });
                }
                if s.event {
                    events[c.arm as usize] = true;
                }
            }
        }
        if !arms[0] {
            return Err(Error::SingleArmDataset(1));
        }
        if !arms[1] {
            return Err(Error::SingleArmDataset(0));
        }
        for a in 0..2u8 {
            if !events[a as usize] {
                return Err(Error::NoEventsInArm(a));
            }
        }
        Ok(SurvivalDataset {
            covariate_names,
            clusters,
        })
    }

    pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
        let find = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let i_cluster = find(&schema.cluster_id)?;
        let i_time = find(&schema.time)?;
        let i_event = find(&schema.event)?;
        let i_arm = find(&schema.arm)?;
        let special = [i_cluster, i_time, i_event, i_arm];
        let cov_cols: Vec<usize> = (0..headers.len()).filter(|i| !special.contains(i)).collect();
        let covariate_names: Vec<String> = cov_cols.iter().map(|&i| headers[i].clone()).collect();

        let parse_f64 = |field: &str, col: &str| -> Result<f64> {
            field.trim().parse::<f64>().map_err(|_| Error::InvalidValue {
                column: col.to_string(),
                value: field.to_string(),
            })
        };

        let mut clusters: Vec<Cluster> = Vec::new();
        for record in reader.records() {
            let record = record?;
            let cid = record[i_cluster].to_string();
            let arm_raw = record[i_arm].trim();
            let arm = match arm_raw {
                "0" => 0u8,
                "1" => 1u8,
                other => return Err(Error::NonBinaryArm(other.to_string())),
            };
            let time = parse_f64(&record[i_time], &schema.time)?;
            let event = match record[i_event].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::InvalidValue {
                        column: schema.event.clone(),
                        value: other.to_string(),
                    })
                }
            };
            let covariates = cov_cols
                .iter()
                .map(|&i| parse_f64(&record[i], &headers[i]))
                .collect::<Result<Vec<f64>>>()?;
            match clusters.iter_mut().find(|c| c.id == cid) {
                Some(c) => {
                    if c.arm != arm {
                        return Err(Error::ArmVariesWithinCluster(cid));
                    }
                    c.subjects.push(Subject {
                        time,
                        event,
                        covariates,
                    });
                }
                None => clusters.push(Cluster {
                    id: cid,
                    arm,
                    subjects: vec![Subject {
                        time,
                        event,
                        covariates,
                    }],
                }),
            }
        }
        SurvivalDataset::new(covariate_names, clusters)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        let mut header = vec![
            "cluster_id".to_string(),
            "time".to_string(),
            "event".to_string(),
            "arm".to_string(),
        ];
        header.extend(self.covariate_names.iter().cloned());
        writer.write_record(&header)?;
        for c in &self.clusters {
            for s in &c.subjects {
                let mut row = vec![
                    c.id.clone(),
                    format!("{}", s.time),
                    if s.event { "1".into() } else { "0".into() },
                    c.arm.to_string(),
                ];
                row.extend(s.covariates.iter().map(|v| format!("{v}")));
                writer.write_record(&row)?;
            }
        }
        writer.flush()?;
        Ok(())
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    /// Number of clusters M.
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Total number of subjects N.
    pub fn n_subjects(&self) -> usize {
        self.clusters.iter().map(|c| c.size()).sum()
    }

    /// Iterate subjects in the canonical order (cluster index, subject index).
    pub fn subjects(&self) -> impl Iterator<Item = (&Cluster, &Subject)> {
        self.clusters
            .iter()
            .flat_map(|c| c.subjects.iter().map(move |s| (c, s)))
    }

    /// Observed event times in an arm, ascending and deduplicated.
    pub fn event_times(&self, arm: u8) -> Vec<f64> {
        let mut times: Vec<f64> = self
            .clusters
            .iter()
            .filter(|c| c.arm == arm)
            .flat_map(|c| c.subjects.iter())
            .filter(|s| s.event)
            .map(|s| s.time)
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        times
    }

    /// Leave-one-cluster-out copy; fails if the reduced dataset violates the
    /// dataset invariants (an empty arm or an arm without events).
    pub fn without_cluster(&self, g: usize) -> Result<Self> {
        let removed = &self.clusters[g];
        let remaining: Vec<Cluster> = self
            .clusters
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != g)
            .map(|(_, c)| c.clone())
            .collect();
        SurvivalDataset::new(self.covariate_names.clone(), remaining).map_err(|e| {
            Error::LeaveOneOutInfeasible(removed.id.clone(), e.to_string())
        })
    }
}
