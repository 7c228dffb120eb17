//! On-disk workload layout: a directory holding the schema sidecar, the
//! owned dataset, one CSV per candidate, and a JSON manifest with prices,
//! queries, and the budget.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use assemblage_core::tabular::{Dataset, Predicate, Query, QuerySet};

use crate::ingest;

pub const MANIFEST_FILE: &str = "workload.json";
pub const SCHEMA_FILE: &str = "columns.schema";
pub const OWNED_FILE: &str = "owned.csv";
pub const CANDIDATE_DIR: &str = "candidates";

/// Everything a selector needs for one assemblage instance.
pub struct WorkloadData {
    pub owned: Dataset,
    pub candidates: Vec<Dataset>,
    pub queries: QuerySet,
    pub budget: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct WorkloadManifest {
    pub seed: u64,
    pub b_ratio: f64,
    pub overlap: f64,
    pub budget: f64,
    pub schema_file: String,
    pub owned: DatasetEntry,
    pub candidates: Vec<DatasetEntry>,
    pub queries: Vec<QueryFile>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    pub file: String,
    pub price: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryFile {
    pub id: String,
    pub predicates: Vec<PredicateFile>,
}

/// A predicate is either a numeric range (`low`/`high` set) or a categorical
/// equality (`token` set); the unused fields are omitted from the JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredicateFile {
    pub column: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub high: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

pub fn query_to_file(query: &Query) -> QueryFile {
    let predicates = query
        .predicates()
        .iter()
        .map(|p| match p {
            Predicate::Range { column, low, high } => PredicateFile {
                column: column.clone(),
                low: Some(*low),
                high: Some(*high),
                token: None,
            },
            Predicate::Equals { column, token } => PredicateFile {
                column: column.clone(),
                low: None,
                high: None,
                token: Some(token.clone()),
            },
        })
        .collect();
    QueryFile { id: query.id.clone(), predicates }
}

pub fn query_from_file(file: &QueryFile) -> Result<Query> {
    let mut predicates = Vec::with_capacity(file.predicates.len());
    for p in &file.predicates {
        let predicate = match (p.low, p.high, &p.token) {
            (Some(low), Some(high), None) => Predicate::range(p.column.as_str(), low, high)?,
            (None, None, Some(token)) => Predicate::equals(p.column.as_str(), token),
            _ => bail!(
                "query {}: predicate on {} must set either low+high or token",
                file.id,
                p.column
            ),
        };
        predicates.push(predicate);
    }
    Ok(Query::new(file.id.as_str(), predicates)?)
}

/// Writes the workload directory. Overwrites files that already exist.
pub fn save_workload(
    dir: &Path,
    data: &WorkloadData,
    seed: u64,
    b_ratio: f64,
    overlap: f64,
) -> Result<()> {
    fs::create_dir_all(dir.join(CANDIDATE_DIR))
        .with_context(|| format!("creating {}", dir.display()))?;
    ingest::write_sidecar(&data.owned.schema, &dir.join(SCHEMA_FILE))?;
    ingest::export_csv(&data.owned, &dir.join(OWNED_FILE))?;

    let mut candidates = Vec::with_capacity(data.candidates.len());
    for dataset in &data.candidates {
        let file = format!("{}/{}.csv", CANDIDATE_DIR, dataset.id);
        ingest::export_csv(dataset, &dir.join(&file))?;
        candidates.push(DatasetEntry { id: dataset.id.clone(), file, price: dataset.price });
    }

    let manifest = WorkloadManifest {
        seed,
        b_ratio,
        overlap,
        budget: data.budget,
        schema_file: SCHEMA_FILE.to_string(),
        owned: DatasetEntry {
            id: data.owned.id.clone(),
            file: OWNED_FILE.to_string(),
            price: data.owned.price,
        },
        candidates,
        queries: data.queries.queries().iter().map(query_to_file).collect(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")
        .with_context(|| format!("writing {}", dir.join(MANIFEST_FILE).display()))?;
    Ok(())
}

/// Reads a workload directory back into memory.
pub fn load_workload(dir: &Path) -> Result<WorkloadData> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let manifest: WorkloadManifest = serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;

    let schema = Arc::new(ingest::read_sidecar(&dir.join(&manifest.schema_file))?);
    let owned = ingest::ingest_csv(
        &dir.join(&manifest.owned.file),
        schema.clone(),
        &manifest.owned.id,
        manifest.owned.price,
    )?;
    let mut candidates = Vec::with_capacity(manifest.candidates.len());
    for entry in &manifest.candidates {
        candidates.push(ingest::ingest_csv(
            &dir.join(&entry.file),
            schema.clone(),
            &entry.id,
            entry.price,
        )?);
    }
    let queries = manifest
        .queries
        .iter()
        .map(query_from_file)
        .collect::<Result<Vec<_>>>()?;
    Ok(WorkloadData {
        owned,
        candidates,
        queries: QuerySet::new(queries)?,
        budget: manifest.budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn queries_round_trip_through_the_manifest_form() {
        let query = Query::new(
            "q_7",
            vec![
                Predicate::range("price", 10.0, 55.5).unwrap(),
                Predicate::equals("city", "austin"),
            ],
        )
        .unwrap();

        let file = query_to_file(&query);
        assert_eq!(file.predicates.len(), 2);
        let restored = query_from_file(&file).unwrap();
        assert_eq!(restored.id, query.id);
        assert_eq!(restored.predicates(), query.predicates());

        // A predicate with both range and token fields set is rejected.
        let mut bad = file.clone();
        bad.predicates[0].token = Some("x".to_string());
        assert!(query_from_file(&bad).is_err());
    }
}
