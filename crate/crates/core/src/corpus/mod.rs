//! Patient-record data model and corpus-level operations.

mod ground_truth;
mod ingest;
mod phenotype;
mod split;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::{read_to_string, write_bytes};
use crate::{Error, Result};

pub use ground_truth::{synthesize_ground_truth, ClusteredParams, GroundTruthSpec};
pub use ingest::{ingest_tables, ColumnMap, IngestConfig, IngestOutput, Reject};
pub use phenotype::{assign_phenotypes, PhenotypeLabel, PhenotypeMapping, PhenotypeRule};
pub use split::{split, CorpusSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub enum CodeSystem {
    #[serde(rename = "ICD9")]
    Icd9,
    #[serde(rename = "ICD10")]
    Icd10,
    #[default]
    #[serde(rename = "GENERIC")]
    Generic,
}

impl std::str::FromStr for CodeSystem {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ICD9" | "9" => Ok(CodeSystem::Icd9),
            "ICD10" | "10" => Ok(CodeSystem::Icd10),
            "GENERIC" => Ok(CodeSystem::Generic),
            other => Err(Error::Config(format!("unknown code system `{other}`"))),
        }
    }
}

/// A clinical event code in canonical form: no dots, uppercase.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CodeId {
    system: CodeSystem,
    raw: String,
}

impl CodeId {
    pub fn new(system: CodeSystem, code: &str) -> Result<Self> {
        let raw = Self::normalize(code);
        if raw.is_empty() {
            return Err(Error::InvalidCode(code.to_string()));
        }
        Ok(Self { system, raw })
    }

    /// Strip dots and surrounding whitespace, uppercase.
    pub fn normalize(code: &str) -> String {
        code.trim()
            .chars()
            .filter(|&c| c != '.')
            .flat_map(char::to_uppercase)
            .collect()
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }
}

impl fmt::Display for CodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Visit {
    pub admit_ts: i64,
    pub codes: Vec<CodeId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    /// Phenotype label names.
    pub labels: BTreeSet<String>,
    pub visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn codes(&self) -> impl Iterator<Item = &CodeId> {
        self.visits.iter().flat_map(|v| v.codes.iter())
    }

    pub fn code_set(&self) -> BTreeSet<&str> {
        self.codes().map(CodeId::as_str).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct VisitRow {
    admit_ts: i64,
    codes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct RecordRow {
    patient_id: String,
    labels: Vec<String>,
    visits: Vec<VisitRow>,
}

impl PatientRecord {
    fn to_row(&self) -> RecordRow {
        RecordRow {
            patient_id: self.patient_id.clone(),
            labels: self.labels.iter().cloned().collect(),
            visits: self
                .visits
                .iter()
                .map(|v| VisitRow {
                    admit_ts: v.admit_ts,
                    codes: v.codes.iter().map(|c| c.raw.clone()).collect(),
                })
                .collect(),
        }
    }

    fn from_row(row: RecordRow, system: CodeSystem) -> Result<Self> {
        let visits = row
            .visits
            .into_iter()
            .map(|v| {
                Ok(Visit {
                    admit_ts: v.admit_ts,
                    codes: v.codes.iter().map(|c| CodeId::new(system, c)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            patient_id: row.patient_id,
            labels: row.labels.into_iter().collect(),
            visits,
        })
    }
}

/// Serialize records as JSON Lines (one record per line, LF terminated).
pub fn to_jsonl(records: &[PatientRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(&r.to_row())?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str, system: CodeSystem) -> Result<Vec<PatientRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let row: RecordRow = serde_json::from_str(line).map_err(|e| Error::Row {
                file: "corpus".into(),
                line: i as u64 + 1,
                msg: e.to_string(),
            })?;
            PatientRecord::from_row(row, system)
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[PatientRecord]) -> Result<()> {
    write_bytes(path, to_jsonl(records)?.as_bytes())
}

pub fn read_jsonl(path: &Path, system: CodeSystem) -> Result<Vec<PatientRecord>> {
    from_jsonl(&read_to_string(path)?, system)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub patients: usize,
    pub visits: usize,
    pub events: usize,
    pub distinct_codes: usize,
    /// visits per patient → number of patients
    pub visits_histogram: BTreeMap<usize, usize>,
    /// codes per visit → number of visits
    pub codes_per_visit_histogram: BTreeMap<usize, usize>,
}

pub fn stats(records: &[PatientRecord]) -> DatasetStats {
    let mut s = DatasetStats::default();
    let mut distinct = BTreeSet::new();
    for r in records {
        s.patients += 1;
        s.visits += r.visits.len();
        *s.visits_histogram.entry(r.visits.len()).or_default() += 1;
        for v in &r.visits {
            s.events += v.codes.len();
            *s.codes_per_visit_histogram.entry(v.codes.len()).or_default() += 1;
            distinct.extend(v.codes.iter().map(CodeId::as_str));
        }
    }
    s.distinct_codes = distinct.len();
    s
}
