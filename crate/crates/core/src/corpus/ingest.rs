//! Admission/diagnosis CSV tables to patient records.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use super::{assign_phenotypes, CodeId, CodeSystem, PatientRecord, PhenotypeMapping, Visit};
use crate::hashing::read_to_string;
use crate::{Error, Result};

/// Column names in the three input tables. Header matching ignores case,
/// so the defaults cover both MIMIC-III (`SUBJECT_ID`) and MIMIC-IV
/// (`subject_id`) exports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMap {
    pub patient_id: String,
    pub admission_id: String,
    pub admit_time: String,
    pub code: String,
    /// Recording order of diagnoses inside an admission.
    pub sequence: Option<String>,
    /// Per-row code system (`9` / `10`), as in MIMIC-IV `icd_version`.
    pub version: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            patient_id: "subject_id".into(),
            admission_id: "hadm_id".into(),
            admit_time: "admittime".into(),
            code: "icd_code".into(),
            sequence: Some("seq_num".into()),
            version: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestConfig {
    pub columns: ColumnMap,
    pub system: CodeSystem,
}

impl IngestConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(path)?)?)
    }
}

/// A skipped input row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub reason: String,
    pub source_line: u64,
}

#[derive(Clone, Debug, Default)]
pub struct IngestOutput {
    pub records: Vec<PatientRecord>,
    pub rejects: Vec<Reject>,
}

impl IngestOutput {
    pub fn rejects_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rejects {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

struct Table {
    name: String,
    headers: Vec<String>,
    rows: Vec<(u64, csv::StringRecord)>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let text = read_to_string(path)?;
        let mut rdr = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let headers = rdr.headers()?.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            rows.push((line, rec));
        }
        Ok(Self { name, headers, rows })
    }

    fn column(&self, name: &str) -> Result<usize> {
        let want = name.to_ascii_lowercase();
        self.headers
            .iter()
            .position(|h| *h == want)
            .ok_or_else(|| Error::MissingColumn {
                file: self.name.clone(),
                column: name.to_string(),
            })
    }
}

fn field(rec: &csv::StringRecord, col: usize) -> &str {
    rec.get(col).unwrap_or("").trim()
}

/// Seconds since the epoch from an integer or a date/datetime string.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    for fmt in ["%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t.and_utc().timestamp());
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|t| t.and_utc().timestamp())
}

struct Admission {
    patient: String,
    admit_ts: i64,
    /// (sequence, code) pairs; sorted before emission
    codes: Vec<(i64, CodeId)>,
}

/// Build one record per patient from patients/admissions/diagnoses tables.
///
/// Visits are ordered by admit time, ties by admission id. Inside a visit,
/// codes follow the sequence column when present (ties and missing values
/// fall back to lexical order) and repeated codes are dropped, so the result
/// does not depend on row order. Rows that reference unknown patients or
/// admissions go to the rejects report; admissions without diagnoses and
/// patients without admissions are dropped.
pub fn ingest_tables(
    patients: &Path,
    admissions: &Path,
    diagnoses: &Path,
    mapping: &PhenotypeMapping,
    config: &IngestConfig,
) -> Result<IngestOutput> {
    let cols = &config.columns;
    let mut rejects = Vec::new();

    let pt = Table::read(patients)?;
    let p_id = pt.column(&cols.patient_id)?;
    let known: BTreeSet<String> = pt.rows.iter().map(|(_, r)| field(r, p_id).to_string()).collect();

    let at = Table::read(admissions)?;
    let a_pid = at.column(&cols.patient_id)?;
    let a_id = at.column(&cols.admission_id)?;
    let a_time = at.column(&cols.admit_time)?;
    let mut adm: BTreeMap<String, Admission> = BTreeMap::new();
    for (line, r) in &at.rows {
        let patient = field(r, a_pid).to_string();
        let id = field(r, a_id).to_string();
        let raw_ts = field(r, a_time);
        let admit_ts = parse_timestamp(raw_ts).ok_or_else(|| Error::Row {
            file: at.name.clone(),
            line: *line,
            msg: format!("unparseable timestamp `{raw_ts}`"),
        })?;
        if !known.contains(&patient) {
            rejects.push(Reject {
                reason: format!("{}: unknown patient `{patient}`", at.name),
                source_line: *line,
            });
            continue;
        }
        if adm.contains_key(&id) {
            rejects.push(Reject {
                reason: format!("{}: duplicate admission `{id}`", at.name),
                source_line: *line,
            });
            continue;
        }
        adm.insert(
            id,
            Admission {
                patient,
                admit_ts,
                codes: Vec::new(),
            },
        );
    }

    let dt = Table::read(diagnoses)?;
    let d_pid = dt.column(&cols.patient_id)?;
    let d_adm = dt.column(&cols.admission_id)?;
    let d_code = dt.column(&cols.code)?;
    let d_seq = cols.sequence.as_deref().map(|c| dt.column(c)).transpose()?;
    let d_ver = cols.version.as_deref().map(|c| dt.column(c)).transpose()?;
    for (line, r) in &dt.rows {
        let id = field(r, d_adm);
        let Some(a) = adm.get_mut(id) else {
            rejects.push(Reject {
                reason: format!("{}: unknown admission `{id}`", dt.name),
                source_line: *line,
            });
            continue;
        };
        if field(r, d_pid) != a.patient {
            rejects.push(Reject {
                reason: format!("{}: admission `{id}` belongs to another patient", dt.name),
                source_line: *line,
            });
            continue;
        }
        let system = match d_ver {
            Some(c) => field(r, c).parse()?,
            None => config.system,
        };
        let code = match CodeId::new(system, field(r, d_code)) {
            Ok(c) => c,
            Err(_) => {
                rejects.push(Reject {
                    reason: format!("{}: empty diagnosis code", dt.name),
                    source_line: *line,
                });
                continue;
            }
        };
        let seq = d_seq.and_then(|c| field(r, c).parse::<i64>().ok()).unwrap_or(i64::MAX);
        a.codes.push((seq, code));
    }

    let mut by_patient: BTreeMap<String, Vec<(i64, String, Vec<CodeId>)>> = BTreeMap::new();
    for (id, mut a) in adm {
        if a.codes.is_empty() {
            continue;
        }
        a.codes.sort();
        let mut seen = BTreeSet::new();
        let codes: Vec<CodeId> = a
            .codes
            .into_iter()
            .map(|(_, c)| c)
            .filter(|c| seen.insert(c.clone()))
            .collect();
        by_patient.entry(a.patient).or_default().push((a.admit_ts, id, codes));
    }

    let records = by_patient
        .into_iter()
        .map(|(patient_id, mut visits)| {
            visits.sort_by(|x, y| (x.0, &x.1).cmp(&(y.0, &y.1)));
            let mut rec = PatientRecord {
                patient_id,
                labels: BTreeSet::new(),
                visits: visits
                    .into_iter()
                    .map(|(admit_ts, _, codes)| Visit { admit_ts, codes })
                    .collect(),
            };
            rec.labels = assign_phenotypes(&rec, mapping).into_iter().map(|l| l.name).collect();
            rec
        })
        .collect();
    Ok(IngestOutput { records, rejects })
}
