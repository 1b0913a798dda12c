//! One results table: fidelity, then utility, then privacy columns, one row
//! per model or configuration.

use serde::{Deserialize, Serialize};

use super::fidelity::FidelityReport;
use super::privacy::{AiaReport, MiaReport};
use super::utility::UtilityReport;
use crate::{Error, Result};

pub const COLUMNS: [&str; 15] = [
    "model",
    "unigram_r2",
    "bigram_r2",
    "seq_bigram_r2",
    "dimwise_r2",
    "tstr_accuracy",
    "tstr_precision",
    "tstr_recall",
    "tstr_f1",
    "mia_accuracy",
    "mia_precision",
    "mia_recall",
    "mia_f1",
    "aia_f1",
    "notes",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub fidelity: Option<FidelityReport>,
    pub utility: Option<UtilityReport>,
    pub mia: Option<MiaReport>,
    pub aia: Option<AiaReport>,
    pub notes: Vec<String>,
}

fn num(x: f64) -> String {
    format!("{x:.4}")
}

fn r2(x: Option<f64>) -> String {
    x.map_or_else(|| "undefined".into(), num)
}

impl ReportRow {
    pub fn cells(&self) -> Vec<String> {
        let mut out = vec![self.model.clone()];
        match &self.fidelity {
            Some(f) => out.extend([r2(f.unigram), r2(f.bigram), r2(f.seq_bigram), r2(f.dimwise)]),
            None => out.extend(std::iter::repeat_n(String::new(), 4)),
        }
        match &self.utility {
            Some(u) => out.extend([u.macro_accuracy, u.macro_precision, u.macro_recall, u.macro_f1].map(num)),
            None => out.extend(std::iter::repeat_n(String::new(), 4)),
        }
        match &self.mia {
            Some(m) => out.extend([m.accuracy, m.precision, m.recall, m.f1].map(num)),
            None => out.extend(std::iter::repeat_n(String::new(), 4)),
        }
        out.push(self.aia.as_ref().map_or_else(String::new, |a| num(a.f1)));
        let mut notes = self.notes.clone();
        if let Some(u) = &self.utility {
            notes.push(u.classifier.clone());
            if !u.skipped.is_empty() {
                let names: Vec<&str> = u.skipped.iter().map(|(l, _)| l.as_str()).collect();
                notes.push(format!("skipped labels: {}", names.join(" ")));
            }
        }
        out.push(notes.join("; "));
        out
    }
}

pub fn report_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.cells())?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}
