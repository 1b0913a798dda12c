use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CodeId, CodeSystem, PatientRecord};
use crate::hashing::read_to_string;
use crate::{Error, Result};

/// Upper bound on the number of labels a mapping may declare.
pub const MAX_LABELS: usize = 25;

const DEFAULT_GENERIC: &str = include_str!("../../data/generic_phenotypes.json");

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PhenotypeLabel {
    pub id: u8,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeRule {
    pub prefix: String,
    pub label: u8,
}

/// Ordered prefix rules; for every code the first matching rule wins.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhenotypeMapping {
    pub version: String,
    pub system: CodeSystem,
    pub labels: Vec<String>,
    pub rules: Vec<PhenotypeRule>,
}

impl PhenotypeMapping {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The bundled 25-label mapping for the generic code system: label `k`
    /// is indicated by the code family `<letter k>0`, e.g. `A0` or `C0`.
    pub fn default_generic() -> Self {
        Self::from_json(DEFAULT_GENERIC).expect("bundled mapping is valid")
    }

    /// Keep the first `n` labels and the rules that point at them.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            version: format!("{}-first{n}", self.version),
            system: self.system,
            labels: self.labels.iter().take(n).cloned().collect(),
            rules: self.rules.iter().filter(|r| (r.label as usize) < n).cloned().collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.is_empty() || self.labels.len() > MAX_LABELS {
            return Err(Error::Mapping(format!(
                "expected 1..={MAX_LABELS} labels, found {}",
                self.labels.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for l in &self.labels {
            if l.trim().is_empty() || !seen.insert(l.as_str()) {
                return Err(Error::Mapping(format!("empty or repeated label `{l}`")));
            }
        }
        for r in &self.rules {
            // a pattern can match a valid code only if it is itself a
            // normalized alphanumeric prefix
            let ok = !r.prefix.is_empty()
                && CodeId::normalize(&r.prefix) == r.prefix
                && r.prefix.chars().all(|c| c.is_ascii_alphanumeric());
            if !ok {
                return Err(Error::Mapping(format!("bad prefix `{}`", r.prefix)));
            }
            if r.label as usize >= self.labels.len() {
                return Err(Error::Mapping(format!(
                    "rule `{}` points at label {} of {}",
                    r.prefix,
                    r.label,
                    self.labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn label(&self, id: u8) -> PhenotypeLabel {
        PhenotypeLabel {
            id,
            name: self.labels[id as usize].clone(),
        }
    }

    pub fn all_labels(&self) -> Vec<PhenotypeLabel> {
        (0..self.labels.len() as u8).map(|i| self.label(i)).collect()
    }

    /// Label of the first rule whose prefix matches `code`.
    pub fn classify(&self, code: &str) -> Option<u8> {
        self.rules
            .iter()
            .find(|r| code.starts_with(r.prefix.as_str()))
            .map(|r| r.label)
    }
}

pub fn assign_phenotypes(record: &PatientRecord, mapping: &PhenotypeMapping) -> BTreeSet<PhenotypeLabel> {
    record
        .codes()
        .filter_map(|c| mapping.classify(c.as_str()))
        .map(|id| mapping.label(id))
        .collect()
}
