//! Frequency-distribution fidelity: R² between real and synthetic code
//! statistics over a shared vocabulary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::PatientRecord;
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

/// Sparse probability vector over a fixed index space of size `dim`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrequencyVector {
    pub dim: u64,
    /// Non-zero entries only.
    pub probs: BTreeMap<u64, f64>,
}

impl FrequencyVector {
    fn from_counts(dim: u64, counts: BTreeMap<u64, u64>) -> Self {
        let total: u64 = counts.values().sum();
        let probs = counts
            .into_iter()
            .filter(|&(_, c)| c > 0)
            .map(|(k, c)| (k, c as f64 / total as f64))
            .collect();
        Self { dim, probs }
    }

    pub fn is_zero(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn get(&self, i: u64) -> f64 {
        self.probs.get(&i).copied().unwrap_or(0.0)
    }

    /// Dense copy; only sensible for small index spaces.
    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i)).collect()
    }
}

/// `1 - SS_res / SS_tot` with `reference` supplying the mean and total
/// variance. `None` means undefined: an empty vector on either side, or
/// zero reference variance with unequal vectors.
pub fn r2(reference: &FrequencyVector, candidate: &FrequencyVector) -> Result<Option<f64>> {
    if reference.dim != candidate.dim {
        return Err(Error::IndexMismatch(reference.dim as usize, candidate.dim as usize));
    }
    if reference.is_zero() || candidate.is_zero() {
        return Ok(None);
    }
    let n = reference.dim as f64;
    let mean = reference.probs.values().sum::<f64>() / n;
    let zeros = reference.dim - reference.probs.len() as u64;
    let ss_tot = reference.probs.values().map(|r| (r - mean).powi(2)).sum::<f64>() + zeros as f64 * mean * mean;
    let mut ss_res = 0.0;
    for (k, r) in &reference.probs {
        ss_res += (candidate.get(*k) - r).powi(2);
    }
    for (k, c) in &candidate.probs {
        if !reference.probs.contains_key(k) {
            ss_res += c * c;
        }
    }
    if ss_tot == 0.0 {
        return Ok((ss_res == 0.0).then_some(1.0));
    }
    Ok(Some(1.0 - ss_res / ss_tot))
}

/// Code indices of each visit; codes outside the vocabulary are an error.
fn visit_indices(r: &PatientRecord, vocab: &Vocabulary) -> Result<Vec<Vec<u64>>> {
    r.visits
        .iter()
        .map(|v| {
            v.codes
                .iter()
                .map(|c| {
                    let id = vocab.code_id(c.as_str())?;
                    Ok(vocab.code_index(id).expect("code id") as u64)
                })
                .collect()
        })
        .collect()
}

fn dedup(v: &[u64]) -> Vec<u64> {
    let mut s = v.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

/// Marginal frequency of every code token.
pub fn unigram(records: &[PatientRecord], vocab: &Vocabulary) -> Result<FrequencyVector> {
    let mut counts = BTreeMap::new();
    for r in records {
        for v in visit_indices(r, vocab)? {
            for c in v {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
    }
    Ok(FrequencyVector::from_counts(vocab.n_codes() as u64, counts))
}

/// Index of the unordered pair `{a, b}`, `a < b`, in row-major upper
/// triangle order.
fn pair_index(a: u64, b: u64, n: u64) -> u64 {
    a * n - a * (a + 1) / 2 + (b - a - 1)
}

/// Unordered pairs of distinct codes sharing a visit.
pub fn bigram(records: &[PatientRecord], vocab: &Vocabulary) -> Result<FrequencyVector> {
    let n = vocab.n_codes() as u64;
    let mut counts = BTreeMap::new();
    for r in records {
        for v in visit_indices(r, vocab)? {
            let s = dedup(&v);
            for (i, &a) in s.iter().enumerate() {
                for &b in &s[i + 1..] {
                    *counts.entry(pair_index(a, b, n)).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(FrequencyVector::from_counts(n * n.saturating_sub(1) / 2, counts))
}

/// Ordered pairs `(c, c')` with `c` in a visit and `c'` in the next one.
pub fn seq_bigram(records: &[PatientRecord], vocab: &Vocabulary) -> Result<FrequencyVector> {
    let n = vocab.n_codes() as u64;
    let mut counts = BTreeMap::new();
    for r in records {
        let visits = visit_indices(r, vocab)?;
        for w in visits.windows(2) {
            for &a in &w[0] {
                for &b in &w[1] {
                    *counts.entry(a * n + b).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(FrequencyVector::from_counts(n * n, counts))
}

/// Mean over patients of each patient's relative code frequencies.
/// Patients without codes are left out.
pub fn dimwise(records: &[PatientRecord], vocab: &Vocabulary) -> Result<FrequencyVector> {
    let mut parts: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut patients = 0usize;
    for r in records {
        let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
        for v in visit_indices(r, vocab)? {
            for c in v {
                *counts.entry(c).or_insert(0) += 1;
            }
        }
        let total: u64 = counts.values().sum();
        if total == 0 {
            continue;
        }
        patients += 1;
        for (c, k) in counts {
            parts.entry(c).or_default().push(k as f64 / total as f64);
        }
    }
    // summing sorted parts makes the mean independent of record order
    let probs = parts
        .into_iter()
        .map(|(c, mut xs)| {
            xs.sort_by(f64::total_cmp);
            (c, xs.iter().sum::<f64>() / patients as f64)
        })
        .collect();
    Ok(FrequencyVector {
        dim: vocab.n_codes() as u64,
        probs,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    /// `None` is reported as "undefined".
    pub unigram: Option<f64>,
    pub bigram: Option<f64>,
    pub seq_bigram: Option<f64>,
    pub dimwise: Option<f64>,
    pub n_real: usize,
    pub n_synthetic: usize,
}

pub fn fidelity(real: &[PatientRecord], synthetic: &[PatientRecord], vocab: &Vocabulary) -> Result<FidelityReport> {
    Ok(FidelityReport {
        unigram: r2(&unigram(real, vocab)?, &unigram(synthetic, vocab)?)?,
        bigram: r2(&bigram(real, vocab)?, &bigram(synthetic, vocab)?)?,
        seq_bigram: r2(&seq_bigram(real, vocab)?, &seq_bigram(synthetic, vocab)?)?,
        dimwise: r2(&dimwise(real, vocab)?, &dimwise(synthetic, vocab)?)?,
        n_real: real.len(),
        n_synthetic: synthetic.len(),
    })
}
