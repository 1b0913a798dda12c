//! Membership and attribute inference attacks against a synthetic corpus.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::PatientRecord;
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

/// Binary metrics with the positive class explicit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    fn ratio(num: usize, den: usize) -> f64 {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    }

    pub fn accuracy(&self) -> f64 {
        Self::ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn_)
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        Self::ratio(self.tp, self.tp + self.fn_)
    }

    /// `2tp / (2tp + fp + fn)`, 0 when that denominator is 0.
    pub fn f1(&self) -> f64 {
        Self::ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
    }
}

/// Per-record multi-hot code vector as packed bits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiHot(Vec<u64>);

impl MultiHot {
    pub fn new(r: &PatientRecord, vocab: &Vocabulary) -> Result<Self> {
        let mut bits = vec![0u64; vocab.n_codes().div_ceil(64)];
        for c in r.codes() {
            let i = vocab.code_index(vocab.code_id(c.as_str())?).expect("code id");
            bits[i / 64] |= 1 << (i % 64);
        }
        Ok(Self(bits))
    }

    pub fn hamming(&self, other: &MultiHot) -> u32 {
        self.0.iter().zip(&other.0).map(|(a, b)| (a ^ b).count_ones()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiaReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub median_distance: f64,
    /// Records whose distance equals the median; the strict rule calls
    /// them non-members.
    pub ties_at_median: usize,
    pub n_members: usize,
    pub n_non_members: usize,
    pub confusion: Confusion,
}

/// Distance of each record to its nearest synthetic record.
pub fn nearest_distances(records: &[PatientRecord], synthetic: &[MultiHot], vocab: &Vocabulary) -> Result<Vec<u32>> {
    records
        .iter()
        .map(|r| {
            let h = MultiHot::new(r, vocab)?;
            Ok(synthetic
                .iter()
                .map(|s| h.hamming(s))
                .min()
                .expect("non-empty synthetic"))
        })
        .collect()
}

fn median(xs: &[u32]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_unstable();
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2] as f64
    } else {
        (s[n / 2 - 1] as f64 + s[n / 2] as f64) / 2.0
    }
}

/// Members are predicted when their nearest-synthetic Hamming distance is
/// strictly below the median over all attack records.
pub fn mia(
    members: &[PatientRecord],
    non_members: &[PatientRecord],
    synthetic: &[PatientRecord],
    vocab: &Vocabulary,
) -> Result<MiaReport> {
    if synthetic.is_empty() {
        return Err(Error::EmptyInput("synthetic corpus".into()));
    }
    if members.is_empty() && non_members.is_empty() {
        return Err(Error::EmptyInput("attack set".into()));
    }
    let syn: Vec<MultiHot> = synthetic
        .iter()
        .map(|r| MultiHot::new(r, vocab))
        .collect::<Result<_>>()?;
    let dm = nearest_distances(members, &syn, vocab)?;
    let dn = nearest_distances(non_members, &syn, vocab)?;
    let all: Vec<u32> = dm.iter().chain(&dn).copied().collect();
    let med = median(&all);
    let mut c = Confusion::default();
    for &d in &dm {
        c.add((d as f64) < med, true);
    }
    for &d in &dn {
        c.add((d as f64) < med, false);
    }
    Ok(MiaReport {
        accuracy: c.accuracy(),
        precision: c.precision(),
        recall: c.recall(),
        f1: c.f1(),
        median_distance: med,
        ties_at_median: all.iter().filter(|&&d| d as f64 == med).count(),
        n_members: members.len(),
        n_non_members: non_members.len(),
        confusion: c,
    })
}

/// `n` records drawn without replacement (all of them when fewer), in
/// their original order.
pub fn sample_records(records: &[PatientRecord], n: usize, seed: u64) -> Vec<PatientRecord> {
    if n >= records.len() {
        return records.to_vec();
    }
    let mut idx = sample(&mut ChaCha8Rng::seed_from_u64(seed), records.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| records[i].clone()).collect()
}

/// The `n` most frequent codes of `records` by occurrence count, ties
/// broken by code order.
pub fn top_codes(records: &[PatientRecord], n: usize) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        for c in r.codes() {
            *counts.entry(c.as_str()).or_insert(0) += 1;
        }
    }
    let mut v: Vec<(&str, usize)> = counts.into_iter().collect();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    v.into_iter().take(n).map(|(c, _)| c.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AiaReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub n_attrs: usize,
    pub k: usize,
    pub n_records: usize,
    pub confusion: Confusion,
}

/// `(disclosed, attributes)` codes of a record.
fn split_codes<'a>(r: &'a PatientRecord, attrs: &BTreeSet<&str>) -> (BTreeSet<&'a str>, BTreeSet<&'a str>) {
    r.codes().map(|c| c.as_str()).partition(|c| !attrs.contains(c))
}

fn jaccard_distance(a: &BTreeSet<&str>, b: &BTreeSet<&str>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    1.0 - a.intersection(b).count() as f64 / union as f64
}

/// Attribute inference: each attack record discloses its codes outside
/// `attributes`; the `k` synthetic records nearest in Jaccard distance on
/// disclosed sets vote (strict majority) on every attribute. Micro F1 over
/// all (record, attribute) pairs.
pub fn aia(
    attack: &[PatientRecord],
    synthetic: &[PatientRecord],
    attributes: &[String],
    k: usize,
) -> Result<AiaReport> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let attrs: BTreeSet<&str> = attributes.iter().map(String::as_str).collect();
    let syn: Vec<(BTreeSet<&str>, BTreeSet<&str>)> = synthetic.iter().map(|r| split_codes(r, &attrs)).collect();
    if syn.iter().all(|(d, _)| d.is_empty()) {
        return Err(Error::EmptyInput("every synthetic disclosed set is empty".into()));
    }
    let mut c = Confusion::default();
    for r in attack {
        let (disclosed, truth) = split_codes(r, &attrs);
        let mut order: Vec<(f64, usize)> = syn
            .iter()
            .enumerate()
            .map(|(i, (d, _))| (jaccard_distance(&disclosed, d), i))
            .collect();
        order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let neighbours: Vec<usize> = order.iter().take(k).map(|&(_, i)| i).collect();
        for a in &attrs {
            let votes = neighbours.iter().filter(|&&i| syn[i].1.contains(a)).count();
            c.add(2 * votes > neighbours.len(), truth.contains(a));
        }
    }
    Ok(AiaReport {
        f1: c.f1(),
        precision: c.precision(),
        recall: c.recall(),
        n_attrs: attrs.len(),
        k,
        n_records: attack.len(),
        confusion: c,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub mia: MiaReport,
    pub aia: AiaReport,
    /// Interpretation aid carried into reports.
    pub note: String,
}

pub const PRIVACY_NOTE: &str = "MIA accuracy near 0.5 means the attacker cannot tell members from non-members";
