//! Ground-truth corpus generator: a latent-profile Markov chain over codes.
//!
//! Each record draws a latent profile `z` from `label_prior`, a visit count
//! and per-visit code counts from the configured ranges, and then a single
//! chain of codes from `initial[z]` and `transitions[z]` that runs across
//! visit boundaries. Phenotype labels are assigned from the sampled codes by
//! the `GroundTruthSpec` mapping, exactly as for ingested data. The tables are kept in
//! `GroundTruthSpec` so that tests can compute true distributions.

use std::collections::BTreeSet;
use std::path::Path;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assign_phenotypes, CodeId, CodeSystem, PatientRecord, PhenotypeMapping, Visit};
use crate::hashing::read_to_string;
use crate::semantics::DescriptionCatalog;
use crate::{Error, Result};
use hisgt_nn::rng::hash_words;

const ROW_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSpec {
    pub seed: u64,
    pub n_records: usize,
    pub system: CodeSystem,
    pub codes: Vec<String>,
    /// Inclusive ranges.
    pub visits_per_record: (usize, usize),
    pub codes_per_visit: (usize, usize),
    /// Probability of each latent profile.
    pub label_prior: Vec<f64>,
    /// `initial[z][i]`: first code of a record under profile `z`.
    pub initial: Vec<Vec<f64>>,
    /// `transitions[z][i][j]`: P(next = j | current = i, profile z).
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// Code indices expected to co-occur inside a visit.
    pub clusters: Vec<Vec<usize>>,
    pub mapping: PhenotypeMapping,
}

fn check_row(row: &[f64], what: &str) -> Result<()> {
    let s: f64 = row.iter().sum();
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (s - 1.0).abs() > ROW_TOL {
        return Err(Error::GroundTruth(format!("{what} is not a probability row (sum {s})")));
    }
    Ok(())
}

impl GroundTruthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let spec: Self = serde_json::from_str(&read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)? + "\n")
    }

    pub fn vocab_size(&self) -> usize {
        self.codes.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.label_prior.len()
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.codes.len();
        if v == 0 {
            return Err(Error::GroundTruth("no codes".into()));
        }
        let unique: BTreeSet<String> = self.codes.iter().map(|c| CodeId::normalize(c)).collect();
        if unique.len() != v || unique.contains("") {
            return Err(Error::GroundTruth("codes must be distinct and non-empty".into()));
        }
        let (v0, v1) = self.visits_per_record;
        let (c0, c1) = self.codes_per_visit;
        if v0 == 0 || v0 > v1 || c0 == 0 || c0 > c1 {
            return Err(Error::GroundTruth("ranges must satisfy 1 <= min <= max".into()));
        }
        let z = self.label_prior.len();
        if z == 0 || self.initial.len() != z || self.transitions.len() != z {
            return Err(Error::GroundTruth("profile count mismatch".into()));
        }
        check_row(&self.label_prior, "label_prior")?;
        for (k, (init, t)) in self.initial.iter().zip(&self.transitions).enumerate() {
            if init.len() != v || t.len() != v || t.iter().any(|r| r.len() != v) {
                return Err(Error::GroundTruth(format!("profile {k}: tables must be {v} wide")));
            }
            check_row(init, &format!("initial[{k}]"))?;
            for (i, row) in t.iter().enumerate() {
                check_row(row, &format!("transitions[{k}][{i}]"))?;
            }
        }
        if self.clusters.iter().flatten().any(|&i| i >= v) {
            return Err(Error::GroundTruth("cluster member out of range".into()));
        }
        self.mapping.validate()
    }

    /// Exact expected code distribution of a sampled corpus, as the limit of
    /// total code counts divided by total record length.
    pub fn expected_unigram(&self) -> Vec<f64> {
        let v = self.codes.len();
        // P(len > t) from the visit-count and codes-per-visit ranges
        let (v0, v1) = self.visits_per_record;
        let (c0, c1) = self.codes_per_visit;
        let max_len = v1 * c1;
        let per_visit: Vec<f64> = (0..=c1)
            .map(|c| if c >= c0 { 1.0 / (c1 - c0 + 1) as f64 } else { 0.0 })
            .collect();
        let mut len_dist = vec![0.0; max_len + 1];
        let mut conv = vec![1.0];
        for n in 1..=v1 {
            let mut next = vec![0.0; conv.len() + c1];
            for (a, pa) in conv.iter().enumerate() {
                for (b, pb) in per_visit.iter().enumerate() {
                    next[a + b] += pa * pb;
                }
            }
            conv = next;
            if n >= v0 {
                for (l, p) in conv.iter().enumerate() {
                    len_dist[l] += p / (v1 - v0 + 1) as f64;
                }
            }
        }
        let mut survive = vec![0.0; max_len];
        for t in 0..max_len {
            survive[t] = len_dist[t + 1..].iter().sum();
        }
        let mean_len: f64 = survive.iter().sum();

        let mut out = vec![0.0; v];
        for (z, &pz) in self.label_prior.iter().enumerate() {
            let mut dist = self.initial[z].clone();
            for &s in &survive {
                for (o, d) in out.iter_mut().zip(&dist) {
                    *o += pz * s * d;
                }
                let mut next = vec![0.0; v];
                for (i, &di) in dist.iter().enumerate() {
                    if di == 0.0 {
                        continue;
                    }
                    for (n, &p) in next.iter_mut().zip(&self.transitions[z][i]) {
                        *n += di * p;
                    }
                }
                dist = next;
            }
        }
        out.iter().map(|x| x / mean_len).collect()
    }
}

/// Sample `spec.n_records` records. Record `r` uses its own rng stream keyed
/// by `(spec.seed, r)`, so a prefix of a larger corpus equals a smaller one.
pub fn synthesize_ground_truth(spec: &GroundTruthSpec) -> Result<Vec<PatientRecord>> {
    spec.validate()?;
    let codes: Vec<CodeId> = spec
        .codes
        .iter()
        .map(|c| CodeId::new(spec.system, c))
        .collect::<Result<_>>()?;
    let to_err = |e: rand::distr::weighted::Error| Error::GroundTruth(e.to_string());
    let prior = WeightedIndex::new(&spec.label_prior).map_err(to_err)?;
    let initial: Vec<WeightedIndex<f64>> = spec
        .initial
        .iter()
        .map(|r| WeightedIndex::new(r).map_err(to_err))
        .collect::<Result<_>>()?;
    let transitions: Vec<Vec<Option<WeightedIndex<f64>>>> = spec
        .transitions
        .iter()
        .map(|t| t.iter().map(|r| WeightedIndex::new(r).ok()).collect())
        .collect();

    let mut out = Vec::with_capacity(spec.n_records);
    for r in 0..spec.n_records {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[spec.seed, r as u64]));
        let z = prior.sample(&mut rng);
        let n_visits = rng.random_range(spec.visits_per_record.0..=spec.visits_per_record.1);
        let mut current: Option<usize> = None;
        let mut visits = Vec::with_capacity(n_visits);
        for v in 0..n_visits {
            let m = rng.random_range(spec.codes_per_visit.0..=spec.codes_per_visit.1);
            let mut visit = Vec::with_capacity(m);
            for _ in 0..m {
                let next = match current {
                    None => initial[z].sample(&mut rng),
                    Some(i) => transitions[z][i]
                        .as_ref()
                        .ok_or_else(|| Error::GroundTruth(format!("row {i} has no mass")))?
                        .sample(&mut rng),
                };
                visit.push(codes[next].clone());
                current = Some(next);
            }
            visits.push(Visit {
                admit_ts: v as i64 * 86_400,
                codes: visit,
            });
        }
        let mut rec = PatientRecord {
            patient_id: format!("gt{r:06}"),
            labels: BTreeSet::new(),
            visits,
        };
        rec.labels = assign_phenotypes(&rec, &spec.mapping)
            .into_iter()
            .map(|l| l.name)
            .collect();
        out.push(rec);
    }
    Ok(out)
}

/// Parameters of the bundled clustered generator.
///
/// Codes are organized as chapters (one per profile, letters `A`, `B`, ...),
/// families inside a chapter and leaf codes inside a family, e.g. `B102` is
/// leaf 2 of family 1 in chapter `B`. Family 0 of chapter `k` is the
/// indicator family of phenotype label `k` under the default mapping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusteredParams {
    pub seed: u64,
    pub n_records: usize,
    pub n_labels: usize,
    pub families_per_chapter: usize,
    pub codes_per_family: usize,
    pub visits_per_record: (usize, usize),
    pub codes_per_visit: (usize, usize),
    /// Probability that the next code stays in the current family.
    pub stay_in_family: f64,
    /// Probability that a jump lands in the profile's home chapter.
    pub home_chapter: f64,
    /// Popularity exponent: leaf and family weights are `u^skew` with `u`
    /// uniform, and profile `z` has prior weight `1 / (z + 1)^skew`.
    pub skew: f64,
}

impl Default for ClusteredParams {
    fn default() -> Self {
        Self::toy()
    }
}

const ORGANS: [&str; 25] = [
    "kidney",
    "brain",
    "heart muscle",
    "heart rhythm",
    "renal tubule",
    "lung airway",
    "surgical wound",
    "cardiac conduction",
    "heart ventricle",
    "coronary artery",
    "pancreas",
    "islet cell",
    "lipid transport",
    "blood pressure",
    "electrolyte balance",
    "stomach",
    "renal vessel",
    "liver",
    "lower airway",
    "upper airway",
    "pleura",
    "lung tissue",
    "respiratory drive",
    "bloodstream",
    "circulation",
];
const NOUNS: [&str; 10] = [
    "inflammation",
    "neoplasm",
    "injury",
    "degeneration",
    "infection",
    "malformation",
    "obstruction",
    "hemorrhage",
    "insufficiency",
    "disorder",
];
const QUALIFIERS: [&str; 10] = [
    "unspecified",
    "acute",
    "chronic",
    "recurrent",
    "with complications",
    "without complications",
    "bilateral",
    "left side",
    "right side",
    "in remission",
];

impl ClusteredParams {
    /// Desk-scale preset used by the tests and the CLI.
    pub fn toy() -> Self {
        Self {
            seed: 17,
            n_records: 2000,
            n_labels: 5,
            families_per_chapter: 3,
            codes_per_family: 4,
            visits_per_record: (1, 4),
            codes_per_visit: (2, 5),
            stay_in_family: 0.7,
            home_chapter: 0.75,
            skew: 1.0,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n_labels == 0 || self.n_labels > 25 {
            return Err(Error::GroundTruth("n_labels must be in 1..=25".into()));
        }
        if self.families_per_chapter == 0 || self.families_per_chapter > 10 {
            return Err(Error::GroundTruth("families_per_chapter must be in 1..=10".into()));
        }
        if self.codes_per_family == 0 || self.codes_per_family > 10 {
            return Err(Error::GroundTruth("codes_per_family must be in 1..=10".into()));
        }
        if !(self.skew >= 0.0 && self.skew.is_finite()) {
            return Err(Error::GroundTruth("skew must be finite and non-negative".into()));
        }
        for p in [self.stay_in_family, self.home_chapter] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::GroundTruth("probabilities must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    /// `(chapter, family, leaf)` for every code, in code order.
    fn layout(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for c in 0..self.n_labels {
            for f in 0..self.families_per_chapter {
                for l in 0..self.codes_per_family {
                    out.push((c, f, l));
                }
            }
        }
        out
    }

    pub fn code_name(chapter: usize, family: usize, leaf: usize) -> String {
        format!("{}{family}0{leaf}", (b'A' + chapter as u8) as char)
    }

    pub fn build(&self) -> Result<GroundTruthSpec> {
        self.check()?;
        let layout = self.layout();
        let v = layout.len();
        let codes: Vec<String> = layout.iter().map(|&(c, f, l)| Self::code_name(c, f, l)).collect();

        // heterogeneous popularity for families and leaves
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[self.seed, 0x6774]));
        let leaf_w: Vec<f64> = (0..v).map(|_| rng.random_range(0.2f64..1.0).powf(self.skew)).collect();
        let fam_w: Vec<f64> = (0..self.n_labels * self.families_per_chapter)
            .map(|_| rng.random_range(0.3f64..1.0).powf(self.skew))
            .collect();
        let fam_of = |i: usize| layout[i].0 * self.families_per_chapter + layout[i].1;

        // P(landing on code j | jump into chapter c)
        let chapter_entry = |c: usize| -> Vec<f64> {
            let mut row = vec![0.0; v];
            let fams: Vec<usize> = (0..self.families_per_chapter)
                .map(|f| c * self.families_per_chapter + f)
                .collect();
            let fam_total: f64 = fams.iter().map(|&f| fam_w[f]).sum();
            for j in 0..v {
                if layout[j].0 != c {
                    continue;
                }
                let f = fam_of(j);
                let leaves: f64 = (0..v).filter(|&k| fam_of(k) == f).map(|k| leaf_w[k]).sum();
                row[j] = fam_w[f] / fam_total * leaf_w[j] / leaves;
            }
            row
        };
        let entries: Vec<Vec<f64>> = (0..self.n_labels).map(chapter_entry).collect();

        let mut transitions = Vec::with_capacity(self.n_labels);
        for z in 0..self.n_labels {
            let other = if self.n_labels > 1 {
                (1.0 - self.home_chapter) / (self.n_labels - 1) as f64
            } else {
                0.0
            };
            let chapter_p: Vec<f64> = (0..self.n_labels)
                .map(|c| {
                    if self.n_labels == 1 {
                        1.0
                    } else if c == z {
                        self.home_chapter
                    } else {
                        other
                    }
                })
                .collect();
            let mut jump = vec![0.0; v];
            for (c, p) in chapter_p.iter().enumerate() {
                for (j, e) in entries[c].iter().enumerate() {
                    jump[j] += p * e;
                }
            }
            let mut table = Vec::with_capacity(v);
            for i in 0..v {
                let mut stay = vec![0.0; v];
                let mut stay_total = 0.0;
                for j in 0..v {
                    if j != i && fam_of(j) == fam_of(i) {
                        stay[j] = leaf_w[j];
                        stay_total += leaf_w[j];
                    }
                }
                let mut jump_i = jump.clone();
                jump_i[i] = 0.0;
                let jump_total: f64 = jump_i.iter().sum();
                let p_stay = if stay_total > 0.0 { self.stay_in_family } else { 0.0 };
                let mut row: Vec<f64> = (0..v)
                    .map(|j| {
                        let s = if stay_total > 0.0 {
                            p_stay * stay[j] / stay_total
                        } else {
                            0.0
                        };
                        let jmp = if jump_total > 0.0 {
                            (1.0 - p_stay) * jump_i[j] / jump_total
                        } else {
                            0.0
                        };
                        s + jmp
                    })
                    .collect();
                let total: f64 = row.iter().sum();
                if total == 0.0 {
                    // a one-code universe: the chain can only repeat itself
                    row[i] = 1.0;
                } else {
                    row.iter_mut().for_each(|p| *p /= total);
                }
                table.push(row);
            }
            transitions.push(table);
        }
        let initial = transitions.iter().map(|t| stationary(t)).collect();
        let clusters = (0..self.n_labels * self.families_per_chapter)
            .map(|f| (0..v).filter(|&j| fam_of(j) == f).collect())
            .collect();

        let prior_w: Vec<f64> = (0..self.n_labels).map(|z| ((z + 1) as f64).powf(-self.skew)).collect();
        let prior_total: f64 = prior_w.iter().sum();
        let label_prior = prior_w.iter().map(|w| w / prior_total).collect();
        let spec = GroundTruthSpec {
            seed: self.seed,
            n_records: self.n_records,
            system: CodeSystem::Generic,
            codes,
            visits_per_record: self.visits_per_record,
            codes_per_visit: self.codes_per_visit,
            label_prior,
            initial,
            transitions,
            clusters,
            mapping: PhenotypeMapping::default_generic().truncated(self.n_labels),
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Human-readable descriptions for every code and label, shaped like a
    /// clinical catalog: leaves of one family share most of their words.
    pub fn catalog(&self, spec: &GroundTruthSpec) -> DescriptionCatalog {
        let mut entries = Vec::new();
        for &(c, f, l) in &self.layout() {
            entries.push((
                Self::code_name(c, f, l),
                format!("{} of {}, {}", NOUNS[f], ORGANS[c], QUALIFIERS[l]),
            ));
        }
        for label in &spec.mapping.labels {
            entries.push((label.clone(), label.clone()));
        }
        DescriptionCatalog::from_entries(entries)
    }
}

/// Stationary distribution by power iteration on the lazy chain
/// `(P + I) / 2`, which has the same fixed point and no periodicity.
fn stationary(t: &[Vec<f64>]) -> Vec<f64> {
    let v = t.len();
    let mut pi = vec![1.0 / v as f64; v];
    for _ in 0..100_000 {
        let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
        for (i, &pi_i) in pi.iter().enumerate() {
            for (n, &p) in next.iter_mut().zip(&t[i]) {
                *n += 0.5 * pi_i * p;
            }
        }
        let diff: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter().map(|p| p / s).collect()
}
