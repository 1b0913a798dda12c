//! Train-on-synthetic, test-on-real with a linear probe: one-vs-rest
//! L2-regularized logistic regression on normalized bag-of-codes features.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hisgt_nn::rng::hash_words;

use super::privacy::Confusion;
use crate::corpus::PatientRecord;
use crate::tokenizer::Vocabulary;
use crate::Result;

pub const PROBE_NAME: &str = "probe: one-vs-rest logistic regression on bag-of-codes";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub l2: f64,
    pub lr: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            l2: 1e-4,
            lr: 2.0,
            iterations: 500,
            seed: 0,
        }
    }
}

/// Distinct codes of a record as a unit-length sparse vector.
fn features(r: &PatientRecord, vocab: &Vocabulary) -> Result<Vec<(usize, f64)>> {
    let mut idx: Vec<usize> = r
        .codes()
        .map(|c| Ok(vocab.code_index(vocab.code_id(c.as_str())?).expect("code id")))
        .collect::<Result<_>>()?;
    idx.sort_unstable();
    idx.dedup();
    let w = if idx.is_empty() {
        0.0
    } else {
        1.0 / (idx.len() as f64).sqrt()
    };
    Ok(idx.into_iter().map(|i| (i, w)).collect())
}

struct Example {
    x: Vec<(usize, f64)>,
    y: bool,
}

/// Equal numbers of positives and negatives: the larger class is
/// subsampled. Empty when either class is missing.
fn balanced(examples: Vec<Example>, rng: &mut ChaCha8Rng) -> Vec<Example> {
    let (mut pos, mut neg): (Vec<Example>, Vec<Example>) = examples.into_iter().partition(|e| e.y);
    let n = pos.len().min(neg.len());
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n);
    neg.truncate(n);
    pos.into_iter().chain(neg).collect()
}

struct Logistic {
    w: Vec<f64>,
    b: f64,
}

impl Logistic {
    fn score(&self, x: &[(usize, f64)]) -> f64 {
        self.b + x.iter().map(|&(i, v)| self.w[i] * v).sum::<f64>()
    }

    /// Full-batch gradient descent on mean log loss plus `l2/2 |w|²`.
    fn fit(data: &[Example], dim: usize, cfg: &ProbeConfig) -> Self {
        let mut m = Logistic {
            w: vec![0.0; dim],
            b: 0.0,
        };
        let n = data.len() as f64;
        for _ in 0..cfg.iterations {
            let mut gw: Vec<f64> = m.w.iter().map(|w| cfg.l2 * w).collect();
            let mut gb = 0.0;
            for e in data {
                let p = 1.0 / (1.0 + (-m.score(&e.x)).exp());
                let r = (p - if e.y { 1.0 } else { 0.0 }) / n;
                gb += r;
                for &(i, v) in &e.x {
                    gw[i] += r * v;
                }
            }
            for (w, g) in m.w.iter_mut().zip(&gw) {
                *w -= cfg.lr * g;
            }
            m.b -= cfg.lr * gb;
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelResult {
    pub label: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityReport {
    pub classifier: String,
    pub labels: Vec<LabelResult>,
    /// `(label, reason)` for labels that could not be evaluated.
    pub skipped: Vec<(String, String)>,
    pub macro_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Train on `train` (synthetic for TSTR), test on `test` (real). Both
/// sides are class-balanced per label by subsampling.
pub fn tstr_probe(
    train: &[PatientRecord],
    test: &[PatientRecord],
    vocab: &Vocabulary,
    cfg: &ProbeConfig,
) -> Result<UtilityReport> {
    let tr: Vec<Vec<(usize, f64)>> = train.iter().map(|r| features(r, vocab)).collect::<Result<_>>()?;
    let te: Vec<Vec<(usize, f64)>> = test.iter().map(|r| features(r, vocab)).collect::<Result<_>>()?;
    let mut labels = Vec::new();
    let mut skipped = Vec::new();
    for (li, label) in vocab.labels().iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(hash_words(&[cfg.seed, li as u64]));
        let make = |recs: &[PatientRecord], xs: &[Vec<(usize, f64)>]| -> Vec<Example> {
            recs.iter()
                .zip(xs)
                .map(|(r, x)| Example {
                    x: x.clone(),
                    y: r.labels.contains(label),
                })
                .collect()
        };
        let train_set = make(train, &tr);
        if !train_set.iter().any(|e| e.y) {
            skipped.push((label.clone(), "no positives in training data".into()));
            continue;
        }
        let train_set = balanced(train_set, &mut rng);
        if train_set.is_empty() {
            skipped.push((label.clone(), "no negatives in training data".into()));
            continue;
        }
        let test_set = balanced(make(test, &te), &mut rng);
        if test_set.is_empty() {
            skipped.push((label.clone(), "test data lacks one class".into()));
            continue;
        }
        let model = Logistic::fit(&train_set, vocab.n_codes(), cfg);
        let mut c = Confusion::default();
        for e in &test_set {
            c.add(model.score(&e.x) > 0.0, e.y);
        }
        labels.push(LabelResult {
            label: label.clone(),
            accuracy: c.accuracy(),
            precision: c.precision(),
            recall: c.recall(),
            f1: c.f1(),
            n_train: train_set.len(),
            n_test: test_set.len(),
        });
    }
    let mean = |f: fn(&LabelResult) -> f64| {
        if labels.is_empty() {
            0.0
        } else {
            labels.iter().map(f).sum::<f64>() / labels.len() as f64
        }
    };
    Ok(UtilityReport {
        classifier: PROBE_NAME.into(),
        macro_accuracy: mean(|l| l.accuracy),
        macro_precision: mean(|l| l.precision),
        macro_recall: mean(|l| l.recall),
        macro_f1: mean(|l| l.f1),
        labels,
        skipped,
    })
}
