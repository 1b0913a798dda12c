//! Dense brute-force fidelity kernels, written independently of the
//! sparse implementation.

use std::collections::BTreeSet;

use hisgt_core::corpus::PatientRecord;
use hisgt_core::tokenizer::Vocabulary;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::record;

pub fn idx(v: &Vocabulary, code: &str) -> usize {
    v.codes().iter().position(|c| c == code).unwrap()
}

pub fn normalize(x: Vec<f64>) -> Vec<f64> {
    let s: f64 = x.iter().sum();
    if s == 0.0 {
        x
    } else {
        x.into_iter().map(|c| c / s).collect()
    }
}

pub fn ref_unigram(rs: &[PatientRecord], v: &Vocabulary) -> Vec<f64> {
    let mut c = vec![0.0; v.n_codes()];
    for r in rs {
        for visit in &r.visits {
            for code in &visit.codes {
                c[idx(v, code.as_str())] += 1.0;
            }
        }
    }
    normalize(c)
}

pub fn ref_bigram(rs: &[PatientRecord], v: &Vocabulary) -> Vec<f64> {
    let n = v.n_codes();
    let mut m = vec![vec![0.0; n]; n];
    for r in rs {
        for visit in &r.visits {
            let set: BTreeSet<usize> = visit.codes.iter().map(|c| idx(v, c.as_str())).collect();
            for &a in &set {
                for &b in &set {
                    if a < b {
                        m[a][b] += 1.0;
                    }
                }
            }
        }
    }
    let mut flat = Vec::new();
    for (a, row) in m.iter().enumerate() {
        flat.extend_from_slice(&row[a + 1..]);
    }
    normalize(flat)
}

pub fn ref_seq(rs: &[PatientRecord], v: &Vocabulary) -> Vec<f64> {
    let n = v.n_codes();
    let mut m = vec![0.0; n * n];
    for r in rs {
        for t in 1..r.visits.len() {
            for a in &r.visits[t - 1].codes {
                for b in &r.visits[t].codes {
                    m[idx(v, a.as_str()) * n + idx(v, b.as_str())] += 1.0;
                }
            }
        }
    }
    normalize(m)
}

pub fn ref_dimwise(rs: &[PatientRecord], v: &Vocabulary) -> Vec<f64> {
    let mut acc = vec![0.0; v.n_codes()];
    let mut patients = 0.0;
    for r in rs {
        let own = ref_unigram(std::slice::from_ref(r), v);
        if own.iter().sum::<f64>() == 0.0 {
            continue;
        }
        patients += 1.0;
        for (a, o) in acc.iter_mut().zip(own) {
            *a += o;
        }
    }
    if patients > 0.0 {
        acc.iter_mut().for_each(|a| *a /= patients);
    }
    acc
}

pub fn ref_r2(real: &[f64], syn: &[f64]) -> Option<f64> {
    if real.iter().all(|&x| x == 0.0) || syn.iter().all(|&x| x == 0.0) {
        return None;
    }
    let mean = real.iter().sum::<f64>() / real.len() as f64;
    let tot: f64 = real.iter().map(|r| (r - mean) * (r - mean)).sum();
    let res: f64 = real.iter().zip(syn).map(|(r, s)| (s - r) * (s - r)).sum();
    if tot == 0.0 {
        return (res == 0.0).then_some(1.0);
    }
    Some(1.0 - res / tot)
}

pub fn random_corpus(rng: &mut ChaCha8Rng, v: &Vocabulary) -> Vec<PatientRecord> {
    let n = rng.random_range(0..=5);
    (0..n)
        .map(|i| {
            let visits: Vec<Vec<String>> = (0..rng.random_range(0..4))
                .map(|_| {
                    (0..rng.random_range(1..5))
                        .map(|_| v.codes()[rng.random_range(0..v.n_codes())].clone())
                        .collect()
                })
                .collect();
            let refs: Vec<Vec<&str>> = visits
                .iter()
                .map(|vv| vv.iter().map(String::as_str).collect())
                .collect();
            let slices: Vec<&[&str]> = refs.iter().map(Vec::as_slice).collect();
            record(&format!("p{i}"), &[], &slices)
        })
        .collect()
}

pub fn close(a: Option<f64>, b: Option<f64>) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-9,
        (None, None) => true,
        _ => false,
    }
}

/// Records with pairwise distinct code sets, in input order.
pub fn distinct_code_sets(records: &[PatientRecord]) -> Vec<PatientRecord> {
    let mut seen = BTreeSet::new();
    records
        .iter()
        .filter(|r| {
            seen.insert(
                r.visits
                    .iter()
                    .flat_map(|v| v.codes.iter().cloned())
                    .collect::<BTreeSet<_>>(),
            )
        })
        .cloned()
        .collect()
}
