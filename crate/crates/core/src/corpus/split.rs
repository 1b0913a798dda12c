use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::PatientRecord;
use crate::{Error, Result};

pub const MIN_RECORDS: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<PatientRecord>,
    pub val: Vec<PatientRecord>,
    pub test: Vec<PatientRecord>,
    pub seed: u64,
}

/// Shuffle under `seed`, hold out 20% for test, then 10% of the remaining
/// pool for validation (72/8/20 overall, each part rounded to the nearest
/// record).
pub fn split(records: &[PatientRecord], seed: u64) -> Result<CorpusSplit> {
    let n = records.len();
    if n < MIN_RECORDS {
        return Err(Error::TooFewRecords {
            need: MIN_RECORDS,
            got: n,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (n as f64 * 0.2).round() as usize;
    let pool = n - n_test;
    let n_val = (pool as f64 * 0.1).round() as usize;
    let take = |ix: &[usize]| ix.iter().map(|&i| records[i].clone()).collect();
    Ok(CorpusSplit {
        test: take(&order[..n_test]),
        val: take(&order[n_test..n_test + n_val]),
        train: take(&order[n_test + n_val..]),
        seed,
    })
}
