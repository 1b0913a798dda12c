//! Autoregressive record generation with optional grammar masking and
//! label-conditioned headers.

use hisgt_nn::rng::hash_words;
use hisgt_nn::Scalar;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PatientRecord;
use crate::model::HiSGTModel;
use crate::tokenizer::{decode, GrammarState, TokenSequence, Vocabulary, END_LABEL, PADDING, START_RECORD};
use crate::{Error, Result};

const RECORD_TAG: u64 = 0x5341_4d50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub n_records: usize,
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; 0 keeps all, 1 is argmax.
    pub top_k: usize,
    /// Sequence cap; the model's `max_len` when unset.
    pub max_len: Option<usize>,
    pub grammar_mask: bool,
    /// Forced header labels; generation starts after `END_LABEL`.
    pub condition_labels: Option<Vec<String>>,
    pub seed: u64,
    /// Records advanced together through one forward pass.
    pub batch_size: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            n_records: 0,
            temperature: 1.0,
            top_k: 0,
            max_len: None,
            grammar_mask: false,
            condition_labels: None,
            seed: 0,
            batch_size: 64,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Draw one id from `softmax(logits / temperature)` restricted to the
/// `top_k` largest finite logits (ties go to the lower id). Entries at
/// `-inf` are never drawn.
pub fn sample_token(logits: &[f64], temperature: f64, top_k: usize, rng: &mut ChaCha8Rng) -> Result<u32> {
    let mut cand: Vec<usize> = (0..logits.len()).filter(|&i| logits[i] > f64::NEG_INFINITY).collect();
    if cand.is_empty() {
        return Err(Error::Config("every token is masked".into()));
    }
    if top_k > 0 && top_k < cand.len() {
        cand.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        cand.truncate(top_k);
        cand.sort_unstable();
    }
    if cand.len() == 1 {
        return Ok(cand[0] as u32);
    }
    let max = cand.iter().map(|&i| logits[i]).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = cand.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("sampling weights: {e}")))?;
    Ok(cand[dist.sample(rng)] as u32)
}

/// Rng stream owned by record `index`.
pub fn record_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(hash_words(&[seed, index as u64, RECORD_TAG]))
}

/// Forbid tokens that break the grammar or cannot be closed within the
/// remaining `room` positions (counting the token itself).
fn apply_grammar_mask(logits: &mut [f64], state: GrammarState, room: usize, vocab: &Vocabulary) {
    for (id, l) in logits.iter_mut().enumerate() {
        let Ok(kind) = vocab.kind(id as u32) else {
            *l = f64::NEG_INFINITY;
            continue;
        };
        match state.next(kind) {
            Ok(next) if next.min_tokens_to_close() < room => {}
            _ => *l = f64::NEG_INFINITY,
        }
    }
}

struct Live {
    index: usize,
    tokens: Vec<u32>,
    state: GrammarState,
    rng: ChaCha8Rng,
    /// An unmasked run emitted a grammar error; the state is no longer tracked.
    broken: bool,
}

impl Live {
    fn done(&self, max_len: usize) -> bool {
        self.state == GrammarState::Done || self.tokens.len() >= max_len
    }
}

/// `START_RECORD`, the sorted label ids, `END_LABEL`.
pub fn header(labels: &[String], vocab: &Vocabulary) -> Result<Vec<u32>> {
    let mut ids = labels.iter().map(|l| vocab.label_id(l)).collect::<Result<Vec<u32>>>()?;
    ids.sort_unstable();
    ids.dedup();
    let mut out = vec![START_RECORD];
    out.extend(ids);
    out.push(END_LABEL);
    Ok(out)
}

fn advance_state(state: GrammarState, broken: &mut bool, tok: u32, vocab: &Vocabulary) -> GrammarState {
    if *broken {
        return state;
    }
    match vocab.kind(tok).map_err(|_| "unknown id").and_then(|k| state.next(k)) {
        Ok(s) => s,
        Err(_) => {
            *broken = true;
            state
        }
    }
}

/// Continue every prefix until `END_RECORD` or `max_len`, one forward pass
/// per position for the whole group. Prefixes must share a length.
fn extend_group<T: Scalar>(
    model: &HiSGTModel<T>,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
    max_len: usize,
    mut live: Vec<Live>,
) -> Result<Vec<Live>> {
    let mut finished = Vec::with_capacity(live.len());
    loop {
        let (done, active): (Vec<Live>, Vec<Live>) = live.into_iter().partition(|l| l.done(max_len));
        finished.extend(done);
        live = active;
        if live.is_empty() {
            break;
        }
        let seq = live[0].tokens.len();
        let ids: Vec<usize> = live.iter().flat_map(|l| l.tokens.iter().map(|&t| t as usize)).collect();
        let logits = model.last_logits(&ids, live.len(), seq)?;
        for (row, l) in live.iter_mut().enumerate() {
            let mut lg: Vec<f64> = logits.row(row).iter().map(|&x| Scalar::to_f64(x)).collect();
            lg[PADDING as usize] = f64::NEG_INFINITY;
            if cfg.grammar_mask {
                apply_grammar_mask(&mut lg, l.state, max_len - seq, vocab);
            }
            let tok = sample_token(&lg, cfg.temperature, cfg.top_k, &mut l.rng)?;
            l.state = advance_state(l.state, &mut l.broken, tok, vocab);
            l.tokens.push(tok);
        }
    }
    finished.sort_by_key(|l| l.index);
    Ok(finished)
}

fn to_sequence(tokens: Vec<u32>, max_len: usize) -> TokenSequence {
    let true_len = tokens.len();
    let mut ids = tokens;
    ids.resize(max_len, PADDING);
    TokenSequence {
        ids,
        true_len,
        dropped_visits: 0,
    }
}

/// Sample `cfg.n_records` sequences. Record `i` draws only from its own
/// rng stream, so results do not depend on `batch_size` or thread count.
pub fn generate<T: Scalar>(
    model: &HiSGTModel<T>,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
) -> Result<Vec<TokenSequence>> {
    cfg.validate()?;
    if vocab.len() != model.vocab_size {
        return Err(Error::IndexMismatch(vocab.len(), model.vocab_size));
    }
    let max_len = cfg.max_len.unwrap_or(model.config.max_len).min(model.config.max_len);
    let prefix = match &cfg.condition_labels {
        Some(labels) => header(labels, vocab)?,
        None => vec![START_RECORD],
    };
    let min_len = prefix.len() + if cfg.condition_labels.is_some() { 1 } else { 2 };
    if max_len < min_len {
        return Err(Error::HeaderTooLong { need: min_len, max_len });
    }
    let indices: Vec<usize> = (0..cfg.n_records).collect();
    let groups = indices
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let live = chunk
                .iter()
                .map(|&index| {
                    let mut state = GrammarState::AtStart;
                    let mut broken = false;
                    for &t in &prefix {
                        state = advance_state(state, &mut broken, t, vocab);
                    }
                    Live {
                        index,
                        tokens: prefix.clone(),
                        state,
                        rng: record_rng(cfg.seed, index),
                        broken,
                    }
                })
                .collect();
            extend_group(model, vocab, cfg, max_len, live)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(groups
        .into_iter()
        .flatten()
        .map(|l| to_sequence(l.tokens, max_len))
        .collect())
}

/// Continue one prefix with an explicit rng, as `generate` does internally.
pub fn continue_prefix<T: Scalar>(
    model: &HiSGTModel<T>,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
    prefix: &[u32],
    rng: ChaCha8Rng,
) -> Result<TokenSequence> {
    cfg.validate()?;
    let max_len = cfg.max_len.unwrap_or(model.config.max_len).min(model.config.max_len);
    if prefix.is_empty() || prefix.len() > max_len {
        return Err(Error::Config(format!(
            "prefix length {} outside 1..={max_len}",
            prefix.len()
        )));
    }
    let mut state = GrammarState::AtStart;
    let mut broken = false;
    for &t in prefix {
        state = advance_state(state, &mut broken, t, vocab);
    }
    let live = vec![Live {
        index: 0,
        tokens: prefix.to_vec(),
        state,
        rng,
        broken,
    }];
    let mut out = extend_group(model, vocab, cfg, max_len, live)?;
    Ok(to_sequence(out.remove(0).tokens, max_len))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub config: GenerationConfig,
    pub requested: usize,
    pub emitted: usize,
    pub invalid: usize,
    pub drop_rate: f64,
}

/// Generate, decode, and drop grammar-invalid sequences (counted in the
/// report, never repaired).
pub fn generate_corpus<T: Scalar>(
    model: &HiSGTModel<T>,
    vocab: &Vocabulary,
    cfg: &GenerationConfig,
) -> Result<(Vec<PatientRecord>, GenerationReport)> {
    let seqs = generate(model, vocab, cfg)?;
    let mut records = Vec::with_capacity(seqs.len());
    let mut invalid = 0;
    for (i, s) in seqs.iter().enumerate() {
        let d = decode(s.tokens(), vocab);
        if d.valid {
            let mut r = d.record;
            r.patient_id = format!("syn{i:06}");
            records.push(r);
        } else {
            invalid += 1;
        }
    }
    let report = GenerationReport {
        config: cfg.clone(),
        requested: cfg.n_records,
        emitted: records.len(),
        invalid,
        drop_rate: if cfg.n_records == 0 {
            0.0
        } else {
            invalid as f64 / cfg.n_records as f64
        },
    };
    Ok((records, report))
}
