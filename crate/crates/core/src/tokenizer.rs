//! Token vocabulary and the record sequence grammar
//! `START_RECORD label* END_LABEL (code+ END_VISIT)* END_RECORD PADDING*`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{CodeId, CodeSystem, PatientRecord, PhenotypeMapping, Visit};
use crate::hashing::{read_to_string, sha256_hex, write_bytes};
use crate::{Error, Result};

pub const PADDING: u32 = 0;
pub const START_RECORD: u32 = 1;
pub const END_LABEL: u32 = 2;
pub const END_VISIT: u32 = 3;
pub const END_RECORD: u32 = 4;
pub const N_SPECIALS: usize = 5;
pub const SPECIAL_NAMES: [&str; N_SPECIALS] = ["PADDING", "START_RECORD", "END_LABEL", "END_VISIT", "END_RECORD"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Padding,
    StartRecord,
    EndLabel,
    EndVisit,
    EndRecord,
    Label,
    Code,
}

/// Token ↔ id bijection with ids partitioned as `[specials | labels | codes]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    system: CodeSystem,
    labels: Vec<String>,
    codes: Vec<String>,
    label_ids: HashMap<String, u32>,
    code_ids: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    specials: Vec<String>,
    labels: Vec<String>,
    codes: Vec<String>,
    system: CodeSystem,
}

impl Vocabulary {
    pub fn new(system: CodeSystem, labels: Vec<String>, codes: Vec<String>) -> Result<Self> {
        let label_ids: HashMap<String, u32> = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), (N_SPECIALS + i) as u32))
            .collect();
        if label_ids.len() != labels.len() {
            return Err(Error::Vocabulary("repeated label".into()));
        }
        let base = N_SPECIALS + labels.len();
        let code_ids: HashMap<String, u32> = codes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), (base + i) as u32))
            .collect();
        if code_ids.len() != codes.len() {
            return Err(Error::Vocabulary("repeated code".into()));
        }
        if codes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Vocabulary("codes must be sorted".into()));
        }
        Ok(Self {
            system,
            labels,
            codes,
            label_ids,
            code_ids,
        })
    }

    /// Labels in mapping order, codes in lexical order.
    pub fn build(records: &[PatientRecord], mapping: &PhenotypeMapping) -> Result<Self> {
        let codes: BTreeSet<&str> = records.iter().flat_map(|r| r.codes().map(CodeId::as_str)).collect();
        Self::new(
            mapping.system,
            mapping.labels.clone(),
            codes.into_iter().map(String::from).collect(),
        )
    }

    pub fn len(&self) -> usize {
        N_SPECIALS + self.labels.len() + self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn system(&self) -> CodeSystem {
        self.system
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn codes(&self) -> &[String] {
        &self.codes
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn n_codes(&self) -> usize {
        self.codes.len()
    }

    pub fn first_code_id(&self) -> u32 {
        (N_SPECIALS + self.labels.len()) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < N_SPECIALS
    }

    pub fn is_label(&self, id: u32) -> bool {
        (N_SPECIALS..N_SPECIALS + self.labels.len()).contains(&(id as usize))
    }

    pub fn is_code(&self, id: u32) -> bool {
        id >= self.first_code_id() && (id as usize) < self.len()
    }

    pub fn kind(&self, id: u32) -> Result<TokenKind> {
        Ok(match id {
            PADDING => TokenKind::Padding,
            START_RECORD => TokenKind::StartRecord,
            END_LABEL => TokenKind::EndLabel,
            END_VISIT => TokenKind::EndVisit,
            END_RECORD => TokenKind::EndRecord,
            _ if self.is_label(id) => TokenKind::Label,
            _ if self.is_code(id) => TokenKind::Code,
            _ => return Err(Error::UnknownTokenId(id)),
        })
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        let i = id as usize;
        if i < N_SPECIALS {
            Ok(SPECIAL_NAMES[i])
        } else if i < N_SPECIALS + self.labels.len() {
            Ok(&self.labels[i - N_SPECIALS])
        } else {
            self.codes
                .get(i - N_SPECIALS - self.labels.len())
                .map(String::as_str)
                .ok_or(Error::UnknownTokenId(id))
        }
    }

    pub fn label_id(&self, name: &str) -> Result<u32> {
        self.label_ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownToken(name.to_string()))
    }

    pub fn code_id(&self, code: &str) -> Result<u32> {
        self.code_ids
            .get(code)
            .copied()
            .ok_or_else(|| Error::UnknownToken(code.to_string()))
    }

    /// Id of a code or label token named `token`.
    pub fn id_of(&self, token: &str) -> Option<u32> {
        if let Some(i) = SPECIAL_NAMES.iter().position(|s| *s == token) {
            return Some(i as u32);
        }
        self.code_ids.get(token).or_else(|| self.label_ids.get(token)).copied()
    }

    /// Position of a code token inside the code block, `0..n_codes`.
    pub fn code_index(&self, id: u32) -> Option<usize> {
        self.is_code(id).then(|| (id - self.first_code_id()) as usize)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            labels: self.labels.clone(),
            codes: self.codes.clone(),
            system: self.system,
        };
        Ok(serde_json::to_string(&file)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(text)?;
        if f.specials != SPECIAL_NAMES {
            return Err(Error::Vocabulary(format!("unexpected specials {:?}", f.specials)));
        }
        Self::new(f.system, f.labels, f.codes)
    }

    /// SHA-256 of the canonical vocabulary file.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_json().expect("vocabulary serializes").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Exactly `max_len` ids, padded with `PADDING`.
    pub ids: Vec<u32>,
    pub true_len: usize,
    /// Trailing visits cut to fit `max_len`.
    pub dropped_visits: usize,
}

impl TokenSequence {
    pub fn tokens(&self) -> &[u32] {
        &self.ids[..self.true_len]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EncodeOptions {
    /// Emit codes of a visit in ascending id order instead of recorded order.
    pub sort_visit_codes: bool,
}

/// Encode a record; trailing visits that do not fit are dropped whole.
pub fn encode(
    record: &PatientRecord,
    vocab: &Vocabulary,
    max_len: usize,
    opts: EncodeOptions,
) -> Result<TokenSequence> {
    let mut labels: Vec<u32> = record.labels.iter().map(|l| vocab.label_id(l)).collect::<Result<_>>()?;
    labels.sort_unstable();
    let need = labels.len() + 3;
    if need > max_len {
        return Err(Error::HeaderTooLong { need, max_len });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(START_RECORD);
    ids.extend(labels);
    ids.push(END_LABEL);

    let mut dropped = 0;
    for (n, visit) in record.visits.iter().enumerate() {
        let mut codes: Vec<u32> = visit
            .codes
            .iter()
            .map(|c| vocab.code_id(c.as_str()))
            .collect::<Result<_>>()?;
        if codes.is_empty() {
            continue;
        }
        if opts.sort_visit_codes {
            codes.sort_unstable();
        }
        // the visit, its END_VISIT and the closing END_RECORD must fit
        if ids.len() + codes.len() + 2 > max_len {
            dropped = record.visits.len() - n;
            break;
        }
        ids.extend(codes);
        ids.push(END_VISIT);
    }
    ids.push(END_RECORD);
    let true_len = ids.len();
    ids.resize(max_len, PADDING);
    Ok(TokenSequence {
        ids,
        true_len,
        dropped_visits: dropped,
    })
}

/// Parser state of the record grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GrammarState {
    AtStart,
    InLabels,
    /// After `END_LABEL` or `END_VISIT`: a new visit or the end may follow.
    InVisitEmpty,
    InVisitNonEmpty,
    Done,
}

impl GrammarState {
    /// Next state after a token of `kind`, or the violated rule.
    pub fn next(self, kind: TokenKind) -> std::result::Result<GrammarState, &'static str> {
        use GrammarState::*;
        use TokenKind::*;
        match (self, kind) {
            (Done, Padding) => Ok(Done),
            (Done, _) => Err("token after END_RECORD"),
            (_, Padding) => Err("padding before END_RECORD"),
            (AtStart, StartRecord) => Ok(InLabels),
            (AtStart, _) => Err("sequence does not begin with START_RECORD"),
            (_, StartRecord) => Err("repeated START_RECORD"),
            (InLabels, Label) => Ok(InLabels),
            (InLabels, EndLabel) => Ok(InVisitEmpty),
            (InLabels, Code) => Err("event token in label region"),
            (InLabels, _) => Err("visit delimiter in label region"),
            (_, EndLabel) => Err("repeated END_LABEL"),
            (_, Label) => Err("label token in visit region"),
            (InVisitEmpty | InVisitNonEmpty, Code) => Ok(InVisitNonEmpty),
            (InVisitEmpty, EndVisit) => Err("empty visit"),
            (InVisitNonEmpty, EndVisit) => Ok(InVisitEmpty),
            (InVisitEmpty, EndRecord) => Ok(Done),
            (InVisitNonEmpty, EndRecord) => Err("END_RECORD inside an open visit"),
        }
    }

    /// Fewest tokens that bring this state to `Done`.
    pub fn min_tokens_to_close(self) -> usize {
        match self {
            GrammarState::AtStart => 3,
            GrammarState::InLabels | GrammarState::InVisitNonEmpty => 2,
            GrammarState::InVisitEmpty => 1,
            GrammarState::Done => 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Labels and complete visits; `admit_ts` holds the visit ordinal.
    pub record: PatientRecord,
    pub valid: bool,
    pub violations: Vec<String>,
}

/// Parse a (possibly malformed) id sequence. Offending tokens are reported
/// and skipped; an unterminated final visit is discarded.
pub fn decode(ids: &[u32], vocab: &Vocabulary) -> Decoded {
    let mut state = GrammarState::AtStart;
    let mut violations = Vec::new();
    let mut labels = BTreeSet::new();
    let mut visits = Vec::new();
    let mut open: Vec<CodeId> = Vec::new();
    for (pos, &id) in ids.iter().enumerate() {
        let kind = match vocab.kind(id) {
            Ok(k) => k,
            Err(_) => {
                violations.push(format!("{pos}: unknown token id {id}"));
                continue;
            }
        };
        // trailing padding of an unterminated sequence is not a new error
        if kind == TokenKind::Padding && state != GrammarState::Done {
            break;
        }
        match state.next(kind) {
            Ok(next) => {
                match kind {
                    TokenKind::Label => {
                        labels.insert(vocab.labels[(id as usize) - N_SPECIALS].clone());
                    }
                    TokenKind::Code => {
                        let raw = vocab.token(id).expect("code id checked");
                        open.push(CodeId::new(vocab.system, raw).expect("vocab codes are non-empty"));
                    }
                    TokenKind::EndVisit => visits.push(Visit {
                        admit_ts: visits.len() as i64,
                        codes: std::mem::take(&mut open),
                    }),
                    _ => {}
                }
                state = next;
            }
            Err(rule) => violations.push(format!("{pos}: {rule}")),
        }
    }
    if state != GrammarState::Done {
        violations.push("missing END_RECORD".into());
    }
    Decoded {
        record: PatientRecord {
            patient_id: String::new(),
            labels,
            visits,
        },
        valid: violations.is_empty(),
        violations,
    }
}
