//! Frozen token embeddings: the shared embedding-file format, description
//! catalogs and a deterministic trigram-hashing fallback embedder.
//!
//! Embedding file: a header line `{"dim","model","count","kind"}` followed by
//! one `{"token","vector"}` line per token, tokens in lexical order, LF line
//! endings. Floats are written in shortest round-trip form.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::hashing::{read_to_string, sha256_hex, write_bytes};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};
use hisgt_nn::rng::{fnv1a, mix64};

pub const FALLBACK_MODEL: &str = "fallback-trigram";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Semantic,
    Hierarchical,
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbeddingKind::Semantic => "semantic",
            EmbeddingKind::Hierarchical => "hierarchical",
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    model: String,
    count: usize,
    kind: EmbeddingKind,
}

#[derive(Serialize, Deserialize)]
struct Row {
    token: String,
    vector: Vec<f64>,
}

/// Token → vector map of uniform dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub model: String,
    pub kind: EmbeddingKind,
    entries: BTreeMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, model: &str, kind: EmbeddingKind) -> Self {
        Self {
            dim,
            model: model.to_string(),
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, token: &str, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::EmbeddingFormat(format!(
                "`{token}` has {} entries, expected {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::EmbeddingFormat(format!("`{token}` has non-finite entries")));
        }
        if self.entries.insert(token.to_string(), vector).is_some() {
            return Err(Error::DuplicateToken(token.to_string()));
        }
        Ok(())
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn to_text(&self) -> Result<String> {
        let mut out = serde_json::to_string(&Header {
            dim: self.dim,
            model: self.model.clone(),
            count: self.entries.len(),
            kind: self.kind,
        })?;
        out.push('\n');
        for (token, vector) in &self.entries {
            out.push_str(&serde_json::to_string(&Row {
                token: token.clone(),
                vector: vector.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse a complete embedding file, keeping every row.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Header = serde_json::from_str(
            lines
                .next()
                .ok_or_else(|| Error::EmbeddingFormat("missing header".into()))?,
        )
        .map_err(|e| Error::EmbeddingFormat(format!("header: {e}")))?;
        if header.dim == 0 {
            return Err(Error::EmbeddingFormat("dim must be positive".into()));
        }
        let mut table = Self::new(header.dim, &header.model, header.kind);
        for (i, line) in lines.enumerate() {
            let row: Row =
                serde_json::from_str(line).map_err(|e| Error::EmbeddingFormat(format!("line {}: {e}", i + 2)))?;
            table.insert(&row.token, row.vector)?;
        }
        if table.len() != header.count {
            return Err(Error::EmbeddingFormat(format!(
                "header announces {} rows, found {}",
                header.count,
                table.len()
            )));
        }
        Ok(table)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_text(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_text()?.as_bytes())
    }

    /// SHA-256 of the canonical file text.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().expect("table serializes").as_bytes())
    }

    /// `[|V|, dim]` row-major matrix indexed by token id. Specials, tokens
    /// absent from the table and (unless `with_labels`) labels are zero.
    pub fn vocab_matrix(&self, vocab: &Vocabulary, with_labels: bool) -> Vec<f64> {
        let mut out = vec![0.0; vocab.len() * self.dim];
        for id in 0..vocab.len() as u32 {
            let wanted = vocab.is_code(id) || (with_labels && vocab.is_label(id));
            if !wanted {
                continue;
            }
            if let Some(v) = self.get(vocab.token(id).expect("id in range")) {
                out[id as usize * self.dim..(id as usize + 1) * self.dim].copy_from_slice(v);
            }
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// File tokens that are not code or label tokens of the vocabulary.
    pub ignored: Vec<String>,
    /// Code and label tokens without a vector; they embed as zero.
    pub uncovered: Vec<String>,
}

/// Read an embedding file and keep the rows of code and label tokens.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary) -> Result<(EmbeddingTable, LoadReport)> {
    let raw = EmbeddingTable::read(path)?;
    Ok(restrict_to_vocab(raw, vocab))
}

pub fn restrict_to_vocab(raw: EmbeddingTable, vocab: &Vocabulary) -> (EmbeddingTable, LoadReport) {
    let mut report = LoadReport::default();
    let mut table = EmbeddingTable::new(raw.dim, &raw.model, raw.kind);
    for (token, v) in raw.entries {
        match vocab.id_of(&token) {
            Some(id) if !vocab.is_special(id) => {
                table.entries.insert(token, v);
            }
            _ => report.ignored.push(token),
        }
    }
    for id in crate::tokenizer::N_SPECIALS..vocab.len() {
        let tok = vocab.token(id as u32).expect("id in range");
        if table.get(tok).is_none() {
            report.uncovered.push(tok.to_string());
        }
    }
    (table, report)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub codes_covered: usize,
    pub codes_total: usize,
    pub labels_covered: usize,
    pub labels_total: usize,
    pub uncovered: Vec<String>,
}

impl CoverageReport {
    pub fn code_fraction(&self) -> f64 {
        if self.codes_total == 0 {
            1.0
        } else {
            self.codes_covered as f64 / self.codes_total as f64
        }
    }

    pub fn label_fraction(&self) -> f64 {
        if self.labels_total == 0 {
            1.0
        } else {
            self.labels_covered as f64 / self.labels_total as f64
        }
    }
}

pub fn coverage_report(table: &EmbeddingTable, vocab: &Vocabulary) -> CoverageReport {
    let mut r = CoverageReport {
        codes_total: vocab.n_codes(),
        labels_total: vocab.n_labels(),
        ..Default::default()
    };
    for l in vocab.labels() {
        if table.get(l).is_some() {
            r.labels_covered += 1;
        } else {
            r.uncovered.push(l.clone());
        }
    }
    for c in vocab.codes() {
        if table.get(c).is_some() {
            r.codes_covered += 1;
        } else {
            r.uncovered.push(c.clone());
        }
    }
    r
}

/// Token → free-text description.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DescriptionCatalog {
    entries: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct CatalogRow {
    token: String,
    description: String,
}

impl DescriptionCatalog {
    pub fn from_entries(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        Self {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn get(&self, token: &str) -> Option<&str> {
        self.entries.get(token).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Add each vocabulary label whose description is missing, described
    /// by its own name.
    pub fn with_label_names(mut self, vocab: &Vocabulary) -> Self {
        for l in vocab.labels() {
            self.entries.entry(l.clone()).or_insert_with(|| l.clone());
        }
        self
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for (token, description) in &self.entries {
            out.push_str(&serde_json::to_string(&CatalogRow {
                token: token.clone(),
                description: description.clone(),
            })?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let row: CatalogRow = serde_json::from_str(line)?;
            if entries.insert(row.token.clone(), row.description).is_some() {
                return Err(Error::DuplicateToken(row.token));
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_jsonl(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, self.to_jsonl()?.as_bytes())
    }
}

/// Character trigrams of the lowercased text padded with one space on
/// each side.
pub fn trigrams(text: &str) -> Vec<String> {
    let t = text.trim().to_lowercase();
    if t.is_empty() {
        return Vec::new();
    }
    let chars: Vec<char> = std::iter::once(' ')
        .chain(t.chars())
        .chain(std::iter::once(' '))
        .collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

/// Signed-hashing trigram vector, L2-normalized; empty text gives zeros.
pub fn trigram_vector(text: &str, dim: usize, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for g in trigrams(text) {
        let h = mix64(fnv1a(g.as_bytes()) ^ seed);
        let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
        v[(h % dim as u64) as usize] += sign;
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

pub fn fallback_embed(catalog: &DescriptionCatalog, dim: usize, seed: u64) -> Result<EmbeddingTable> {
    if dim < 8 {
        return Err(Error::Config(format!(
            "fallback dimension must be at least 8, got {dim}"
        )));
    }
    let mut t = EmbeddingTable::new(dim, FALLBACK_MODEL, EmbeddingKind::Semantic);
    for (token, description) in catalog.iter() {
        t.insert(token, trigram_vector(description, dim, seed))?;
    }
    Ok(t)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
