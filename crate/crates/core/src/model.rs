//! The decoder: fused token/hierarchy/semantic/position inputs, pre-norm
//! transformer blocks with causal attention and three output heads.

use std::sync::Arc;

use hisgt_nn::{DropoutKey, Graph, ParamStore, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::hashing::json_sha256;
use crate::semantics::EmbeddingTable;
use crate::tokenizer::{TokenSequence, Vocabulary, PADDING};
use crate::{Error, Result};

const INIT_STD: f64 = 0.02;

/// Which token's frozen embedding the consistency heads regress onto.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConsistencyTarget {
    #[default]
    Next,
    Current,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HiSGTConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub d_h: usize,
    pub d_s: usize,
    pub ff_mult: usize,
    pub lambda_h: f64,
    pub lambda_s: f64,
    pub use_hier: bool,
    pub use_sem: bool,
    /// Enables the consistency head of each enabled embedding source.
    pub use_consistency: bool,
    pub consistency_target: ConsistencyTarget,
}

impl Default for HiSGTConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            n_heads: 8,
            d_model: 384,
            max_len: 768,
            dropout: 0.1,
            d_h: 64,
            d_s: 768,
            ff_mult: 4,
            lambda_h: 1.0,
            lambda_s: 1.0,
            use_hier: true,
            use_sem: true,
            use_consistency: true,
            consistency_target: ConsistencyTarget::Next,
        }
    }
}

impl HiSGTConfig {
    /// Desk-scale preset.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            d_model: 32,
            max_len: 128,
            d_h: 16,
            d_s: 64,
            ..Self::default()
        }
    }

    /// No hierarchy, no semantics, no consistency heads.
    pub fn code_only(mut self) -> Self {
        self.use_hier = false;
        self.use_sem = false;
        self.use_consistency = false;
        self
    }

    pub fn hier_head(&self) -> bool {
        self.use_hier && self.use_consistency
    }

    pub fn sem_head(&self) -> bool {
        self.use_sem && self.use_consistency
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.max_len < 4 || self.d_h == 0 || self.d_s == 0 || self.ff_mult == 0 {
            return Err(Error::Config("sizes must be positive and max_len at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        json_sha256(self).expect("config serializes")
    }
}

/// Frozen per-token tables `[|V|, d]` (specials zero) with their file hashes.
#[derive(Clone, Debug, Default)]
pub struct FrozenTables {
    pub hier: Option<(Vec<f64>, String)>,
    pub sem: Option<(Vec<f64>, String)>,
}

impl FrozenTables {
    /// Hierarchy rows for codes only, semantic rows for codes and labels.
    pub fn from_tables(vocab: &Vocabulary, hier: Option<&EmbeddingTable>, sem: Option<&EmbeddingTable>) -> Self {
        Self {
            hier: hier.map(|t| (t.vocab_matrix(vocab, false), t.hash())),
            sem: sem.map(|t| (t.vocab_matrix(vocab, true), t.hash())),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HiSGTModel<T: Scalar> {
    pub config: HiSGTConfig,
    pub params: ParamStore<T>,
    pub vocab_size: usize,
    /// Id of the first code token; codes occupy the tail of the vocabulary.
    pub first_code: usize,
    pub vocab_hash: String,
    hier: Option<Arc<Tensor<T>>>,
    sem: Option<Arc<Tensor<T>>>,
    pub hier_hash: Option<String>,
    pub sem_hash: Option<String>,
}

/// Next-token training example batch, padded to the longest sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    /// `[batch * seq]` input ids.
    pub inputs: Vec<usize>,
    /// `[batch * seq]` ids of the following token, `PADDING` past the end.
    pub targets: Vec<usize>,
}

impl Batch {
    pub fn new(seqs: &[&TokenSequence]) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::EmptyInput("batch".into()));
        }
        let seq = seqs
            .iter()
            .map(|s| s.true_len)
            .max()
            .unwrap_or(0)
            .saturating_sub(1)
            .max(1);
        let mut inputs = Vec::with_capacity(seqs.len() * seq);
        let mut targets = Vec::with_capacity(seqs.len() * seq);
        for s in seqs {
            for t in 0..seq {
                inputs.push(s.ids.get(t).copied().unwrap_or(PADDING) as usize);
                targets.push(s.ids.get(t + 1).copied().unwrap_or(PADDING) as usize);
            }
        }
        Ok(Self {
            batch: seqs.len(),
            seq,
            inputs,
            targets,
        })
    }
}

pub struct Outputs {
    /// `[N, |V|]`, or `[batch, |V|]` when only last positions were requested.
    pub logits: Var,
    pub hier_pred: Option<Var>,
    pub sem_pred: Option<Var>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub mse_hier: f64,
    pub mse_sem: f64,
    pub n_ce: usize,
    pub n_hier: usize,
    pub n_sem: usize,
}

impl LossBreakdown {
    /// Token-weighted mean of several breakdowns.
    pub fn combine(parts: &[LossBreakdown], lambda_h: f64, lambda_s: f64) -> Self {
        let mut out = LossBreakdown::default();
        for p in parts {
            out.ce += p.ce * p.n_ce as f64;
            out.mse_hier += p.mse_hier * p.n_hier as f64;
            out.mse_sem += p.mse_sem * p.n_sem as f64;
            out.n_ce += p.n_ce;
            out.n_hier += p.n_hier;
            out.n_sem += p.n_sem;
        }
        let div = |x: f64, n: usize| if n == 0 { 0.0 } else { x / n as f64 };
        out.ce = div(out.ce, out.n_ce);
        out.mse_hier = div(out.mse_hier, out.n_hier);
        out.mse_sem = div(out.mse_sem, out.n_sem);
        out.total = out.ce + lambda_h * out.mse_hier + lambda_s * out.mse_sem;
        out
    }
}

/// Dropout settings of one forward pass; `None` means evaluation mode.
#[derive(Clone, Copy, Debug)]
pub struct TrainStep {
    pub seed: u64,
    pub step: u64,
}

fn table_tensor<T: Scalar>(rows: &[f64], v: usize, d: usize, what: &str) -> Result<Arc<Tensor<T>>> {
    if rows.len() != v * d {
        return Err(Error::Config(format!(
            "{what} table has {} values, expected {v} x {d}",
            rows.len()
        )));
    }
    Ok(Arc::new(Tensor::from_f64(&[v, d], rows)?))
}

impl<T: Scalar> HiSGTModel<T> {
    pub fn new(config: HiSGTConfig, vocab: &Vocabulary, tables: &FrozenTables, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab_size = vocab.len();
        let (v, d, ff) = (vocab_size, config.d_model, config.d_model * config.ff_mult);
        let mut p = ParamStore::new();
        p.insert_normal("tok_emb", &[v, d], INIT_STD, seed)?;
        p.insert_normal("pos_emb", &[config.max_len, d], INIT_STD, seed)?;
        let hier = if config.use_hier {
            let (rows, _) = tables
                .hier
                .as_ref()
                .ok_or_else(|| Error::Config("use_hier requires a hierarchy table".into()))?;
            p.insert_normal("hier.adapter", &[config.d_h, d], INIT_STD, seed)?;
            Some(table_tensor(rows, v, config.d_h, "hierarchy")?)
        } else {
            None
        };
        let sem = if config.use_sem {
            let (rows, _) = tables
                .sem
                .as_ref()
                .ok_or_else(|| Error::Config("use_sem requires a semantic table".into()))?;
            p.insert_normal("sem.w", &[config.d_s, d], INIT_STD, seed)?;
            p.insert_zeros("sem.b", &[d])?;
            Some(table_tensor(rows, v, config.d_s, "semantic")?)
        } else {
            None
        };
        for i in 0..config.n_layers {
            let b = format!("blocks.{i}");
            p.insert_full(&format!("{b}.ln1.g"), &[d], T::one())?;
            p.insert_zeros(&format!("{b}.ln1.b"), &[d])?;
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert_normal(&format!("{b}.attn.{w}"), &[d, d], INIT_STD, seed)?;
                p.insert_zeros(&format!("{b}.attn.b{}", &w[1..]), &[d])?;
            }
            p.insert_full(&format!("{b}.ln2.g"), &[d], T::one())?;
            p.insert_zeros(&format!("{b}.ln2.b"), &[d])?;
            p.insert_normal(&format!("{b}.mlp.w1"), &[d, ff], INIT_STD, seed)?;
            p.insert_zeros(&format!("{b}.mlp.b1"), &[ff])?;
            p.insert_normal(&format!("{b}.mlp.w2"), &[ff, d], INIT_STD, seed)?;
            p.insert_zeros(&format!("{b}.mlp.b2"), &[d])?;
        }
        p.insert_full("ln_f.g", &[d], T::one())?;
        p.insert_zeros("ln_f.b", &[d])?;
        p.insert_zeros("head.code.w", &[d, v])?;
        p.insert_zeros("head.code.b", &[v])?;
        if config.hier_head() {
            p.insert_zeros("head.hier.w", &[d, config.d_h])?;
            p.insert_zeros("head.hier.b", &[config.d_h])?;
        }
        if config.sem_head() {
            p.insert_zeros("head.sem.w", &[d, config.d_s])?;
            p.insert_zeros("head.sem.b", &[config.d_s])?;
        }
        Ok(Self {
            hier_hash: config
                .use_hier
                .then(|| tables.hier.as_ref().map(|t| t.1.clone()))
                .flatten(),
            sem_hash: config
                .use_sem
                .then(|| tables.sem.as_ref().map(|t| t.1.clone()))
                .flatten(),
            config,
            params: p,
            vocab_size,
            first_code: vocab.first_code_id() as usize,
            vocab_hash: vocab.hash(),
            hier,
            sem,
        })
    }

    /// Rebuild around an existing parameter store (checkpoint loading).
    pub fn with_params(
        config: HiSGTConfig,
        vocab: &Vocabulary,
        tables: &FrozenTables,
        params: ParamStore<T>,
    ) -> Result<Self> {
        let mut m = Self::new(config, vocab, tables, 0)?;
        let expected: Vec<(String, Vec<usize>)> = m
            .params
            .iter()
            .map(|p| (p.name.clone(), p.value().shape().to_vec()))
            .collect();
        let found: Vec<(String, Vec<usize>)> = params
            .iter()
            .map(|p| (p.name.clone(), p.value().shape().to_vec()))
            .collect();
        if expected != found {
            return Err(Error::Checkpoint(
                "parameter names or shapes do not match the config".into(),
            ));
        }
        m.params = params;
        Ok(m)
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> HiSGTModel<U> {
        HiSGTModel {
            config: self.config.clone(),
            params: self.params.cast(),
            vocab_size: self.vocab_size,
            first_code: self.first_code,
            vocab_hash: self.vocab_hash.clone(),
            hier: self.hier.as_ref().map(|t| Arc::new(t.cast())),
            sem: self.sem.as_ref().map(|t| Arc::new(t.cast())),
            hier_hash: self.hier_hash.clone(),
            sem_hash: self.sem_hash.clone(),
        }
    }

    fn linear(&self, g: &mut Graph<T>, x: Var, w: &str, b: &str) -> Result<Var> {
        let w = g.param(&self.params, w)?;
        let b = g.param(&self.params, b)?;
        let y = g.matmul(x, w)?;
        Ok(g.add_row(y, b)?)
    }

    fn layer_norm(&self, g: &mut Graph<T>, x: Var, prefix: &str) -> Result<Var> {
        let gain = g.param(&self.params, &format!("{prefix}.g"))?;
        let bias = g.param(&self.params, &format!("{prefix}.b"))?;
        Ok(g.layer_norm(x, gain, bias)?)
    }

    fn dropout(&self, g: &mut Graph<T>, x: Var, layer: u64, train: Option<TrainStep>) -> Result<Var> {
        match train {
            Some(t) if self.config.dropout > 0.0 => Ok(g.dropout(
                x,
                self.config.dropout,
                DropoutKey {
                    seed: t.seed,
                    layer,
                    step: t.step,
                },
            )?),
            _ => Ok(x),
        }
    }

    /// Fused input representation `[batch * seq, d_model]`.
    pub fn fuse_inputs(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        train: Option<TrainStep>,
    ) -> Result<Var> {
        if seq > self.config.max_len {
            return Err(Error::Config(format!(
                "sequence length {seq} exceeds max_len {}",
                self.config.max_len
            )));
        }
        if ids.len() != batch * seq {
            return Err(Error::Config(format!("{} ids for a {batch} x {seq} batch", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::UnknownTokenId(bad as u32));
        }
        let tok = g.param(&self.params, "tok_emb")?;
        let mut x = g.gather(tok, ids)?;
        if let Some(h) = &self.hier {
            let table = g.constant_arc(Arc::clone(h));
            let w = g.param(&self.params, "hier.adapter")?;
            let projected = g.matmul(table, w)?;
            let rows = g.gather(projected, ids)?;
            x = g.add(x, rows)?;
        }
        if let Some(s) = &self.sem {
            let table = g.constant_arc(Arc::clone(s));
            let w = g.param(&self.params, "sem.w")?;
            let b = g.param(&self.params, "sem.b")?;
            let projected = g.matmul(table, w)?;
            let projected = g.add_row(projected, b)?;
            let rows = g.gather(projected, ids)?;
            x = g.add(x, rows)?;
        }
        let pos = g.param(&self.params, "pos_emb")?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let p = g.gather(pos, &positions)?;
        let x = g.add(x, p)?;
        self.dropout(g, x, 0, train)
    }

    /// Decoder stack followed by the final layer norm.
    fn hidden(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        train: Option<TrainStep>,
    ) -> Result<Var> {
        let mut x = self.fuse_inputs(g, ids, batch, seq, train)?;
        for i in 0..self.config.n_layers {
            let b = format!("blocks.{i}");
            let h = self.layer_norm(g, x, &format!("{b}.ln1"))?;
            let q = self.linear(g, h, &format!("{b}.attn.wq"), &format!("{b}.attn.bq"))?;
            let k = self.linear(g, h, &format!("{b}.attn.wk"), &format!("{b}.attn.bk"))?;
            let v = self.linear(g, h, &format!("{b}.attn.wv"), &format!("{b}.attn.bv"))?;
            let a = g.causal_attention(q, k, v, batch, seq, self.config.n_heads)?;
            let a = self.linear(g, a, &format!("{b}.attn.wo"), &format!("{b}.attn.bo"))?;
            let a = self.dropout(g, a, 1 + 2 * i as u64, train)?;
            x = g.add(x, a)?;

            let h = self.layer_norm(g, x, &format!("{b}.ln2"))?;
            let h = self.linear(g, h, &format!("{b}.mlp.w1"), &format!("{b}.mlp.b1"))?;
            let h = g.gelu(h);
            let h = self.linear(g, h, &format!("{b}.mlp.w2"), &format!("{b}.mlp.b2"))?;
            let h = self.dropout(g, h, 2 + 2 * i as u64, train)?;
            x = g.add(x, h)?;
        }
        self.layer_norm(g, x, "ln_f")
    }

    /// All three heads at every position.
    pub fn forward(
        &self,
        g: &mut Graph<T>,
        ids: &[usize],
        batch: usize,
        seq: usize,
        train: Option<TrainStep>,
    ) -> Result<Outputs> {
        let h = self.hidden(g, ids, batch, seq, train)?;
        self.heads(g, h)
    }

    fn heads(&self, g: &mut Graph<T>, h: Var) -> Result<Outputs> {
        let logits = self.linear(g, h, "head.code.w", "head.code.b")?;
        let hier_pred = if self.config.hier_head() {
            Some(self.linear(g, h, "head.hier.w", "head.hier.b")?)
        } else {
            None
        };
        let sem_pred = if self.config.sem_head() {
            Some(self.linear(g, h, "head.sem.w", "head.sem.b")?)
        } else {
            None
        };
        Ok(Outputs {
            logits,
            hier_pred,
            sem_pred,
        })
    }

    /// Next-token logits `[batch, |V|]` at the last position of each row.
    pub fn last_logits(&self, ids: &[usize], batch: usize, seq: usize) -> Result<Tensor<T>> {
        let mut g = Graph::new(false);
        let h = self.hidden(&mut g, ids, batch, seq, None)?;
        let last: Vec<usize> = (0..batch).map(|b| b * seq + seq - 1).collect();
        let h = g.gather(h, &last)?;
        let logits = self.linear(&mut g, h, "head.code.w", "head.code.b")?;
        Ok(g.value(logits).clone())
    }

    /// Build the training objective for `batch` on `g`; returns the scalar
    /// total loss and its breakdown.
    pub fn loss(&self, g: &mut Graph<T>, batch: &Batch, train: Option<TrainStep>) -> Result<(Var, LossBreakdown)> {
        let out = self.forward(g, &batch.inputs, batch.batch, batch.seq, train)?;
        let ce = g.cross_entropy(out.logits, &batch.targets, PADDING as usize)?;
        let n_ce = batch.targets.iter().filter(|&&t| t != PADDING as usize).count();

        let anchor = match self.config.consistency_target {
            ConsistencyTarget::Next => &batch.targets,
            ConsistencyTarget::Current => &batch.inputs,
        };
        let mask: Vec<bool> = anchor
            .iter()
            .map(|&t| t >= self.first_code && t < self.vocab_size)
            .collect();
        let n_mask = mask.iter().filter(|&&m| m).count();

        let mut total = ce;
        let mut bd = LossBreakdown {
            ce: g.value(ce).item().to_f64(),
            n_ce,
            ..Default::default()
        };
        if let (Some(pred), Some(table)) = (out.hier_pred, &self.hier) {
            let t = g.constant_arc(Arc::clone(table));
            let target = g.gather(t, anchor)?;
            let mse = g.mse_masked(pred, target, &mask)?;
            bd.mse_hier = g.value(mse).item().to_f64();
            bd.n_hier = n_mask;
            let w = g.scale(mse, T::from_f64(self.config.lambda_h));
            total = g.add(total, w)?;
        }
        if let (Some(pred), Some(table)) = (out.sem_pred, &self.sem) {
            let t = g.constant_arc(Arc::clone(table));
            let target = g.gather(t, anchor)?;
            let mse = g.mse_masked(pred, target, &mask)?;
            bd.mse_sem = g.value(mse).item().to_f64();
            bd.n_sem = n_mask;
            let w = g.scale(mse, T::from_f64(self.config.lambda_s));
            total = g.add(total, w)?;
        }
        bd.total = bd.ce + self.config.lambda_h * bd.mse_hier + self.config.lambda_s * bd.mse_sem;
        Ok((total, bd))
    }
}
