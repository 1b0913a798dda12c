//! Two-layer graph convolution trained by adjacency reconstruction.
//!
//! With identity input features the first layer's weight doubles as a free
//! per-node embedding: `H = Â tanh(Â W1) W2`, where `Â` is the symmetric
//! normalization of `A + I`. The loss is the mean over off-diagonal pairs of
//! `(sigmoid(H Hᵀ) - A)²`.

use std::sync::Arc;

use hisgt_nn::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::HierGraph;
use crate::semantics::{EmbeddingKind, EmbeddingTable};
use crate::tokenizer::Vocabulary;
use crate::{Error, Result};

pub const GNN_MODEL: &str = "gcn2-adjacency-reconstruction";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    pub dim: usize,
    pub epochs: usize,
    /// Initial step size; adapted by backtracking.
    pub lr: f64,
    pub seed: u64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            epochs: 300,
            lr: 1.0,
            seed: 0,
        }
    }
}

/// Inputs of the reconstruction loss that do not change during training.
pub struct ReconstructionProblem {
    pub n: usize,
    a_hat: Arc<Tensor<f64>>,
    target: Arc<Tensor<f64>>,
    off_diagonal: Arc<Tensor<f64>>,
}

impl ReconstructionProblem {
    pub fn new(graph: &HierGraph) -> Self {
        let n = graph.len();
        let mut mask = vec![1.0; n * n];
        for i in 0..n {
            mask[i * n + i] = 0.0;
        }
        let t = |d: Vec<f64>| Arc::new(Tensor::new(vec![n, n], d).expect("n x n"));
        Self {
            n,
            a_hat: t(graph.normalized_adjacency()),
            target: t(graph.adjacency()),
            off_diagonal: t(mask),
        }
    }

    pub fn init_params(&self, dim: usize, seed: u64) -> Result<ParamStore<f64>> {
        let mut s = ParamStore::new();
        s.insert_normal("gnn.w1", &[self.n, dim], 1.0, seed)?;
        s.insert_normal("gnn.w2", &[dim, dim], 1.0 / (dim as f64).sqrt(), seed)?;
        Ok(s)
    }

    /// Node embeddings `H`, shape `[n, dim]`.
    pub fn embed(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<Var> {
        let a = g.constant_arc(Arc::clone(&self.a_hat));
        let w1 = g.param(store, "gnn.w1")?;
        let w2 = g.param(store, "gnn.w2")?;
        let h1 = g.matmul(a, w1)?;
        let h1 = g.tanh(h1);
        let h2 = g.matmul(a, h1)?;
        Ok(g.matmul(h2, w2)?)
    }

    pub fn loss(&self, g: &mut Graph<f64>, store: &ParamStore<f64>) -> Result<(Var, Var)> {
        let h = self.embed(g, store)?;
        let ht = g.transpose(h)?;
        let logits = g.matmul(h, ht)?;
        let probs = g.sigmoid(logits);
        let neg_a = g.constant((*self.target).map(|x| -x));
        let diff = g.add(probs, neg_a)?;
        let mask = g.constant_arc(Arc::clone(&self.off_diagonal));
        let diff = g.mul(diff, mask)?;
        let sq = g.mul(diff, diff)?;
        let total = g.sum(sq);
        let pairs = (self.n * self.n.saturating_sub(1)).max(1);
        Ok((g.scale(total, 1.0 / pairs as f64), h))
    }

    fn evaluate(&self, store: &ParamStore<f64>) -> Result<f64> {
        let mut g = Graph::new(false);
        let (loss, _) = self.loss(&mut g, store)?;
        Ok(g.value(loss).item())
    }
}

pub struct HierTraining {
    /// One vector per graph node, ancestors included.
    pub table: EmbeddingTable,
    /// Loss before training followed by the loss after every epoch.
    pub loss_trace: Vec<f64>,
}

/// Full-batch gradient descent with backtracking: a step that would raise
/// the loss is retried at half the step size, an accepted step lets the next
/// one grow by 20%. The loss trace is therefore non-increasing.
pub fn train_hier_embeddings(graph: &HierGraph, cfg: &GnnConfig) -> Result<HierTraining> {
    if graph.is_empty() {
        return Err(Error::EmptyInput("hierarchy graph has no nodes".into()));
    }
    let problem = ReconstructionProblem::new(graph);
    let mut store = problem.init_params(cfg.dim, cfg.seed)?;
    let mut lr = cfg.lr;
    let mut trace = Vec::with_capacity(cfg.epochs + 1);

    for epoch in 0..cfg.epochs {
        let mut g = Graph::new(false);
        let (loss, _) = problem.loss(&mut g, &store)?;
        let current = g.value(loss).item();
        if !current.is_finite() {
            return Err(Error::NonFiniteLoss(format!("hierarchy epoch {epoch}: loss {current}")));
        }
        if trace.is_empty() {
            trace.push(current);
        }
        let grads = g.backward(loss)?;
        store.zero_grad();
        store.accumulate(&grads)?;
        drop(g);

        let mut accepted = current;
        for _ in 0..50 {
            let mut trial = store.clone();
            trial.sgd_step(lr);
            let l = problem.evaluate(&trial)?;
            if l.is_finite() && l <= current {
                store = trial;
                accepted = l;
                lr *= 1.2;
                break;
            }
            lr *= 0.5;
        }
        trace.push(accepted);
    }

    let mut g = Graph::new(false);
    let h = problem.embed(&mut g, &store)?;
    let h = g.value(h);
    let mut table = EmbeddingTable::new(cfg.dim, GNN_MODEL, EmbeddingKind::Hierarchical);
    for (i, name) in graph.nodes.iter().enumerate() {
        table.insert(name, h.row(i).to_vec())?;
    }
    Ok(HierTraining {
        table,
        loss_trace: trace,
    })
}

/// Area under the ROC curve of `scores` against binary `labels`, with tied
/// scores sharing their average rank. Returns 0.5 when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * avg;
        i = j + 1;
    }
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// How well `sigmoid(h_u · h_v)` ranks edges above non-edges over all node
/// pairs. The sigmoid is monotone, so the raw dot product is ranked; this
/// also avoids ties from saturation.
pub fn reconstruction_auc(table: &EmbeddingTable, graph: &HierGraph) -> Result<f64> {
    let vecs: Vec<&[f64]> = graph
        .nodes
        .iter()
        .map(|n| table.get(n).ok_or_else(|| Error::UnknownToken(n.clone())))
        .collect::<Result<_>>()?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for u in 0..vecs.len() {
        for v in u + 1..vecs.len() {
            scores.push(vecs[u].iter().zip(vecs[v]).map(|(a, b)| a * b).sum());
            labels.push(graph.has_edge(u, v));
        }
    }
    Ok(auc(&scores, &labels))
}

/// Hierarchy vector of a token: the node embedding for codes, zeros for
/// specials and labels.
pub fn lookup_hier(table: &EmbeddingTable, token_id: u32, vocab: &Vocabulary) -> Result<Vec<f64>> {
    let token = vocab.token(token_id)?;
    if !vocab.is_code(token_id) {
        return Ok(vec![0.0; table.dim]);
    }
    table
        .get(token)
        .map(<[f64]>::to_vec)
        .ok_or_else(|| Error::UnknownToken(token.to_string()))
}
