use std::sync::Arc;

use crate::params::ParamStore;
use crate::rng;
use crate::tensor::{gemm_acc, gemm_tn_acc};
use crate::{NnError, Result, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one dropout site at one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u64,
    pub step: u64,
}

impl DropoutKey {
    fn key(&self) -> u64 {
        rng::hash_words(&[self.seed, self.layer, self.step])
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Sum(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Map {
        x: Var,
        df: fn(T) -> T,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: usize,
        probs: Vec<T>,
        count: usize,
    },
    MseMasked {
        pred: Var,
        target: Var,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of the operations of one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it once in reverse.
/// A graph is built fresh for every step and dropped afterwards.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    train: bool,
}

/// Gradients of a scalar loss with respect to every node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients keyed by the names they were bound under.
    pub fn params(&self) -> impl Iterator<Item = (&str, Option<&Tensor<T>>)> {
        self.params.iter().map(move |(name, v)| (name.as_str(), self.get(*v)))
    }
}

fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    (u, u.tanh())
}

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let (_, t) = gelu_inner(x);
    half * x * (T::one() + t)
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::from_f64(0.5);
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044715);
    let (_, t) = gelu_inner(x);
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    /// `train` enables dropout.
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            train,
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push_arc(Arc::new(value), op, needs_grad)
    }

    fn push_arc(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_arc(&mut self, value: Arc<Tensor<T>>) -> Var {
        self.push_arc(value, Op::Leaf, false)
    }

    /// Bind a parameter of `store`; its gradient is reported under `name`.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.params.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = store.value_arc(name)?;
        let v = self.push_arc(value, Op::Param, true);
        self.params.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NnError::shape("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::shape("add", &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x[.., n] + row[n]`, broadcasting over leading dimensions only.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tr.shape().len() != 1 || tx.shape().is_empty() || tx.cols() != tr.shape()[0] {
            return Err(NnError::shape("add_row", &[tx.shape(), tr.shape()]));
        }
        let n = tr.numel();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(row);
        Ok(self.push(out, Op::AddRow(x, row), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NnError::shape("mul", &[ta.shape(), tb.shape()]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).map(|x| x * c);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, c), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[a.0].value).clone().reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Rows of a `[V, d]` table selected by `ids`, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(NnError::shape("embedding_gather", &[t.shape()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NnError::Index {
                    op: "embedding_gather",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Normalizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tx.shape().is_empty() || tg.shape() != [d] || tb.shape() != [d] {
            return Err(NnError::shape("layer_norm", &[tx.shape(), tg.shape(), tb.shape()]));
        }
        let rows = tx.rows();
        let dt = T::from_f64(d as f64);
        let eps = T::from_f64(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gain) || self.ng(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let ng = self.ng(x);
        self.push(out, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.tanh());
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    /// Elementwise `f` with caller-supplied derivative `df` (evaluated at the input).
    pub fn map(&mut self, x: Var, f: fn(T) -> T, df: fn(T) -> T) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, Op::Map { x, df }, ng)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().is_empty() {
            return Err(NnError::shape("softmax", &[tx.shape()]));
        }
        let d = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Causal multi-head attention over `[batch * seq, d]` projections.
    ///
    /// Position `i` of a sequence attends to positions `0..=i` of the same
    /// sequence only.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let shape_ok = tq.shape().len() == 2
            && tq.shape() == tk.shape()
            && tq.shape() == tv.shape()
            && tq.shape()[0] == batch * seq;
        if !shape_ok {
            return Err(NnError::shape(
                "causal_multihead_attention",
                &[tq.shape(), tk.shape(), tv.shape(), &[batch, seq]],
            ));
        }
        let d = tq.cols();
        if heads == 0 || d % heads != 0 {
            return Err(NnError::InvalidArgument {
                op: "causal_multihead_attention",
                msg: format!("model width {d} not divisible by {heads} heads"),
            });
        }
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); batch * seq * d];
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        let dot: T = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                        scores[j] = dot * scale;
                    }
                    softmax_in_place(&mut scores[..=i]);
                    let p_row = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    p_row[..=i].copy_from_slice(&scores[..=i]);
                    let o = &mut out[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let p = p_row[j];
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        for (oc, &vc) in o.iter_mut().zip(vj) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![batch * seq, d], out)?;
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            ng,
        ))
    }

    /// Inverted dropout. Identity outside training mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::InvalidArgument {
                op: "dropout",
                msg: format!("p = {p}"),
            });
        }
        if !self.train || p == 0.0 {
            return Ok(x);
        }
        let k = key.key();
        let keep = T::from_f64(1.0 / (1.0 - p));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.numel() as u64)
            .map(|i| if rng::uniform(k, i) < p { T::zero() } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout { x, mask }, ng))
    }

    /// Mean cross-entropy of `[N, V]` logits against `targets`, skipping
    /// rows whose target equals `ignore`. Zero when every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: usize) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.shape()[0] != targets.len() {
            return Err(NnError::shape(
                "cross_entropy_with_ignore",
                &[tl.shape(), &[targets.len()]],
            ));
        }
        let v = tl.cols();
        let mut probs = tl.data().to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lse = m + z.ln();
            if t != ignore {
                if t >= v {
                    return Err(NnError::Index {
                        op: "cross_entropy_with_ignore",
                        index: t,
                        bound: v,
                    });
                }
                total += lse - row[t];
                count += 1;
            }
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64(count as f64)
        };
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean squared error over the rows of `[N, D]` selected by `mask`,
    /// averaged over selected rows and columns. Zero when no row is selected.
    pub fn mse_masked(&mut self, pred: Var, target: Var, mask: &[bool]) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() || tp.rows() != mask.len() {
            return Err(NnError::shape("mse_masked", &[tp.shape(), tt.shape(), &[mask.len()]]));
        }
        let d = tp.cols();
        let count = mask.iter().filter(|&&m| m).count();
        let mut total = T::zero();
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (&a, &b) in tp.row(r).iter().zip(tt.row(r)) {
                total += (a - b) * (a - b);
            }
        }
        let loss = if count == 0 {
            T::zero()
        } else {
            total / T::from_f64((count * d) as f64)
        };
        let ng = self.ng(pred) || self.ng(target);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseMasked {
                pred,
                target,
                mask: mask.to_vec(),
                count,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(NnError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.ng(*a) {
                    let bt = tb.transpose2().expect("2-D");
                    let mut da = vec![T::zero(); m * k];
                    gemm_acc(g.data(), bt.data(), &mut da, m, n, k);
                    self.accum(grads, *a, da);
                }
                if self.ng(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm_tn_acc(ta.data(), g.data(), &mut db, m, k, n);
                    self.accum(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose2().expect("2-D");
                self.accum(grads, *a, gt.into_data());
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        self.accum(grads, v, g.data().to_vec());
                    }
                }
            }
            Op::AddRow(x, row) => {
                if self.ng(*x) {
                    self.accum(grads, *x, g.data().to_vec());
                }
                if self.ng(*row) {
                    let n = self.value(*row).numel();
                    let mut dr = vec![T::zero(); n];
                    for chunk in g.data().chunks(n) {
                        for (d, &c) in dr.iter_mut().zip(chunk) {
                            *d += c;
                        }
                    }
                    self.accum(grads, *row, dr);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *a, d);
                }
                if self.ng(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).collect();
                    self.accum(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|&x| x * *c).collect();
                self.accum(grads, *a, d);
            }
            Op::Reshape(a) => self.accum(grads, *a, g.data().to_vec()),
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accum(grads, *a, vec![g.item(); n]);
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![T::zero(); tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g.data()[r * d..(r + 1) * d];
                    for (x, &y) in dt[id * d..(id + 1) * d].iter_mut().zip(src) {
                        *x += y;
                    }
                }
                self.accum(grads, *table, dt);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let tg = self.value(*gain);
                let d = tg.numel();
                let rows = xhat.len() / d;
                if self.ng(*gain) || self.ng(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gv = g.data()[r * d + j];
                            dg[j] += gv * xhat[r * d + j];
                            db[j] += gv;
                        }
                    }
                    if self.ng(*gain) {
                        self.accum(grads, *gain, dg);
                    }
                    if self.ng(*bias) {
                        self.accum(grads, *bias, db);
                    }
                }
                if self.ng(*x) {
                    let dt = T::from_f64(d as f64);
                    let mut dx = vec![T::zero(); rows * d];
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = g.data()[r * d + j] * tg.data()[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / dt;
                        let mean_dx = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / dt;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    self.accum(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(&gv, &xv)| gv * gelu_grad(xv))
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Tanh(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * (T::one() - y * y))
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accum(grads, *x, d);
            }
            Op::Map { x, df } => {
                let tx = self.value(*x);
                let d = g.data().iter().zip(tx.data()).map(|(&gv, &xv)| gv * df(xv)).collect();
                self.accum(grads, *x, d);
            }
            Op::Softmax(x) => {
                let d = out.cols();
                let mut dx = vec![T::zero(); out.numel()];
                for ((y, gr), dxr) in out.data().chunks(d).zip(g.data().chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        dxr[j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accum(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, grads, [*q, *k, *v], (*batch, *seq, *heads), probs),
            Op::Dropout { x, mask } => {
                let d = g.data().iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accum(grads, *x, d);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let mut dl = vec![T::zero(); probs.len()];
                if *count > 0 {
                    let s = g.item() / T::from_f64(*count as f64);
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore {
                            continue;
                        }
                        let row = &mut dl[r * v..(r + 1) * v];
                        for (dst, &p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *dst = p * s;
                        }
                        row[t] -= s;
                    }
                }
                self.accum(grads, *logits, dl);
            }
            Op::MseMasked {
                pred,
                target,
                mask,
                count,
            } => {
                let (tp, tt) = (self.value(*pred), self.value(*target));
                let d = tp.cols();
                let mut dp = vec![T::zero(); tp.numel()];
                if *count > 0 {
                    let s = T::from_f64(2.0) * g.item() / T::from_f64((*count * d) as f64);
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..d {
                            dp[r * d + j] = s * (tp.data()[r * d + j] - tt.data()[r * d + j]);
                        }
                    }
                }
                if self.ng(*target) {
                    self.accum(grads, *target, dp.iter().map(|&x| -x).collect());
                }
                if self.ng(*pred) {
                    self.accum(grads, *pred, dp);
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        [q, k, v]: [Var; 3],
        (batch, seq, heads): (usize, usize, usize),
        probs: &[T],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        let dh = d / heads;
        let scale = T::one() / T::from_f64(dh as f64).sqrt();
        let (qd, kd, vd, gd) = (tq.data(), tk.data(), tv.data(), g.data());
        let mut dq = vec![T::zero(); qd.len()];
        let mut dk = vec![T::zero(); kd.len()];
        let mut dv = vec![T::zero(); vd.len()];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p_row = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let go = &gd[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let vj = &vd[(b * seq + j) * d + off..][..dh];
                        dp[j] = go.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        let dvj = &mut dv[(b * seq + j) * d + off..][..dh];
                        for (dst, &x) in dvj.iter_mut().zip(go) {
                            *dst += p_row[j] * x;
                        }
                    }
                    let dot: T = (0..=i).map(|j| p_row[j] * dp[j]).sum();
                    let qi = &qd[(b * seq + i) * d + off..][..dh];
                    for j in 0..=i {
                        let ds = p_row[j] * (dp[j] - dot) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let kj = &kd[(b * seq + j) * d + off..][..dh];
                        let dqi = &mut dq[(b * seq + i) * d + off..][..dh];
                        for (dst, &x) in dqi.iter_mut().zip(kj) {
                            *dst += ds * x;
                        }
                        let dkj = &mut dk[(b * seq + j) * d + off..][..dh];
                        for (dst, &x) in dkj.iter_mut().zip(qi) {
                            *dst += ds * x;
                        }
                    }
                }
            }
        }
        if self.ng(q) {
            self.accum(grads, q, dq);
        }
        if self.ng(k) {
            self.accum(grads, k, dk);
        }
        if self.ng(v) {
            self.accum(grads, v, dv);
        }
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, data: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(data) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::new(shape, data).expect("gradient shape"));
            }
        }
    }
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}
