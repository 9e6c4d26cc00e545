//! Tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in creation
//! order, which is already a topological order. [`Tape::backward`] walks the
//! records once in reverse and returns gradients for the parameter leaves.

use rand::Rng as _;

use super::kernels::{matmul, matmul_a_bt, matmul_at_b};
use super::loss;
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Constant,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Relu(Var),
    Dropout(Var, Vec<T>),
    GatherRows(Var, Vec<usize>),
    GroupMean {
        input: Var,
        offsets: Vec<usize>,
        members: Vec<usize>,
    },
    ConcatCols(Var, Var),
    ConcatRows(Vec<Var>),
    Sum(Var),
    WeightedSum(Vec<(Var, T)>),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    /// Loss whose gradient w.r.t. its single input was computed in the forward pass.
    Prepared(Var, Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients of a scalar loss w.r.t. the parameter leaves of a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    by_param: Vec<(usize, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// (parameter index in its store, gradient)
    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> {
        self.by_param.iter().map(|(i, g)| (*i, g))
    }

    pub fn get(&self, param_index: usize) -> Option<&Tensor<T>> {
        self.by_param
            .iter()
            .find(|(i, _)| *i == param_index)
            .map(|(_, g)| g)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn expect_rank2<T: Scalar>(op: &'static str, t: &Tensor<T>) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(
            op,
            format!("expected a matrix, got shape {:?}", t.shape()),
        ));
    }
    Ok((t.rows(), t.cols()))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf bound to a stored parameter. Frozen parameters get no gradient.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter '{name}'")))?;
        let p = store.param(index);
        Ok(self.push(p.value.clone(), Op::Param(index), p.trainable))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = expect_rank2("matmul", self.value(a))?;
        let (k2, m) = expect_rank2("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}×{k}] · [{k2}×{m}]")));
        }
        let out = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), rg))
    }

    /// Adds a length-m bias to every row of an n×m matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, m) = expect_rank2("add_bias", self.value(x))?;
        let b = self.value(bias);
        if b.rank() != 1 || b.cols() != m {
            return Err(Error::shape(
                "add_bias",
                format!("bias {:?} for {n}×{m}", b.shape()),
            ));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(m.max(1)) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::AddBias(x, bias), rg))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Inverted dropout: survivors are scaled by 1/keep. Identity unless training.
    pub fn dropout(&mut self, x: Var, keep: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::invalid(format!(
                "dropout keep probability {keep} not in (0, 1]"
            )));
        }
        if !training || keep == 1.0 {
            return Ok(x);
        }
        let scale = T::lit(1.0 / keep);
        let t = self.value(x);
        let factors: Vec<T> = (0..t.numel())
            .map(|_| {
                if rng.random::<f64>() < keep {
                    scale
                } else {
                    T::zero()
                }
            })
            .collect();
        let data = t
            .data()
            .iter()
            .zip(&factors)
            .map(|(&v, &f)| v * f)
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Dropout(x, factors), rg))
    }

    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let (n, m) = expect_rank2("gather_rows", self.value(x))?;
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * m);
        for &i in &index {
            out.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let value = Tensor::matrix(index.len(), m, out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, index), rg))
    }

    /// Row i of the output is the mean of the input rows listed in `groups[i]`.
    pub fn group_mean(&mut self, x: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (n, m) = expect_rank2("group_mean", self.value(x))?;
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        let mut members = Vec::new();
        offsets.push(0);
        for g in groups {
            if g.is_empty() {
                return Err(Error::shape("group_mean", "empty row set"));
            }
            if let Some(&bad) = g.iter().find(|&&i| i >= n) {
                return Err(Error::shape("group_mean", format!("row {bad} of {n}")));
            }
            members.extend_from_slice(g);
            offsets.push(members.len());
        }
        let src = self.value(x).data();
        let mut out = vec![T::zero(); groups.len() * m];
        for (gi, row) in out
            .chunks_exact_mut(m.max(1))
            .enumerate()
            .take(groups.len())
        {
            let g = &members[offsets[gi]..offsets[gi + 1]];
            for &i in g {
                row.iter_mut()
                    .zip(&src[i * m..(i + 1) * m])
                    .for_each(|(o, &v)| *o += v);
            }
            let inv = T::one() / T::lit(g.len() as f64);
            row.iter_mut().for_each(|o| *o *= inv);
        }
        let value = Tensor::matrix(groups.len(), m, out)?;
        let rg = self.rg(x);
        Ok(self.push(
            value,
            Op::GroupMean {
                input: x,
                offsets,
                members,
            },
            rg,
        ))
    }

    /// Mean of all rows, as a 1×m matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).rows();
        self.group_mean(x, &[(0..n).collect()])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ma) = expect_rank2("concat_cols", self.value(a))?;
        let (n2, mb) = expect_rank2("concat_cols", self.value(b))?;
        if n != n2 {
            return Err(Error::shape("concat_cols", format!("{n} vs {n2} rows")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(ta.row(i));
            out.extend_from_slice(tb.row(i));
        }
        let value = Tensor::matrix(n, ma + mb, out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::ConcatCols(a, b), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(&p) => expect_rank2("concat_rows", self.value(p))?.1,
            None => return Err(Error::shape("concat_rows", "no inputs")),
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (n, mp) = expect_rank2("concat_rows", self.value(p))?;
            if mp != m {
                return Err(Error::shape("concat_rows", format!("{mp} vs {m} columns")));
            }
            rows += n;
            out.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, m, out)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Σ cᵢ·xᵢ over same-shaped inputs.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::shape("weighted_sum", "no inputs"));
        };
        let shape = self.value(first).shape().to_vec();
        let mut out = vec![T::zero(); self.value(first).numel()];
        for &(v, c) in terms {
            let t = self.value(v);
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("{:?} vs {shape:?}", t.shape()),
                ));
            }
            out.iter_mut().zip(t.data()).for_each(|(o, &x)| *o += c * x);
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::WeightedSum(terms.to_vec()),
            rg,
        ))
    }

    /// Mean over rows of −log softmax(logits)[label].
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = expect_rank2("softmax_cross_entropy", self.value(logits))?;
        if labels.len() != n || n == 0 {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("{} labels for {n} rows", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("label {bad} for {c} classes"),
            ));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for i in 0..n {
            let row = &z[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        let value = Tensor::scalar(total / T::lit(n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    fn prepared_loss(&mut self, pred: Var, value: T, grad: Option<Vec<T>>) -> Var {
        let rg = self.rg(pred);
        match grad {
            Some(g) if rg => self.push(Tensor::scalar(value), Op::Prepared(pred, g), true),
            _ => self.push(Tensor::scalar(value), Op::Constant, false),
        }
    }

    /// Scaled cosine error on masked dimensions against a fixed target.
    pub fn scaled_cosine_loss(
        &mut self,
        pred: Var,
        target: &Tensor<T>,
        mask: &[bool],
        gamma: f64,
        eps: f64,
    ) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "scaled_cosine_loss",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let d = p.cols();
        let (value, grad) =
            loss::scaled_cosine(p.data(), target.data(), mask, d, gamma, eps, self.rg(pred))?;
        Ok(self.prepared_loss(pred, value, grad))
    }

    /// Squared error on masked dimensions, averaged over nodes.
    pub fn masked_mse_loss(&mut self, pred: Var, target: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::shape(
                "masked_mse_loss",
                format!("{:?} vs {:?}", p.shape(), target.shape()),
            ));
        }
        let d = p.cols();
        let (value, grad) = loss::masked_mse(p.data(), target.data(), mask, d, self.rg(pred))?;
        Ok(self.prepared_loss(pred, value, grad))
    }

    /// Propagates from a scalar loss. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::Tape("backward already called on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let node = &self.nodes[id];
            let send = |v: Var, contrib: Vec<T>, grads: &mut Vec<Option<Vec<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match grads[v.0].as_mut() {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, &c)| *a += c),
                    None => grads[v.0] = Some(contrib),
                }
            };
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[id] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        send(*a, matmul_a_bt(&g, tb.data(), n, m, k), &mut grads);
                    }
                    if self.rg(*b) {
                        send(*b, matmul_at_b(ta.data(), &g, n, k, m), &mut grads);
                    }
                }
                Op::AddBias(x, b) => {
                    let m = node.value.cols();
                    if self.rg(*b) {
                        let mut gb = vec![T::zero(); m];
                        for row in g.chunks_exact(m.max(1)) {
                            gb.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
                        }
                        send(*b, gb, &mut grads);
                    }
                    send(*x, g, &mut grads);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut grads);
                    send(*b, g, &mut grads);
                }
                Op::Relu(x) => {
                    // gradient at exactly 0 is 0
                    let out = node.value.data();
                    let gx = g
                        .iter()
                        .zip(out)
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    send(*x, gx, &mut grads);
                }
                Op::Dropout(x, factors) => {
                    let gx = g.iter().zip(factors).map(|(&gv, &f)| gv * f).collect();
                    send(*x, gx, &mut grads);
                }
                Op::GatherRows(x, index) => {
                    let src = &self.nodes[x.0].value;
                    let m = src.cols();
                    let mut gx = vec![T::zero(); src.numel()];
                    for (r, &i) in index.iter().enumerate() {
                        gx[i * m..(i + 1) * m]
                            .iter_mut()
                            .zip(&g[r * m..(r + 1) * m])
                            .for_each(|(o, &v)| *o += v);
                    }
                    send(*x, gx, &mut grads);
                }
                Op::GroupMean {
                    input,
                    offsets,
                    members,
                } => {
                    let src = &self.nodes[input.0].value;
                    let m = src.cols();
                    let mut gx = vec![T::zero(); src.numel()];
                    for gi in 0..offsets.len() - 1 {
                        let group = &members[offsets[gi]..offsets[gi + 1]];
                        let inv = T::one() / T::lit(group.len() as f64);
                        let grow = &g[gi * m..(gi + 1) * m];
                        for &i in group {
                            gx[i * m..(i + 1) * m]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, &v)| *o += v * inv);
                        }
                    }
                    send(*input, gx, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let ma = self.nodes[a.0].value.cols();
                    let m = node.value.cols();
                    let (mut ga, mut gb) = (Vec::new(), Vec::new());
                    for row in g.chunks_exact(m.max(1)) {
                        ga.extend_from_slice(&row[..ma]);
                        gb.extend_from_slice(&row[ma..]);
                    }
                    send(*a, ga, &mut grads);
                    send(*b, gb, &mut grads);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        send(p, g[start..start + len].to_vec(), &mut grads);
                        start += len;
                    }
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.numel();
                    send(*x, vec![g[0]; n], &mut grads);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        send(v, g.iter().map(|&gv| gv * c).collect(), &mut grads);
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let c = self.nodes[logits.0].value.cols();
                    let n = labels.len();
                    let scale = g[0] / T::lit(n as f64);
                    let mut gz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        gz[i * c + l] -= scale;
                    }
                    send(*logits, gz, &mut grads);
                }
                Op::Prepared(x, local) => {
                    send(*x, local.iter().map(|&v| v * g[0]).collect(), &mut grads);
                }
            }
        }

        let mut by_param: Vec<(usize, Tensor<T>)> = Vec::new();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(index), Some(g)) = (&node.op, grads[id].take()) {
                // the same parameter may be bound more than once
                match by_param.iter_mut().find(|(i, _)| i == index) {
                    Some((_, acc)) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(&g)
                        .for_each(|(a, &b)| *a += b),
                    None => by_param.push((*index, Tensor::new(node.value.shape().to_vec(), g)?)),
                }
            }
        }
        Ok(Gradients { by_param })
    }
}
