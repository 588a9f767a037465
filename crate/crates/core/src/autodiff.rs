//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends one
//! node holding its value and enough saved state for its backward rule.
//! [`Tape::backward`] replays the nodes in reverse, and [`ParamStore::accumulate`]
//! folds the gradients of parameter leaves into their buffers.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::rng::Rng;
use crate::tensor::{matmul_t, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameters in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
            trainable,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    /// Replaces a value; the new tensor must keep the parameter's shape.
    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        p.value.same_shape(&value)?;
        p.value = value;
        Ok(())
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Sets the trainable flag of every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
                n += 1;
            }
        }
        n
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Adds the gradients of every trainable parameter leaf on `tape` into the store.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    let p = &mut self.params[id.0];
                    if p.trainable {
                        p.grad.add_assign(g)?;
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        bias: Var,
    },
    Gelu(Var),
    Relu(Var),
    Dropout { x: Var, mask: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    GatherRows(Vec<(Var, usize)>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Number of tape entries whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn add_grad(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing
            .add_assign(&g)
            .expect("gradient shapes agree by construction"),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that gradients flow to (used by gradient checks on raw inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Param(id), p.trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a)·op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let value = matmul_t(self.value(a), ta, self.value(b), tb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    /// Adds a `[d]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let bv = self.value(bias);
        let d = xv.last_dim();
        if bv.shape() != [d] {
            return Err(Error::shape(format!(
                "bias {:?} does not broadcast over {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut value = xv.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let value = ops::softmax_rows_masked(self.value(x), causal)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        ops::check_affine(self.value(x), self.value(gain), self.value(bias))?;
        let (xhat, inv_std) = ops::layer_norm_parts(self.value(x), eps);
        let mut value = xhat.clone();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        for i in 0..value.rows() {
            for ((v, gi), bi) in value.row_mut(i).iter_mut().zip(g).zip(b) {
                *v = *v * gi + bi;
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(ops::gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        match ops::dropout_mask(self.value(x).len(), rate, training, rng)? {
            None => Ok(x),
            Some(mask) => {
                let mut value = self.value(x).clone();
                value.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                let rg = self.rg(x);
                Ok(self.push(value, Op::Dropout { x, mask }, rg))
            }
        }
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::shape(format!(
                "column slice {start}..{} out of range for width {c}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv.row(i)[start..start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat of nothing"))?;
        let r = self.value(first).dims2()?.0;
        let mut width = 0;
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(Error::shape(format!("concat row mismatch: {r} vs {pr}")));
            }
            width += pc;
        }
        let mut data = Vec::with_capacity(r * width);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![r, width], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Builds a matrix whose i-th row is row `src[i].1` of matrix `src[i].0`.
    pub fn gather_rows(&mut self, src: &[(Var, usize)]) -> Result<Var> {
        let (first, _) = *src
            .first()
            .ok_or_else(|| Error::shape("gather of no rows"))?;
        let width = self.value(first).dims2()?.1;
        let mut data = Vec::with_capacity(src.len() * width);
        for &(v, row) in src {
            let t = self.value(v);
            let (r, c) = t.dims2()?;
            if c != width {
                return Err(Error::shape(format!("gather width mismatch: {width} vs {c}")));
            }
            if row >= r {
                return Err(Error::shape(format!("row {row} out of range for {r} rows")));
            }
            data.extend_from_slice(t.row(row));
        }
        let value = Tensor::new(vec![src.len(), width], data)?;
        let rg = src.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(value, Op::GatherRows(src.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Mean cross-entropy of `logits` rows against `targets` over masked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (loss, probs) = ops::masked_cross_entropy(self.value(logits), targets, mask)?;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            visited += 1;
            self.backward_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(a), self.value(b));
                if self.rg(a) {
                    let da = match (ta, tb) {
                        (false, false) => matmul_t(g, false, bv, true)?,
                        (false, true) => matmul_t(g, false, bv, false)?,
                        (true, false) => matmul_t(bv, false, g, true)?,
                        (true, true) => matmul_t(bv, true, g, true)?,
                    };
                    add_grad(&mut grads[a.0], da);
                }
                if self.rg(b) {
                    let db = match (ta, tb) {
                        (false, false) => matmul_t(av, true, g, false)?,
                        (true, false) => matmul_t(av, false, g, false)?,
                        (false, true) => matmul_t(g, true, av, false)?,
                        (true, true) => matmul_t(g, true, av, true)?,
                    };
                    add_grad(&mut grads[b.0], db);
                }
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    add_grad(&mut grads[a.0], g.clone());
                }
                if self.rg(b) {
                    add_grad(&mut grads[b.0], g.clone());
                }
            }
            &Op::Mul(a, b) => {
                if self.rg(a) {
                    add_grad(&mut grads[a.0], g.zip_map(self.value(b), |x, y| x * y)?);
                }
                if self.rg(b) {
                    add_grad(&mut grads[b.0], g.zip_map(self.value(a), |x, y| x * y)?);
                }
            }
            &Op::Scale(a, s) => add_grad(&mut grads[a.0], g.map(|x| x * s)),
            &Op::AddBias(x, bias) => {
                if self.rg(x) {
                    add_grad(&mut grads[x.0], g.clone());
                }
                if self.rg(bias) {
                    let d = g.last_dim();
                    let mut db = vec![0.0; d];
                    for i in 0..g.rows() {
                        db.iter_mut().zip(g.row(i)).for_each(|(acc, v)| *acc += v);
                    }
                    add_grad(&mut grads[bias.0], Tensor::new(vec![d], db)?);
                }
            }
            &Op::Softmax(x) => {
                let y = &node.value;
                let mut dx = g.clone();
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                add_grad(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                xhat,
                inv_std,
                bias,
            } => {
                let gv = self.value(*gain).data();
                let d = xhat.last_dim();
                if self.rg(*gain) || self.rg(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..g.rows() {
                        for j in 0..d {
                            dg[j] += g.row(i)[j] * xhat.row(i)[j];
                            db[j] += g.row(i)[j];
                        }
                    }
                    if self.rg(*gain) {
                        add_grad(&mut grads[gain.0], Tensor::new(vec![d], dg)?);
                    }
                    if self.rg(*bias) {
                        add_grad(&mut grads[bias.0], Tensor::new(vec![d], db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dx = g.clone();
                    let n = d as f64;
                    for i in 0..g.rows() {
                        let xr = xhat.row(i);
                        let dxhat: Vec<f64> = g.row(i).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / n;
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            *out = k * (n * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                    add_grad(&mut grads[x.0], dx);
                }
            }
            &Op::Gelu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| gv * ops::gelu_grad(xv))?;
                add_grad(&mut grads[x.0], dx);
            }
            &Op::Relu(x) => {
                let dx = g.zip_map(self.value(x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                add_grad(&mut grads[x.0], dx);
            }
            Op::Dropout { x, mask } => {
                let mut dx = g.clone();
                dx.data_mut().iter_mut().zip(mask).for_each(|(v, m)| *v *= m);
                add_grad(&mut grads[x.0], dx);
            }
            &Op::SliceCols { x, start } => {
                let mut dx = Tensor::zeros(self.value(x).shape());
                let w = g.last_dim();
                for i in 0..g.rows() {
                    dx.row_mut(i)[start..start + w].copy_from_slice(g.row(i));
                }
                add_grad(&mut grads[x.0], dx);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.rg(p) {
                        let mut data = Vec::with_capacity(g.rows() * w);
                        for i in 0..g.rows() {
                            data.extend_from_slice(&g.row(i)[offset..offset + w]);
                        }
                        add_grad(&mut grads[p.0], Tensor::new(vec![g.rows(), w], data)?);
                    }
                    offset += w;
                }
            }
            Op::GatherRows(src) => {
                for (i, &(v, row)) in src.iter().enumerate() {
                    if !self.rg(v) {
                        continue;
                    }
                    let slot = &mut grads[v.0];
                    let buf = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
                    buf.row_mut(row)
                        .iter_mut()
                        .zip(g.row(i))
                        .for_each(|(a, b)| *a += b);
                }
            }
            &Op::Sum(x) => {
                let s = g.data()[0];
                add_grad(&mut grads[x.0], Tensor::full(self.value(x).shape(), s));
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let s = g.data()[0];
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut dl = Tensor::zeros(probs.shape());
                for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                    if m {
                        let row = dl.row_mut(i);
                        row.copy_from_slice(probs.row(i));
                        row[t] -= 1.0;
                        row.iter_mut().for_each(|v| *v *= s / count);
                    }
                }
                add_grad(&mut grads[logits.0], dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_visits_each_entry_once() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut h = x;
        let k = 7;
        for _ in 0..k {
            h = tape.gelu(h);
        }
        let loss = tape.sum(h);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.visited(), k + 1);
    }

    #[test]
    fn shared_inputs_accumulate() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::full(&[2, 2], 0.5), false).unwrap();
        let b = store.add("b", Tensor::zeros(&[2]), true).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2], 1.0));
        let wv = tape.param(&store, w);
        let bv = tape.param(&store, b);
        let h = tape.matmul(x, wv).unwrap();
        let h = tape.add_bias(h, bv).unwrap();
        let loss = tape.sum(h);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(wv).is_none());
        store.accumulate(&tape, &grads).unwrap();
        assert_eq!(store.get(w).grad.max_abs(), 0.0);
        assert_eq!(store.get(b).grad.data(), &[3.0, 3.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.add("a", Tensor::zeros(&[1]), true).unwrap();
        assert!(store.add("a", Tensor::zeros(&[1]), true).is_err());
    }
}
