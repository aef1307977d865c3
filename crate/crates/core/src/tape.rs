//! Reverse-mode differentiation over [`Array`] values.
//!
//! A [`Tape`] records every primitive as it is evaluated. [`Tape::backward`]
//! walks the records in reverse and accumulates gradients for every node that
//! depends on a differentiable leaf. There is no implicit broadcasting:
//! elementwise binary ops require identical shapes, and scalars are widened
//! with [`Tape::expand`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::array::{matmul_nn, matmul_nt, matmul_tn, Array};
use crate::error::{Error, Result};
use crate::math;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Sigmoid(usize),
    Log(usize),
    Exp(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    Mean(usize),
    Sum(usize),
    Concat(Vec<usize>, usize),
    Slice {
        input: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    Detach(usize),
    Transpose(usize),
    Expand(usize),
    WeightedSum {
        weights: usize,
        terms: Vec<(usize, usize)>,
    },
    CausalAttention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<(usize, usize)>,
        scale: f64,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Operation recorder. Confined to one thread; independent tapes can run in
/// parallel.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
    leaves: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to any recorded value, if one was computed.
    pub fn get(&self, var: Var) -> Option<&Array> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index()).and_then(Option::as_ref)
    }

    /// Gradient for a differentiable leaf; zeros when the loss does not depend
    /// on it.
    pub fn wrt(&self, var: Var) -> Result<Array> {
        if var.tape != self.tape || var.index() >= self.grads.len() {
            return Err(Error::ForeignVar);
        }
        Ok(match &self.grads[var.index()] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[var.index()]),
        })
    }

    /// Indices of all differentiable leaves on the tape.
    pub fn leaf_vars(&self) -> impl Iterator<Item = Var> + '_ {
        let tape = self.tape;
        self.leaves
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(move |(i, _)| Var {
                tape,
                index: i as u32,
            })
    }
}

fn mismatch(op: &'static str, a: &Array, b: &Array) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn as_matrix(a: &Array) -> (usize, usize) {
    (a.rows(), a.cols())
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = math::exp(x - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::ForeignVar);
        }
        Ok(v.index())
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        let index = self.nodes.len() as u32;
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn ng(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.index()].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape().len() != 2 || y.shape().len() != 2 || x.cols() != y.rows() {
            return Err(mismatch("matmul", x, y));
        }
        let (m, k, n) = (x.rows(), x.cols(), y.cols());
        let out = Array::from_parts(vec![m, n], matmul_nn(x.data(), y.data(), m, k, n));
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, Op::MatMul(ia, ib), ng))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (x, y) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if x.shape() != y.shape() {
            return Err(mismatch(name, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Array::from_parts(x.shape().to_vec(), data);
        let ng = self.ng(&[ia, ib]);
        Ok(self.push(out, op(ia, ib), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |p, q| p + q, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |p, q| p - q, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |p, q| p * q, Op::Mul)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(f);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, op(ia), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.map(|v| v * c);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Scale(ia, c), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    /// Logistic function.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::sigmoid, Op::Sigmoid)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        if self.nodes[ia].value.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::NonFinite(format!(
                "log of non-positive value in array of shape {:?}",
                self.nodes[ia].value.shape()
            )));
        }
        self.unary(a, math::ln, Op::Log)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, math::exp, Op::Exp)
    }

    fn rowwise(&mut self, a: Var, log: bool) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let (r, c) = as_matrix(x);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let out = &mut data[i * c..(i + 1) * c];
            if log {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + math::ln(row.iter().map(|&v| math::exp(v - max)).sum::<f64>());
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = v - lse;
                }
            } else {
                softmax_row(row, out);
            }
        }
        let out = Array::from_parts(x.shape().to_vec(), data);
        let ng = self.ng(&[ia]);
        let op = if log {
            Op::LogSoftmaxRows(ia)
        } else {
            Op::SoftmaxRows(ia)
        };
        Ok(self.push(out, op, ng))
    }

    /// Softmax over the last axis of a matrix (or over a vector).
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, false)
    }

    /// Log-softmax over the last axis; stable where `log(softmax(x))` is not.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.rowwise(a, true)
    }

    /// Row lookup: `out[i] = table[index[i]]`.
    pub fn gather_rows(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let it = self.idx(table)?;
        let t = &self.nodes[it].value;
        if t.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        let (rows, c) = as_matrix(t);
        let mut data = Vec::with_capacity(index.len() * c);
        for &r in index {
            if r >= rows {
                return Err(Error::ShapeMismatch {
                    op: "gather_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![r],
                });
            }
            data.extend_from_slice(t.row(r));
        }
        let out = Array::from_parts(vec![index.len(), c], data);
        let ng = self.ng(&[it]);
        Ok(self.push(out, Op::GatherRows(it, index.to_vec()), ng))
    }

    /// Mean of all elements, as a one-element array.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let m = x.data().iter().sum::<f64>() / x.len() as f64;
        let ng = self.ng(&[ia]);
        Ok(self.push(Array::scalar(m), Op::Mean(ia), ng))
    }

    /// Sum of all elements, as a one-element array.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.nodes[ia].value.data().iter().sum::<f64>();
        let ng = self.ng(&[ia]);
        Ok(self.push(Array::scalar(s), Op::Sum(ia), ng))
    }

    /// Concatenate matrices along `axis` (0 stacks rows, 1 joins columns).
    /// Vectors concatenate along axis 0.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = match idx.first() {
            Some(&i) => &self.nodes[i].value,
            None => return Err(Error::Contract("concat of zero arrays".into())),
        };
        let rank = first.shape().len();
        for &i in &idx[1..] {
            let other = &self.nodes[i].value;
            let ok = match (rank, axis) {
                (1, 0) => other.shape().len() == 1,
                (2, 0) => other.shape().len() == 2 && other.cols() == first.cols(),
                (2, 1) => other.shape().len() == 2 && other.rows() == first.rows(),
                _ => false,
            };
            if !ok {
                return Err(mismatch("concat", first, other));
            }
        }
        if !matches!((rank, axis), (1, 0) | (2, 0) | (2, 1)) {
            return Err(mismatch("concat", first, first));
        }
        let out = if axis == 0 {
            let mut data = Vec::new();
            let mut rows = 0;
            for &i in &idx {
                let v = &self.nodes[i].value;
                data.extend_from_slice(v.data());
                rows += if rank == 1 { v.len() } else { v.rows() };
            }
            let shape = if rank == 1 {
                vec![rows]
            } else {
                vec![rows, first.cols()]
            };
            Array::from_parts(shape, data)
        } else {
            let r = first.rows();
            let total: usize = idx.iter().map(|&i| self.nodes[i].value.cols()).sum();
            let mut data = Vec::with_capacity(r * total);
            for row in 0..r {
                for &i in &idx {
                    data.extend_from_slice(self.nodes[i].value.row(row));
                }
            }
            Array::from_parts(vec![r, total], data)
        };
        let ng = self.ng(&idx);
        Ok(self.push(out, Op::Concat(idx, axis), ng))
    }

    /// Contiguous slice `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        let rank = x.shape().len();
        let extent = match (rank, axis) {
            (1, 0) => x.len(),
            (2, 0) => x.rows(),
            (2, 1) => x.cols(),
            _ => 0,
        };
        if extent == 0 || start + len > extent {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: x.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let out = match (rank, axis) {
            (1, _) => Array::from_parts(vec![len], x.data()[start..start + len].to_vec()),
            (_, 0) => {
                let c = x.cols();
                Array::from_parts(vec![len, c], x.data()[start * c..(start + len) * c].to_vec())
            }
            _ => {
                let mut data = Vec::with_capacity(x.rows() * len);
                for r in 0..x.rows() {
                    data.extend_from_slice(&x.row(r)[start..start + len]);
                }
                Array::from_parts(vec![x.rows(), len], data)
            }
        };
        let ng = self.ng(&[ia]);
        Ok(self.push(
            out,
            Op::Slice {
                input: ia,
                axis,
                start,
                len,
            },
            ng,
        ))
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let out = self.nodes[ia].value.clone();
        Ok(self.push(out, Op::Detach(ia), false))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if x.shape().len() != 2 {
            return Err(mismatch("transpose", x, x));
        }
        let (r, c) = (x.rows(), x.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        let ng = self.ng(&[ia]);
        Ok(self.push(Array::from_parts(vec![c, r], data), Op::Transpose(ia), ng))
    }

    /// Widen a one-element array to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ia = self.idx(a)?;
        let x = &self.nodes[ia].value;
        if !x.is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "expand",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Array::full(shape, x.data()[0]);
        let ng = self.ng(&[ia]);
        Ok(self.push(out, Op::Expand(ia), ng))
    }

    /// `Σ_k weights[i_k] · term_k` for terms given as `(i_k, term_k)`, where
    /// `weights` is a vector. All terms share `shape`; no terms gives zeros.
    pub fn weighted_sum(&mut self, weights: Var, terms: &[(usize, Var)], shape: &[usize]) -> Result<Var> {
        let iw = self.idx(weights)?;
        let w = &self.nodes[iw].value;
        if w.shape().len() != 1 {
            return Err(mismatch("weighted_sum", w, w));
        }
        let mut resolved = Vec::with_capacity(terms.len());
        let mut out = vec![0.0; shape.iter().product()];
        for &(i, t) in terms {
            let it = self.idx(t)?;
            let tv = &self.nodes[it].value;
            if tv.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: shape.to_vec(),
                    rhs: tv.shape().to_vec(),
                });
            }
            if i >= w.len() {
                return Err(Error::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: w.shape().to_vec(),
                    rhs: vec![i],
                });
            }
            let g = w.data()[i];
            for (o, &x) in out.iter_mut().zip(tv.data()) {
                *o += g * x;
            }
            resolved.push((i, it));
        }
        let mut inputs: Vec<usize> = resolved.iter().map(|&(_, t)| t).collect();
        inputs.push(iw);
        let ng = self.ng(&inputs);
        Ok(self.push(
            Array::from_parts(shape.to_vec(), out),
            Op::WeightedSum {
                weights: iw,
                terms: resolved,
            },
            ng,
        ))
    }

    /// Causally masked softmax attention, independently within each segment
    /// `(start_row, len)`: row `i` of a segment attends to rows `0..=i` of the
    /// same segment. Segments must tile the rows exactly.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        scale: f64,
    ) -> Result<Var> {
        let (iq, ik, iv) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let (qa, ka, va) = (
            &self.nodes[iq].value,
            &self.nodes[ik].value,
            &self.nodes[iv].value,
        );
        if qa.shape().len() != 2 || qa.shape() != ka.shape() {
            return Err(mismatch("causal_attention", qa, ka));
        }
        if va.shape().len() != 2 || va.rows() != qa.rows() {
            return Err(mismatch("causal_attention", qa, va));
        }
        let mut covered = 0;
        for &(s, l) in segments {
            if s != covered || l == 0 {
                return Err(Error::Contract(format!(
                    "attention segments must tile rows contiguously; bad segment ({s}, {l})"
                )));
            }
            covered += l;
        }
        if covered != qa.rows() {
            return Err(Error::Contract(format!(
                "attention segments cover {covered} rows of {}",
                qa.rows()
            )));
        }
        let dk = qa.cols();
        let dv = va.cols();
        let mut out = vec![0.0; qa.rows() * dv];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for &(s, l) in segments {
            for i in 0..l {
                let qi = &qa.data()[(s + i) * dk..(s + i + 1) * dk];
                scores.clear();
                for j in 0..=i {
                    let kj = &ka.data()[(s + j) * dk..(s + j + 1) * dk];
                    scores.push(scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>());
                }
                let base = probs.len();
                probs.resize(base + i + 1, 0.0);
                softmax_row(&scores, &mut probs[base..]);
                let orow = &mut out[(s + i) * dv..(s + i + 1) * dv];
                for j in 0..=i {
                    let p = probs[base + j];
                    let vj = &va.data()[(s + j) * dv..(s + j + 1) * dv];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
        let out = Array::from_parts(vec![qa.rows(), dv], out);
        let ng = self.ng(&[iq, ik, iv]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q: iq,
                k: ik,
                v: iv,
                segments: segments.to_vec(),
                scale,
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a one-element loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let il = self.idx(loss)?;
        let value = &self.nodes[il].value;
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        self.vjp(loss, &Array::full(value.shape(), 1.0))
    }

    /// Vector-Jacobian product: propagate `cotangent` (shaped like `output`)
    /// back through the tape.
    pub fn vjp(&self, output: Var, cotangent: &Array) -> Result<Gradients> {
        let io = self.idx(output)?;
        if self.nodes[io].value.shape() != cotangent.shape() {
            return Err(mismatch("vjp", &self.nodes[io].value, cotangent));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; io + 1];
        grads[io] = Some(cotangent.data().to_vec());
        for i in (0..=io).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].needs_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut out: Vec<Option<Array>> = Vec::with_capacity(self.nodes.len());
        let mut shapes = Vec::with_capacity(self.nodes.len());
        let mut leaves = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            shapes.push(node.value.shape().to_vec());
            leaves.push(matches!(node.op, Op::Leaf));
            let g = grads
                .get_mut(i)
                .and_then(Option::take)
                .filter(|_| node.needs_grad)
                .map(|d| Array::from_parts(node.value.shape().to_vec(), d));
            out.push(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads: out,
            shapes,
            leaves,
        })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = node.value.data();
        let acc = |j: usize, delta: &[f64], grads: &mut [Option<Vec<f64>>]| {
            if !self.nodes[j].needs_grad {
                return;
            }
            match &mut grads[j] {
                Some(existing) => {
                    for (e, d) in existing.iter_mut().zip(delta) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta.to_vec()),
            }
        };
        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                if self.nodes[*a].needs_grad {
                    acc(*a, &matmul_nt(g, y.data(), m, n, k), grads);
                }
                if self.nodes[*b].needs_grad {
                    acc(*b, &matmul_tn(x.data(), g, m, k, n), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g, grads);
                acc(*b, g, grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g, grads);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                acc(*b, &neg, grads);
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                let da: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.iter().zip(x).map(|(g, x)| g * x).collect();
                acc(*a, &da, grads);
                acc(*b, &db, grads);
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = g.iter().map(|g| g * c).collect();
                acc(*a, &d, grads);
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let d: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*a, &d, grads);
            }
            Op::Sigmoid(a) => {
                let d: Vec<f64> = g.iter().zip(val).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*a, &d, grads);
            }
            Op::Log(a) => {
                let x = self.nodes[*a].value.data();
                let d: Vec<f64> = g.iter().zip(x).map(|(g, x)| g / x).collect();
                acc(*a, &d, grads);
            }
            Op::Exp(a) => {
                let d: Vec<f64> = g.iter().zip(val).map(|(g, y)| g * y).collect();
                acc(*a, &d, grads);
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = as_matrix(&node.value);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &val[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d[i * c + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(*a, &d, grads);
            }
            Op::LogSoftmaxRows(a) => {
                let (r, c) = as_matrix(&node.value);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    let y = &val[i * c..(i + 1) * c];
                    let gy = &g[i * c..(i + 1) * c];
                    let total: f64 = gy.iter().sum();
                    for j in 0..c {
                        d[i * c + j] = gy[j] - math::exp(y[j]) * total;
                    }
                }
                acc(*a, &d, grads);
            }
            Op::GatherRows(t, index) => {
                let table = &self.nodes[*t].value;
                let c = table.cols();
                let mut d = vec![0.0; table.len()];
                for (i, &r) in index.iter().enumerate() {
                    for j in 0..c {
                        d[r * c + j] += g[i * c + j];
                    }
                }
                acc(*t, &d, grads);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let d = vec![g[0] / n as f64; n];
                acc(*a, &d, grads);
            }
            Op::Sum(a) => {
                let n = self.nodes[*a].value.len();
                let d = vec![g[0]; n];
                acc(*a, &d, grads);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        acc(p, &g[offset..offset + n], grads);
                        offset += n;
                    }
                } else {
                    let r = node.value.rows();
                    let total = node.value.cols();
                    let mut col = 0;
                    for &p in parts {
                        let c = self.nodes[p].value.cols();
                        let mut d = Vec::with_capacity(r * c);
                        for row in 0..r {
                            d.extend_from_slice(&g[row * total + col..row * total + col + c]);
                        }
                        acc(p, &d, grads);
                        col += c;
                    }
                }
            }
            Op::Slice {
                input,
                axis,
                start,
                len,
            } => {
                let x = &self.nodes[*input].value;
                let mut d = vec![0.0; x.len()];
                if x.shape().len() == 1 {
                    d[*start..*start + *len].copy_from_slice(g);
                } else if *axis == 0 {
                    let c = x.cols();
                    d[*start * c..(*start + *len) * c].copy_from_slice(g);
                } else {
                    let c = x.cols();
                    for row in 0..x.rows() {
                        d[row * c + *start..row * c + *start + *len]
                            .copy_from_slice(&g[row * *len..(row + 1) * *len]);
                    }
                }
                acc(*input, &d, grads);
            }
            Op::Transpose(a) => {
                let (r, c) = as_matrix(&node.value);
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                acc(*a, &d, grads);
            }
            Op::Expand(a) => {
                let total: f64 = g.iter().sum();
                acc(*a, &[total], grads);
            }
            Op::WeightedSum { weights, terms } => {
                let w = self.nodes[*weights].value.data();
                let mut dw = vec![0.0; w.len()];
                for &(i, t) in terms {
                    if self.nodes[t].needs_grad {
                        let d: Vec<f64> = g.iter().map(|g| g * w[i]).collect();
                        acc(t, &d, grads);
                    }
                    if self.nodes[*weights].needs_grad {
                        let x = self.nodes[t].value.data();
                        dw[i] += g.iter().zip(x).map(|(g, x)| g * x).sum::<f64>();
                    }
                }
                acc(*weights, &dw, grads);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                segments,
                scale,
                probs,
            } => {
                let (qa, ka, va) = (
                    &self.nodes[*q].value,
                    &self.nodes[*k].value,
                    &self.nodes[*v].value,
                );
                let dk = qa.cols();
                let dv = va.cols();
                let mut dq = vec![0.0; qa.len()];
                let mut dkk = vec![0.0; ka.len()];
                let mut dvv = vec![0.0; va.len()];
                let mut dp = Vec::new();
                let mut base = 0;
                for &(s, l) in segments {
                    for i in 0..l {
                        let p = &probs[base..base + i + 1];
                        let go = &g[(s + i) * dv..(s + i + 1) * dv];
                        dp.clear();
                        for j in 0..=i {
                            let vj = &va.data()[(s + j) * dv..(s + j + 1) * dv];
                            dp.push(go.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                            let dvj = &mut dvv[(s + j) * dv..(s + j + 1) * dv];
                            for (d, &x) in dvj.iter_mut().zip(go) {
                                *d += p[j] * x;
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qi = &qa.data()[(s + i) * dk..(s + i + 1) * dk];
                        for j in 0..=i {
                            let ds = p[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kj = &ka.data()[(s + j) * dk..(s + j + 1) * dk];
                            let dqi = &mut dq[(s + i) * dk..(s + i + 1) * dk];
                            for (d, &x) in dqi.iter_mut().zip(kj) {
                                *d += ds * x;
                            }
                            let dkj = &mut dkk[(s + j) * dk..(s + j + 1) * dk];
                            for (d, &x) in dkj.iter_mut().zip(qi) {
                                *d += ds * x;
                            }
                        }
                        base += i + 1;
                    }
                }
                acc(*q, &dq, grads);
                acc(*k, &dkk, grads);
                acc(*v, &dvv, grads);
            }
        }
    }

    /// Re-evaluate every recorded operation from the leaf and constant values.
    /// The result matches the recorded values bit for bit.
    pub fn replay(&self) -> Result<Vec<Array>> {
        let mut fresh = Tape::new();
        let mut map: Vec<Var> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let m = |i: usize| map[i];
            let v = match &node.op {
                Op::Leaf => fresh.leaf(node.value.clone()),
                Op::Constant => fresh.constant(node.value.clone()),
                Op::MatMul(a, b) => fresh.matmul(m(*a), m(*b))?,
                Op::Add(a, b) => fresh.add(m(*a), m(*b))?,
                Op::Sub(a, b) => fresh.sub(m(*a), m(*b))?,
                Op::Mul(a, b) => fresh.mul(m(*a), m(*b))?,
                Op::Scale(a, c) => fresh.scale(m(*a), *c)?,
                Op::Relu(a) => fresh.relu(m(*a))?,
                Op::Sigmoid(a) => fresh.sigmoid(m(*a))?,
                Op::Log(a) => fresh.log(m(*a))?,
                Op::Exp(a) => fresh.exp(m(*a))?,
                Op::SoftmaxRows(a) => fresh.softmax_rows(m(*a))?,
                Op::LogSoftmaxRows(a) => fresh.log_softmax_rows(m(*a))?,
                Op::GatherRows(t, index) => fresh.gather_rows(m(*t), index)?,
                Op::Mean(a) => fresh.mean(m(*a))?,
                Op::Sum(a) => fresh.sum(m(*a))?,
                Op::Concat(parts, axis) => {
                    let ps: Vec<Var> = parts.iter().map(|&p| m(p)).collect();
                    fresh.concat(&ps, *axis)?
                }
                Op::Slice {
                    input,
                    axis,
                    start,
                    len,
                } => fresh.slice(m(*input), *axis, *start, *len)?,
                Op::Detach(a) => fresh.detach(m(*a))?,
                Op::Transpose(a) => fresh.transpose(m(*a))?,
                Op::Expand(a) => fresh.expand(m(*a), node.value.shape())?,
                Op::WeightedSum { weights, terms } => {
                    let ts: Vec<(usize, Var)> = terms.iter().map(|&(i, t)| (i, m(t))).collect();
                    fresh.weighted_sum(m(*weights), &ts, node.value.shape())?
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    segments,
                    scale,
                    ..
                } => fresh.causal_attention(m(*q), m(*k), m(*v), segments, *scale)?,
            };
            map.push(v);
        }
        Ok(fresh.nodes.into_iter().map(|n| n.value).collect())
    }

    /// Recorded values in recording order.
    pub fn values(&self) -> impl Iterator<Item = &Array> {
        self.nodes.iter().map(|n| &n.value)
    }
}

/// Compare the tape gradient of a scalar function against central finite
/// differences.
///
/// `f` builds a one-element output on the given tape from its input variable.
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Array, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: Array| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point);
        let out = f(&mut tape, v)?;
        let value = tape.value(out);
        if !value.is_scalar() {
            return Err(Error::NonScalarLoss(value.shape().to_vec()));
        }
        let y = value.data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite(format!("function value {y}")));
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let input = tape.leaf(x.clone());
    let out = f(&mut tape, input)?;
    if !tape.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("function value at x".into()));
    }
    let analytic = tape.backward(out)?.wrt(input)?;

    let mut worst = 0.0_f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let err = math::abs(analytic.data()[i] - numeric) / f64::max(1.0, math::abs(numeric));
        worst = worst.max(err);
    }
    Ok(worst)
}
