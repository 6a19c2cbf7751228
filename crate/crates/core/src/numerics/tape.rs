//! Reverse-mode differentiation record.
//!
//! Every operation appends a node holding its output value and the handles of
//! its inputs, so node order is a topological order and `backward` simply walks
//! the record in reverse.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::numerics::{ParamId, ParamSet, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Sum(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    MaskRows {
        x: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    PairGather {
        table: Var,
        labels: Vec<usize>,
        by_column: bool,
    },
    PairScatter {
        weights: Var,
        labels: Vec<usize>,
    },
    BilinearPairs {
        left: Var,
        right: Var,
        blocks: usize,
    },
    OuterAdd {
        rows: Var,
        cols: Var,
        bias: Var,
    },
    SelectSum {
        x: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Constant | Op::Param => Vec::new(),
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Sum(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Gelu(a) => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::GatherRows { table, .. } => vec![*table],
            Op::MaskRows { x, .. } | Op::SliceCols { x, .. } | Op::SelectSum { x, .. } => vec![*x],
            Op::ConcatCols(parts) => parts.clone(),
            Op::PairGather { table, .. } => vec![*table],
            Op::PairScatter { weights, .. } => vec![*weights],
            Op::BilinearPairs { left, right, .. } => vec![*left, *right],
            Op::OuterAdd { rows, cols, bias } => vec![*rows, *cols, *bias],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// The differentiation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Records a parameter; repeated calls return the same handle. Frozen
    /// parameters are recorded as constants.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = params.get(id);
        let v = if p.trainable {
            self.push(p.value.clone(), Op::Param)
        } else {
            self.push(p.value.clone(), Op::Constant)
        };
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::InvalidArgument("transpose needs a matrix".into()));
        }
        let t = ta.transpose2();
        Ok(self.push(t, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Scale(a, factor))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let d = tx.last_dim();
        if tb.len() != d || tb.rank() != 1 {
            return Err(mismatch("add_bias", tx, tb));
        }
        let data = tx
            .data()
            .chunks(d.max(1))
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Softmax over the last axis with row-max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 || ta.rank() == 0 {
            return Err(Error::InvalidArgument("softmax over an empty axis".into()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax(a)))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = ta.last_dim();
        if d == 0 || ta.rank() == 0 {
            return Err(Error::InvalidArgument("log_softmax over an empty axis".into()));
        }
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax(a)))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d == 0 || tx.rank() == 0 {
            return Err(Error::InvalidArgument("layer_norm with d == 0".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument("layer_norm eps must be positive".into()));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx, tg));
        }
        let rows = tx.len() / d;
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / libm::sqrt(var + eps);
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let data = ta
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + libm::tanh(GELU_C * (x + GELU_A * x * x * x))))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        self.push(t, Op::Gelu(a))
    }

    /// Row lookup: `out[r] = table[indices[r]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::InvalidArgument("gather_rows needs a matrix".into()));
        }
        let (rows, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(&tt.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![indices.len(), d], out)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Zeroes the listed rows of a matrix; those rows receive no gradient.
    pub fn mask_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::InvalidArgument("mask_rows needs a matrix".into()));
        }
        let d = tx.shape()[1];
        let mut out = tx.data().to_vec();
        for &r in rows {
            if r >= tx.shape()[0] {
                return Err(Error::OutOfRange {
                    what: "row",
                    index: r,
                    bound: tx.shape()[0],
                });
            }
            out[r * d..(r + 1) * d].fill(0.0);
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::MaskRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape()[1] {
            return Err(Error::InvalidArgument(alloc::format!(
                "slice_cols {}..{} of shape {:?}",
                start,
                start + len,
                tx.shape()
            )));
        }
        let (n, c) = (tx.shape()[0], tx.shape()[1]);
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&tx.data()[r * c + start..r * c + start + len]);
        }
        let t = Tensor::new(vec![n, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let n = self.value(*first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            if tp.rank() != 2 || tp.shape()[0] != n {
                return Err(mismatch("concat_cols", self.value(*first), tp));
            }
            widths.push(tp.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![n, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Pairwise lookup into a per-node label table. With `table` of shape
    /// `n×L` and `labels` an `n×n` row-major label matrix,
    /// `out[i][j] = table[i][labels[i][j]]`, or `table[j][labels[i][j]]` when
    /// `by_column` is set.
    pub fn pair_gather(&mut self, table: Var, labels: &[usize], by_column: bool) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::InvalidArgument("pair_gather needs a matrix".into()));
        }
        let (n, l) = (tt.shape()[0], tt.shape()[1]);
        if labels.len() != n * n {
            return Err(Error::ShapeMismatch {
                op: "pair_gather",
                left: tt.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        check_labels(labels, l)?;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let lab = labels[i * n + j];
                let owner = if by_column { j } else { i };
                out[i * n + j] = tt.data()[owner * l + lab];
            }
        }
        let t = Tensor::new(vec![n, n], out)?;
        Ok(self.push(
            t,
            Op::PairGather {
                table,
                labels: labels.to_vec(),
                by_column,
            },
        ))
    }

    /// Sums pairwise weights by label: `out[i][l] = Σ_j w[i][j]·[labels[i][j] == l]`.
    pub fn pair_scatter(&mut self, weights: Var, labels: &[usize], num_labels: usize) -> Result<Var> {
        let tw = self.value(weights);
        if tw.rank() != 2 || tw.shape()[0] != tw.shape()[1] || labels.len() != tw.len() {
            return Err(Error::ShapeMismatch {
                op: "pair_scatter",
                left: tw.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        check_labels(labels, num_labels)?;
        let n = tw.shape()[0];
        let mut out = vec![0.0; n * num_labels];
        for i in 0..n {
            for j in 0..n {
                out[i * num_labels + labels[i * n + j]] += tw.data()[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, num_labels], out)?;
        Ok(self.push(
            t,
            Op::PairScatter {
                weights,
                labels: labels.to_vec(),
            },
        ))
    }

    /// Blockwise bilinear pairing. `left` is `n×(B·e)`, `right` is `m×e`;
    /// `out[i][j][b] = Σ_k left[i][b·e + k] · right[j][k]`.
    pub fn bilinear_pairs(&mut self, left: Var, right: Var, blocks: usize) -> Result<Var> {
        let (tl, tr) = (self.value(left), self.value(right));
        if tl.rank() != 2 || tr.rank() != 2 || blocks == 0 || tl.shape()[1] != blocks * tr.shape()[1]
        {
            return Err(mismatch("bilinear_pairs", tl, tr));
        }
        let (n, m, e) = (tl.shape()[0], tr.shape()[0], tr.shape()[1]);
        let mut out = vec![0.0; n * m * blocks];
        for i in 0..n {
            let lrow = &tl.data()[i * blocks * e..(i + 1) * blocks * e];
            for j in 0..m {
                let rrow = &tr.data()[j * e..(j + 1) * e];
                let cell = &mut out[(i * m + j) * blocks..(i * m + j + 1) * blocks];
                for (b, c) in cell.iter_mut().enumerate() {
                    *c = lrow[b * e..(b + 1) * e]
                        .iter()
                        .zip(rrow)
                        .map(|(x, y)| x * y)
                        .sum();
                }
            }
        }
        let t = Tensor::new(vec![n, m, blocks], out)?;
        Ok(self.push(t, Op::BilinearPairs { left, right, blocks }))
    }

    /// `out[i][j][l] = rows[i][l] + cols[j][l] + bias[l]`.
    pub fn outer_add(&mut self, rows: Var, cols: Var, bias: Var) -> Result<Var> {
        let (tr, tc, tb) = (self.value(rows), self.value(cols), self.value(bias));
        if tr.rank() != 2 || tc.rank() != 2 || tr.shape()[1] != tc.shape()[1] {
            return Err(mismatch("outer_add", tr, tc));
        }
        let l = tr.shape()[1];
        if tb.shape() != [l] {
            return Err(mismatch("outer_add", tr, tb));
        }
        let (n, m) = (tr.shape()[0], tc.shape()[0]);
        let mut out = vec![0.0; n * m * l];
        for i in 0..n {
            for j in 0..m {
                for k in 0..l {
                    out[(i * m + j) * l + k] =
                        tr.data()[i * l + k] + tc.data()[j * l + k] + tb.data()[k];
                }
            }
        }
        let t = Tensor::new(vec![n, m, l], out)?;
        Ok(self.push(t, Op::OuterAdd { rows, cols, bias }))
    }

    /// Sum of the entries at the given flat indices (repeats count twice).
    pub fn select_sum(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let mut s = 0.0;
        for &i in indices {
            if i >= tx.len() {
                return Err(Error::OutOfRange {
                    what: "element",
                    index: i,
                    bound: tx.len(),
                });
            }
            s += tx.data()[i];
        }
        Ok(self.push(
            Tensor::scalar(s),
            Op::SelectSum {
                x,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lt.shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into
    /// `params`. Every parameter ends with a gradient buffer; parameters not
    /// reached from `loss` get zeros.
    pub fn backward_into(&self, loss: Var, params: &mut ParamSet) -> Result<()> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                if matches!(self.nodes[v.0].op, Op::Param) {
                    params.accumulate_grad(id, g);
                }
            }
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            if params.grad(id).is_none() {
                let z = Tensor::zeros(params.value(id).shape());
                params.accumulate_grad(id, &z);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let ga = self.grad_buf(*a, grads);
                    gemm_nt_acc(gd, tb.data(), ga, m, n, k);
                }
                if self.wants(*b) {
                    let gb = self.grad_buf(*b, grads);
                    gemm_tn_acc(ta.data(), gd, gb, m, k, n);
                }
            }
            Op::Transpose(a) => {
                let ga = g.transpose2();
                self.grad_buf(*a, grads)
                    .iter_mut()
                    .zip(ga.data())
                    .for_each(|(o, v)| *o += v);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        add_into(self.grad_buf(v, grads), gd);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    for ((o, gv), bv) in self.grad_buf(*a, grads).iter_mut().zip(gd).zip(tb) {
                        *o += gv * bv;
                    }
                }
                if self.wants(*b) {
                    for ((o, gv), av) in self.grad_buf(*b, grads).iter_mut().zip(gd).zip(ta) {
                        *o += gv * av;
                    }
                }
            }
            Op::Scale(a, f) => {
                for (o, gv) in self.grad_buf(*a, grads).iter_mut().zip(gd) {
                    *o += gv * f;
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    add_into(self.grad_buf(*x, grads), gd);
                }
                if self.wants(*b) {
                    let d = self.value(*b).len();
                    let gb = self.grad_buf(*b, grads);
                    for row in gd.chunks(d.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            Op::Sum(a) => {
                let s = gd[0];
                for o in self.grad_buf(*a, grads).iter_mut() {
                    *o += s;
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let ga = self.grad_buf(*a, grads);
                for ((grow, yrow), orow) in gd.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += y * (g - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let ga = self.grad_buf(*a, grads);
                for ((grow, yrow), orow) in gd.chunks(d).zip(y.chunks(d)).zip(ga.chunks_mut(d)) {
                    let total: f64 = grow.iter().sum();
                    for ((o, g), y) in orow.iter_mut().zip(grow).zip(yrow) {
                        *o += g - libm::exp(*y) * total;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gain_v = self.value(*gain).data().to_vec();
                if self.wants(*gain) {
                    let gg = self.grad_buf(*gain, grads);
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += grow[c] * hrow[c];
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = self.grad_buf(*bias, grads);
                    for grow in gd.chunks(d) {
                        add_into(gb, grow);
                    }
                }
                if self.wants(*x) {
                    let gx = self.grad_buf(*x, grads);
                    let mut dxhat = vec![0.0; d];
                    for (r, ((grow, hrow), orow)) in gd
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for c in 0..d {
                            dxhat[c] = grow[c] * gain_v[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            orow[c] += rstd[r] * (dxhat[c] - mean_d - hrow[c] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xs = self.value(*a).data();
                let ga = self.grad_buf(*a, grads);
                for ((o, gv), &x) in ga.iter_mut().zip(gd).zip(xs) {
                    let t = libm::tanh(GELU_C * (x + GELU_A * x * x * x));
                    let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                    *o += gv * (0.5 * (1.0 + t) + 0.5 * x * dt);
                }
            }
            Op::GatherRows { table, indices } => {
                let d = self.value(*table).shape()[1];
                let gt = self.grad_buf(*table, grads);
                for (r, &i) in indices.iter().enumerate() {
                    add_into(&mut gt[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d]);
                }
            }
            Op::MaskRows { x, rows } => {
                let d = node.value.shape()[1];
                let mut masked = gd.to_vec();
                for &r in rows {
                    masked[r * d..(r + 1) * d].fill(0.0);
                }
                add_into(self.grad_buf(*x, grads), &masked);
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).shape()[1];
                let len = node.value.shape()[1];
                let gx = self.grad_buf(*x, grads);
                for (r, grow) in gd.chunks(len.max(1)).enumerate() {
                    add_into(&mut gx[r * c + start..r * c + start + len], grow);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.wants(p) {
                        let gp = self.grad_buf(p, grads);
                        for (r, orow) in gp.chunks_mut(w.max(1)).enumerate() {
                            add_into(orow, &gd[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::PairGather {
                table,
                labels,
                by_column,
            } => {
                let l = self.value(*table).shape()[1];
                let n = node.value.shape()[0];
                let gt = self.grad_buf(*table, grads);
                for i in 0..n {
                    for j in 0..n {
                        let owner = if *by_column { j } else { i };
                        gt[owner * l + labels[i * n + j]] += gd[i * n + j];
                    }
                }
            }
            Op::PairScatter { weights, labels } => {
                let n = self.value(*weights).shape()[0];
                let l = node.value.shape()[1];
                let gw = self.grad_buf(*weights, grads);
                for i in 0..n {
                    for j in 0..n {
                        gw[i * n + j] += gd[i * l + labels[i * n + j]];
                    }
                }
            }
            Op::BilinearPairs {
                left,
                right,
                blocks,
            } => {
                let (tl, tr) = (self.value(*left), self.value(*right));
                let (n, m, e) = (tl.shape()[0], tr.shape()[0], tr.shape()[1]);
                let b = *blocks;
                if self.wants(*left) {
                    let gl = self.grad_buf(*left, grads);
                    for i in 0..n {
                        for j in 0..m {
                            let rrow = &tr.data()[j * e..(j + 1) * e];
                            for k in 0..b {
                                let gv = gd[(i * m + j) * b + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                let base = i * b * e + k * e;
                                for (o, r) in gl[base..base + e].iter_mut().zip(rrow) {
                                    *o += gv * r;
                                }
                            }
                        }
                    }
                }
                if self.wants(*right) {
                    let gr = self.grad_buf(*right, grads);
                    for i in 0..n {
                        let lrow = &tl.data()[i * b * e..(i + 1) * b * e];
                        for j in 0..m {
                            let orow = &mut gr[j * e..(j + 1) * e];
                            for k in 0..b {
                                let gv = gd[(i * m + j) * b + k];
                                if gv == 0.0 {
                                    continue;
                                }
                                for (o, lv) in orow.iter_mut().zip(&lrow[k * e..(k + 1) * e]) {
                                    *o += gv * lv;
                                }
                            }
                        }
                    }
                }
            }
            Op::OuterAdd { rows, cols, bias } => {
                let (n, m, l) = (node.value.shape()[0], node.value.shape()[1], node.value.shape()[2]);
                if self.wants(*rows) {
                    let gr = self.grad_buf(*rows, grads);
                    for i in 0..n {
                        for j in 0..m {
                            let base = (i * m + j) * l;
                            add_into(&mut gr[i * l..(i + 1) * l], &gd[base..base + l]);
                        }
                    }
                }
                if self.wants(*cols) {
                    let gc = self.grad_buf(*cols, grads);
                    for i in 0..n {
                        for j in 0..m {
                            let base = (i * m + j) * l;
                            add_into(&mut gc[j * l..(j + 1) * l], &gd[base..base + l]);
                        }
                    }
                }
                if self.wants(*bias) {
                    let gb = self.grad_buf(*bias, grads);
                    for cell in gd.chunks(l.max(1)) {
                        add_into(gb, cell);
                    }
                }
            }
            Op::SelectSum { x, indices } => {
                let s = gd[0];
                let gx = self.grad_buf(*x, grads);
                for &i in indices {
                    gx[i] += s;
                }
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Tensor>]) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()))
            .data_mut()
    }
}

fn add_into(out: &mut [f64], src: &[f64]) {
    for (o, s) in out.iter_mut().zip(src) {
        *o += s;
    }
}

fn check_labels(labels: &[usize], bound: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= bound) {
        Some(&l) => Err(Error::OutOfRange {
            what: "label",
            index: l,
            bound,
        }),
        None => Ok(()),
    }
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
