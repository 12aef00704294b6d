//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! The tape records the ops of one forward pass; [`Var::backward`]
//! walks the record in reverse and accumulates gradients for every
//! node. Only the ops the decoder needs are implemented. Backward
//! math uses the same fixed-order tensor kernels as forward, so a
//! whole training step is bit-reproducible.

use std::cell::RefCell;
use std::rc::Rc;

use super::tensor::Tensor;
use super::Real;
use crate::error::{Error, Result};

enum Op {
    Leaf,
    Add(usize, usize),
    Scale(usize, Real),
    /// out[r][c] = a[r][c] + b[0][c]
    AddRowBroadcast(usize, usize),
    Matmul(usize, usize),
    /// a * b^T
    MatmulNt(usize, usize),
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    /// Each source row repeated `times` times, preserving order.
    RepeatRows {
        src: usize,
        times: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        src: usize,
        lo: usize,
    },
    SliceCols {
        src: usize,
        lo: usize,
    },
    SoftmaxRows(usize),
    /// Mean over rows of -log softmax(row)[target].
    SoftmaxCrossEntropy {
        logits: usize,
        targets: Vec<usize>,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: Real,
    },
    Gelu(usize),
    /// out[r][b*block + t] = scores[r][b*block + t] + bias[b][0]
    AddPatchBias {
        scores: usize,
        bias: usize,
        block: usize,
    },
    /// Scalar sum(src .* weights) with constant weights.
    WeightedSum {
        src: usize,
        weights: Tensor,
    },
}

struct TapeInner {
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    ops: Vec<Op>,
    wants_grad: Vec<bool>,
}

impl TapeInner {
    fn push(&mut self, value: Tensor, op: Op, wants_grad: bool) -> usize {
        let id = self.values.len();
        self.values.push(value);
        self.ops.push(op);
        self.wants_grad.push(wants_grad);
        id
    }

    fn backward(&mut self, out: usize, seed: Real) {
        self.grads = self
            .values
            .iter()
            .map(|v| Tensor::zeros(v.rows(), v.cols()))
            .collect();
        self.grads[out].data_mut()[0] = seed;

        let TapeInner {
            values,
            grads,
            ops,
            wants_grad: _,
        } = self;

        for (i, op) in ops.iter().enumerate().rev() {
            let go = grads[i].clone();
            if go.data().iter().all(|v| *v == 0.0) {
                continue;
            }
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[*a].add_assign(&go);
                    grads[*b].add_assign(&go);
                }
                Op::Scale(a, s) => {
                    grads[*a].add_assign_scaled(&go, *s);
                }
                Op::AddRowBroadcast(a, b) => {
                    grads[*a].add_assign(&go);
                    let gb = &mut grads[*b];
                    for r in 0..go.rows() {
                        for c in 0..go.cols() {
                            *gb.at_mut(0, c) += go.at(r, c);
                        }
                    }
                }
                Op::Matmul(a, b) => {
                    let da = go.matmul_nt(&values[*b]).expect("matmul backward dA");
                    let db = values[*a].matmul_tn(&go).expect("matmul backward dB");
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::MatmulNt(a, b) => {
                    let da = go.matmul(&values[*b]).expect("matmul_nt backward dA");
                    let db = go.matmul_tn(&values[*a]).expect("matmul_nt backward dB");
                    grads[*a].add_assign(&da);
                    grads[*b].add_assign(&db);
                }
                Op::Embedding { table, ids } => {
                    let gt = &mut grads[*table];
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..go.cols() {
                            *gt.at_mut(id, c) += go.at(r, c);
                        }
                    }
                }
                Op::RepeatRows { src, times } => {
                    let gs = &mut grads[*src];
                    for r in 0..gs.rows() {
                        for i in 0..*times {
                            for c in 0..go.cols() {
                                *gs.at_mut(r, c) += go.at(r * times + i, c);
                            }
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in parts {
                        let gp = &mut grads[p];
                        for r in 0..gp.rows() {
                            for c in 0..gp.cols() {
                                *gp.at_mut(r, c) += go.at(row + r, c);
                            }
                        }
                        row += gp.rows();
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for &p in parts {
                        let gp = &mut grads[p];
                        for r in 0..gp.rows() {
                            for c in 0..gp.cols() {
                                *gp.at_mut(r, c) += go.at(r, col + c);
                            }
                        }
                        col += gp.cols();
                    }
                }
                Op::SliceRows { src, lo } => {
                    let gs = &mut grads[*src];
                    for r in 0..go.rows() {
                        for c in 0..go.cols() {
                            *gs.at_mut(lo + r, c) += go.at(r, c);
                        }
                    }
                }
                Op::SliceCols { src, lo } => {
                    let gs = &mut grads[*src];
                    for r in 0..go.rows() {
                        for c in 0..go.cols() {
                            *gs.at_mut(r, lo + c) += go.at(r, c);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = &values[i];
                    let ga = &mut grads[*a];
                    for r in 0..y.rows() {
                        let mut dot = 0.0;
                        for c in 0..y.cols() {
                            dot += go.at(r, c) * y.at(r, c);
                        }
                        for c in 0..y.cols() {
                            *ga.at_mut(r, c) += y.at(r, c) * (go.at(r, c) - dot);
                        }
                    }
                }
                Op::SoftmaxCrossEntropy { logits, targets } => {
                    let x = &values[*logits];
                    let gl = &mut grads[*logits];
                    let w = go.at(0, 0) / targets.len() as Real;
                    for (r, &t) in targets.iter().enumerate() {
                        let row = x.row(r);
                        let p = softmax_row(row);
                        for c in 0..x.cols() {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *gl.at_mut(r, c) += w * (p[c] - onehot);
                        }
                    }
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let xs = &values[*x];
                    let gm = &values[*gamma];
                    let cols = xs.cols();
                    let inv_c = 1.0 / cols as Real;
                    // Accumulate into locals to sidestep aliased mutable borrows.
                    let mut dx = Tensor::zeros(xs.rows(), cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for r in 0..xs.rows() {
                        let row = xs.row(r);
                        let mut mu = 0.0;
                        for &v in row {
                            mu += v;
                        }
                        mu *= inv_c;
                        let mut var = 0.0;
                        for &v in row {
                            var += (v - mu) * (v - mu);
                        }
                        var *= inv_c;
                        let rstd = 1.0 / (var + *eps).sqrt();

                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for c in 0..cols {
                            let xhat = (row[c] - mu) * rstd;
                            let dxhat = go.at(r, c) * gm.at(0, c);
                            mean_dxhat += dxhat;
                            mean_dxhat_xhat += dxhat * xhat;
                            *dgamma.at_mut(0, c) += go.at(r, c) * xhat;
                            *dbeta.at_mut(0, c) += go.at(r, c);
                        }
                        mean_dxhat *= inv_c;
                        mean_dxhat_xhat *= inv_c;
                        for c in 0..cols {
                            let xhat = (row[c] - mu) * rstd;
                            let dxhat = go.at(r, c) * gm.at(0, c);
                            *dx.at_mut(r, c) += rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                        }
                    }
                    grads[*x].add_assign(&dx);
                    grads[*gamma].add_assign(&dgamma);
                    grads[*beta].add_assign(&dbeta);
                }
                Op::Gelu(a) => {
                    let xs = &values[*a];
                    let ga = &mut grads[*a];
                    for r in 0..xs.rows() {
                        for c in 0..xs.cols() {
                            *ga.at_mut(r, c) += go.at(r, c) * gelu_deriv(xs.at(r, c));
                        }
                    }
                }
                Op::AddPatchBias { scores, bias, block } => {
                    grads[*scores].add_assign(&go);
                    let gb = &mut grads[*bias];
                    for b in 0..gb.rows() {
                        let mut acc = 0.0;
                        for r in 0..go.rows() {
                            for t in 0..*block {
                                acc += go.at(r, b * block + t);
                            }
                        }
                        *gb.at_mut(b, 0) += acc;
                    }
                }
                Op::WeightedSum { src, weights } => {
                    grads[*src].add_assign_scaled(weights, go.at(0, 0));
                }
            }
        }
    }
}

const GELU_C: Real = 0.797_884_560_802_865_4;
const GELU_A: Real = 0.044_715;

fn gelu_scalar(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_deriv(x: Real) -> Real {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn softmax_row(row: &[Real]) -> Vec<Real> {
    let mut mx = row[0];
    for &v in row {
        if v > mx {
            mx = v;
        }
    }
    let mut out: Vec<Real> = row.iter().map(|&v| (v - mx).exp()).collect();
    let mut sum = 0.0;
    for &v in &out {
        sum += v;
    }
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Records one forward pass. Cheap to clone; all clones share state.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                grads: Vec::new(),
                ops: Vec::new(),
                wants_grad: Vec::new(),
            })),
        }
    }

    /// A differentiable input node.
    pub fn leaf(&self, value: Tensor) -> Var {
        let id = self.inner.borrow_mut().push(value, Op::Leaf, true);
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// An input node that never receives a gradient of interest.
    pub fn constant(&self, value: Tensor) -> Var {
        let id = self.inner.borrow_mut().push(value, Op::Leaf, false);
        Var {
            tape: self.clone(),
            id,
        }
    }

    pub fn concat_rows(&self, parts: &[&Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let cols = parts[0].cols();
        let mut rows = 0;
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "vars must share a tape");
            if p.cols() != cols {
                return Err(Error::Shape(format!(
                    "concat_rows column mismatch: {} vs {}",
                    cols,
                    p.cols()
                )));
            }
            rows += p.rows();
        }
        let mut out = Tensor::zeros(rows, cols);
        {
            let inner = self.inner.borrow();
            let mut row = 0;
            for p in parts {
                let v = &inner.values[p.id];
                for r in 0..v.rows() {
                    out.row_mut(row + r).copy_from_slice(v.row(r));
                }
                row += v.rows();
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        let id = self.inner.borrow_mut().push(out, Op::ConcatRows(ids), true);
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    pub fn concat_cols(&self, parts: &[&Var]) -> Result<Var> {
        assert!(!parts.is_empty());
        let rows = parts[0].rows();
        let mut cols = 0;
        for p in parts {
            assert!(Rc::ptr_eq(&self.inner, &p.tape.inner), "vars must share a tape");
            if p.rows() != rows {
                return Err(Error::Shape(format!(
                    "concat_cols row mismatch: {} vs {}",
                    rows,
                    p.rows()
                )));
            }
            cols += p.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        {
            let inner = self.inner.borrow();
            let mut col = 0;
            for p in parts {
                let v = &inner.values[p.id];
                for r in 0..rows {
                    for c in 0..v.cols() {
                        *out.at_mut(r, col + c) = v.at(r, c);
                    }
                }
                col += v.cols();
            }
        }
        let ids = parts.iter().map(|p| p.id).collect();
        let id = self.inner.borrow_mut().push(out, Op::ConcatCols(ids), true);
        Ok(Var {
            tape: self.clone(),
            id,
        })
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().values.len()
    }
}

/// Handle to one tape node.
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.tape.inner.borrow().values[self.id].rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.inner.borrow().values[self.id].cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.inner.borrow().values[self.id].shape()
    }

    /// Detached copy of the node value.
    pub fn to_tensor(&self) -> Tensor {
        self.tape.inner.borrow().values[self.id].clone()
    }

    pub fn scalar(&self) -> Real {
        let inner = self.tape.inner.borrow();
        let v = &inner.values[self.id];
        debug_assert_eq!(v.shape(), (1, 1));
        v.at(0, 0)
    }

    /// Gradient accumulated by the most recent backward pass.
    pub fn grad(&self) -> Tensor {
        self.tape.inner.borrow().grads[self.id].clone()
    }

    /// Reverse pass from this scalar with seed 1.
    pub fn backward(&self) {
        self.backward_weighted(1.0)
    }

    /// Reverse pass seeding the output gradient with `seed`; used to fold
    /// loss averaging into backward without rescaling stored gradients.
    pub fn backward_weighted(&self, seed: Real) {
        assert_eq!(self.shape(), (1, 1), "backward requires a scalar node");
        self.tape.inner.borrow_mut().backward(self.id, seed);
    }

    fn unary(&self, value: Tensor, op: Op) -> Var {
        let id = self.tape.inner.borrow_mut().push(value, op, true);
        Var {
            tape: self.tape.clone(),
            id,
        }
    }

    fn same_tape(&self, other: &Var) {
        assert!(
            Rc::ptr_eq(&self.tape.inner, &other.tape.inner),
            "vars must share a tape"
        );
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "add {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = self.to_tensor();
        out.add_assign(&self.tape.inner.borrow().values[other.id]);
        Ok(self.unary(out, Op::Add(self.id, other.id)))
    }

    pub fn scale(&self, s: Real) -> Var {
        let mut out = self.to_tensor();
        out.scale_assign(s);
        self.unary(out, Op::Scale(self.id, s))
    }

    /// Adds a 1 x C row vector to every row.
    pub fn add_row_broadcast(&self, row: &Var) -> Result<Var> {
        self.same_tape(row);
        if row.rows() != 1 || row.cols() != self.cols() {
            return Err(Error::Shape(format!(
                "add_row_broadcast {:?} + {:?}",
                self.shape(),
                row.shape()
            )));
        }
        let mut out = self.to_tensor();
        {
            let inner = self.tape.inner.borrow();
            let b = &inner.values[row.id];
            for r in 0..out.rows() {
                for c in 0..out.cols() {
                    *out.at_mut(r, c) += b.at(0, c);
                }
            }
        }
        Ok(self.unary(out, Op::AddRowBroadcast(self.id, row.id)))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let out = {
            let inner = self.tape.inner.borrow();
            inner.values[self.id].matmul(&inner.values[other.id])?
        };
        Ok(self.unary(out, Op::Matmul(self.id, other.id)))
    }

    /// `self * other^T`.
    pub fn matmul_nt(&self, other: &Var) -> Result<Var> {
        self.same_tape(other);
        let out = {
            let inner = self.tape.inner.borrow();
            inner.values[self.id].matmul_nt(&inner.values[other.id])?
        };
        Ok(self.unary(out, Op::MatmulNt(self.id, other.id)))
    }

    /// Gathers rows of `self` (used as an embedding table).
    pub fn embedding(&self, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape();
        for &id in ids {
            if id >= rows {
                return Err(Error::Range(format!(
                    "embedding id {} out of table of {} rows",
                    id, rows
                )));
            }
        }
        let mut out = Tensor::zeros(ids.len(), cols);
        {
            let inner = self.tape.inner.borrow();
            let table = &inner.values[self.id];
            for (r, &id) in ids.iter().enumerate() {
                out.row_mut(r).copy_from_slice(table.row(id));
            }
        }
        Ok(self.unary(
            out,
            Op::Embedding {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Repeats every row `times` times, preserving order.
    pub fn repeat_rows(&self, times: usize) -> Var {
        assert!(times >= 1);
        let src = self.to_tensor();
        let mut out = Tensor::zeros(src.rows() * times, src.cols());
        for r in 0..src.rows() {
            for i in 0..times {
                out.row_mut(r * times + i).copy_from_slice(src.row(r));
            }
        }
        self.unary(
            out,
            Op::RepeatRows {
                src: self.id,
                times,
            },
        )
    }

    pub fn slice_rows(&self, lo: usize, hi: usize) -> Result<Var> {
        let (rows, cols) = self.shape();
        if lo >= hi || hi > rows {
            return Err(Error::Range(format!(
                "slice_rows {}..{} of {} rows",
                lo, hi, rows
            )));
        }
        let mut out = Tensor::zeros(hi - lo, cols);
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[self.id];
            for r in lo..hi {
                out.row_mut(r - lo).copy_from_slice(v.row(r));
            }
        }
        Ok(self.unary(out, Op::SliceRows { src: self.id, lo }))
    }

    pub fn slice_cols(&self, lo: usize, hi: usize) -> Result<Var> {
        let (rows, cols) = self.shape();
        if lo >= hi || hi > cols {
            return Err(Error::Range(format!(
                "slice_cols {}..{} of {} cols",
                lo, hi, cols
            )));
        }
        let mut out = Tensor::zeros(rows, hi - lo);
        {
            let inner = self.tape.inner.borrow();
            let v = &inner.values[self.id];
            for r in 0..rows {
                for c in lo..hi {
                    *out.at_mut(r, c - lo) = v.at(r, c);
                }
            }
        }
        Ok(self.unary(out, Op::SliceCols { src: self.id, lo }))
    }

    /// Row-wise softmax, max-subtracted for stability.
    pub fn softmax_rows(&self) -> Var {
        let src = self.to_tensor();
        let mut out = Tensor::zeros(src.rows(), src.cols());
        for r in 0..src.rows() {
            let p = softmax_row(src.row(r));
            out.row_mut(r).copy_from_slice(&p);
        }
        self.unary(out, Op::SoftmaxRows(self.id))
    }

    /// Mean over rows of -log softmax(row)[target].
    pub fn softmax_ce(&self, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape();
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "softmax_ce: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        for &t in targets {
            if t >= cols {
                return Err(Error::Range(format!(
                    "softmax_ce target {} out of vocab {}",
                    t, cols
                )));
            }
        }
        let src = self.to_tensor();
        if !src.is_finite() {
            return Err(Error::State("softmax_ce on non-finite logits".into()));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = src.row(r);
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = 0.0;
            for &v in row {
                sum += (v - mx).exp();
            }
            total += mx + sum.ln() - row[t];
        }
        let out = Tensor::from_vec(1, 1, vec![total / rows as Real])?;
        Ok(self.unary(
            out,
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
            },
        ))
    }

    pub fn layer_norm(&self, gamma: &Var, beta: &Var, eps: Real) -> Result<Var> {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (rows, cols) = self.shape();
        if gamma.shape() != (1, cols) || beta.shape() != (1, cols) {
            return Err(Error::Shape(format!(
                "layer_norm over {} cols with gamma {:?}, beta {:?}",
                cols,
                gamma.shape(),
                beta.shape()
            )));
        }
        let mut out = Tensor::zeros(rows, cols);
        {
            let inner = self.tape.inner.borrow();
            let x = &inner.values[self.id];
            let g = &inner.values[gamma.id];
            let b = &inner.values[beta.id];
            let inv_c = 1.0 / cols as Real;
            for r in 0..rows {
                let row = x.row(r);
                let mut mu = 0.0;
                for &v in row {
                    mu += v;
                }
                mu *= inv_c;
                let mut var = 0.0;
                for &v in row {
                    var += (v - mu) * (v - mu);
                }
                var *= inv_c;
                let rstd = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    *out.at_mut(r, c) = (row[c] - mu) * rstd * g.at(0, c) + b.at(0, c);
                }
            }
        }
        Ok(self.unary(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        ))
    }

    pub fn gelu(&self) -> Var {
        let mut out = self.to_tensor();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        self.unary(out, Op::Gelu(self.id))
    }

    /// Adds `bias[b]` to every score column in block `b` of width `block`.
    pub fn add_patch_bias(&self, bias: &Var, block: usize) -> Result<Var> {
        self.same_tape(bias);
        let (_, cols) = self.shape();
        let (blocks, bcols) = bias.shape();
        if bcols != 1 || blocks * block != cols {
            return Err(Error::Shape(format!(
                "add_patch_bias: {} cols, {} blocks of {}",
                cols, blocks, block
            )));
        }
        let mut out = self.to_tensor();
        {
            let inner = self.tape.inner.borrow();
            let b = &inner.values[bias.id];
            for r in 0..out.rows() {
                for blk in 0..blocks {
                    for t in 0..block {
                        *out.at_mut(r, blk * block + t) += b.at(blk, 0);
                    }
                }
            }
        }
        Ok(self.unary(
            out,
            Op::AddPatchBias {
                scores: self.id,
                bias: bias.id,
                block,
            },
        ))
    }

    /// Scalar sum(self .* weights) against constant weights; reduces any
    /// node to a scalar for gradient checks.
    pub fn weighted_sum(&self, weights: &Tensor) -> Result<Var> {
        if self.shape() != weights.shape() {
            return Err(Error::Shape(format!(
                "weighted_sum {:?} vs {:?}",
                self.shape(),
                weights.shape()
            )));
        }
        let src = self.to_tensor();
        let mut acc = 0.0;
        for (a, b) in src.data().iter().zip(weights.data().iter()) {
            acc += a * b;
        }
        let out = Tensor::from_vec(1, 1, vec![acc])?;
        Ok(self.unary(
            out,
            Op::WeightedSum {
                src: self.id,
                weights: weights.clone(),
            },
        ))
    }
}

/// Attention visibility mask; `true` means the key is visible.
#[derive(Debug, Clone)]
pub struct AttnMask {
    q_len: usize,
    k_len: usize,
    visible: Vec<bool>,
}

impl AttnMask {
    pub fn full(q_len: usize, k_len: usize) -> Self {
        AttnMask {
            q_len,
            k_len,
            visible: vec![true; q_len * k_len],
        }
    }

    /// Keys laid out as [m current tokens; ctx context tokens]: causal over
    /// the current tokens, full visibility of the context.
    pub fn causal_with_context(m: usize, ctx: usize) -> Self {
        let mut mask = AttnMask::full(m, m + ctx);
        for q in 0..m {
            for k in 0..m {
                mask.visible[q * (m + ctx) + k] = k <= q;
            }
        }
        mask
    }

    /// Intra-patch tokens fully visible (mask-predict style), context too.
    pub fn full_with_context(m: usize, ctx: usize) -> Self {
        AttnMask::full(m, m + ctx)
    }

    pub fn from_fn(q_len: usize, k_len: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut visible = vec![false; q_len * k_len];
        for q in 0..q_len {
            for k in 0..k_len {
                visible[q * k_len + k] = f(q, k);
            }
        }
        AttnMask {
            q_len,
            k_len,
            visible,
        }
    }

    pub fn q_len(&self) -> usize {
        self.q_len
    }

    pub fn k_len(&self) -> usize {
        self.k_len
    }

    pub fn is_visible(&self, q: usize, k: usize) -> bool {
        self.visible[q * self.k_len + k]
    }

    fn check_rows(&self) -> Result<()> {
        for q in 0..self.q_len {
            if !self.visible[q * self.k_len..(q + 1) * self.k_len]
                .iter()
                .any(|&v| v)
            {
                return Err(Error::DegenerateRow(q));
            }
        }
        Ok(())
    }

    fn bias_tensor(&self) -> Tensor {
        let mut t = Tensor::zeros(self.q_len, self.k_len);
        for q in 0..self.q_len {
            for k in 0..self.k_len {
                if !self.is_visible(q, k) {
                    *t.at_mut(q, k) = -1e9;
                }
            }
        }
        t
    }
}

/// softmax(Q K^T / sqrt(d_h) + mask_bias) V with optional per-key-block
/// scalar bias added after the Q K^T product.
pub fn attention_biased(
    tape: &Tape,
    q: &Var,
    k: &Var,
    v: &Var,
    mask: &AttnMask,
    post_bias: Option<(&Var, usize)>,
) -> Result<Var> {
    let (q_len, dh) = q.shape();
    if k.cols() != dh {
        return Err(Error::Shape(format!(
            "attention: q cols {} vs k cols {}",
            dh,
            k.cols()
        )));
    }
    if k.rows() != v.rows() {
        return Err(Error::Shape(format!(
            "attention: k rows {} vs v rows {}",
            k.rows(),
            v.rows()
        )));
    }
    if mask.q_len() != q_len || mask.k_len() != k.rows() {
        return Err(Error::Shape(format!(
            "attention: mask {}x{} vs q {} k {}",
            mask.q_len(),
            mask.k_len(),
            q_len,
            k.rows()
        )));
    }
    mask.check_rows()?;

    let mut scores = q.matmul_nt(k)?.scale(1.0 / (dh as Real).sqrt());
    if let Some((bias, block)) = post_bias {
        scores = scores.add_patch_bias(bias, block)?;
    }
    let scores = scores.add(&tape.constant(mask.bias_tensor()))?;
    scores.softmax_rows().matmul(v)
}

/// softmax(Q K^T / sqrt(d_h) + mask_bias) V.
pub fn attention(tape: &Tape, q: &Var, k: &Var, v: &Var, mask: &AttnMask) -> Result<Var> {
    attention_biased(tape, q, k, v, mask, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{CounterRng, EPS_TIGHT};

    #[test]
    fn softmax_ce_uniform_logits_is_ln_vocab() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(1, 4));
        let loss = logits.softmax_ce(&[2]).unwrap();
        assert!((loss.scalar() - (4.0 as Real).ln()).abs() < EPS_TIGHT);
    }

    #[test]
    fn softmax_ce_saturated_logit_is_near_zero() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(1, 3, vec![100.0, 0.0, 0.0]).unwrap());
        let loss = logits.softmax_ce(&[0]).unwrap();
        assert!(loss.scalar() < EPS_TIGHT);
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::from_vec(1, 3, vec![0.3, -0.1, 0.7]).unwrap());
        let loss = logits.softmax_ce(&[1]).unwrap();
        loss.backward();
        let g = logits.grad();
        let p = softmax_row(&[0.3, -0.1, 0.7]);
        assert!((g.at(0, 0) - p[0]).abs() < EPS_TIGHT);
        assert!((g.at(0, 1) - (p[1] - 1.0)).abs() < EPS_TIGHT);
        assert!((g.at(0, 2) - p[2]).abs() < EPS_TIGHT);
    }

    #[test]
    fn softmax_ce_target_out_of_vocab_is_range_error() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(1, 4));
        assert!(matches!(
            logits.softmax_ce(&[4]),
            Err(crate::error::Error::Range(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = CounterRng::new(11, "sm");
        let tape = Tape::new();
        let x = tape.leaf(Tensor::randn(6, 9, 3.0, &mut rng));
        let y = x.softmax_rows().to_tensor();
        for r in 0..6 {
            let s: Real = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < EPS_TIGHT);
        }
    }

    #[test]
    fn attention_single_key_returns_value_row() {
        let mut rng = CounterRng::new(2, "attn");
        let tape = Tape::new();
        let q = tape.leaf(Tensor::randn(3, 4, 1.0, &mut rng));
        let k = tape.leaf(Tensor::randn(1, 4, 1.0, &mut rng));
        let v = tape.leaf(Tensor::randn(1, 4, 1.0, &mut rng));
        let out = attention(&tape, &q, &k, &v, &AttnMask::full(3, 1)).unwrap();
        let vv = v.to_tensor();
        let ov = out.to_tensor();
        for r in 0..3 {
            for c in 0..4 {
                assert_eq!(ov.at(r, c), vv.at(0, c));
            }
        }
    }

    #[test]
    fn attention_identical_keys_average_visible_values() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::filled(1, 2, 0.5));
        let k = tape.leaf(Tensor::filled(4, 2, 1.0));
        let v = tape.leaf(
            Tensor::from_vec(4, 2, vec![1.0, 0.0, 3.0, 2.0, 5.0, 4.0, 99.0, 99.0]).unwrap(),
        );
        let mask = AttnMask::from_fn(1, 4, |_, kk| kk < 3);
        let out = attention(&tape, &q, &k, &v, &mask).unwrap().to_tensor();
        assert!((out.at(0, 0) - 3.0).abs() < EPS_TIGHT.max(1e-9));
        assert!((out.at(0, 1) - 2.0).abs() < EPS_TIGHT.max(1e-9));
    }

    #[test]
    fn attention_fully_masked_row_is_degenerate() {
        let tape = Tape::new();
        let q = tape.leaf(Tensor::zeros(2, 2));
        let k = tape.leaf(Tensor::zeros(3, 2));
        let v = tape.leaf(Tensor::zeros(3, 2));
        let mask = AttnMask::from_fn(2, 3, |q, _| q == 0);
        assert!(matches!(
            attention(&tape, &q, &k, &v, &mask),
            Err(crate::error::Error::DegenerateRow(1))
        ));
    }

    #[test]
    fn backward_weighted_scales_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::filled(2, 2, 1.5));
        let loss = x.weighted_sum(&Tensor::filled(2, 2, 1.0)).unwrap();
        loss.backward_weighted(0.25);
        assert!(x.grad().data().iter().all(|&g| (g - 0.25).abs() < EPS_TIGHT));
    }
}
