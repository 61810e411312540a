//! Tape-based reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every primitive application in creation order, which is
//! a valid topological order. [`Tape::backward`] walks the record once in
//! reverse, handing parameter gradients to a [`ParamGrads`] accumulator and
//! returning the adjoint of every recorded node.
//!
//! Parameters are read through a shared borrow of the [`ParamStore`], so many
//! tapes can be alive over the same store at once (one per worker).

use super::params::{ParamGrads, ParamId, ParamStore};
use super::segments::Segments;
use super::value::Value;
use super::{log_softplus, sigmoid, softplus};
use crate::error::{dim_err, DsppError, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Softplus,
    LogSoftplus,
    Ln,
    Exp,
    Sin,
    Cos,
    Square,
    Scale(f64),
    Offset(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    ParamRows(ParamId, Vec<usize>),
    Unary(Unary, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatVec(Var, Var),
    MatMulT(Var, Var),
    Dot(Var, Var),
    Sum(Var),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    StackRows(Vec<Var>),
    MeanRows(Var),
    BroadcastRows(Var),
    AddRowBroadcast(Var, Var),
    SoftmaxRows(Var),
    MatTVec(Var, Var),
    RowDots(Var, Var),
    OuterConst(Vec<f64>, Var),
    TimeTrig {
        omega: Var,
        deltas: Vec<f64>,
        phases: Vec<f64>,
    },
    MhScores {
        query: Var,
        keys: Var,
        heads: usize,
    },
    MhCombine {
        weights: Var,
        values: Var,
        heads: usize,
    },
    SegmentMean(Var, Segments),
    SegmentDots(Var, Var, Segments),
    SegmentSoftmax(Var, Segments),
    SegmentSum(Var, Var, Segments),
    ReplaceRows(Var, Vec<usize>, Var),
    Reshape(Var),
}

struct Node {
    value: Value,
    op: Op,
}

/// Adjoints of every node after a backward pass.
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Adjoint of `v`, or `None` if no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

/// Record of primitive applications supporting reverse-mode extraction.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

fn check_same(op: &'static str, a: &Value, b: &Value) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_matrix(op: &'static str, v: &Value) -> Result<()> {
    if v.shape().len() != 2 {
        return Err(dim_err(op, format!("expected a matrix, got shape {:?}", v.shape())));
    }
    Ok(())
}

fn check_vector(op: &'static str, v: &Value) -> Result<()> {
    if v.shape().len() != 1 {
        return Err(dim_err(op, format!("expected a vector, got shape {:?}", v.shape())));
    }
    Ok(())
}

/// Positional phase of entry `j` (0-based) for position `h` in a `dim`-wide
/// time embedding. The 1-based index is `j + 1`; odd 1-based entries use the
/// exponent `(j1 - 1) / dim`, even ones `j1 / dim`.
pub fn time_phase(h: f64, j: usize, dim: usize) -> f64 {
    let j1 = j + 1;
    let exponent = if j1 % 2 == 1 { j1 - 1 } else { j1 };
    h / 10000f64.powf(exponent as f64 / dim as f64)
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Value, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Leaves receive adjoints (readable from [`NodeGrads`])
    /// but never feed a parameter gradient.
    pub fn input(&mut self, value: Value) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.input(Value::scalar(x))
    }

    pub fn vector(&mut self, data: Vec<f64>) -> Var {
        self.input(Value::vector(data))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Selected rows of a matrix parameter, as a `[rows.len(), cols]` matrix.
    pub fn param_rows(&mut self, id: ParamId, rows: &[usize]) -> Result<Var> {
        let p = self.params.get(id);
        check_matrix("param_rows", p)?;
        let (n, c) = (p.rows(), p.cols());
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(DsppError::OutOfRange {
                    what: "parameter row",
                    id: r,
                    count: n,
                });
            }
            data.extend_from_slice(p.row(r));
        }
        let value = Value::matrix(rows.len(), c, data)?;
        Ok(self.push(value, Op::ParamRows(id, rows.to_vec())))
    }

    /// A single row of a matrix parameter, as a vector.
    pub fn param_row(&mut self, id: ParamId, row: usize) -> Result<Var> {
        let m = self.param_rows(id, &[row])?;
        let c = self.value(m).cols();
        self.reshape(m, &[c])
    }

    fn unary(&mut self, f: Unary, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| match f {
                Unary::Relu => v.max(0.0),
                Unary::Sigmoid => sigmoid(v),
                Unary::Tanh => v.tanh(),
                Unary::Softplus => softplus(v),
                Unary::LogSoftplus => log_softplus(v),
                Unary::Ln => v.ln(),
                Unary::Exp => v.exp(),
                Unary::Sin => v.sin(),
                Unary::Cos => v.cos(),
                Unary::Square => v * v,
                Unary::Scale(c) => c * v,
                Unary::Offset(c) => c + v,
            })
            .collect();
        let value = Value::new(data, x.shape().to_vec()).expect("shape preserved");
        self.push(value, Op::Unary(f, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a)
    }
    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(Unary::Tanh, a)
    }
    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::Softplus, a)
    }
    /// `ln(softplus(x))`, accurate in the far negative tail.
    pub fn log_softplus(&mut self, a: Var) -> Var {
        self.unary(Unary::LogSoftplus, a)
    }
    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(Unary::Ln, a)
    }
    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(Unary::Exp, a)
    }
    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(Unary::Cos, a)
    }
    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Scale(c), a)
    }
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(Unary::Offset(c), a)
    }
    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(Unary::Scale(-1.0), a)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Value> {
        let (x, y) = (self.value(a), self.value(b));
        check_same(op, x, y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Value::new(data, x.shape().to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |p, q| p + q)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |p, q| p - q)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |p, q| p * q)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `W x` for `W: [r, c]`, `x: [c]`.
    pub fn matvec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wm, xv) = (self.value(w), self.value(x));
        check_matrix("matvec", wm)?;
        check_vector("matvec", xv)?;
        if wm.cols() != xv.cols() {
            return Err(dim_err("matvec", format!("{:?} times {:?}", wm.shape(), xv.shape())));
        }
        let out = (0..wm.rows())
            .map(|i| wm.row(i).iter().zip(xv.data()).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Value::vector(out), Op::MatVec(w, x)))
    }

    /// `A Wᵀ` for `A: [n, c]`, `W: [r, c]`; applies `W` to every row of `A`.
    pub fn matmul_t(&mut self, a: Var, w: Var) -> Result<Var> {
        let (am, wm) = (self.value(a), self.value(w));
        check_matrix("matmul_t", am)?;
        check_matrix("matmul_t", wm)?;
        if am.cols() != wm.cols() {
            return Err(dim_err(
                "matmul_t",
                format!("{:?} times transpose of {:?}", am.shape(), wm.shape()),
            ));
        }
        let (n, r) = (am.rows(), wm.rows());
        let mut out = Vec::with_capacity(n * r);
        for k in 0..n {
            let ak = am.row(k);
            for i in 0..r {
                out.push(ak.iter().zip(wm.row(i)).map(|(p, q)| p * q).sum());
            }
        }
        let value = Value::matrix(n, r, out)?;
        Ok(self.push(value, Op::MatMulT(a, w)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.numel() != y.numel() {
            return Err(dim_err("dot", format!("{:?} vs {:?}", x.shape(), y.shape())));
        }
        let s = x.data().iter().zip(y.data()).map(|(p, q)| p * q).sum();
        Ok(self.push(Value::scalar(s), Op::Dot(a, b)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Value::scalar(s), Op::Sum(a))
    }

    /// Flattens and joins the inputs into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(DsppError::Empty("concat"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Value::vector(data), Op::Concat(parts.to_vec())))
    }

    /// Column-wise join of `[n, c1]` and `[n, c2]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        check_matrix("concat_cols", am)?;
        check_matrix("concat_cols", bm)?;
        if am.rows() != bm.rows() {
            return Err(dim_err("concat_cols", format!("{:?} vs {:?}", am.shape(), bm.shape())));
        }
        let (n, c1, c2) = (am.rows(), am.cols(), bm.cols());
        let mut data = Vec::with_capacity(n * (c1 + c2));
        for k in 0..n {
            data.extend_from_slice(am.row(k));
            data.extend_from_slice(bm.row(k));
        }
        let value = Value::matrix(n, c1 + c2, data)?;
        Ok(self.push(value, Op::ConcatCols(a, b)))
    }

    /// Columns `start..start + len` of a matrix (or entries of a vector).
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let am = self.value(a);
        if am.shape().is_empty() || start + len > am.cols() {
            return Err(dim_err(
                "slice_cols",
                format!("{}..{} of {:?}", start, start + len, am.shape()),
            ));
        }
        let n = am.rows();
        let mut data = Vec::with_capacity(n * len);
        for k in 0..n {
            data.extend_from_slice(&am.row(k)[start..start + len]);
        }
        let shape = if am.shape().len() == 1 { vec![len] } else { vec![n, len] };
        let value = Value::new(data, shape)?;
        Ok(self.push(value, Op::SliceCols(a, start)))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let am = self.value(a);
        check_matrix("gather_rows", am)?;
        let c = am.cols();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= am.rows() {
                return Err(DsppError::OutOfRange {
                    what: "row",
                    id: r,
                    count: am.rows(),
                });
            }
            data.extend_from_slice(am.row(r));
        }
        let value = Value::matrix(rows.len(), c, data)?;
        Ok(self.push(value, Op::GatherRows(a, rows.to_vec())))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let m = self.gather_rows(a, &[i])?;
        let c = self.value(m).cols();
        self.reshape(m, &[c])
    }

    /// Stacks equal-length vectors into a `[n, c]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(DsppError::Empty("stack_rows"));
        }
        let c = self.value(rows[0]).numel();
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            let v = self.value(r);
            if v.numel() != c {
                return Err(dim_err("stack_rows", format!("row of {} vs {}", v.numel(), c)));
            }
            data.extend_from_slice(v.data());
        }
        let value = Value::matrix(rows.len(), c, data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let am = self.value(a);
        check_matrix("mean_rows", am)?;
        let (n, c) = (am.rows(), am.cols());
        if n == 0 {
            return Err(DsppError::Empty("mean_rows"));
        }
        let mut out = vec![0.0; c];
        for k in 0..n {
            for (o, x) in out.iter_mut().zip(am.row(k)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        Ok(self.push(Value::vector(out), Op::MeanRows(a)))
    }

    /// Repeats a vector as `n` rows.
    pub fn broadcast_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let x = self.value(v);
        check_vector("broadcast_rows", x)?;
        let c = x.cols();
        let data: Vec<f64> = (0..n).flat_map(|_| x.data().iter().copied()).collect();
        let value = Value::matrix(n, c, data)?;
        Ok(self.push(value, Op::BroadcastRows(v)))
    }

    /// Adds the vector `b` to every row of `a`.
    pub fn add_row_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bv) = (self.value(a), self.value(b));
        check_matrix("add_row_broadcast", am)?;
        check_vector("add_row_broadcast", bv)?;
        if am.cols() != bv.cols() {
            return Err(dim_err(
                "add_row_broadcast",
                format!("{:?} plus {:?}", am.shape(), bv.shape()),
            ));
        }
        let c = am.cols();
        let data = am
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv.data()[i % c])
            .collect();
        let value = Value::new(data, am.shape().to_vec())?;
        Ok(self.push(value, Op::AddRowBroadcast(a, b)))
    }

    /// Softmax over a vector.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        check_vector("softmax", x)?;
        let n = x.cols();
        let m = self.reshape(a, &[1, n])?;
        let s = self.softmax_rows(m)?;
        self.reshape(s, &[n])
    }

    /// Softmax applied independently to each row of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let am = self.value(a);
        check_matrix("softmax_rows", am)?;
        if am.cols() == 0 {
            return Err(DsppError::DegenerateAttention);
        }
        let mut data = Vec::with_capacity(am.numel());
        for k in 0..am.rows() {
            data.extend(super::softmax(am.row(k))?);
        }
        let value = Value::new(data, am.shape().to_vec())?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    /// `Aᵀ w` for `A: [n, c]`, `w: [n]`: the `w`-weighted sum of rows.
    pub fn mat_t_vec(&mut self, a: Var, w: Var) -> Result<Var> {
        let (am, wv) = (self.value(a), self.value(w));
        check_matrix("mat_t_vec", am)?;
        check_vector("mat_t_vec", wv)?;
        if am.rows() != wv.cols() {
            return Err(dim_err(
                "mat_t_vec",
                format!("transpose of {:?} times {:?}", am.shape(), wv.shape()),
            ));
        }
        let mut out = vec![0.0; am.cols()];
        for (k, &wk) in wv.data().iter().enumerate() {
            for (o, x) in out.iter_mut().zip(am.row(k)) {
                *o += wk * x;
            }
        }
        Ok(self.push(Value::vector(out), Op::MatTVec(a, w)))
    }

    /// Per-row inner products of two equally shaped matrices.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        check_matrix("row_dots", am)?;
        check_same("row_dots", am, bm)?;
        let out = (0..am.rows())
            .map(|k| am.row(k).iter().zip(bm.row(k)).map(|(p, q)| p * q).sum())
            .collect();
        Ok(self.push(Value::vector(out), Op::RowDots(a, b)))
    }

    /// `c wᵀ` for a constant column `c` and a vector node `w`.
    pub fn outer_const(&mut self, c: &[f64], w: Var) -> Result<Var> {
        let wv = self.value(w);
        check_vector("outer_const", wv)?;
        let d = wv.cols();
        let data = c
            .iter()
            .flat_map(|&ck| wv.data().iter().map(move |&wj| ck * wj))
            .collect();
        let value = Value::matrix(c.len(), d, data)?;
        Ok(self.push(value, Op::OuterConst(c.to_vec(), w)))
    }

    /// Batched time embedding: row `k` encodes interval `deltas[k]` at
    /// position `positions[k]`, with learnable frequencies `omega`.
    pub fn time_trig(&mut self, omega: Var, deltas: &[f64], positions: &[f64]) -> Result<Var> {
        let w = self.value(omega);
        check_vector("time_trig", w)?;
        if deltas.len() != positions.len() {
            return Err(dim_err(
                "time_trig",
                format!("{} intervals vs {} positions", deltas.len(), positions.len()),
            ));
        }
        let d = w.cols();
        let mut phases = Vec::with_capacity(deltas.len() * d);
        let mut data = Vec::with_capacity(deltas.len() * d);
        for (&dt, &h) in deltas.iter().zip(positions) {
            for j in 0..d {
                let phase = time_phase(h, j, d);
                let arg = w.data()[j] * dt + phase;
                phases.push(phase);
                data.push(if j % 2 == 0 { arg.cos() } else { arg.sin() });
            }
        }
        let value = Value::matrix(deltas.len(), d, data)?;
        Ok(self.push(
            value,
            Op::TimeTrig {
                omega,
                deltas: deltas.to_vec(),
                phases,
            },
        ))
    }

    /// Multi-head scores: row `g` holds the inner products of head `g`'s slice
    /// of `query` with the same slice of every row of `keys`.
    pub fn mh_scores(&mut self, query: Var, keys: Var, heads: usize) -> Result<Var> {
        let (q, k) = (self.value(query), self.value(keys));
        check_vector("mh_scores", q)?;
        check_matrix("mh_scores", k)?;
        let p = q.cols();
        if heads == 0 || p % heads != 0 || k.cols() != p {
            return Err(dim_err(
                "mh_scores",
                format!("query {:?}, keys {:?}, {} heads", q.shape(), k.shape(), heads),
            ));
        }
        let hd = p / heads;
        let n = k.rows();
        let mut data = vec![0.0; heads * n];
        for g in 0..heads {
            let qs = &q.data()[g * hd..(g + 1) * hd];
            for r in 0..n {
                let ks = &k.row(r)[g * hd..(g + 1) * hd];
                data[g * n + r] = qs.iter().zip(ks).map(|(a, b)| a * b).sum();
            }
        }
        let value = Value::matrix(heads, n, data)?;
        Ok(self.push(value, Op::MhScores { query, keys, heads }))
    }

    /// Multi-head combination: head `g`'s slice of the output is the
    /// `weights[g]`-weighted sum of the same slice of every row of `values`.
    pub fn mh_combine(&mut self, weights: Var, values: Var, heads: usize) -> Result<Var> {
        let (a, v) = (self.value(weights), self.value(values));
        check_matrix("mh_combine", a)?;
        check_matrix("mh_combine", v)?;
        let dv = v.cols();
        if heads == 0 || dv % heads != 0 || a.rows() != heads || a.cols() != v.rows() {
            return Err(dim_err(
                "mh_combine",
                format!("weights {:?}, values {:?}, {} heads", a.shape(), v.shape(), heads),
            ));
        }
        let hd = dv / heads;
        let mut out = vec![0.0; dv];
        for r in 0..v.rows() {
            let vr = v.row(r);
            for (d, o) in out.iter_mut().enumerate() {
                *o += a.row(d / hd)[r] * vr[d];
            }
        }
        Ok(self.push(Value::vector(out), Op::MhCombine { weights, values, heads }))
    }

    /// Row `g` is the mean of the rows of `a` listed in group `g`; empty
    /// groups give a zero row.
    pub fn segment_mean(&mut self, a: Var, segs: &Segments) -> Result<Var> {
        let am = self.value(a);
        check_matrix("segment_mean", am)?;
        segs.check_members("segment_mean", am.rows())?;
        let c = am.cols();
        let mut data = vec![0.0; segs.len() * c];
        for g in 0..segs.len() {
            let group = segs.group(g);
            let out = &mut data[g * c..(g + 1) * c];
            for &r in group {
                add_into(out, am.row(r));
            }
            if !group.is_empty() {
                let inv = 1.0 / group.len() as f64;
                out.iter_mut().for_each(|x| *x *= inv);
            }
        }
        let value = Value::matrix(segs.len(), c, data)?;
        Ok(self.push(value, Op::SegmentMean(a, segs.clone())))
    }

    /// Flat vector of `q[g] · k[m]` for every member `m` of every group `g`.
    pub fn segment_dots(&mut self, q: Var, k: Var, segs: &Segments) -> Result<Var> {
        let (qm, km) = (self.value(q), self.value(k));
        check_matrix("segment_dots", qm)?;
        check_matrix("segment_dots", km)?;
        if qm.rows() != segs.len() || qm.cols() != km.cols() {
            return Err(dim_err(
                "segment_dots",
                format!("queries {:?}, keys {:?}, {} groups", qm.shape(), km.shape(), segs.len()),
            ));
        }
        segs.check_members("segment_dots", km.rows())?;
        let mut out = Vec::with_capacity(segs.total());
        for g in 0..segs.len() {
            let qg = qm.row(g);
            out.extend(segs.group(g).iter().map(|&r| dot(qg, km.row(r))));
        }
        Ok(self.push(Value::vector(out), Op::SegmentDots(q, k, segs.clone())))
    }

    /// Softmax within each group of a flat per-member vector.
    pub fn segment_softmax(&mut self, x: Var, segs: &Segments) -> Result<Var> {
        let xv = self.value(x);
        check_vector("segment_softmax", xv)?;
        if xv.cols() != segs.total() {
            return Err(dim_err(
                "segment_softmax",
                format!("{} entries for {} members", xv.cols(), segs.total()),
            ));
        }
        let mut out = Vec::with_capacity(segs.total());
        for g in 0..segs.len() {
            let span = segs.span(g);
            if !span.is_empty() {
                out.extend(super::softmax(&xv.data()[span])?);
            }
        }
        Ok(self.push(Value::vector(out), Op::SegmentSoftmax(x, segs.clone())))
    }

    /// Row `g` is `Σ w[m] · values[member m]` over the members of group `g`.
    pub fn segment_sum(&mut self, weights: Var, values: Var, segs: &Segments) -> Result<Var> {
        let (wv, vm) = (self.value(weights), self.value(values));
        check_vector("segment_sum", wv)?;
        check_matrix("segment_sum", vm)?;
        if wv.cols() != segs.total() {
            return Err(dim_err(
                "segment_sum",
                format!("{} weights for {} members", wv.cols(), segs.total()),
            ));
        }
        segs.check_members("segment_sum", vm.rows())?;
        let c = vm.cols();
        let mut data = vec![0.0; segs.len() * c];
        for g in 0..segs.len() {
            let out = &mut data[g * c..(g + 1) * c];
            for e in segs.span(g) {
                let w = wv.data()[e];
                for (o, x) in out.iter_mut().zip(vm.row(segs.members()[e])) {
                    *o += w * x;
                }
            }
        }
        let value = Value::matrix(segs.len(), c, data)?;
        Ok(self.push(value, Op::SegmentSum(weights, values, segs.clone())))
    }

    /// Copy of `base` with the listed rows overwritten by the rows of `values`.
    pub fn replace_rows(&mut self, base: Var, rows: &[usize], values: Var) -> Result<Var> {
        let (bm, vm) = (self.value(base), self.value(values));
        check_matrix("replace_rows", bm)?;
        check_matrix("replace_rows", vm)?;
        if vm.rows() != rows.len() || vm.cols() != bm.cols() {
            return Err(dim_err(
                "replace_rows",
                format!("{} rows of {:?} into {:?}", rows.len(), vm.shape(), bm.shape()),
            ));
        }
        let mut seen = vec![false; bm.rows()];
        for &r in rows {
            if r >= bm.rows() || std::mem::replace(&mut seen[r], true) {
                return Err(dim_err("replace_rows", format!("row {r} out of range or repeated")));
            }
        }
        let c = bm.cols();
        let mut data = bm.data().to_vec();
        for (k, &r) in rows.iter().enumerate() {
            data[r * c..(r + 1) * c].copy_from_slice(vm.row(k));
        }
        let value = Value::matrix(bm.rows(), c, data)?;
        Ok(self.push(value, Op::ReplaceRows(base, rows.to_vec(), values)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let value = Value::new(x.data().to_vec(), shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Reverse pass from a scalar root, accumulating parameter gradients into
    /// `grads`.
    pub fn backward(&self, root: Var, grads: &mut ParamGrads) -> Result<NodeGrads> {
        let v = self.value(root);
        if !v.is_scalar() {
            return Err(dim_err(
                "backward",
                format!("root must be scalar, got shape {:?}", v.shape()),
            ));
        }
        self.backward_seeded(&[(root, vec![1.0])], grads)
    }

    /// Reverse pass seeded with explicit adjoints on any set of nodes.
    pub fn backward_seeded(&self, seeds: &[(Var, Vec<f64>)], grads: &mut ParamGrads) -> Result<NodeGrads> {
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            let n = self.nodes[v.0].value.numel();
            if g.len() != n {
                return Err(dim_err(
                    "backward_seeded",
                    format!("seed of {} entries for node of {}", g.len(), n),
                ));
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; n]);
            for (a, x) in slot.iter_mut().zip(g) {
                *a += x;
            }
        }
        let upper = seeds.iter().map(|(v, _)| v.0 + 1).max().unwrap_or(0);
        for i in (0..upper).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj, grads);
            adj[i] = Some(g);
        }
        Ok(NodeGrads { grads: adj })
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>], grads: &mut ParamGrads) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = nodes[v.0].value.numel();
            f(adj[v.0].get_or_insert_with(|| vec![0.0; n]));
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => grads.add_dense(*id, g),
            Op::ParamRows(id, rows) => {
                let c = out.cols();
                for (k, &r) in rows.iter().enumerate() {
                    grads.add_row(*id, r, &g[k * c..(k + 1) * c]);
                }
            }
            Op::Unary(f, a) => {
                let x = self.value(*a).data();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        let d = match f {
                            Unary::Relu => {
                                if x[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sigmoid => y[j] * (1.0 - y[j]),
                            Unary::Tanh => 1.0 - y[j] * y[j],
                            Unary::Softplus => sigmoid(x[j]),
                            Unary::LogSoftplus => {
                                if x[j] < -30.0 {
                                    1.0
                                } else {
                                    sigmoid(x[j]) / softplus(x[j])
                                }
                            }
                            Unary::Ln => 1.0 / x[j],
                            Unary::Exp => y[j],
                            Unary::Sin => x[j].cos(),
                            Unary::Cos => -x[j].sin(),
                            Unary::Square => 2.0 * x[j],
                            Unary::Scale(c) => *c,
                            Unary::Offset(_) => 1.0,
                        };
                        ga[j] += g[j] * d;
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(p, q)| *p -= q));
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |ga| {
                    for j in 0..ga.len() {
                        ga[j] += g[j] * y[j];
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..gb.len() {
                        gb[j] += g[j] * x[j];
                    }
                });
            }
            Op::MatVec(w, x) => {
                let (wm, xv) = (self.value(*w), self.value(*x));
                let c = wm.cols();
                acc(*w, &mut |gw| {
                    for (r, gr) in g.iter().enumerate() {
                        for (j, xj) in xv.data().iter().enumerate() {
                            gw[r * c + j] += gr * xj;
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for (r, gr) in g.iter().enumerate() {
                        for (j, wj) in wm.row(r).iter().enumerate() {
                            gx[j] += gr * wj;
                        }
                    }
                });
            }
            Op::MatMulT(a, w) => {
                let (am, wm) = (self.value(*a), self.value(*w));
                let (n, c, r) = (am.rows(), am.cols(), wm.rows());
                acc(*a, &mut |ga| {
                    for k in 0..n {
                        for i in 0..r {
                            let gki = g[k * r + i];
                            if gki == 0.0 {
                                continue;
                            }
                            for (j, wij) in wm.row(i).iter().enumerate() {
                                ga[k * c + j] += gki * wij;
                            }
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for k in 0..n {
                        let ak = am.row(k);
                        for i in 0..r {
                            let gki = g[k * r + i];
                            if gki == 0.0 {
                                continue;
                            }
                            for (j, akj) in ak.iter().enumerate() {
                                gw[i * c + j] += gki * akj;
                            }
                        }
                    }
                });
            }
            Op::Dot(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                let s = g[0];
                acc(*a, &mut |ga| ga.iter_mut().zip(y).for_each(|(p, q)| *p += s * q));
                acc(*b, &mut |gb| gb.iter_mut().zip(x).for_each(|(p, q)| *p += s * q));
            }
            Op::Sum(a) => {
                let s = g[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|p| *p += s));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, &mut |gp| add_into(gp, &g[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let (c1, c2) = (self.value(*a).cols(), self.value(*b).cols());
                let n = out.rows();
                acc(*a, &mut |ga| {
                    for k in 0..n {
                        add_into(&mut ga[k * c1..(k + 1) * c1], &g[k * (c1 + c2)..k * (c1 + c2) + c1]);
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..n {
                        add_into(
                            &mut gb[k * c2..(k + 1) * c2],
                            &g[k * (c1 + c2) + c1..(k + 1) * (c1 + c2)],
                        );
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let c = self.value(*a).cols();
                let (n, len) = (out.rows(), out.cols());
                acc(*a, &mut |ga| {
                    for k in 0..n {
                        add_into(&mut ga[k * c + start..k * c + start + len], &g[k * len..(k + 1) * len]);
                    }
                });
            }
            Op::GatherRows(a, rows) => {
                let c = out.cols();
                acc(*a, &mut |ga| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut ga[r * c..(r + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::StackRows(rows) => {
                let c = out.cols();
                for (k, &r) in rows.iter().enumerate() {
                    acc(r, &mut |gr| add_into(gr, &g[k * c..(k + 1) * c]));
                }
            }
            Op::MeanRows(a) => {
                let am = self.value(*a);
                let (n, c) = (am.rows(), am.cols());
                let inv = 1.0 / n as f64;
                acc(*a, &mut |ga| {
                    for k in 0..n {
                        for j in 0..c {
                            ga[k * c + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::BroadcastRows(v) => {
                let c = out.cols();
                acc(*v, &mut |gv| {
                    for chunk in g.chunks(c) {
                        add_into(gv, chunk);
                    }
                });
            }
            Op::AddRowBroadcast(a, b) => {
                let c = out.cols();
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for chunk in g.chunks(c) {
                        add_into(gb, chunk);
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let c = out.cols();
                let y = out.data();
                acc(*a, &mut |ga| {
                    for k in 0..out.rows() {
                        let (yk, gk) = (&y[k * c..(k + 1) * c], &g[k * c..(k + 1) * c]);
                        let s: f64 = yk.iter().zip(gk).map(|(p, q)| p * q).sum();
                        for j in 0..c {
                            ga[k * c + j] += yk[j] * (gk[j] - s);
                        }
                    }
                });
            }
            Op::MatTVec(a, w) => {
                let (am, wv) = (self.value(*a), self.value(*w));
                let c = am.cols();
                acc(*a, &mut |ga| {
                    for (k, wk) in wv.data().iter().enumerate() {
                        for j in 0..c {
                            ga[k * c + j] += g[j] * wk;
                        }
                    }
                });
                acc(*w, &mut |gw| {
                    for (k, gwk) in gw.iter_mut().enumerate() {
                        *gwk += am.row(k).iter().zip(g).map(|(p, q)| p * q).sum::<f64>();
                    }
                });
            }
            Op::RowDots(a, b) => {
                let (am, bm) = (self.value(*a), self.value(*b));
                let c = am.cols();
                acc(*a, &mut |ga| {
                    for (k, gk) in g.iter().enumerate() {
                        for (j, bj) in bm.row(k).iter().enumerate() {
                            ga[k * c + j] += gk * bj;
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for (k, gk) in g.iter().enumerate() {
                        for (j, aj) in am.row(k).iter().enumerate() {
                            gb[k * c + j] += gk * aj;
                        }
                    }
                });
            }
            Op::OuterConst(cs, w) => {
                let d = out.cols();
                acc(*w, &mut |gw| {
                    for (k, ck) in cs.iter().enumerate() {
                        for j in 0..d {
                            gw[j] += g[k * d + j] * ck;
                        }
                    }
                });
            }
            Op::TimeTrig { omega, deltas, phases } => {
                let w = self.value(*omega).data();
                let d = w.len();
                acc(*omega, &mut |gw| {
                    for (k, dt) in deltas.iter().enumerate() {
                        for j in 0..d {
                            let arg = w[j] * dt + phases[k * d + j];
                            let deriv = if j % 2 == 0 { -arg.sin() } else { arg.cos() };
                            gw[j] += g[k * d + j] * deriv * dt;
                        }
                    }
                });
            }
            Op::MhScores { query, keys, heads } => {
                let (q, km) = (self.value(*query), self.value(*keys));
                let p = q.cols();
                let hd = p / heads;
                let n = km.rows();
                acc(*query, &mut |gq| {
                    for (d, gqd) in gq.iter_mut().enumerate() {
                        let h = d / hd;
                        for r in 0..n {
                            *gqd += g[h * n + r] * km.row(r)[d];
                        }
                    }
                });
                acc(*keys, &mut |gk| {
                    for r in 0..n {
                        for d in 0..p {
                            gk[r * p + d] += g[(d / hd) * n + r] * q.data()[d];
                        }
                    }
                });
            }
            Op::MhCombine { weights, values, heads } => {
                let (a, v) = (self.value(*weights), self.value(*values));
                let dv = v.cols();
                let hd = dv / heads;
                let n = v.rows();
                acc(*weights, &mut |ga| {
                    for r in 0..n {
                        let vr = v.row(r);
                        for d in 0..dv {
                            ga[(d / hd) * n + r] += g[d] * vr[d];
                        }
                    }
                });
                acc(*values, &mut |gv| {
                    for r in 0..n {
                        for d in 0..dv {
                            gv[r * dv + d] += g[d] * a.row(d / hd)[r];
                        }
                    }
                });
            }
            Op::SegmentMean(a, segs) => {
                let c = out.cols();
                acc(*a, &mut |ga| {
                    for gi in 0..segs.len() {
                        let group = segs.group(gi);
                        let inv = 1.0 / group.len().max(1) as f64;
                        for &r in group {
                            for j in 0..c {
                                ga[r * c + j] += g[gi * c + j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SegmentDots(q, k, segs) => {
                let (qm, km) = (self.value(*q), self.value(*k));
                let c = qm.cols();
                acc(*q, &mut |gq| {
                    for gi in 0..segs.len() {
                        for e in segs.span(gi) {
                            let kr = km.row(segs.members()[e]);
                            for j in 0..c {
                                gq[gi * c + j] += g[e] * kr[j];
                            }
                        }
                    }
                });
                acc(*k, &mut |gk| {
                    for gi in 0..segs.len() {
                        let qg = qm.row(gi);
                        for e in segs.span(gi) {
                            let r = segs.members()[e];
                            for j in 0..c {
                                gk[r * c + j] += g[e] * qg[j];
                            }
                        }
                    }
                });
            }
            Op::SegmentSoftmax(x, segs) => {
                let y = out.data();
                acc(*x, &mut |gx| {
                    for gi in 0..segs.len() {
                        let span = segs.span(gi);
                        let s: f64 = span.clone().map(|e| y[e] * g[e]).sum();
                        for e in span {
                            gx[e] += y[e] * (g[e] - s);
                        }
                    }
                });
            }
            Op::SegmentSum(w, v, segs) => {
                let (wv, vm) = (self.value(*w), self.value(*v));
                let c = vm.cols();
                acc(*w, &mut |gw| {
                    for gi in 0..segs.len() {
                        for e in segs.span(gi) {
                            gw[e] += dot(&g[gi * c..(gi + 1) * c], vm.row(segs.members()[e]));
                        }
                    }
                });
                acc(*v, &mut |gv| {
                    for gi in 0..segs.len() {
                        for e in segs.span(gi) {
                            let r = segs.members()[e];
                            for j in 0..c {
                                gv[r * c + j] += wv.data()[e] * g[gi * c + j];
                            }
                        }
                    }
                });
            }
            Op::ReplaceRows(base, rows, values) => {
                let c = out.cols();
                let mut masked = g.to_vec();
                for &r in rows {
                    masked[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = 0.0);
                }
                acc(*base, &mut |gb| add_into(gb, &masked));
                acc(*values, &mut |gv| {
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gv[k * c..(k + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
