//! Reverse-mode automatic differentiation over an explicit operation record.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters are pulled in
//! from a [`ParamStore`] (each parameter is recorded once per graph), every
//! operation appends one node, and [`Graph::backward`] walks the record in
//! reverse exactly once.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Vector spans the columns and is repeated for every row.
    Rows,
    /// Vector spans the rows and is repeated for every column.
    Cols,
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    AddVec(Var, Var, Axis),
    MulVec(Var, Var, Axis),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Conv1d { x: Var, kernel: Var, dilation: usize },
    StraightThrough(Var),
    GroupMul(Var, Var),
    BlockTranspose(Var, usize),
    GatherRows(Var, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A quantization decision captured during a forward pass.
///
/// `offset` is `entry - z`, so replaying it as `z + offset` reproduces the
/// quantized value at the anchor while remaining differentiable in `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantPick {
    pub index: usize,
    pub offset: Vec<f64>,
}

/// How [`Graph::quantize`] resolves codebook assignments.
#[derive(Debug, Clone, Default)]
pub enum QuantizeMode {
    /// Snap to the nearest codebook row (straight-through backward).
    #[default]
    Nearest,
    /// Reuse recorded picks in call order. The forward value becomes
    /// `z + offset`, the linearization of straight-through quantization that
    /// finite-difference checks compare against.
    Replay(Vec<QuantPick>),
}

pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
    quantize_mode: QuantizeMode,
    picks: Vec<QuantPick>,
    relu_margin: f64,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every parameter gradient into the store's gradient slots.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, var) in &self.params {
            if let Some(g) = self.wrt(var) {
                store.accumulate_grad(id, g);
            }
        }
    }

    pub fn param_grad(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

/// Index of the row of `rows` (row-major, `k × l`) nearest to `z` in squared
/// Euclidean distance; ties go to the lowest index.
pub fn nearest_row(z: &[f64], rows: &[f64], l: usize) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.chunks_exact(l).enumerate() {
        let d: f64 = row.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        _ => (shape[..shape.len() - 1].iter().product(), shape[shape.len() - 1]),
    }
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s> Graph<'s> {
    /// A graph without a parameter store (constants and leaves only).
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
            quantize_mode: QuantizeMode::Nearest,
            picks: Vec::new(),
            relu_margin: f64::INFINITY,
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self {
            store: Some(store),
            param_nodes: vec![None; store.len()],
            ..Self::new()
        }
    }

    pub fn with_mode(store: &'s ParamStore, mode: QuantizeMode) -> Self {
        Self {
            quantize_mode: mode,
            ..Self::with_params(store)
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Quantization decisions taken so far, in call order.
    pub fn quant_picks(&self) -> &[QuantPick] {
        &self.picks
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
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

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// A differentiable leaf that is not backed by a store parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(Some(v)) = self.param_nodes.get(id.0) {
            return *v;
        }
        let store = self.store.expect("graph built without a parameter store");
        let mut value = store.get(id).clone();
        value.requires_grad = false;
        let v = self.push(value, Op::Param, true);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Value copy that blocks gradient flow.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a));
        let (k2, n) = as_matrix(self.shape(b));
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = as_matrix(self.shape(a));
        let (n, k2) = as_matrix(self.shape(b));
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = as_matrix(self.shape(a));
        let t = Tensor::matrix(m, n, self.value(a).data().to_vec())
            .expect("shape preserved")
            .transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let m = self.value(a).data().iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
        self.relu_margin = self.relu_margin.min(m);
        self.map(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Smallest `|x|` fed to any ReLU so far: how far this evaluation sits
    /// from the nearest kink. Infinite when no ReLU was applied.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    fn vec_extent(&self, op: &'static str, a: Var, v: Var, axis: Axis) -> Result<(usize, usize)> {
        let (m, n) = as_matrix(self.shape(a));
        let len = self.value(v).len();
        let ok = match axis {
            Axis::Rows => len == n,
            Axis::Cols => len > 0 && m % len == 0,
        };
        if !ok {
            return Err(Error::dim(op, self.shape(a), self.shape(v)));
        }
        Ok((m, n))
    }

    /// Adds a vector to every row (`Axis::Rows`) or every column (`Axis::Cols`).
    ///
    /// With `Axis::Cols` the vector may be shorter than the column, in which
    /// case it is tiled: row `i` uses entry `i % len`. This broadcasts a
    /// per-channel vector over a stack of samples.
    pub fn add_vec(&mut self, a: Var, v: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.vec_extent("add_vec", a, v, axis)?;
        let vv = self.value(v).data();
        let vl = vv.len();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += match axis {
                    Axis::Rows => vv[j],
                    Axis::Cols => vv[i % vl],
                };
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(t, Op::AddVec(a, v, axis), rg))
    }

    /// Scales columns (`Axis::Rows`) or rows (`Axis::Cols`) by a vector,
    /// tiled as in [`Graph::add_vec`].
    pub fn mul_vec(&mut self, a: Var, v: Var, axis: Axis) -> Result<Var> {
        let (m, n) = self.vec_extent("mul_vec", a, v, axis)?;
        let vv = self.value(v).data();
        let vl = vv.len();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] *= match axis {
                    Axis::Rows => vv[j],
                    Axis::Cols => vv[i % vl],
                };
            }
        }
        let t = Tensor::new(self.shape(a), out)?;
        let rg = self.rg(a) || self.rg(v);
        Ok(self.push(t, Op::MulVec(a, v, axis), rg))
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (m, n) = as_matrix(av.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(n).take(m) {
            softmax_in_place(row);
        }
        let t = Tensor::new(av.shape(), out).expect("same shape");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Concatenation along the last axis; all inputs need the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (m, _) = as_matrix(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = as_matrix(self.shape(p));
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (_, n) = as_matrix(self.shape(first));
        let mut out = Vec::new();
        for &p in parts {
            let (_, pn) = as_matrix(self.shape(p));
            if pn != n {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            out.extend_from_slice(self.value(p).data());
        }
        let m = out.len() / n;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", self.shape(a), &[start, len]));
        }
        let d = self.value(a).data();
        let out: Vec<f64> = (0..m)
            .flat_map(|i| d[i * n + start..i * n + start + len].iter().copied())
            .collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[m, len], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if len == 0 || start + len > m {
            return Err(Error::dim("slice_rows", self.shape(a), &[start, len]));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[len, n], out)?, Op::SliceRows(a, start), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean of squared differences over all elements.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        self.same_shape("mse_loss", pred, target)?;
        let p = self.value(pred).data();
        let t = self.value(target).data();
        let s = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(s), Op::Mse(pred, target), rg))
    }

    /// Causal dilated convolution.
    ///
    /// `x` is `C_in × T`, `kernel` is `C_out × C_in × k`. The input is
    /// left-padded with `(k - 1) · dilation` zeros so the output is
    /// `C_out × T` and output `t` only reads inputs at times `≤ t`.
    ///
    /// A stack of `B` samples (`B·C_in × T`) yields `B·C_out × T`.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        if dilation < 1 {
            return Err(Error::Parameter("dilation must be at least 1".into()));
        }
        let ks = self.shape(kernel);
        if ks.len() != 3 {
            return Err(Error::dim("causal_conv1d", self.shape(x), ks));
        }
        let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
        let (xc, t_len) = as_matrix(self.shape(x));
        if c_in == 0 || xc % c_in != 0 || xc == 0 {
            return Err(Error::dim("causal_conv1d", self.shape(x), ks));
        }
        let batch = xc / c_in;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; batch * c_out * t_len];
        for (b, o) in (0..batch).flat_map(|b| (0..c_out).map(move |o| (b, o))) {
            let orow = &mut out[(b * c_out + o) * t_len..(b * c_out + o + 1) * t_len];
            for i in 0..c_in {
                let xrow = &xv[(b * c_in + i) * t_len..(b * c_in + i + 1) * t_len];
                for j in 0..k {
                    let w = kv[(o * c_in + i) * k + j];
                    let shift = (k - 1 - j) * dilation;
                    if w == 0.0 || shift >= t_len {
                        continue;
                    }
                    for t in shift..t_len {
                        orow[t] += w * xrow[t - shift];
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(&[batch * c_out, t_len], out)?,
            Op::Conv1d {
                x,
                kernel,
                dilation,
            },
            rg,
        ))
    }

    /// Vector quantization of a row `z` (`1 × L`) against `codebook` (`K × L`).
    ///
    /// The forward value is the selected codebook row; the backward pass copies
    /// the incoming gradient to `z` unchanged and sends nothing to the codebook.
    pub fn quantize(&mut self, z: Var, codebook: Var) -> Result<(Var, usize)> {
        let (rows, _) = as_matrix(self.shape(z));
        if rows != 1 {
            return Err(Error::dim("quantize", self.shape(z), self.shape(codebook)));
        }
        let (q, idx) = self.quantize_rows(z, codebook)?;
        Ok((q, idx[0]))
    }

    /// Row-wise quantization of `z` (`B × L`): each row snaps to its own
    /// codebook entry. Returns one index per row.
    pub fn quantize_rows(&mut self, z: Var, codebook: Var) -> Result<(Var, Vec<usize>)> {
        let (k, l) = as_matrix(self.shape(codebook));
        let (rows, cols) = as_matrix(self.shape(z));
        if cols != l {
            return Err(Error::dim("quantize", self.shape(z), self.shape(codebook)));
        }
        if k == 0 {
            return Err(Error::Config("empty codebook".into()));
        }
        let mut value = Vec::with_capacity(rows * l);
        let mut indices = Vec::with_capacity(rows);
        for r in 0..rows {
            let zr = &self.value(z).data()[r * l..(r + 1) * l];
            let (index, row) = match &self.quantize_mode {
                QuantizeMode::Nearest => {
                    let (idx, _) = nearest_row(zr, self.value(codebook).data(), l)
                        .ok_or_else(|| Error::Config("empty codebook".into()))?;
                    (idx, self.value(codebook).row_slice(idx).to_vec())
                }
                QuantizeMode::Replay(picks) => {
                    let pick = picks.get(self.picks.len()).ok_or_else(|| {
                        Error::Contract("quantization replay exhausted".into())
                    })?;
                    let v: Vec<f64> = zr.iter().zip(&pick.offset).map(|(a, b)| a + b).collect();
                    (pick.index, v)
                }
            };
            let offset = row.iter().zip(zr).map(|(e, z)| e - z).collect();
            self.picks.push(QuantPick { index, offset });
            value.extend_from_slice(&row);
            indices.push(index);
        }
        let rg = self.rg(z);
        let q = self.push(Tensor::new(self.shape(z), value)?, Op::StraightThrough(z), rg);
        Ok((q, indices))
    }

    /// Per-sample column gating. `a` stacks `B` blocks of `m` rows
    /// (`B·m × n`) and `r` is `B × n`: row `b·m + i` is scaled elementwise by
    /// `r[b]`.
    pub fn group_mul(&mut self, a: Var, r: Var) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        let (b, rn) = as_matrix(self.shape(r));
        if rn != n || b == 0 || m % b != 0 {
            return Err(Error::dim("group_mul", self.shape(a), self.shape(r)));
        }
        let group = m / b;
        let rv = self.value(r).data();
        let mut out = self.value(a).data().to_vec();
        for (i, row) in out.chunks_exact_mut(n).enumerate() {
            let gate = &rv[(i / group) * n..(i / group + 1) * n];
            row.iter_mut().zip(gate).for_each(|(x, g)| *x *= g);
        }
        let rg = self.rg(a) || self.rg(r);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::GroupMul(a, r), rg))
    }

    /// Transposes each of `blocks` stacked blocks: `B·m × n` becomes
    /// `B·n × m`.
    pub fn block_transpose(&mut self, a: Var, blocks: usize) -> Result<Var> {
        let (rows, n) = as_matrix(self.shape(a));
        if blocks == 0 || rows % blocks != 0 {
            return Err(Error::dim("block_transpose", self.shape(a), &[blocks]));
        }
        let m = rows / blocks;
        let av = self.value(a).data();
        let mut out = vec![0.0; av.len()];
        for b in 0..blocks {
            let base = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[base + j * m + i] = av[base + i * n + j];
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[blocks * n, m], out)?, Op::BlockTranspose(a, blocks), rg))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (m, n) = as_matrix(self.shape(a));
        if indices.is_empty() || indices.iter().any(|&i| i >= m) {
            return Err(Error::dim("gather_rows", self.shape(a), &[indices.len()]));
        }
        let av = self.value(a).data();
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            out.extend_from_slice(&av[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::new(&[indices.len(), n], out)?,
            Op::GatherRows(a, indices.to_vec()),
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(a));
                let (_, n) = as_matrix(self.shape(b));
                let bv = self.value(b).data();
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    gemm_nt_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gemm_tn_acc(av, g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a·bᵀ: da = g·b, db = gᵀ·a
                let (m, k) = as_matrix(self.shape(a));
                let (n, _) = as_matrix(self.shape(b));
                let bv = self.value(b).data();
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    gemm_acc(g, bv, ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gemm_tn_acc(g, av, gb, m, n, k);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = as_matrix(self.shape(a));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, gy), bb) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((x, gy), aa) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Relu(a) => {
                let av = self.value(a).data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((x, gy), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::AddVec(a, v, axis) => {
                let (m, n) = as_matrix(self.shape(a));
                let vl = self.value(v).len();
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                if let Some(gv) = self.acc(grads, v) {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = if axis == Axis::Rows { j } else { i % vl };
                            gv[idx] += g[i * n + j];
                        }
                    }
                }
            }
            Op::MulVec(a, v, axis) => {
                let (m, n) = as_matrix(self.shape(a));
                let vl = self.value(v).len();
                let av = self.value(a).data();
                let vv = self.value(v).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = if axis == Axis::Rows { j } else { i % vl };
                            ga[i * n + j] += g[i * n + j] * vv[idx];
                        }
                    }
                }
                if let Some(gv) = self.acc(grads, v) {
                    for i in 0..m {
                        for j in 0..n {
                            let idx = if axis == Axis::Rows { j } else { i % vl };
                            gv[idx] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let (_, n) = as_matrix(out.shape());
                let y = out.data();
                if let Some(ga) = self.acc(grads, a) {
                    for ((yr, gr), gar) in y
                        .chunks_exact(n)
                        .zip(g.chunks_exact(n))
                        .zip(ga.chunks_exact_mut(n))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            gar[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::ConcatCols(ref parts) => {
                let (m, total) = as_matrix(out.shape());
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = as_matrix(self.shape(p));
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = as_matrix(self.shape(a));
                let (_, len) = as_matrix(out.shape());
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * n + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::SliceRows(a, start) => {
                let (_, n) = as_matrix(self.shape(a));
                if let Some(ga) = self.acc(grads, a) {
                    add_into(&mut ga[start * n..start * n + g.len()], g);
                }
            }
            Op::Reshape(a) | Op::StraightThrough(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.value(a).len() as f64;
                if let Some(ga) = self.acc(grads, a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::Mse(p, t) => {
                let pv = self.value(p).data();
                let tv = self.value(t).data();
                let c = 2.0 * g[0] / pv.len() as f64;
                if let Some(gp) = self.acc(grads, p) {
                    for ((x, a), b) in gp.iter_mut().zip(pv).zip(tv) {
                        *x += c * (a - b);
                    }
                }
                if let Some(gt) = self.acc(grads, t) {
                    for ((x, a), b) in gt.iter_mut().zip(pv).zip(tv) {
                        *x -= c * (a - b);
                    }
                }
            }
            Op::GroupMul(a, r) => {
                let (m, n) = as_matrix(self.shape(a));
                let (b, _) = as_matrix(self.shape(r));
                let group = m / b;
                let av = self.value(a).data();
                let rv = self.value(r).data();
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..m {
                        let gate = &rv[(i / group) * n..(i / group + 1) * n];
                        for j in 0..n {
                            ga[i * n + j] += g[i * n + j] * gate[j];
                        }
                    }
                }
                if let Some(gr) = self.acc(grads, r) {
                    for i in 0..m {
                        let base = (i / group) * n;
                        for j in 0..n {
                            gr[base + j] += g[i * n + j] * av[i * n + j];
                        }
                    }
                }
            }
            Op::BlockTranspose(a, blocks) => {
                let (rows, n) = as_matrix(self.shape(a));
                let m = rows / blocks;
                if let Some(ga) = self.acc(grads, a) {
                    for b in 0..blocks {
                        let base = b * m * n;
                        for i in 0..m {
                            for j in 0..n {
                                ga[base + i * n + j] += g[base + j * m + i];
                            }
                        }
                    }
                }
            }
            Op::GatherRows(a, ref indices) => {
                let (_, n) = as_matrix(self.shape(a));
                if let Some(ga) = self.acc(grads, a) {
                    for (k, &i) in indices.iter().enumerate() {
                        add_into(&mut ga[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                dilation,
            } => {
                let ks = self.shape(kernel);
                let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
                let (xc, t_len) = as_matrix(self.shape(x));
                let batch = xc / c_in;
                let pairs = || (0..batch).flat_map(|b| (0..c_out).map(move |o| (b, o)));
                let xv = self.value(x).data();
                let kv = self.value(kernel).data();
                if let Some(gx) = self.acc(grads, x) {
                    for (b, o) in pairs() {
                        let grow = &g[(b * c_out + o) * t_len..(b * c_out + o + 1) * t_len];
                        for i in 0..c_in {
                            for j in 0..k {
                                let w = kv[(o * c_in + i) * k + j];
                                let shift = (k - 1 - j) * dilation;
                                if w == 0.0 || shift >= t_len {
                                    continue;
                                }
                                let xi = b * c_in + i;
                                let gxrow = &mut gx[xi * t_len..(xi + 1) * t_len];
                                for t in shift..t_len {
                                    gxrow[t - shift] += w * grow[t];
                                }
                            }
                        }
                    }
                }
                if let Some(gk) = self.acc(grads, kernel) {
                    for (b, o) in pairs() {
                        let grow = &g[(b * c_out + o) * t_len..(b * c_out + o + 1) * t_len];
                        for i in 0..c_in {
                            let xi = b * c_in + i;
                            let xrow = &xv[xi * t_len..(xi + 1) * t_len];
                            for j in 0..k {
                                let shift = (k - 1 - j) * dilation;
                                if shift >= t_len {
                                    continue;
                                }
                                let s: f64 = (shift..t_len).map(|t| grow[t] * xrow[t - shift]).sum();
                                gk[(o * c_in + i) * k + j] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Plain softmax of a slice (no graph).
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}
