//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Values are computed eagerly as operations are recorded; [`Tape::backward`]
//! walks the tape once in reverse and accumulates adjoints. Parameters are
//! identified by [`ParamId`] so gradients can be routed back to a parameter
//! store without shared references. Registering the same [`ParamId`] twice
//! returns the original node, which makes gradient accumulation across reuse
//! sites automatic.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Stable identity of a trainable parameter, assigned by the parameter store.
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct ParamId(pub u32);

/// Handle to a node on a specific tape.
#[derive(Copy, Clone, Debug)]
pub struct Var(usize);

enum Op {
    Const,
    Param,
    Add(usize, usize),
    Scale(usize, f64),
    /// Row-broadcast add: each row of the first input gets the second added.
    AddBias(usize, usize),
    Mul(usize, usize),
    Matmul { a: usize, b: usize, ta: bool, tb: bool },
    BatchMatmul { a: usize, b: usize, batch: usize, ta: bool, tb: bool },
    GatherRows { src: usize, idx: Vec<usize> },
    /// Copy of `base` with `delta` row `i` added at row `pos[i]`.
    ScatterAddRows { base: usize, delta: usize, pos: Vec<usize> },
    ConcatCols(Vec<usize>),
    SliceCols { src: usize, start: usize, end: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    SoftmaxRows(usize),
    /// Softmax over contiguous row segments of a column vector of scores.
    SegmentSoftmax { scores: usize, offsets: Vec<usize> },
    /// Per-segment weighted sum of value rows; one output row per segment.
    SegmentWeightedSum { weights: usize, values: usize, offsets: Vec<usize> },
    Elu(usize),
    Gelu(usize),
    Relu(usize),
    LeakyRelu { x: usize, slope: f64 },
    SumAll(usize),
    /// Mean over rows of softmax cross-entropy against integer targets.
    CrossEntropyMean { logits: usize, targets: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar with respect to every parameter reachable from it.
///
/// Parameters that did not participate in the recorded computation have no
/// entry; parameters that participated but received no signal have zeros.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: HashMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.by_param.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Wengert list; create one per training step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, usize>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const, value)
    }

    /// Register a trainable leaf. The same id always maps to one node; the
    /// value supplied on a repeat registration must be the one already held.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&node) = self.param_nodes.get(&id) {
            debug_assert_eq!(self.nodes[node].value.shape(), value.shape());
            return Var(node);
        }
        let v = self.push(Op::Param, value.clone());
        self.param_nodes.insert(id, v.0);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        tensor::axpy(1.0, tb, &mut out);
        Ok(self.push(Op::Add(a.0, b.0), out))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v *= alpha;
        }
        self.push(Op::Scale(a.0, alpha), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a length-C vector to every row of an R x C input.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.numel() != ta.cols() {
            return Err(Error::Shape(format!(
                "add_bias: input cols {} vs bias len {}",
                ta.cols(),
                tb.numel()
            )));
        }
        let cols = ta.cols();
        let mut out = ta.clone();
        let bd = tb.data().to_vec();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..cols {
                row[j] += bd[j];
            }
        }
        Ok(self.push(Op::AddBias(a.0, bias.0), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul shapes {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut out = ta.clone();
        for (o, x) in out.data_mut().iter_mut().zip(tb.data()) {
            *o *= x;
        }
        Ok(self.push(Op::Mul(a.0, b.0), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b), ta, tb)?;
        Ok(self.push(Op::Matmul { a: a.0, b: b.0, ta, tb }, out))
    }

    /// Block-diagonal matmul over `batch` equally sized stacked blocks.
    pub fn batch_matmul(&mut self, a: Var, b: Var, batch: usize, ta: bool, tb: bool) -> Result<Var> {
        let out = tensor::batch_matmul(self.value(a), self.value(b), batch, ta, tb)?;
        Ok(self.push(Op::BatchMatmul { a: a.0, b: b.0, batch, ta, tb }, out))
    }

    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let ts = self.value(src);
        let (rows, cols) = (ts.rows(), ts.cols());
        if idx.is_empty() {
            return Err(Error::Shape("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Shape(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(ts.row(i));
        }
        let out = Tensor::new(vec![idx.len(), cols], data)?;
        Ok(self.push(Op::GatherRows { src: src.0, idx: idx.to_vec() }, out))
    }

    /// Returns a copy of `base` with row `i` of `delta` added at row `pos[i]`.
    pub fn scatter_add_rows(&mut self, base: Var, delta: Var, pos: &[usize]) -> Result<Var> {
        let (tb, td) = (self.value(base), self.value(delta));
        if tb.cols() != td.cols() {
            return Err(Error::Shape(format!(
                "scatter_add_rows cols {} vs {}",
                tb.cols(),
                td.cols()
            )));
        }
        if pos.len() != td.rows() {
            return Err(Error::Shape(format!(
                "scatter_add_rows: {} positions for {} delta rows",
                pos.len(),
                td.rows()
            )));
        }
        if let Some(&bad) = pos.iter().find(|&&p| p >= tb.rows()) {
            return Err(Error::Shape(format!(
                "scatter_add_rows: position {bad} out of {} rows",
                tb.rows()
            )));
        }
        let mut out = tb.clone();
        for (i, &p) in pos.iter().enumerate() {
            let drow = td.row(i).to_vec();
            let orow = out.row_mut(p);
            for (o, d) in orow.iter_mut().zip(&drow) {
                *o += d;
            }
        }
        Ok(self.push(Op::ScatterAddRows { base: base.0, delta: delta.0, pos: pos.to_vec() }, out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Shape("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::Shape("concat_cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.iter().map(|p| p.0).collect()), out))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let ts = self.value(src);
        if start >= end || end > ts.cols() {
            return Err(Error::Shape(format!(
                "slice_cols [{start},{end}) of {} cols",
                ts.cols()
            )));
        }
        let rows = ts.rows();
        let mut data = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            data.extend_from_slice(&ts.row(r)[start..end]);
        }
        let out = Tensor::new(vec![rows, end - start], data)?;
        Ok(self.push(Op::SliceCols { src: src.0, start, end }, out))
    }

    /// Per-row normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let cols = tx.cols();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::Shape(format!(
                "layer_norm: {} cols vs gamma {} / beta {}",
                cols,
                tg.numel(),
                tb.numel()
            )));
        }
        let mut out = tx.clone();
        let g = tg.data().to_vec();
        let b = tb.data().to_vec();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..cols {
                row[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, eps }, out))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(Op::SoftmaxRows(a.0), out)
    }

    /// Softmax within each `[offsets[s], offsets[s+1])` range of a flat score
    /// vector. Empty segments are allowed and contribute nothing.
    pub fn segment_softmax(&mut self, scores: Var, offsets: &[usize]) -> Result<Var> {
        let ts = self.value(scores);
        validate_offsets(offsets, ts.numel())?;
        let mut out = ts.clone();
        for s in 0..offsets.len() - 1 {
            let (lo, hi) = (offsets[s], offsets[s + 1]);
            if lo < hi {
                softmax_in_place(&mut out.data_mut()[lo..hi]);
            }
        }
        Ok(self.push(Op::SegmentSoftmax { scores: scores.0, offsets: offsets.to_vec() }, out))
    }

    /// Output row `s` is the weight-blended sum of value rows in segment `s`.
    pub fn segment_weighted_sum(&mut self, weights: Var, values: Var, offsets: &[usize]) -> Result<Var> {
        let (tw, tv) = (self.value(weights), self.value(values));
        validate_offsets(offsets, tw.numel())?;
        if tw.numel() != tv.rows() {
            return Err(Error::Shape(format!(
                "segment_weighted_sum: {} weights vs {} value rows",
                tw.numel(),
                tv.rows()
            )));
        }
        let segs = offsets.len() - 1;
        let cols = tv.cols();
        let mut out = Tensor::zeros(&[segs, cols]);
        for s in 0..segs {
            for e in offsets[s]..offsets[s + 1] {
                let w = tw.data()[e];
                let vrow = tv.row(e);
                let orow = out.row_mut(s);
                for j in 0..cols {
                    orow[j] += w * vrow[j];
                }
            }
        }
        Ok(self.push(
            Op::SegmentWeightedSum { weights: weights.0, values: values.0, offsets: offsets.to_vec() },
            out,
        ))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v <= 0.0 {
                *v = v.exp() - 1.0;
            }
        }
        self.push(Op::Elu(a.0), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            *v = gelu_scalar(*v);
        }
        self.push(Op::Gelu(a.0), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(Op::Relu(a.0), out)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        self.push(Op::LeakyRelu { x: a.0, slope }, out)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::SumAll(a.0), Tensor::scalar(s))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, cols) = (tl.rows(), tl.cols());
        if targets.len() != rows {
            return Err(Error::Shape(format!(
                "cross_entropy_mean: {} targets for {} rows",
                targets.len(),
                rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Shape(format!(
                "cross_entropy_mean: target {bad} out of {cols} classes"
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = tl.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let out = Tensor::scalar(total / rows as f64);
        Ok(self.push(Op::CrossEntropyMean { logits: logits.0, targets: targets.to_vec() }, out))
    }

    /// Gradients of the scalar at `root` with respect to all parameters on
    /// the tape. One backward pass per tape: gradients never accumulate
    /// silently across steps, so a second call without a fresh tape errors.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Autodiff(
                "backward already ran on this tape; record a fresh tape per step".into(),
            ));
        }
        self.backward_done = true;
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(d) = adj[i].take() else { continue };
            self.accumulate_inputs(i, &d, &mut adj)?;
            if let Op::Param = self.nodes[i].op {
                adj[i] = Some(d);
            }
        }

        let mut grads = Gradients::default();
        for (&id, &node) in &self.param_nodes {
            let g = adj[node]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.nodes[node].value.shape()));
            grads.by_param.insert(id, g);
        }
        Ok(grads)
    }

    fn accumulate_inputs(&self, node: usize, d: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let val = |i: usize| &self.nodes[i].value;
        let bump = |i: usize, g: Tensor, adj: &mut [Option<Tensor>]| {
            match &mut adj[i] {
                Some(acc) => tensor::axpy(1.0, &g, acc),
                slot => *slot = Some(g),
            }
        };
        match &self.nodes[node].op {
            Op::Const | Op::Param => {}
            Op::Add(a, b) => {
                bump(*a, d.clone(), adj);
                bump(*b, d.clone(), adj);
            }
            Op::Scale(a, alpha) => {
                let mut g = d.clone();
                for v in g.data_mut() {
                    *v *= alpha;
                }
                bump(*a, g, adj);
            }
            Op::AddBias(a, bias) => {
                bump(*a, d.clone(), adj);
                let cols = d.cols();
                let mut g = Tensor::zeros(val(*bias).shape());
                for r in 0..d.rows() {
                    let drow = d.row(r);
                    for j in 0..cols {
                        g.data_mut()[j] += drow[j];
                    }
                }
                bump(*bias, g, adj);
            }
            Op::Mul(a, b) => {
                let mut ga = d.clone();
                for (g, x) in ga.data_mut().iter_mut().zip(val(*b).data()) {
                    *g *= x;
                }
                bump(*a, ga, adj);
                let mut gb = d.clone();
                for (g, x) in gb.data_mut().iter_mut().zip(val(*a).data()) {
                    *g *= x;
                }
                bump(*b, gb, adj);
            }
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let ga = if !*ta {
                    tensor::matmul(d, vb, false, !*tb)?
                } else {
                    tensor::matmul(vb, d, *tb, true)?
                };
                bump(*a, reshape_like(ga, va)?, adj);
                let gb = if !*tb {
                    tensor::matmul(va, d, !*ta, false)?
                } else {
                    tensor::matmul(d, va, true, *ta)?
                };
                bump(*b, reshape_like(gb, vb)?, adj);
            }
            Op::BatchMatmul { a, b, batch, ta, tb } => {
                let (va, vb) = (val(*a), val(*b));
                let ga = if !*ta {
                    tensor::batch_matmul(d, vb, *batch, false, !*tb)?
                } else {
                    tensor::batch_matmul(vb, d, *batch, *tb, true)?
                };
                bump(*a, reshape_like(ga, va)?, adj);
                let gb = if !*tb {
                    tensor::batch_matmul(va, d, *batch, !*ta, false)?
                } else {
                    tensor::batch_matmul(d, va, *batch, true, *ta)?
                };
                bump(*b, reshape_like(gb, vb)?, adj);
            }
            Op::GatherRows { src, idx } => {
                let mut g = Tensor::zeros(val(*src).shape());
                let cols = g.cols();
                for (i, &row) in idx.iter().enumerate() {
                    let drow = d.row(i);
                    let grow = g.row_mut(row);
                    for j in 0..cols {
                        grow[j] += drow[j];
                    }
                }
                bump(*src, g, adj);
            }
            Op::ScatterAddRows { base, delta, pos } => {
                bump(*base, d.clone(), adj);
                let cols = d.cols();
                let mut g = Tensor::zeros(val(*delta).shape());
                for (i, &p) in pos.iter().enumerate() {
                    let drow = d.row(p);
                    let grow = g.row_mut(i);
                    for j in 0..cols {
                        grow[j] += drow[j];
                    }
                }
                bump(*delta, g, adj);
            }
            Op::ConcatCols(parts) => {
                let rows = d.rows();
                let mut start = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    let mut g = Tensor::zeros(val(p).shape());
                    for r in 0..rows {
                        let drow = &d.row(r)[start..start + cols];
                        g.row_mut(r).copy_from_slice(drow);
                    }
                    bump(p, g, adj);
                    start += cols;
                }
            }
            Op::SliceCols { src, start, end } => {
                let mut g = Tensor::zeros(val(*src).shape());
                for r in 0..d.rows() {
                    g.row_mut(r)[*start..*end].copy_from_slice(d.row(r));
                }
                bump(*src, g, adj);
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let vx = val(*x);
                let vg = val(*gamma);
                let cols = vx.cols() as f64;
                let mut gx = Tensor::zeros(vx.shape());
                let mut gg = Tensor::zeros(vg.shape());
                let mut gb = Tensor::zeros(val(*beta).shape());
                for r in 0..vx.rows() {
                    let row = vx.row(r);
                    let mean = row.iter().sum::<f64>() / cols;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols;
                    let inv = 1.0 / (var + eps).sqrt();
                    let drow = d.row(r);
                    // dxhat, plus gamma/beta contributions
                    let mut dxhat = vec![0.0; row.len()];
                    let mut mean_dx = 0.0;
                    let mut mean_dx_xhat = 0.0;
                    for j in 0..row.len() {
                        let xhat = (row[j] - mean) * inv;
                        gg.data_mut()[j] += drow[j] * xhat;
                        gb.data_mut()[j] += drow[j];
                        let dxh = drow[j] * vg.data()[j];
                        dxhat[j] = dxh;
                        mean_dx += dxh;
                        mean_dx_xhat += dxh * xhat;
                    }
                    mean_dx /= cols;
                    mean_dx_xhat /= cols;
                    let gxrow = gx.row_mut(r);
                    for j in 0..row.len() {
                        let xhat = (row[j] - mean) * inv;
                        gxrow[j] = inv * (dxhat[j] - mean_dx - xhat * mean_dx_xhat);
                    }
                }
                bump(*x, gx, adj);
                bump(*gamma, gg, adj);
                bump(*beta, gb, adj);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[node].value;
                let mut g = Tensor::zeros(y.shape());
                for r in 0..y.rows() {
                    let yrow = y.row(r);
                    let drow = d.row(r);
                    let dot: f64 = yrow.iter().zip(drow).map(|(y, d)| y * d).sum();
                    let grow = g.row_mut(r);
                    for j in 0..yrow.len() {
                        grow[j] = yrow[j] * (drow[j] - dot);
                    }
                }
                bump(*a, g, adj);
            }
            Op::SegmentSoftmax { scores, offsets } => {
                let y = &self.nodes[node].value;
                let mut g = Tensor::zeros(y.shape());
                for s in 0..offsets.len() - 1 {
                    let (lo, hi) = (offsets[s], offsets[s + 1]);
                    let dot: f64 = (lo..hi).map(|e| y.data()[e] * d.data()[e]).sum();
                    for e in lo..hi {
                        g.data_mut()[e] = y.data()[e] * (d.data()[e] - dot);
                    }
                }
                bump(*scores, g, adj);
            }
            Op::SegmentWeightedSum { weights, values, offsets } => {
                let vw = val(*weights);
                let vv = val(*values);
                let cols = vv.cols();
                let mut gw = Tensor::zeros(vw.shape());
                let mut gv = Tensor::zeros(vv.shape());
                for s in 0..offsets.len() - 1 {
                    let drow = d.row(s);
                    for e in offsets[s]..offsets[s + 1] {
                        let vrow = vv.row(e);
                        gw.data_mut()[e] = drow.iter().zip(vrow).map(|(d, v)| d * v).sum();
                        let w = vw.data()[e];
                        let grow = gv.row_mut(e);
                        for j in 0..cols {
                            grow[j] = w * drow[j];
                        }
                    }
                }
                bump(*weights, gw, adj);
                bump(*values, gv, adj);
            }
            Op::Elu(a) => {
                let y = &self.nodes[node].value;
                let mut g = d.clone();
                for (g, (&x, &y)) in g.data_mut().iter_mut().zip(val(*a).data().iter().zip(y.data())) {
                    if x <= 0.0 {
                        *g *= y + 1.0;
                    }
                }
                bump(*a, g, adj);
            }
            Op::Gelu(a) => {
                let mut g = d.clone();
                for (g, &x) in g.data_mut().iter_mut().zip(val(*a).data()) {
                    *g *= gelu_grad_scalar(x);
                }
                bump(*a, g, adj);
            }
            Op::Relu(a) => {
                let mut g = d.clone();
                for (g, &x) in g.data_mut().iter_mut().zip(val(*a).data()) {
                    if x < 0.0 {
                        *g = 0.0;
                    }
                }
                bump(*a, g, adj);
            }
            Op::LeakyRelu { x, slope } => {
                let mut g = d.clone();
                for (g, &v) in g.data_mut().iter_mut().zip(val(*x).data()) {
                    if v < 0.0 {
                        *g *= slope;
                    }
                }
                bump(*x, g, adj);
            }
            Op::SumAll(a) => {
                let g = Tensor::filled(val(*a).shape(), d.item());
                bump(*a, g, adj);
            }
            Op::CrossEntropyMean { logits, targets } => {
                let vl = val(*logits);
                let scale = d.item() / vl.rows() as f64;
                let mut g = Tensor::zeros(vl.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let row = vl.row(r);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    let grow = g.row_mut(r);
                    for j in 0..row.len() {
                        let p = (row[j] - max).exp() / denom;
                        grow[j] = scale * (p - if j == t { 1.0 } else { 0.0 });
                    }
                }
                bump(*logits, g, adj);
            }
        }
        Ok(())
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn validate_offsets(offsets: &[usize], len: usize) -> Result<()> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != len {
        return Err(Error::Shape(format!(
            "segment offsets must start at 0 and end at {len}"
        )));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Shape("segment offsets must be nondecreasing".into()));
    }
    Ok(())
}

fn reshape_like(mut t: Tensor, like: &Tensor) -> Result<Tensor> {
    if t.numel() != like.numel() {
        return Err(Error::Autodiff(format!(
            "adjoint numel {} vs value numel {}",
            t.numel(),
            like.numel()
        )));
    }
    if t.shape() != like.shape() {
        t = Tensor::new(like.shape().to_vec(), t.data().to_vec())?;
    }
    Ok(t)
}
