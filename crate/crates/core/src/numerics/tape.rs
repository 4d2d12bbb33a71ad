//! Reverse-mode differentiation over whole tensors.
//!
//! A [`Tape`] records every differentiable op as a node holding its output
//! and whatever the backward pass needs. [`Tape::backward`] walks the nodes
//! in exact reverse order of execution.

use crate::error::{Error, Result};
use crate::numerics::{ParamId, Params, Tensor};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    GroupedLinear {
        x: Var,
        weights: Var,
        groups: usize,
    },
    GroupSum {
        x: Var,
        groups: usize,
        scale: f64,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    SegmentSoftmax {
        x: Var,
        offsets: Vec<usize>,
    },
    GroupedAggregate {
        weights: Var,
        values: Var,
        offsets: Vec<usize>,
    },
    SegmentSum {
        x: Var,
        offsets: Vec<usize>,
    },
    RowDot(Var, Var),
    ScaleRows {
        weights: Var,
        values: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SegmentMax {
        x: Var,
        argmax: Vec<usize>,
    },
    SparseCombine {
        x: Var,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        weights: Vec<f64>,
    },
    MeanRows(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    non_finite: Option<usize>,
}

fn check_segments(op: &'static str, offsets: &[usize], rows: usize) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&rows) {
        return Err(Error::shape(
            op,
            &[offsets.last().copied().unwrap_or(0)],
            &[rows],
        ));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::InvalidConfig(format!("{op}: offsets decrease")));
    }
    Ok(())
}

fn first_empty_segment(offsets: &[usize]) -> Option<usize> {
    offsets.windows(2).position(|w| w[0] == w[1])
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Index of the first recorded node whose output holds a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.non_finite
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(self.nodes.len());
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that is not a learnable parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, params: &Params, id: ParamId) -> Var {
        self.push(params.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = self.value(x).matmul(self.value(w))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        let c = xv.cols();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Per-column normalization over the rows present in `x`, followed by a
    /// learnable scale and shift.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.len() != c || bv.len() != c {
            return Err(Error::shape("batch_norm", xv.shape(), gv.shape()));
        }
        let mut mean = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)).take(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        let inv_n = if n > 0 { 1.0 / n as f64 } else { 0.0 };
        mean.iter_mut().for_each(|m| *m *= inv_n);
        let mut var = vec![0.0; c];
        for row in xv.data().chunks(c.max(1)).take(n) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s * inv_n + eps).sqrt()).collect();
        let mut normalized = xv.clone();
        let mut out = xv.clone();
        if c > 0 {
            for (nrow, orow) in normalized
                .data_mut()
                .chunks_mut(c)
                .zip(out.data_mut().chunks_mut(c))
            {
                for j in 0..c {
                    let h = (nrow[j] - mean[j]) * inv_std[j];
                    nrow[j] = h;
                    orow[j] = gv.data()[j] * h + bv.data()[j];
                }
            }
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    /// `out[i][l] = dot(x[i][l*cg..(l+1)*cg], w[l*cg..(l+1)*cg])`.
    pub fn grouped_linear(&mut self, x: Var, weights: Var, groups: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(weights));
        let c = xv.cols();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::GroupMismatch {
                channels: c,
                groups,
            });
        }
        if wv.len() != c {
            return Err(Error::shape("grouped_linear", xv.shape(), wv.shape()));
        }
        let cg = c / groups;
        let n = xv.rows();
        let mut out = vec![0.0; n * groups];
        for i in 0..n {
            let row = xv.row(i);
            for l in 0..groups {
                let span = l * cg..(l + 1) * cg;
                out[i * groups + l] = row[span.clone()]
                    .iter()
                    .zip(&wv.data()[span])
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let out = Tensor::matrix(n, groups, out)?;
        Ok(self.push(out, Op::GroupedLinear { x, weights, groups }))
    }

    /// Sum of each contiguous channel group, times `scale`.
    pub fn group_sum(&mut self, x: Var, groups: usize, scale: f64) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::GroupMismatch {
                channels: c,
                groups,
            });
        }
        let cg = c / groups;
        let n = xv.rows();
        let mut out = vec![0.0; n * groups];
        for i in 0..n {
            let row = xv.row(i);
            for l in 0..groups {
                out[i * groups + l] = row[l * cg..(l + 1) * cg].iter().sum::<f64>() * scale;
            }
        }
        let out = Tensor::matrix(n, groups, out)?;
        Ok(self.push(out, Op::GroupSum { x, groups, scale }))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", &[bad], &[n]));
        }
        let out = xv.select_rows(&indices);
        Ok(self.push(out, Op::GatherRows { x, indices }))
    }

    /// Softmax over the rows of each segment `offsets[s]..offsets[s+1]`,
    /// independently per column, with max subtraction.
    pub fn segment_softmax(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_softmax", &offsets, xv.rows())?;
        if let Some(point) = first_empty_segment(&offsets) {
            return Err(Error::EmptyReferenceSet { point });
        }
        let c = xv.cols();
        let mut out = xv.clone();
        let data = out.data_mut();
        let mut maxes = vec![0.0; c];
        let mut sums = vec![0.0; c];
        for w in offsets.windows(2) {
            let seg = &mut data[w[0] * c..w[1] * c];
            maxes.fill(f64::NEG_INFINITY);
            for row in seg.chunks(c) {
                for (m, v) in maxes.iter_mut().zip(row) {
                    *m = m.max(*v);
                }
            }
            sums.fill(0.0);
            for row in seg.chunks_mut(c) {
                for ((v, m), s) in row.iter_mut().zip(&maxes).zip(sums.iter_mut()) {
                    *v = (*v - m).exp();
                    *s += *v;
                }
            }
            for row in seg.chunks_mut(c) {
                for (v, s) in row.iter_mut().zip(&sums) {
                    *v /= s;
                }
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax { x, offsets }))
    }

    /// Grouped aggregation: `weights` is `E×g`, `values` is `E×c`; the output
    /// row for segment `s` is the sum over its edges of the values with every
    /// channel of group `l` scaled by the edge's weight for `l`.
    pub fn grouped_aggregate(
        &mut self,
        weights: Var,
        values: Var,
        offsets: Vec<usize>,
    ) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.rows() != vv.rows() {
            return Err(Error::shape("grouped_aggregate", wv.shape(), vv.shape()));
        }
        check_segments("grouped_aggregate", &offsets, wv.rows())?;
        let (g, c) = (wv.cols(), vv.cols());
        if g == 0 || c % g != 0 {
            return Err(Error::GroupMismatch {
                channels: c,
                groups: g,
            });
        }
        let cg = c / g;
        let n = offsets.len() - 1;
        let mut out = vec![0.0; n * c];
        for (s, w) in offsets.windows(2).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for e in w[0]..w[1] {
                let we = wv.row(e);
                let ve = vv.row(e);
                for (ch, ov) in o.iter_mut().enumerate() {
                    *ov += we[ch / cg] * ve[ch];
                }
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        Ok(self.push(
            out,
            Op::GroupedAggregate {
                weights,
                values,
                offsets,
            },
        ))
    }

    /// Row sums within each segment.
    pub fn segment_sum(&mut self, x: Var, offsets: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_sum", &offsets, xv.rows())?;
        let c = xv.cols();
        let n = offsets.len() - 1;
        let mut out = vec![0.0; n * c];
        for (s, w) in offsets.windows(2).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for e in w[0]..w[1] {
                for (ov, v) in o.iter_mut().zip(xv.row(e)) {
                    *ov += v;
                }
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        Ok(self.push(out, Op::SegmentSum { x, offsets }))
    }

    /// Row-wise inner product, `E×c, E×c -> E×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape("row_dot", av.shape(), bv.shape()));
        }
        let n = av.rows();
        let out: Vec<f64> = (0..n)
            .map(|i| av.row(i).iter().zip(bv.row(i)).map(|(x, y)| x * y).sum())
            .collect();
        let out = Tensor::matrix(n, 1, out)?;
        Ok(self.push(out, Op::RowDot(a, b)))
    }

    /// Scales row `e` of `values` by the scalar `weights[e]` (`E×1`).
    pub fn scale_rows(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (wv, vv) = (self.value(weights), self.value(values));
        if wv.cols() != 1 || wv.rows() != vv.rows() {
            return Err(Error::shape("scale_rows", wv.shape(), vv.shape()));
        }
        let mut out = vv.clone();
        let c = vv.cols();
        if c > 0 {
            for (row, w) in out.data_mut().chunks_mut(c).zip(wv.data()) {
                row.iter_mut().for_each(|v| *v *= w);
            }
        }
        Ok(self.push(out, Op::ScaleRows { weights, values }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        if start > end || end > xv.cols() {
            return Err(Error::shape("slice_cols", xv.shape(), &[start, end]));
        }
        let n = xv.rows();
        let mut out = Vec::with_capacity(n * (end - start));
        for i in 0..n {
            out.extend_from_slice(&xv.row(i)[start..end]);
        }
        let out = Tensor::matrix(n, end - start, out)?;
        Ok(self.push(out, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map_or(0, |&p| self.value(p).rows());
        for &p in parts {
            if self.value(p).rows() != n {
                return Err(Error::shape("concat_cols", &[n], self.value(p).shape()));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::matrix(n, total, out)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Channel-wise max over the rows `indices[offsets[s]..offsets[s+1]]` of
    /// `x`. The gradient flows to the first row attaining each maximum.
    pub fn segment_max(&mut self, x: Var, offsets: &[usize], indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        check_segments("segment_max", offsets, indices.len())?;
        if let Some(point) = first_empty_segment(offsets) {
            return Err(Error::EmptyReferenceSet { point });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape("segment_max", &[bad], &[xv.rows()]));
        }
        let (out, argmax) = crate::pooling::kernels::segment_max(xv, offsets, indices);
        Ok(self.push(out, Op::SegmentMax { x, argmax }))
    }

    /// `out[s] = sum_e weights[e] * x[indices[e]]` over the edges of segment
    /// `s`; the weights are constants.
    pub fn sparse_combine(
        &mut self,
        x: Var,
        offsets: Vec<usize>,
        indices: Vec<usize>,
        weights: Vec<f64>,
    ) -> Result<Var> {
        let xv = self.value(x);
        check_segments("sparse_combine", &offsets, indices.len())?;
        if weights.len() != indices.len() {
            return Err(Error::shape("sparse_combine", &[weights.len()], &[indices.len()]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.rows()) {
            return Err(Error::shape("sparse_combine", &[bad], &[xv.rows()]));
        }
        let c = xv.cols();
        let n = offsets.len() - 1;
        let mut out = vec![0.0; n * c];
        for (s, w) in offsets.windows(2).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for e in w[0]..w[1] {
                let we = weights[e];
                for (ov, v) in o.iter_mut().zip(xv.row(indices[e])) {
                    *ov += we * v;
                }
            }
        }
        let out = Tensor::matrix(n, c, out)?;
        Ok(self.push(
            out,
            Op::SparseCombine {
                x,
                offsets,
                indices,
                weights,
            },
        ))
    }

    /// Mean over rows, `n×c -> 1×c`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, c) = (xv.rows(), xv.cols());
        if n == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut out = vec![0.0; c];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::matrix(1, c, out)?;
        Ok(self.push(out, Op::MeanRows(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::vector(vec![s]), Op::Sum(x))
    }

    /// `sum(x ⊙ weights)` for a constant `weights` of the same shape; handy
    /// as a generic scalar loss.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape("weighted_sum", xv.shape(), weights.shape()));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::vector(vec![s]), Op::WeightedSum { x, weights }))
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.non_finite.is_some_and(|i| i <= loss.0) {
            return Err(Error::NonFinite("forward pass"));
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &dy, &mut grads)?;
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, idx: usize, dy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let mut acc = |var: Var, g: Tensor| {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = dy.matmul(&bv.transpose())?.reshape(av.shape().to_vec())?;
                let db = av.transpose().matmul(dy)?.reshape(bv.shape().to_vec())?;
                acc(*a, da);
                acc(*b, db);
            }
            Op::AddBias(x, b) => {
                let c = dy.cols();
                let mut db = vec![0.0; c];
                if c > 0 {
                    for row in dy.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
                let db = Tensor::new(self.value(*b).shape().to_vec(), db)?;
                acc(*x, dy.clone());
                acc(*b, db);
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let da = dy.zip_map(self.value(*b), |d, v| d * v)?;
                let db = dy.zip_map(self.value(*a), |d, v| d * v)?;
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(x, s) => acc(*x, dy.map(|v| v * s)),
            Op::Relu(x) => {
                let dx = dy.zip_map(self.value(*x), |d, v| if v > 0.0 { d } else { 0.0 })?;
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (n, c) = (dy.rows(), dy.cols());
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut sum_dh = vec![0.0; c];
                let mut sum_dh_h = vec![0.0; c];
                for i in 0..n {
                    let (d, h) = (dy.row(i), normalized.row(i));
                    for j in 0..c {
                        dbeta[j] += d[j];
                        dgamma[j] += d[j] * h[j];
                        let dh = d[j] * gv.data()[j];
                        sum_dh[j] += dh;
                        sum_dh_h[j] += dh * h[j];
                    }
                }
                let mut dx = Tensor::zeros(dy.shape());
                let nf = n as f64;
                for i in 0..n {
                    let (d, h) = (dy.row(i), normalized.row(i));
                    let out = dx.row_mut(i);
                    for j in 0..c {
                        let dh = d[j] * gv.data()[j];
                        out[j] = inv_std[j] / nf * (nf * dh - sum_dh[j] - h[j] * sum_dh_h[j]);
                    }
                }
                acc(*x, dx);
                acc(*gamma, Tensor::new(gv.shape().to_vec(), dgamma)?);
                acc(*beta, Tensor::new(self.value(*beta).shape().to_vec(), dbeta)?);
            }
            Op::GroupedLinear { x, weights, groups } => {
                let (xv, wv) = (self.value(*x), self.value(*weights));
                let (n, c) = (xv.rows(), xv.cols());
                let cg = c / groups;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = vec![0.0; c];
                for i in 0..n {
                    let d = dy.row(i);
                    let row = xv.row(i);
                    let out = dx.row_mut(i);
                    for ch in 0..c {
                        let dl = d[ch / cg];
                        out[ch] = dl * wv.data()[ch];
                        dw[ch] += dl * row[ch];
                    }
                }
                acc(*x, dx);
                acc(*weights, Tensor::new(wv.shape().to_vec(), dw)?);
            }
            Op::GroupSum { x, groups, scale } => {
                let xv = self.value(*x);
                let (n, c) = (xv.rows(), xv.cols());
                let cg = c / groups;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    let d = dy.row(i);
                    for (ch, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = d[ch / cg] * scale;
                    }
                }
                acc(*x, dx);
            }
            Op::GatherRows { x, indices } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (e, &i) in indices.iter().enumerate() {
                    for (o, d) in dx.row_mut(i).iter_mut().zip(dy.row(e)) {
                        *o += d;
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = &node.value;
                let c = y.cols();
                let mut dx = Tensor::zeros(y.shape());
                let mut dots = vec![0.0; c];
                for w in offsets.windows(2) {
                    dots.fill(0.0);
                    for e in w[0]..w[1] {
                        for ((s, d), v) in dots.iter_mut().zip(dy.row(e)).zip(y.row(e)) {
                            *s += d * v;
                        }
                    }
                    for e in w[0]..w[1] {
                        let (d, v) = (dy.row(e), y.row(e));
                        let out = dx.row_mut(e);
                        for j in 0..c {
                            out[j] = v[j] * (d[j] - dots[j]);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::GroupedAggregate {
                weights,
                values,
                offsets,
            } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let (g, c) = (wv.cols(), vv.cols());
                let cg = c / g;
                let mut dw = Tensor::zeros(wv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for (s, w) in offsets.windows(2).enumerate() {
                    let d = dy.row(s);
                    for e in w[0]..w[1] {
                        let we = wv.row(e);
                        let ve = vv.row(e);
                        let dve = dv.row_mut(e);
                        for ch in 0..c {
                            dve[ch] = we[ch / cg] * d[ch];
                        }
                        let dwe = dw.row_mut(e);
                        for ch in 0..c {
                            dwe[ch / cg] += d[ch] * ve[ch];
                        }
                    }
                }
                acc(*weights, dw);
                acc(*values, dv);
            }
            Op::SegmentSum { x, offsets } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (s, w) in offsets.windows(2).enumerate() {
                    for e in w[0]..w[1] {
                        dx.row_mut(e).copy_from_slice(dy.row(s));
                    }
                }
                acc(*x, dx);
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for e in 0..av.rows() {
                    let d = dy.data()[e];
                    for (o, v) in da.row_mut(e).iter_mut().zip(bv.row(e)) {
                        *o = d * v;
                    }
                    for (o, v) in db.row_mut(e).iter_mut().zip(av.row(e)) {
                        *o = d * v;
                    }
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::ScaleRows { weights, values } => {
                let (wv, vv) = (self.value(*weights), self.value(*values));
                let mut dw = Tensor::zeros(wv.shape());
                let mut dv = Tensor::zeros(vv.shape());
                for e in 0..vv.rows() {
                    let w = wv.data()[e];
                    let d = dy.row(e);
                    dw.data_mut()[e] = d.iter().zip(vv.row(e)).map(|(a, b)| a * b).sum();
                    for (o, dd) in dv.row_mut(e).iter_mut().zip(d) {
                        *o = w * dd;
                    }
                }
                acc(*weights, dw);
                acc(*values, dv);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                let width = dy.cols();
                for i in 0..dy.rows() {
                    dx.row_mut(i)[*start..*start + width].copy_from_slice(dy.row(i));
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let width = pv.cols();
                    let mut dp = Tensor::zeros(pv.shape());
                    for i in 0..dy.rows() {
                        dp.row_mut(i).copy_from_slice(&dy.row(i)[start..start + width]);
                    }
                    start += width;
                    acc(p, dp);
                }
            }
            Op::SegmentMax { x, argmax } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut dx = Tensor::zeros(xv.shape());
                let data = dx.data_mut();
                for (k, (&src, d)) in argmax.iter().zip(dy.data()).enumerate() {
                    data[src * c + k % c] += d;
                }
                acc(*x, dx);
            }
            Op::SparseCombine {
                x,
                offsets,
                indices,
                weights,
            } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.shape());
                for (s, w) in offsets.windows(2).enumerate() {
                    for e in w[0]..w[1] {
                        let we = weights[e];
                        for (o, d) in dx.row_mut(indices[e]).iter_mut().zip(dy.row(s)) {
                            *o += we * d;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let n = xv.rows() as f64;
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..xv.rows() {
                    for (o, d) in dx.row_mut(i).iter_mut().zip(dy.data()) {
                        *o = d / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let d = dy.data()[0];
                acc(*x, Tensor::full(self.value(*x).shape(), d));
            }
            Op::WeightedSum { x, weights } => {
                let d = dy.data()[0];
                let dx = Tensor::new(self.value(*x).shape().to_vec(), weights.map(|w| w * d).into_data())?;
                acc(*x, dx);
            }
        }
        Ok(())
    }

    /// Adds the gradient of every parameter leaf into `params`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, params: &mut Params) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.grad_mut(*id).add_assign(g);
            }
        }
    }

    /// Runs `backward` and accumulates parameter gradients in one step.
    pub fn backward_into(&self, loss: Var, params: &mut Params) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, params);
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_product_rule() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![2.0, 3.0]));
        let b = tape.leaf(Tensor::vector(vec![5.0, 7.0]));
        let p = tape.mul(a, b).unwrap();
        let s = tape.add(p, a).unwrap();
        let loss = tape.sum(s);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[6.0, 8.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn param_grads_accumulate_across_passes() {
        let mut params = Params::new();
        let id = params.add("w", Tensor::vector(vec![1.0, -2.0]));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let w = tape.param(&params, id);
            let w2 = tape.mul(w, w).unwrap();
            let loss = tape.sum(w2);
            tape.backward_into(loss, &mut params).unwrap();
        }
        assert_eq!(params.grad(id).data(), &[4.0, -8.0]);
        params.zero_grad();
        assert_eq!(params.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn segment_max_routes_to_first_argmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![1.0, 4.0, 4.0]).unwrap());
        let m = tape.segment_max(x, &[0, 3], &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0]);
        let loss = tape.sum(m);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn segment_softmax_rejects_empty_segment() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 1, vec![0.0, 1.0]).unwrap());
        let err = tape.segment_softmax(x, vec![0, 2, 2]).unwrap_err();
        assert!(matches!(err, Error::EmptyReferenceSet { point: 1 }));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }
}
