//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.
//!
//! A [`Tape`] records every operation in creation order. Each recorded node
//! keeps its value, shape and (after [`Tape::backward`]) its gradient. A
//! [`Var`] is a cheap handle to a node. The tape is rebuilt for every
//! training step, so there is no graph caching or in-place mutation.
//!
//! Parents always precede children on the tape, so backward simply walks the
//! nodes in reverse recording order. That makes gradients deterministic.

use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    /// Position of the node in recording order.
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a · bᵀ` with a: [m,k], b: [n,k].
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    /// x: [m,n] plus a length-n row repeated over every row.
    AddRow { x: Var, row: Var, n: usize },
    Mul { a: Var, b: Var },
    MulConst { x: Var, c: Vec<f64> },
    Scale { x: Var, s: f64 },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LogSoftmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, cols: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<(Var, usize)>, rows: usize },
    SliceRows { x: Var, start: usize, cols: usize },
    SliceCols { x: Var, rows: usize, cols: usize, start: usize, len: usize },
    Embed { table: Var, ids: Vec<usize>, dim: usize },
    GradReverse { x: Var, lambda: f64 },
    Sum { x: Var },
    MeanRows { x: Var, rows: usize, cols: usize },
    WeightedSum { x: Var, w: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
}

/// Recorded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    backward_done: bool,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`. Handles to dropped
    /// nodes become invalid. Gradients are cleared.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.reset_grads();
    }

    /// Clears gradients so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last `backward` loss with respect to `v`. Nodes the
    /// loss does not reach have an all-zero gradient.
    pub fn grad(&self, v: Var) -> &[f64] {
        assert!(self.backward_done, "grad requested before backward");
        &self.grads[v.0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if data.is_empty() {
            return Err(Error::invalid("leaf: zero-size tensor"));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf))
    }

    /// Records a 2-D leaf from equal-length rows.
    pub fn leaf_rows(&mut self, rows: &[Vec<f64>]) -> Result<Var> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("leaf_rows: ragged rows"));
        }
        let data: Vec<f64> = rows.iter().flatten().copied().collect();
        self.leaf(data, &[rows.len(), cols])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `a · bᵀ`, used for attention scores.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul_nt",
                lhs: vec![m, k],
                rhs: vec![n, k2],
            });
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bv[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "transpose")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                out[j * rows + i] = xv[i * cols + j];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub { a, b }))
    }

    /// Adds a bias row to every row of a matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims2(x, "add_row")?;
        if numel(self.shape(row)) != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let rv = self.value(row);
        let out = self
            .value(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row, n }))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }))
    }

    /// Elementwise product with a non-differentiable constant (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Vec<f64>) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "mul_const",
                lhs: self.shape(x).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let out = self.value(x).iter().zip(&c).map(|(a, b)| a * b).collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulConst { x, c }))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * s).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, s })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x).to_vec(), out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid { x })
    }

    fn axis_split(&self, x: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        Ok((
            numel(&shape[..axis]),
            shape[axis],
            numel(&shape[axis + 1..]),
        ))
    }

    /// Softmax along `axis`, with the per-lane maximum subtracted first.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(x, axis)?;
        let out = lane_map(self.value(x), outer, len, inner, |lane, out| {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = (v - max).exp();
                z += *o;
            }
            out.iter_mut().for_each(|o| *o /= z);
        });
        Ok(self.push(self.shape(x).to_vec(), out, Op::Softmax { x, outer, len, inner }))
    }

    /// Row softmax where row `i` only sees columns `0..=i`. Masked entries
    /// are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "causal_softmax")?;
        let xv = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let visible = (i + 1).min(cols);
            let lane = &xv[i * cols..i * cols + visible];
            let o = &mut out[i * cols..i * cols + visible];
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, &v) in o.iter_mut().zip(lane) {
                *o = (v - max).exp();
                z += *o;
            }
            o.iter_mut().for_each(|o| *o /= z);
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::Softmax {
                x,
                outer: rows,
                len: cols,
                inner: 1,
            },
        ))
    }

    /// Numerically stable `log softmax` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = self.axis_split(x, axis)?;
        let out = lane_map(self.value(x), outer, len, inner, |lane, out| {
            let max = lane.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lane.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, &v) in out.iter_mut().zip(lane) {
                *o = v - lse;
            }
        });
        Ok(self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x, outer, len, inner }))
    }

    /// Per-row layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "layer_norm")?;
        for p in [gain, bias] {
            if numel(self.shape(p)) != cols {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x);
        let gv = self.value(gain);
        let bv = self.value(bias);
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = &xv[i * cols..(i + 1) * cols];
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[i] = is;
            for j in 0..cols {
                let h = (r[j] - mean) * is;
                xhat[i * cols + j] = h;
                out[i * cols + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                inv_std,
            },
        ))
    }

    /// Stacks 2-D tensors with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows: no inputs"))?;
        let (_, cols) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: vec![r, c],
                    rhs: vec![rows, cols],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, cols], out, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Joins 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols: no inputs"))?;
        let (rows, _) = self.dims2(first, "concat_cols")?;
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: vec![r, c],
                    rhs: vec![rows],
                });
            }
            dims.push((p, c));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &(p, c) in &dims {
                out.extend_from_slice(&self.value(p)[i * c..(i + 1) * c]);
            }
        }
        Ok(self.push(vec![rows, total], out, Op::ConcatCols { parts: dims, rows }))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_rows")?;
        if len == 0 || start + len > rows {
            return Err(Error::invalid(format!(
                "slice_rows: {start}..{} outside 0..{rows}",
                start + len
            )));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push(vec![len, cols], out, Op::SliceRows { x, start, cols }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "slice_cols")?;
        if len == 0 || start + len > cols {
            return Err(Error::invalid(format!(
                "slice_cols: {start}..{} outside 0..{cols}",
                start + len
            )));
        }
        let xv = self.value(x);
        let out = (0..rows)
            .flat_map(|i| xv[i * cols + start..i * cols + start + len].iter().copied())
            .collect();
        Ok(self.push(
            vec![rows, len],
            out,
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            },
        ))
    }

    /// Gathers rows of an embedding table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2(table, "embed")?;
        if ids.is_empty() {
            return Err(Error::invalid("embed: zero-size input"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("embed: id {bad} >= table size {vocab}")));
        }
        let tv = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&i| tv[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embed {
                table,
                ids: ids.to_vec(),
                dim,
            },
        ))
    }

    /// Gradient reversal: identity forward, `-lambda · upstream` backward.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "grad_reverse: lambda must be finite and non-negative, got {lambda}"
            )));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(self.shape(x).to_vec(), out, Op::GradReverse { x, lambda }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { x })
    }

    /// Column means of a 2-D tensor, returned as [1, cols].
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.dims2(x, "mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; cols];
        for r in xv.chunks(cols) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= rows as f64);
        Ok(self.push(vec![1, cols], out, Op::MeanRows { x, rows, cols }))
    }

    /// `Σ xᵢ·wᵢ` against constant weights, as a scalar.
    pub fn weighted_sum(&mut self, x: Var, w: Vec<f64>) -> Result<Var> {
        if w.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                lhs: self.shape(x).to_vec(),
                rhs: vec![w.len()],
            });
        }
        let s = self.value(x).iter().zip(&w).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { x, w }))
    }

    /// Fills the gradient of every node with respect to the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].shape.clone(),
                rhs: vec![1],
            });
        }
        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;
        let mut reached = vec![false; self.nodes.len()];
        reached[loss.0] = true;

        for idx in (0..=loss.0).rev() {
            if !reached[idx] {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            self.backprop_node(node, &g, &mut grads, &mut reached);
            grads[idx] = g;
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Vec<f64>], reached: &mut [bool]) {
        let mut touch = |v: Var| {
            reached[v.0] = true;
            v.0
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                let ia = touch(*a);
                let ga = &mut grads[ia];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                let ib = touch(*b);
                let gb = &mut grads[ib];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let x = av[i * k + p];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::MatMulNt { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                let ia = touch(*a);
                let ga = &mut grads[ia];
                for i in 0..m {
                    for j in 0..n {
                        let x = g[i * n + j];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in ga[i * k..(i + 1) * k].iter_mut().zip(&bv[j * k..(j + 1) * k]) {
                            *o += x * y;
                        }
                    }
                }
                let ib = touch(*b);
                let gb = &mut grads[ib];
                for i in 0..m {
                    for j in 0..n {
                        let x = g[i * n + j];
                        if x == 0.0 {
                            continue;
                        }
                        for (o, &y) in gb[j * k..(j + 1) * k].iter_mut().zip(&av[i * k..(i + 1) * k]) {
                            *o += x * y;
                        }
                    }
                }
            }
            Op::Transpose { x, rows, cols } => {
                let gx = &mut grads[touch(*x)];
                for i in 0..*rows {
                    for j in 0..*cols {
                        gx[i * cols + j] += g[j * rows + i];
                    }
                }
            }
            Op::Add { a, b } => {
                accumulate(&mut grads[touch(*a)], g);
                accumulate(&mut grads[touch(*b)], g);
            }
            Op::Sub { a, b } => {
                accumulate(&mut grads[touch(*a)], g);
                let gb = &mut grads[touch(*b)];
                for (o, v) in gb.iter_mut().zip(g) {
                    *o -= v;
                }
            }
            Op::AddRow { x, row, n } => {
                accumulate(&mut grads[touch(*x)], g);
                let gr = &mut grads[touch(*row)];
                for r in g.chunks(*n) {
                    accumulate(gr, r);
                }
            }
            Op::Mul { a, b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let ga = &mut grads[touch(*a)];
                for ((o, gi), y) in ga.iter_mut().zip(g).zip(bv) {
                    *o += gi * y;
                }
                let gb = &mut grads[touch(*b)];
                for ((o, gi), x) in gb.iter_mut().zip(g).zip(av) {
                    *o += gi * x;
                }
            }
            Op::MulConst { x, c } => {
                let gx = &mut grads[touch(*x)];
                for ((o, gi), ci) in gx.iter_mut().zip(g).zip(c) {
                    *o += gi * ci;
                }
            }
            Op::Scale { x, s } => {
                let gx = &mut grads[touch(*x)];
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += gi * s;
                }
            }
            Op::Relu { x } => {
                let xv = self.value(*x);
                let gx = &mut grads[touch(*x)];
                for ((o, gi), v) in gx.iter_mut().zip(g).zip(xv) {
                    if *v > 0.0 {
                        *o += gi;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let y = &node.value;
                let gx = &mut grads[touch(*x)];
                for ((o, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                    *o += gi * yi * (1.0 - yi);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = &node.value;
                let gx = &mut grads[touch(*x)];
                for_each_lane(*outer, *len, *inner, |idx| {
                    let dot: f64 = idx.clone().map(|i| g[i] * y[i]).sum();
                    for i in idx {
                        gx[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::LogSoftmax { x, outer, len, inner } => {
                let y = &node.value;
                let gx = &mut grads[touch(*x)];
                for_each_lane(*outer, *len, *inner, |idx| {
                    let total: f64 = idx.clone().map(|i| g[i]).sum();
                    for i in idx {
                        gx[i] += g[i] - y[i].exp() * total;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                cols,
                xhat,
                inv_std,
            } => {
                let cols = *cols;
                let gv = self.value(*gain);
                {
                    let gg = &mut grads[touch(*gain)];
                    for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for j in 0..cols {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                {
                    let gb = &mut grads[touch(*bias)];
                    for gr in g.chunks(cols) {
                        accumulate(gb, gr);
                    }
                }
                let gx = &mut grads[touch(*x)];
                let n = cols as f64;
                for (i, (gr, hr)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..cols {
                        let d = gr[j] * gv[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                    }
                    mean_d /= n;
                    mean_dh /= n;
                    for j in 0..cols {
                        let d = gr[j] * gv[j];
                        gx[i * cols + j] += inv_std[i] * (d - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(&mut grads[touch(p)], &g[offset..offset + len]);
                    offset += len;
                }
            }
            Op::ConcatCols { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(p, c) in parts {
                    let gp = &mut grads[touch(p)];
                    for i in 0..*rows {
                        accumulate(
                            &mut gp[i * c..(i + 1) * c],
                            &g[i * total + offset..i * total + offset + c],
                        );
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start, cols } => {
                let gx = &mut grads[touch(*x)];
                accumulate(&mut gx[start * cols..start * cols + g.len()], g);
            }
            Op::SliceCols {
                x,
                rows,
                cols,
                start,
                len,
            } => {
                let gx = &mut grads[touch(*x)];
                for i in 0..*rows {
                    accumulate(
                        &mut gx[i * cols + start..i * cols + start + len],
                        &g[i * len..(i + 1) * len],
                    );
                }
            }
            Op::Embed { table, ids, dim } => {
                let gt = &mut grads[touch(*table)];
                for (r, &id) in ids.iter().enumerate() {
                    accumulate(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                }
            }
            Op::GradReverse { x, lambda } => {
                let gx = &mut grads[touch(*x)];
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += -lambda * gi;
                }
            }
            Op::Sum { x } => {
                let gx = &mut grads[touch(*x)];
                gx.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::MeanRows { x, rows, cols } => {
                let gx = &mut grads[touch(*x)];
                let scale = 1.0 / *rows as f64;
                for r in gx.chunks_mut(*cols) {
                    for (o, gi) in r.iter_mut().zip(g) {
                        *o += gi * scale;
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                let gx = &mut grads[touch(*x)];
                for (o, wi) in gx.iter_mut().zip(w) {
                    *o += g[0] * wi;
                }
            }
        }
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn for_each_lane(outer: usize, len: usize, inner: usize, mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>)) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            f((base..base + len * inner).step_by(inner));
        }
    }
}

/// Applies `f` to every lane along the reduced axis. Lanes are gathered into
/// contiguous scratch buffers when `inner > 1`.
fn lane_map(
    x: &[f64],
    outer: usize,
    len: usize,
    inner: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if inner == 1 {
        for (lane, o) in x.chunks(len).zip(out.chunks_mut(len)) {
            f(lane, o);
        }
        return out;
    }
    let mut lane = vec![0.0; len];
    let mut res = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for j in 0..len {
                lane[j] = x[base + j * inner];
            }
            f(&lane, &mut res);
            for j in 0..len {
                out[base + j * inner] = res[j];
            }
        }
    }
    out
}
