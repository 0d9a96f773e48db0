//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of a forward pass in execution order.
//! [`Tape::backward`] replays the records in reverse, accumulating gradients
//! into every node that requires them. Tensors are addressed by [`TensorId`]
//! handles into the tape arena.
//!
//! Masked attention logits are represented as additive `-inf` entries; only
//! `add`-family ops and `softmax_rows` ever see non-finite values.

use crate::error::{Error, Result};

/// Handle into a tape's node arena.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(pub usize);

/// A recorded tensor value. `grad` is populated by [`Tape::backward`] and
/// accumulates across repeated backward calls until reset.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    op: Op,
    /// True when a gradient must flow through this node (it requires grad
    /// itself or transitively feeds from one that does).
    needs_grad: bool,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    AddRow(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    LayerNormRows {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        // saved per-element normalized values and per-row 1/std
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: TensorId,
        indices: Vec<usize>,
    },
    MaxPoolRows {
        x: TensorId,
        argmax: Vec<usize>,
    },
    CrossEntropy {
        logits: TensorId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    ConcatRows(Vec<TensorId>),
    SliceRows {
        x: TensorId,
        start: usize,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    SumAll(TensorId),
    Sqrt(TensorId),
    Reshape(TensorId),
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// Wengert list: append-only record of a single forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        1 => (1, shape[0]),
        2 => (shape[0], shape[1]),
        _ => (shape.iter().product::<usize>(), 1),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0]
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
            op,
            needs_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    fn flows(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// New leaf node. `requires_grad` marks it as a gradient sink.
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        let id = self.push(shape.to_vec(), data, Op::Leaf, requires_grad);
        self.nodes[id.0].requires_grad = requires_grad;
        id
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], &[1])
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `a[p,q] · b[q,r] -> [p,r]`
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (p, q) = rows_cols(self.shape(a));
        let (q2, r) = rows_cols(self.shape(b));
        if q != q2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![0.0; p * r];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for i in 0..p {
                for k in 0..q {
                    let av = ad[i * q + k];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &bd[k * r..(k + 1) * r];
                    let orow = &mut out[i * r..(i + 1) * r];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        let needs = self.flows(a) || self.flows(b);
        Ok(self.push(vec![p, r], out, Op::Matmul(a, b), needs))
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (p, q) = rows_cols(self.shape(a));
        let ad = self.data(a);
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = ad[i * q + j];
            }
        }
        let needs = self.flows(a);
        self.push(vec![q, p], out, Op::Transpose(a), needs)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op: op_name,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let needs = self.flows(a) || self.flows(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    /// `a[n,m] + row[m]`, broadcast over rows.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(a));
        let rl = self.data(row).len();
        if rl != m {
            return Err(Error::ShapeMismatch {
                op: "add_row",
                left: self.shape(a).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        let rd = self.data(row).to_vec();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + rd[i % m])
            .collect();
        let needs = self.flows(a) || self.flows(row);
        Ok(self.push(vec![n, m], out, Op::AddRow(a, row), needs))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x - y)
            .collect();
        let needs = self.flows(a) || self.flows(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let needs = self.flows(a) || self.flows(b);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * c).collect();
        let needs = self.flows(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, c), needs)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let needs = self.flows(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a), needs)
    }

    /// Row-wise softmax, stabilized by row-max subtraction. Entries at `-inf`
    /// map to exactly 0. A row with no finite entry is an error.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(a));
        let ad = self.data(a);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ad[i * m..(i + 1) * m];
            let mx = row
                .iter()
                .copied()
                .filter(|v| v.is_finite())
                .fold(f64::NEG_INFINITY, f64::max);
            if !mx.is_finite() {
                return Err(Error::DegenerateRow { row: i });
            }
            let orow = &mut out[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                // exp(-inf) is exactly 0.0 in IEEE arithmetic
                *o = (v - mx).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.flows(a);
        Ok(self.push(vec![n, m], out, Op::SoftmaxRows(a), needs))
    }

    /// Row-wise layer normalization with learnable scale and offset.
    pub fn layer_norm_rows(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
    ) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(x));
        if self.data(gamma).len() != m || self.data(beta).len() != m {
            return Err(Error::ShapeMismatch {
                op: "layer_norm_rows",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.data(x);
        let gd = self.data(gamma).to_vec();
        let bd = self.data(beta).to_vec();
        let mut out = vec![0.0; n * m];
        let mut xhat = vec![0.0; n * m];
        let mut inv_std = vec![0.0; n];
        for i in 0..n {
            let row = &xd[i * m..(i + 1) * m];
            let mean = row.iter().sum::<f64>() / m as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..m {
                let xh = (row[j] - mean) * is;
                xhat[i * m + j] = xh;
                out[i * m + j] = xh * gd[j] + bd[j];
            }
        }
        let needs = self.flows(x) || self.flows(gamma) || self.flows(beta);
        Ok(self.push(
            vec![n, m],
            out,
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Gather rows of `table` at `indices` -> `[indices.len(), cols]`.
    pub fn embedding(&mut self, table: TensorId, indices: &[usize]) -> Result<TensorId> {
        let (rows, cols) = rows_cols(self.shape(table));
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &ix in indices {
            if ix >= rows {
                return Err(Error::Vocabulary {
                    id: ix,
                    size: rows,
                });
            }
            out.extend_from_slice(&td[ix * cols..(ix + 1) * cols]);
        }
        let needs = self.flows(table);
        Ok(self.push(
            vec![indices.len(), cols],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Column-wise max over rows: `[n,m] -> [1,m]`. Ties route to the lowest
    /// row index, and the backward pass sends gradient only there.
    pub fn max_pool_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(x));
        if n == 0 {
            return Err(Error::contract("max_pool_rows on empty tensor"));
        }
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; m];
        let mut argmax = vec![0usize; m];
        for j in 0..m {
            let mut best = xd[j];
            let mut bi = 0usize;
            for i in 1..n {
                let v = xd[i * m + j];
                if v > best {
                    best = v;
                    bi = i;
                }
            }
            out[j] = best;
            argmax[j] = bi;
        }
        let needs = self.flows(x);
        Ok(self.push(vec![1, m], out, Op::MaxPoolRows { x, argmax }, needs))
    }

    /// Weighted token-level negative log-likelihood from raw logits.
    ///
    /// `logits[l, v]`, one target id per row, one weight per row; returns the
    /// scalar sum over rows of `w_l * (logsumexp(row_l) - row_l[target_l])`.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<TensorId> {
        let (n, v) = rows_cols(self.shape(logits));
        if targets.len() != n || weights.len() != n {
            return Err(Error::contract(format!(
                "cross_entropy targets/weights length {}/{} does not match {} logit rows",
                targets.len(),
                weights.len(),
                n
            )));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &ld[i * v..(i + 1) * v];
            let t = targets[i];
            if t >= v {
                return Err(Error::Vocabulary { id: t, size: v });
            }
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..v {
                let e = (row[j] - mx).exp();
                probs[i * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[i * v + j] /= sum;
            }
            loss += weights[i] * (sum.ln() + mx - row[t]);
        }
        let needs = self.flows(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of zero tensors"));
        }
        let (_, m) = rows_cols(self.shape(parts[0]));
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if c != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += r;
        }
        let mut out = Vec::with_capacity(total * m);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.flows(p));
        Ok(self.push(
            vec![total, m],
            out,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(x));
        if start + len > n {
            return Err(Error::contract(format!(
                "slice_rows [{start}, {}) out of {n} rows",
                start + len
            )));
        }
        let out = self.data(x)[start * m..(start + len) * m].to_vec();
        let needs = self.flows(x);
        Ok(self.push(vec![len, m], out, Op::SliceRows { x, start }, needs))
    }

    /// Concatenate matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of zero tensors"));
        }
        let (n, _) = rows_cols(self.shape(parts[0]));
        let mut total = 0usize;
        for &p in parts {
            let (r, c) = rows_cols(self.shape(p));
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            total += c;
        }
        let mut out = vec![0.0; n * total];
        let mut off = 0usize;
        for &p in parts {
            let (_, c) = rows_cols(self.shape(p));
            let pd = self.data(p);
            for i in 0..n {
                out[i * total + off..i * total + off + c]
                    .copy_from_slice(&pd[i * c..(i + 1) * c]);
            }
            off += c;
        }
        let needs = parts.iter().any(|&p| self.flows(p));
        Ok(self.push(
            vec![n, total],
            out,
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, m) = rows_cols(self.shape(x));
        if start + len > m {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of {m} columns",
                start + len
            )));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xd[i * m + start..i * m + start + len]);
        }
        let needs = self.flows(x);
        Ok(self.push(vec![n, len], out, Op::SliceCols { x, start }, needs))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.flows(x);
        self.push(vec![1], vec![s], Op::SumAll(x), needs)
    }

    /// Elementwise square root. Inputs must be non-negative.
    pub fn sqrt(&mut self, x: TensorId) -> Result<TensorId> {
        if self.data(x).iter().any(|v| *v < 0.0) {
            return Err(Error::contract("sqrt of negative value"));
        }
        let out: Vec<f64> = self.data(x).iter().map(|v| v.sqrt()).collect();
        let needs = self.flows(x);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Sqrt(x), needs))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != self.data(x).len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let out = self.data(x).to_vec();
        let needs = self.flows(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    // ── Backward ─────────────────────────────────────────────────────

    fn accum(&mut self, id: TensorId, delta: &[f64]) {
        if !self.flows(id) {
            return;
        }
        let node = &mut self.nodes[id.0];
        let g = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    /// Populate gradients of every `requires_grad` tensor reachable from
    /// `loss`. Gradients accumulate across calls; unreachable tensors are
    /// left untouched.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        // reachable set: ancestors of loss
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            for inp in op_inputs(&self.nodes[i].op) {
                reachable[inp.0] = true;
            }
        }
        // per-call gradient buffers keep repeated backward calls additive:
        // node.grad receives the final per-call contribution at the end.
        let mut g: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        g[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].needs_grad {
                continue;
            }
            let gout = match g[i].take() {
                Some(v) => v,
                None => continue,
            };
            // stash the per-call contribution on the node itself
            {
                let node = &mut self.nodes[i];
                let acc = node.grad.get_or_insert_with(|| vec![0.0; node.data.len()]);
                for (a, d) in acc.iter_mut().zip(&gout) {
                    *a += d;
                }
            }
            let op = self.nodes[i].op.clone();
            self.backprop_op(&op, i, &gout, &mut g);
        }
        Ok(())
    }

    fn add_into(&self, g: &mut [Option<Vec<f64>>], id: TensorId, delta: Vec<f64>) {
        if !self.flows(id) {
            return;
        }
        match &mut g[id.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(&delta) {
                    *a += d;
                }
            }
            None => g[id.0] = Some(delta),
        }
    }

    fn backprop_op(&mut self, op: &Op, _out: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (p, q) = rows_cols(self.shape(*a));
                let (_, r) = rows_cols(self.shape(*b));
                if self.flows(*a) {
                    // ga = gout · b^T
                    let bd = self.data(*b);
                    let mut ga = vec![0.0; p * q];
                    for i in 0..p {
                        for k in 0..q {
                            let mut s = 0.0;
                            for j in 0..r {
                                s += gout[i * r + j] * bd[k * r + j];
                            }
                            ga[i * q + k] = s;
                        }
                    }
                    self.add_into(g, *a, ga);
                }
                if self.flows(*b) {
                    // gb = a^T · gout
                    let ad = self.data(*a);
                    let mut gb = vec![0.0; q * r];
                    for k in 0..q {
                        for i in 0..p {
                            let av = ad[i * q + k];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..r {
                                gb[k * r + j] += av * gout[i * r + j];
                            }
                        }
                    }
                    self.add_into(g, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (p, q) = rows_cols(self.shape(*a));
                let mut ga = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..q {
                        ga[i * q + j] = gout[j * p + i];
                    }
                }
                self.add_into(g, *a, ga);
            }
            Op::Add(a, b) => {
                self.add_into(g, *a, gout.to_vec());
                self.add_into(g, *b, gout.to_vec());
            }
            Op::AddRow(a, row) => {
                self.add_into(g, *a, gout.to_vec());
                if self.flows(*row) {
                    let m = self.data(*row).len();
                    let mut gr = vec![0.0; m];
                    for (i, v) in gout.iter().enumerate() {
                        gr[i % m] += v;
                    }
                    self.add_into(g, *row, gr);
                }
            }
            Op::Sub(a, b) => {
                self.add_into(g, *a, gout.to_vec());
                if self.flows(*b) {
                    self.add_into(g, *b, gout.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.flows(*a) {
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(self.data(*b))
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    self.add_into(g, *a, d);
                }
                if self.flows(*b) {
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(self.data(*a))
                        .map(|(gv, av)| gv * av)
                        .collect();
                    self.add_into(g, *b, d);
                }
            }
            Op::Scale(a, c) => {
                self.add_into(g, *a, gout.iter().map(|v| v * c).collect());
            }
            Op::Relu(a) => {
                let d: Vec<f64> = gout
                    .iter()
                    .zip(self.data(*a))
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.add_into(g, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let (n, m) = rows_cols(self.shape(*a));
                let y = {
                    // output of this op
                    let out_id = _out;
                    self.nodes[out_id].data.clone()
                };
                let mut ga = vec![0.0; n * m];
                for i in 0..n {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &gout[i * m..(i + 1) * m];
                    let dot: f64 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
                    for j in 0..m {
                        ga[i * m + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.add_into(g, *a, ga);
            }
            Op::LayerNormRows {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, m) = rows_cols(self.shape(*x));
                let gd = self.data(*gamma).to_vec();
                if self.flows(*x) {
                    let mut gx = vec![0.0; n * m];
                    for i in 0..n {
                        let is = inv_std[i];
                        let xh = &xhat[i * m..(i + 1) * m];
                        let gr = &gout[i * m..(i + 1) * m];
                        let mut sum_gg = 0.0;
                        let mut sum_ggx = 0.0;
                        for j in 0..m {
                            let gg = gr[j] * gd[j];
                            sum_gg += gg;
                            sum_ggx += gg * xh[j];
                        }
                        let mf = m as f64;
                        for j in 0..m {
                            let gg = gr[j] * gd[j];
                            gx[i * m + j] = is * (gg - sum_gg / mf - xh[j] * sum_ggx / mf);
                        }
                    }
                    self.add_into(g, *x, gx);
                }
                if self.flows(*gamma) {
                    let mut gg = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gg[j] += gout[i * m + j] * xhat[i * m + j];
                        }
                    }
                    self.add_into(g, *gamma, gg);
                }
                if self.flows(*beta) {
                    let mut gb = vec![0.0; m];
                    for i in 0..n {
                        for j in 0..m {
                            gb[j] += gout[i * m + j];
                        }
                    }
                    self.add_into(g, *beta, gb);
                }
            }
            Op::Embedding { table, indices } => {
                if self.flows(*table) {
                    let (rows, cols) = rows_cols(self.shape(*table));
                    let mut gt = vec![0.0; rows * cols];
                    for (i, &ix) in indices.iter().enumerate() {
                        for j in 0..cols {
                            gt[ix * cols + j] += gout[i * cols + j];
                        }
                    }
                    self.add_into(g, *table, gt);
                }
            }
            Op::MaxPoolRows { x, argmax } => {
                let (n, m) = rows_cols(self.shape(*x));
                let mut gx = vec![0.0; n * m];
                for j in 0..m {
                    gx[argmax[j] * m + j] = gout[j];
                }
                self.add_into(g, *x, gx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if self.flows(*logits) {
                    let (n, v) = rows_cols(self.shape(*logits));
                    let gs = gout[0];
                    let mut gl = vec![0.0; n * v];
                    for i in 0..n {
                        let w = weights[i] * gs;
                        for j in 0..v {
                            let ind = if j == targets[i] { 1.0 } else { 0.0 };
                            gl[i * v + j] = w * (probs[i * v + j] - ind);
                        }
                    }
                    self.add_into(g, *logits, gl);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0usize;
                for &p in parts {
                    let (r, c) = rows_cols(self.shape(p));
                    let chunk = gout[off..off + r * c].to_vec();
                    self.add_into(g, p, chunk);
                    off += r * c;
                }
            }
            Op::SliceRows { x, start } => {
                let (n, m) = rows_cols(self.shape(*x));
                let mut gx = vec![0.0; n * m];
                gx[start * m..start * m + gout.len()].copy_from_slice(gout);
                self.add_into(g, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let total: usize = parts
                    .iter()
                    .map(|&p| rows_cols(self.shape(p)).1)
                    .sum();
                let mut off = 0usize;
                for &p in parts {
                    let (r, c) = rows_cols(self.shape(p));
                    if self.flows(p) {
                        let mut gp = vec![0.0; r * c];
                        for i in 0..r {
                            gp[i * c..(i + 1) * c]
                                .copy_from_slice(&gout[i * total + off..i * total + off + c]);
                        }
                        self.add_into(g, p, gp);
                    }
                    off += c;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, m) = rows_cols(self.shape(*x));
                let len = gout.len() / n;
                let mut gx = vec![0.0; n * m];
                for i in 0..n {
                    gx[i * m + start..i * m + start + len]
                        .copy_from_slice(&gout[i * len..(i + 1) * len]);
                }
                self.add_into(g, *x, gx);
            }
            Op::SumAll(x) => {
                let n = self.data(*x).len();
                self.add_into(g, *x, vec![gout[0]; n]);
            }
            Op::Sqrt(x) => {
                let out = self.nodes[_out].data.clone();
                // guard keeps the gradient finite at an exact zero input
                let d: Vec<f64> = gout
                    .iter()
                    .zip(&out)
                    .map(|(gv, yv)| gv / (2.0 * yv.max(1e-12)))
                    .collect();
                self.add_into(g, *x, d);
            }
            Op::Reshape(x) => {
                self.add_into(g, *x, gout.to_vec());
            }
        }
    }

    /// Softmax probability assigned to one class of one logits row. Pure
    /// read, records nothing.
    pub fn prob_of(&self, logits: TensorId, row: usize, class: usize) -> f64 {
        let (_, v) = rows_cols(self.shape(logits));
        let ld = self.data(logits);
        let r = &ld[row * v..(row + 1) * v];
        let mx = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = r.iter().map(|x| (x - mx).exp()).sum();
        (r[class] - mx).exp() / sum
    }

    /// Argmax of one logits row; ties resolve to the lowest index.
    pub fn argmax_row(&self, logits: TensorId, row: usize) -> usize {
        let (_, v) = rows_cols(self.shape(logits));
        let ld = self.data(logits);
        let r = &ld[row * v..(row + 1) * v];
        let mut best = 0usize;
        for j in 1..v {
            if r[j] > r[best] {
                best = j;
            }
        }
        best
    }
}

fn op_inputs(op: &Op) -> Vec<TensorId> {
    match op {
        Op::Leaf => vec![],
        Op::Matmul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::Relu(a)
        | Op::SoftmaxRows(a)
        | Op::SumAll(a)
        | Op::Sqrt(a)
        | Op::Reshape(a) => vec![*a],
        Op::LayerNormRows { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Embedding { table, .. } => vec![*table],
        Op::MaxPoolRows { x, .. } => vec![*x],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::ConcatRows(parts) | Op::ConcatCols(parts) => parts.clone(),
        Op::SliceRows { x, .. } | Op::SliceCols { x, .. } => vec![*x],
    }
}

// ── Gradient verification ────────────────────────────────────────────

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Human-readable location of the worst coordinate.
    pub worst: String,
    pub coords_checked: usize,
}

/// Compare analytic gradients of a deterministic scalar function against
/// central finite differences.
///
/// `f` evaluates the loss at an arbitrary parameter vector. `theta` is the
/// evaluation point and `analytic` the gradient to verify. `coords` selects
/// which coordinates to probe (all when empty). `names` maps a flat
/// coordinate to a label for reporting.
pub fn grad_check(
    f: &mut dyn FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    eps: f64,
    coords: &[usize],
    names: &dyn Fn(usize) -> String,
) -> Result<GradCheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::contract(format!(
            "finite-difference step {eps:e} outside [1e-7, 1e-3]"
        )));
    }
    if theta.len() != analytic.len() {
        return Err(Error::contract(
            "analytic gradient length does not match parameter length".to_string(),
        ));
    }
    let base1 = f(theta)?;
    let base2 = f(theta)?;
    if base1 != base2 {
        return Err(Error::Determinism((base1 - base2).abs()));
    }

    let all: Vec<usize>;
    let coords = if coords.is_empty() {
        all = (0..theta.len()).collect();
        &all[..]
    } else {
        coords
    };

    let mut work = theta.to_vec();
    let mut max_rel = 0.0f64;
    let mut worst = String::from("-");
    for &c in coords {
        let orig = work[c];
        work[c] = orig + eps;
        let fp = f(&work)?;
        work[c] = orig - eps;
        let fm = f(&work)?;
        work[c] = orig;
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[c];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
            worst = format!("{} (analytic {a:.6e}, numeric {numeric:.6e})", names(c));
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst,
        coords_checked: coords.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        // Box-Muller keeps the test free of extra dependencies
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen_range(0.0..1.0);
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    /// Finite-difference oracle for a scalar-valued tape program over one
    /// input tensor, independent of the backward pass under test.
    fn fd_grad(
        build: &dyn Fn(&mut Tape, TensorId) -> TensorId,
        x: &[f64],
        shape: &[usize],
        eps: f64,
    ) -> Vec<f64> {
        let eval = |data: &[f64]| -> f64 {
            let mut t = Tape::new();
            let xid = t.leaf(data.to_vec(), shape, false);
            let out = build(&mut t, xid);
            t.data(out)[0]
        };
        let mut g = vec![0.0; x.len()];
        let mut w = x.to_vec();
        for i in 0..x.len() {
            let o = w[i];
            w[i] = o + eps;
            let fp = eval(&w);
            w[i] = o - eps;
            let fm = eval(&w);
            w[i] = o;
            g[i] = (fp - fm) / (2.0 * eps);
        }
        g
    }

    fn analytic_grad(
        build: &dyn Fn(&mut Tape, TensorId) -> TensorId,
        x: &[f64],
        shape: &[usize],
    ) -> Vec<f64> {
        let mut t = Tape::new();
        let xid = t.leaf(x.to_vec(), shape, true);
        let out = build(&mut t, xid);
        t.backward(out).unwrap();
        t.grad(xid).unwrap().to_vec()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-12))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let i = t.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let y = t.matmul(a, i).unwrap();
        assert_eq!(t.data(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let mut t = Tape::new();
        let a = t.constant(vec![1.0, -2.0, 3.5, 4.0, 0.25, -9.0], &[2, 3]);
        let z = t.constant(vec![0.0; 6], &[3, 2]);
        let y = t.matmul(a, z).unwrap();
        assert!(t.data(y).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(vec![0.0; 6], &[2, 3]);
        let b = t.constant(vec![0.0; 4], &[2, 2]);
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = randn(&mut rng, 12);
        let b = randn(&mut rng, 8);
        // grad wrt a with b fixed
        let bv = b.clone();
        let build_a = move |t: &mut Tape, x: TensorId| {
            let bid = t.constant(bv.clone(), &[4, 2]);
            let m = t.matmul(x, bid).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum_all(sq)
        };
        let g_an = analytic_grad(&build_a, &a, &[3, 4]);
        let g_fd = fd_grad(&build_a, &a, &[3, 4], 1e-5);
        assert!(max_rel_err(&g_an, &g_fd) < 1e-6);
        // grad wrt b with a fixed
        let av = a.clone();
        let build_b = move |t: &mut Tape, x: TensorId| {
            let aid = t.constant(av.clone(), &[3, 4]);
            let m = t.matmul(aid, x).unwrap();
            let sq = t.mul(m, m).unwrap();
            t.sum_all(sq)
        };
        let g_an = analytic_grad(&build_b, &b, &[4, 2]);
        let g_fd = fd_grad(&build_b, &b, &[4, 2], 1e-5);
        assert!(max_rel_err(&g_an, &g_fd) < 1e-6);
    }

    #[test]
    fn softmax_uniform_row() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0, 0.0], &[1, 3]);
        let y = t.softmax_rows(x).unwrap();
        for v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_masked_entry_is_exact_zero() {
        let mut t = Tape::new();
        let x = t.constant(vec![5.0, f64::NEG_INFINITY], &[1, 2]);
        let y = t.softmax_rows(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_log_ratios() {
        let mut t = Tape::new();
        let x = t.constant(vec![1f64.ln(), 2f64.ln(), 3f64.ln()], &[1, 3]);
        let y = t.softmax_rows(x).unwrap();
        let d = t.data(y);
        assert!((d[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((d[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((d[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_degenerate_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let x = t.constant(randn(&mut rng, 20), &[4, 5]);
        let y = t.softmax_rows(x).unwrap();
        for i in 0..4 {
            let s: f64 = t.data(y)[i * 5..(i + 1) * 5].iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        let bad = t.constant(vec![f64::NEG_INFINITY; 3], &[1, 3]);
        assert!(matches!(
            t.softmax_rows(bad),
            Err(Error::DegenerateRow { row: 0 })
        ));
    }

    #[test]
    fn backward_bilinear_form() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], &[1, 3], true);
        let y = t.constant(vec![4.0, 5.0, 6.0], &[1, 3]);
        let p = t.mul(x, y).unwrap();
        let loss = t.sum_all(p);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn backward_softmax_sum_is_conserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = Tape::new();
        let x = t.leaf(randn(&mut rng, 12), &[3, 4], true);
        let s = t.softmax_rows(x).unwrap();
        let loss = t.sum_all(s);
        t.backward(loss).unwrap();
        for v in t.grad(x).unwrap() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn backward_accumulates_and_skips_unreachable() {
        let mut t = Tape::new();
        let x = t.leaf(vec![2.0], &[1], true);
        let unrelated = t.leaf(vec![5.0], &[1], true);
        let y = t.mul(x, x).unwrap();
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        assert!(t.grad(unrelated).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], &[1, 2], true);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 3.0, 1.0, 2.0], &[2, 2], true);
        let y = t.max_pool_rows(x).unwrap();
        assert_eq!(t.data(y), &[1.0, 3.0]);
        let loss = t.sum_all(y);
        t.backward(loss).unwrap();
        // column 0 ties at rows 0 and 1: gradient goes to row 0 only
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn cross_entropy_matches_manual_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = randn(&mut rng, 3 * 4);
        let targets = [2usize, 0, 3];
        let weights = [1.0, 0.0, 2.0];
        let mut t = Tape::new();
        let l = t.constant(logits.clone(), &[3, 4]);
        let loss = t.cross_entropy_from_logits(l, &targets, &weights).unwrap();
        let mut expect = 0.0;
        for i in 0..3 {
            let row = &logits[i * 4..(i + 1) * 4];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            expect += weights[i] * -(((row[targets[i]] - mx).exp() / z).ln());
        }
        assert!((t.data(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn per_op_gradients_match_finite_differences() {
        // masked-attention-style composite exercising every differentiable op
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cases: Vec<(&str, Box<dyn Fn(&mut Tape, TensorId) -> TensorId>, Vec<usize>)> = vec![
            (
                "relu-scale-add",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let r = t.relu(x);
                    let s = t.scale(r, 1.7);
                    let a = t.add(s, x).unwrap();
                    let m = t.mul(a, a).unwrap();
                    t.sum_all(m)
                }),
                vec![3, 4],
            ),
            (
                "layer-norm",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let gamma = t.constant(vec![1.3, 0.7, -0.4, 2.0], &[4]);
                    let beta = t.constant(vec![0.1, -0.2, 0.3, 0.0], &[4]);
                    let ln = t.layer_norm_rows(x, gamma, beta).unwrap();
                    let sq = t.mul(ln, ln).unwrap();
                    t.sum_all(sq)
                }),
                vec![3, 4],
            ),
            (
                "softmax-slice-concat",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let sm = t.softmax_rows(x).unwrap();
                    let left = t.slice_cols(sm, 0, 2).unwrap();
                    let right = t.slice_cols(sm, 2, 2).unwrap();
                    let sw = t.concat_cols(&[right, left]).unwrap();
                    let top = t.slice_rows(sw, 0, 2).unwrap();
                    let bottom = t.slice_rows(sw, 2, 1).unwrap();
                    let st = t.concat_rows(&[bottom, top]).unwrap();
                    let sq = t.mul(st, st).unwrap();
                    t.sum_all(sq)
                }),
                vec![3, 4],
            ),
            (
                "maxpool-transpose",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let tr = t.transpose(x);
                    let mp = t.max_pool_rows(tr).unwrap();
                    let sq = t.mul(mp, mp).unwrap();
                    t.sum_all(sq)
                }),
                vec![3, 4],
            ),
            (
                "embedding-sub-sqrt",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let e = t.embedding(x, &[2, 0, 2]).unwrap();
                    let o = t.constant(vec![0.5; 12], &[3, 4]);
                    let d = t.sub(e, o).unwrap();
                    let sq = t.mul(d, d).unwrap();
                    let s = t.sum_all(sq);
                    t.sqrt(s).unwrap()
                }),
                vec![3, 4],
            ),
            (
                "cross-entropy-reshape",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let r = t.reshape(x, &[4, 3]).unwrap();
                    t.cross_entropy_from_logits(r, &[1, 0, 2, 2], &[1.0, 0.5, 2.0, 1.0])
                        .unwrap()
                }),
                vec![3, 4],
            ),
            (
                "add-row-matmul",
                Box::new(|t: &mut Tape, x: TensorId| {
                    let w = t.constant(vec![0.3, -0.9, 1.1, 0.2, 0.5, -0.4, 0.8, -0.1], &[4, 2]);
                    let m = t.matmul(x, w).unwrap();
                    let b = t.constant(vec![0.25, -0.75], &[2]);
                    let y = t.add_row(m, b).unwrap();
                    let sq = t.mul(y, y).unwrap();
                    t.sum_all(sq)
                }),
                vec![3, 4],
            ),
        ];
        for (name, build, shape) in &cases {
            let n: usize = shape.iter().product();
            let x = randn(&mut rng, n);
            let g_an = analytic_grad(build.as_ref(), &x, shape);
            let g_fd = fd_grad(build.as_ref(), &x, shape, 1e-5);
            let err = max_rel_err(&g_an, &g_fd);
            assert!(err < 1e-5, "{name}: max rel err {err:e}");
        }
    }

    #[test]
    fn grad_check_quadratic_is_exact() {
        let theta = vec![0.3, -1.2, 2.5, 0.0, 4.1];
        let analytic: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let mut f = |p: &[f64]| -> crate::error::Result<f64> {
            Ok(p.iter().map(|v| v * v).sum())
        };
        let rep = grad_check(&mut f, &theta, &analytic, 1e-5, &[], &|i| format!("theta[{i}]"))
            .unwrap();
        assert!(rep.max_rel_err < 1e-9, "{}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_softmax_classifier_closed_form() {
        // one linear layer + softmax cross-entropy: closed-form gradient is
        // x^T (p - onehot), the independent oracle here
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = randn(&mut rng, 4); // one sample, 4 features
        let target = 1usize;
        let classes = 3usize;
        let w0 = randn(&mut rng, 4 * classes);

        let xv = x.clone();
        let mut f = move |w: &[f64]| -> crate::error::Result<f64> {
            let mut t = Tape::new();
            let xi = t.constant(xv.clone(), &[1, 4]);
            let wi = t.constant(w.to_vec(), &[4, 3]);
            let logits = t.matmul(xi, wi)?;
            let loss = t.cross_entropy_from_logits(logits, &[target], &[1.0])?;
            Ok(t.data(loss)[0])
        };

        // closed-form analytic gradient
        let mut logits = [0.0f64; 3];
        for j in 0..3 {
            for i in 0..4 {
                logits[j] += x[i] * w0[i * 3 + j];
            }
        }
        let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
        let p: Vec<f64> = logits.iter().map(|v| (v - mx).exp() / z).collect();
        let mut analytic = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                let ind = if j == target { 1.0 } else { 0.0 };
                analytic[i * 3 + j] = x[i] * (p[j] - ind);
            }
        }

        let rep =
            grad_check(&mut f, &w0, &analytic, 1e-5, &[], &|i| format!("w[{i}]")).unwrap();
        assert!(rep.max_rel_err < 1e-6, "{}", rep.max_rel_err);
    }

    #[test]
    fn grad_check_rejects_bad_eps_and_nondeterminism() {
        let theta = [1.0];
        let analytic = [2.0];
        let mut f = |p: &[f64]| -> crate::error::Result<f64> { Ok(p[0] * p[0]) };
        assert!(grad_check(&mut f, &theta, &analytic, 1e-2, &[], &|_| String::new()).is_err());

        let mut counter = 0.0f64;
        let mut g = move |p: &[f64]| -> crate::error::Result<f64> {
            counter += 1.0;
            Ok(p[0] + counter)
        };
        assert!(matches!(
            grad_check(&mut g, &theta, &analytic, 1e-5, &[], &|_| String::new()),
            Err(Error::Determinism(_))
        ));
    }

    #[test]
    fn forward_is_bit_identical_for_identical_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = randn(&mut rng, 16);
        let run = || {
            let mut t = Tape::new();
            let xi = t.constant(x.clone(), &[4, 4]);
            let s = t.softmax_rows(xi).unwrap();
            let g = t.constant(vec![1.0; 4], &[4]);
            let b = t.constant(vec![0.0; 4], &[4]);
            let ln = t.layer_norm_rows(s, g, b).unwrap();
            let m = t.matmul(ln, xi).unwrap();
            t.data(m).to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }
}
