//! Reverse-mode automatic differentiation over recorded tensor operations.
//!
//! Operations append nodes to a [`Tape`]; node indices only ever point
//! backwards, so tape order is already a topological order and a single
//! reverse sweep visits every node exactly once. Gradients accumulate
//! into per-node buffers; a second `backward` without `reset_backward`
//! is rejected.

#![allow(clippy::needless_range_loop)]

use crate::error::{GrError, Result};
use crate::tensor::Tensor;

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    /// Matrix plus a 1xN row vector broadcast over rows.
    AddRow { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    Relu { a: usize },
    Transpose { a: usize },
    SliceRows { a: usize, start: usize },
    SliceCols { a: usize, start: usize },
    ConcatCols { parts: Vec<usize> },
    StackRows { rows: Vec<usize> },
    Softmax { a: usize },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64 },
    Embed { table: usize, ids: Vec<u32> },
    SeqCe { logits: usize, targets: Vec<u32>, weights: Vec<f64> },
    Huber { pred: usize, target: f64, delta: f64 },
    BceLogits { logits: usize, labels: Vec<f64> },
    SumAll { a: usize },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

pub struct Tape {
    nodes: Vec<Node>,
    grads: Option<Vec<Option<Tensor>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

// ── raw matmul kernels (accumulate into out) ───────────────────────────

fn mm_nn_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k) = a.shape();
    let n = b.cols();
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T
fn mm_nt_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k) = a.shape();
    let n = b.rows();
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &bd[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k x n] += a[m x k]^T * b[m x n]
fn mm_tn_acc(a: &Tensor, b: &Tensor, out: &mut [f64]) {
    let (m, k) = a.shape();
    let n = b.cols();
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let brow = &bd[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
}

fn softmax_row(row: &mut [f64]) {
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

/// log(sum(exp(row))) with max subtraction.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + s.ln()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: None,
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

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, idx: usize) -> bool {
        self.nodes[idx].needs_grad
    }

    /// Record an input tensor. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// Convenience for non-trainable inputs.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, ka) = self.value(a).shape();
        let (kb, n) = self.value(b).shape();
        if ka != kb {
            return Err(GrError::Shape(format!(
                "matmul inner dims differ: {m}x{ka} vs {kb}x{n}"
            )));
        }
        let mut out = Tensor::zeros(m, n);
        mm_nn_acc(self.value(a), self.value(b), out.data_mut());
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::MatMul { a: a.0, b: b.0 }, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(GrError::Shape(format!(
                "add shapes differ: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o += v;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Add { a: a.0, b: b.0 }, out, needs))
    }

    /// a[m x n] plus row vector b[1 x n], broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        let sb = self.value(b).shape();
        if sb != (1, n) {
            return Err(GrError::Shape(format!(
                "add_row expects 1x{n} bias, got {}x{}",
                sb.0, sb.1
            )));
        }
        let mut out = self.value(a).clone();
        let bd = self.nodes[b.0].value.data().to_vec();
        for i in 0..m {
            let row = &mut out.data_mut()[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += bd[j];
            }
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::AddRow { a: a.0, b: b.0 }, out, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(GrError::Shape(format!(
                "mul shapes differ: {}x{} vs {}x{}",
                sa.0, sa.1, sb.0, sb.1
            )));
        }
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o *= v;
        }
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(Op::Mul { a: a.0, b: b.0 }, out, needs))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs(a.0);
        self.push(Op::Scale { a: a.0, c }, out, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(a.0);
        self.push(Op::Relu { a: a.0 }, out, needs)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.value(a).shape();
        let mut out = Tensor::zeros(n, m);
        for i in 0..m {
            for j in 0..n {
                let v = self.value(a).at(i, j);
                out.set(j, i, v);
            }
        }
        let needs = self.needs(a.0);
        self.push(Op::Transpose { a: a.0 }, out, needs)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        if start + len > m {
            return Err(GrError::Shape(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::from_vec(len, n, data)?;
        let needs = self.needs(a.0);
        Ok(self.push(Op::SliceRows { a: a.0, start }, out, needs))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        if start + len > n {
            return Err(GrError::Shape(format!(
                "slice_cols {start}..{} out of range for {n} cols",
                start + len
            )));
        }
        let mut out = Tensor::zeros(m, len);
        for i in 0..m {
            for j in 0..len {
                let v = self.value(a).at(i, start + j);
                out.set(i, j, v);
            }
        }
        let needs = self.needs(a.0);
        Ok(self.push(Op::SliceCols { a: a.0, start }, out, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(GrError::Shape("concat_cols of zero parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let mut total = 0;
        for p in parts {
            if self.value(*p).rows() != m {
                return Err(GrError::Shape("concat_cols row counts differ".into()));
            }
            total += self.value(*p).cols();
        }
        let mut out = Tensor::zeros(m, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let w = t.cols();
            for i in 0..m {
                for j in 0..w {
                    let v = t.at(i, j);
                    out.set(i, off + j, v);
                }
            }
            off += w;
        }
        let needs = parts.iter().any(|p| self.needs(p.0));
        Ok(self.push(
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            out,
            needs,
        ))
    }

    /// Stack 1xN rows into an MxN matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(GrError::Shape("stack_rows of zero rows".into()));
        }
        let n = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for r in rows {
            let t = self.value(*r);
            if t.shape() != (1, n) {
                return Err(GrError::Shape(format!(
                    "stack_rows expects 1x{n} rows, got {}x{}",
                    t.rows(),
                    t.cols()
                )));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_vec(rows.len(), n, data)?;
        let needs = rows.iter().any(|r| self.needs(r.0));
        Ok(self.push(
            Op::StackRows {
                rows: rows.iter().map(|r| r.0).collect(),
            },
            out,
            needs,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        let n = out.cols();
        for i in 0..out.rows() {
            softmax_row(&mut out.data_mut()[i * n..(i + 1) * n]);
        }
        let needs = self.needs(a.0);
        self.push(Op::Softmax { a: a.0 }, out, needs)
    }

    /// Row-wise layer normalization with affine parameters (1xN each).
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.value(a).shape();
        if n == 0 {
            return Err(GrError::Shape("layer_norm over empty rows".into()));
        }
        if self.value(gamma).shape() != (1, n) || self.value(beta).shape() != (1, n) {
            return Err(GrError::Shape(format!(
                "layer_norm affine params must be 1x{n}"
            )));
        }
        let mut out = Tensor::zeros(m, n);
        for i in 0..m {
            let row = self.value(a).row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let v = self.value(gamma).at(0, j) * xhat + self.value(beta).at(0, j);
                out.set(i, j, v);
            }
        }
        let needs = self.needs(a.0) || self.needs(gamma.0) || self.needs(beta.0);
        Ok(self.push(
            Op::LayerNorm {
                a: a.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            out,
            needs,
        ))
    }

    /// Gather rows of an embedding table: `out[t] = table[ids[t]]`.
    pub fn embed(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (rows, dim) = self.value(table).shape();
        if ids.is_empty() {
            return Err(GrError::Shape("embed with empty id list".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id as usize >= rows {
                return Err(GrError::Shape(format!(
                    "embedding id {id} out of range for table with {rows} rows"
                )));
            }
            data.extend_from_slice(self.value(table).row(id as usize));
        }
        let out = Tensor::from_vec(ids.len(), dim, data)?;
        let needs = self.needs(table.0);
        Ok(self.push(
            Op::Embed {
                table: table.0,
                ids: ids.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Weighted mean over rows of per-row cross-entropy:
    /// `sum_t w_t * (-log softmax(logits[t])[target_t]) / sum_t w_t`.
    pub fn seq_cross_entropy(&mut self, logits: Var, targets: &[u32], weights: &[f64]) -> Result<Var> {
        let (m, n) = self.value(logits).shape();
        if targets.len() != m || weights.len() != m {
            return Err(GrError::Shape(format!(
                "seq_cross_entropy expects {m} targets/weights, got {}/{}",
                targets.len(),
                weights.len()
            )));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(GrError::Shape("seq_cross_entropy with zero total weight".into()));
        }
        let mut total = 0.0;
        for (t, &target) in targets.iter().enumerate() {
            if target as usize >= n {
                return Err(GrError::Shape(format!(
                    "target index {target} out of range for {n} classes"
                )));
            }
            let row = self.value(logits).row(t);
            let ce = log_sum_exp(row) - row[target as usize];
            total += weights[t] * ce;
        }
        let out = Tensor::scalar(total / wsum);
        let needs = self.needs(logits.0);
        Ok(self.push(
            Op::SeqCe {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Single-distribution cross-entropy: `-log softmax(logits)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, target: u32) -> Result<Var> {
        let (m, _) = self.value(logits).shape();
        if m != 1 {
            return Err(GrError::Shape(format!(
                "cross_entropy expects a 1xV logits row, got {m} rows"
            )));
        }
        self.seq_cross_entropy(logits, &[target], &[1.0])
    }

    /// Huber loss of a scalar prediction against a fixed target.
    pub fn huber(&mut self, pred: Var, target: f64, delta: f64) -> Result<Var> {
        if self.value(pred).shape() != (1, 1) {
            return Err(GrError::Shape("huber expects a scalar prediction".into()));
        }
        if delta <= 0.0 {
            return Err(GrError::Shape("huber delta must be positive".into()));
        }
        let d = self.value(pred).item() - target;
        let loss = if d.abs() <= delta {
            0.5 * d * d
        } else {
            delta * (d.abs() - 0.5 * delta)
        };
        let needs = self.needs(pred.0);
        Ok(self.push(
            Op::Huber {
                pred: pred.0,
                target,
                delta,
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Mean binary cross-entropy of 1xK logits against 0/1 labels.
    pub fn bce_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let (m, k) = self.value(logits).shape();
        if m != 1 || labels.len() != k {
            return Err(GrError::Shape(format!(
                "bce_logits expects 1x{} logits for {} labels",
                labels.len(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (j, &y) in labels.iter().enumerate() {
            let l = self.value(logits).at(0, j);
            total += l.max(0.0) - l * y + (-l.abs()).exp().ln_1p();
        }
        let out = Tensor::scalar(total / k as f64);
        let needs = self.needs(logits.0);
        Ok(self.push(
            Op::BceLogits {
                logits: logits.0,
                labels: labels.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let needs = self.needs(a.0);
        self.push(Op::SumAll { a: a.0 }, Tensor::scalar(s), needs)
    }

    /// Mean of all entries.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Populate gradients of all `requires_grad` leaves reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(GrError::Shape(
                "backward already ran on this tape; call reset_backward first".into(),
            ));
        }
        if self.value(loss).shape() != (1, 1) {
            let (m, n) = self.value(loss).shape();
            return Err(GrError::Shape(format!(
                "backward requires a scalar loss, got {m}x{n}"
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = Some(grads);
        Ok(())
    }

    /// Gradient of the loss with respect to `v`, if it participated.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    /// Clear gradient state so backward may run again.
    pub fn reset_backward(&mut self) {
        self.grads = None;
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, update: impl FnOnce(&mut Tensor)) {
        if let Some(g) = grads[idx].as_mut() {
            update(g);
        }
    }

    fn ensure_grad(&self, grads: &mut [Option<Tensor>], idx: usize) {
        if self.nodes[idx].needs_grad && grads[idx].is_none() {
            let (m, n) = self.nodes[idx].value.shape();
            grads[idx] = Some(Tensor::zeros(m, n));
        }
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let bv = &self.nodes[*b].value;
                    Self::accumulate(grads, *a, |ga| mm_nt_acc(g, bv, ga.data_mut()));
                }
                if self.nodes[*b].needs_grad {
                    self.ensure_grad(grads, *b);
                    let av = &self.nodes[*a].value;
                    Self::accumulate(grads, *b, |gb| mm_tn_acc(av, g, gb.data_mut()));
                }
            }
            Op::Add { a, b } => {
                for idx in [*a, *b] {
                    if self.nodes[idx].needs_grad {
                        self.ensure_grad(grads, idx);
                        Self::accumulate(grads, idx, |gx| {
                            for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                                *o += v;
                            }
                        });
                    }
                }
            }
            Op::AddRow { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    Self::accumulate(grads, *a, |gx| {
                        for (o, v) in gx.data_mut().iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    self.ensure_grad(grads, *b);
                    let (m, n) = g.shape();
                    Self::accumulate(grads, *b, |gb| {
                        for i in 0..m {
                            for j in 0..n {
                                gb.data_mut()[j] += g.at(i, j);
                            }
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let bv = &self.nodes[*b].value;
                    Self::accumulate(grads, *a, |ga| {
                        for ((o, gv), v) in ga.data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                            *o += gv * v;
                        }
                    });
                }
                if self.nodes[*b].needs_grad {
                    self.ensure_grad(grads, *b);
                    let av = &self.nodes[*a].value;
                    Self::accumulate(grads, *b, |gb| {
                        for ((o, gv), v) in gb.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            *o += gv * v;
                        }
                    });
                }
            }
            Op::Scale { a, c } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let c = *c;
                    Self::accumulate(grads, *a, |ga| {
                        for (o, v) in ga.data_mut().iter_mut().zip(g.data()) {
                            *o += c * v;
                        }
                    });
                }
            }
            Op::Relu { a } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let av = &self.nodes[*a].value;
                    Self::accumulate(grads, *a, |ga| {
                        for ((o, gv), v) in ga.data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                            if *v > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
            }
            Op::Transpose { a } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let (m, n) = g.shape();
                    Self::accumulate(grads, *a, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                let cur = ga.at(j, i) + g.at(i, j);
                                ga.set(j, i, cur);
                            }
                        }
                    });
                }
            }
            Op::SliceRows { a, start } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let (len, n) = g.shape();
                    let start = *start;
                    Self::accumulate(grads, *a, |ga| {
                        for i in 0..len {
                            for j in 0..n {
                                let cur = ga.at(start + i, j) + g.at(i, j);
                                ga.set(start + i, j, cur);
                            }
                        }
                    });
                }
            }
            Op::SliceCols { a, start } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let (m, len) = g.shape();
                    let start = *start;
                    Self::accumulate(grads, *a, |ga| {
                        for i in 0..m {
                            for j in 0..len {
                                let cur = ga.at(i, start + j) + g.at(i, j);
                                ga.set(i, start + j, cur);
                            }
                        }
                    });
                }
            }
            Op::ConcatCols { parts } => {
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if self.nodes[p].needs_grad {
                        self.ensure_grad(grads, p);
                        let m = g.rows();
                        Self::accumulate(grads, p, |gp| {
                            for i in 0..m {
                                for j in 0..w {
                                    let cur = gp.at(i, j) + g.at(i, off + j);
                                    gp.set(i, j, cur);
                                }
                            }
                        });
                    }
                    off += w;
                }
            }
            Op::StackRows { rows } => {
                for (i, &r) in rows.iter().enumerate() {
                    if self.nodes[r].needs_grad {
                        self.ensure_grad(grads, r);
                        let n = g.cols();
                        Self::accumulate(grads, r, |gr| {
                            for j in 0..n {
                                let cur = gr.at(0, j) + g.at(i, j);
                                gr.set(0, j, cur);
                            }
                        });
                    }
                }
            }
            Op::Softmax { a } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let y = &self.nodes[i].value;
                    let (m, n) = y.shape();
                    Self::accumulate(grads, *a, |ga| {
                        for r in 0..m {
                            let yrow = y.row(r);
                            let grow = &g.data()[r * n..(r + 1) * n];
                            let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                            let garow = &mut ga.data_mut()[r * n..(r + 1) * n];
                            for j in 0..n {
                                garow[j] += yrow[j] * (grow[j] - dot);
                            }
                        }
                    });
                }
            }
            Op::LayerNorm { a, gamma, beta, eps } => {
                let av = &self.nodes[*a].value;
                let gammav = &self.nodes[*gamma].value;
                let (m, n) = av.shape();
                // Recompute per-row statistics.
                let mut xhat = Tensor::zeros(m, n);
                let mut inv_std = vec![0.0; m];
                for r in 0..m {
                    let row = av.row(r);
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for j in 0..n {
                        xhat.set(r, j, (row[j] - mean) * inv);
                    }
                }
                if self.nodes[*beta].needs_grad {
                    self.ensure_grad(grads, *beta);
                    Self::accumulate(grads, *beta, |gb| {
                        for r in 0..m {
                            for j in 0..n {
                                gb.data_mut()[j] += g.at(r, j);
                            }
                        }
                    });
                }
                if self.nodes[*gamma].needs_grad {
                    self.ensure_grad(grads, *gamma);
                    Self::accumulate(grads, *gamma, |gg| {
                        for r in 0..m {
                            for j in 0..n {
                                gg.data_mut()[j] += g.at(r, j) * xhat.at(r, j);
                            }
                        }
                    });
                }
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    Self::accumulate(grads, *a, |ga| {
                        for r in 0..m {
                            // dxhat = g * gamma
                            let mut dxhat = vec![0.0; n];
                            for j in 0..n {
                                dxhat[j] = g.at(r, j) * gammav.at(0, j);
                            }
                            let mean_dxhat = dxhat.iter().sum::<f64>() / n as f64;
                            let mean_dxhat_xhat = dxhat
                                .iter()
                                .enumerate()
                                .map(|(j, d)| d * xhat.at(r, j))
                                .sum::<f64>()
                                / n as f64;
                            for j in 0..n {
                                let d = (dxhat[j] - mean_dxhat - xhat.at(r, j) * mean_dxhat_xhat)
                                    * inv_std[r];
                                let cur = ga.at(r, j) + d;
                                ga.set(r, j, cur);
                            }
                        }
                    });
                }
            }
            Op::Embed { table, ids } => {
                if self.nodes[*table].needs_grad {
                    self.ensure_grad(grads, *table);
                    let dim = g.cols();
                    Self::accumulate(grads, *table, |gt| {
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..dim {
                                let cur = gt.at(id as usize, j) + g.at(t, j);
                                gt.set(id as usize, j, cur);
                            }
                        }
                    });
                }
            }
            Op::SeqCe {
                logits,
                targets,
                weights,
            } => {
                if self.nodes[*logits].needs_grad {
                    self.ensure_grad(grads, *logits);
                    let lv = &self.nodes[*logits].value;
                    let (m, n) = lv.shape();
                    let wsum: f64 = weights.iter().sum();
                    let gs = g.item();
                    Self::accumulate(grads, *logits, |gl| {
                        for t in 0..m {
                            if weights[t] == 0.0 {
                                continue;
                            }
                            let mut probs = lv.row(t).to_vec();
                            softmax_row(&mut probs);
                            let coef = gs * weights[t] / wsum;
                            let grow = &mut gl.data_mut()[t * n..(t + 1) * n];
                            for j in 0..n {
                                let onehot = if j == targets[t] as usize { 1.0 } else { 0.0 };
                                grow[j] += coef * (probs[j] - onehot);
                            }
                        }
                    });
                }
            }
            Op::Huber {
                pred,
                target,
                delta,
            } => {
                if self.nodes[*pred].needs_grad {
                    self.ensure_grad(grads, *pred);
                    let d = self.nodes[*pred].value.item() - target;
                    let slope = if d.abs() <= *delta {
                        d
                    } else {
                        delta * d.signum()
                    };
                    let gs = g.item();
                    Self::accumulate(grads, *pred, |gp| {
                        gp.data_mut()[0] += gs * slope;
                    });
                }
            }
            Op::BceLogits { logits, labels } => {
                if self.nodes[*logits].needs_grad {
                    self.ensure_grad(grads, *logits);
                    let lv = &self.nodes[*logits].value;
                    let k = labels.len();
                    let gs = g.item();
                    Self::accumulate(grads, *logits, |gl| {
                        for j in 0..k {
                            let sig = 1.0 / (1.0 + (-lv.at(0, j)).exp());
                            gl.data_mut()[j] += gs * (sig - labels[j]) / k as f64;
                        }
                    });
                }
            }
            Op::SumAll { a } => {
                if self.nodes[*a].needs_grad {
                    self.ensure_grad(grads, *a);
                    let gs = g.item();
                    Self::accumulate(grads, *a, |ga| {
                        ga.data_mut().iter_mut().for_each(|v| *v += gs);
                    });
                }
            }
        }
    }
}
