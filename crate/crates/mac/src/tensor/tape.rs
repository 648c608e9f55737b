use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::Tensor;
use crate::{Error, Result};

static NEXT_TAPE_GEN: AtomicU64 = AtomicU64::new(1);

/// Probabilities fed to the cross-entropy are clamped into
/// `[PROB_CLAMP, 1 - PROB_CLAMP]` so the loss stays finite at saturation.
pub const PROB_CLAMP: f64 = 1e-12;

enum OpKind {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    ConcatCols { left_cols: usize },
    SoftmaxCols { mask: Option<Vec<bool>> },
    Tanh,
    Sigmoid,
    Add,
    Mul { a: Tensor, b: Tensor },
    Scale { factor: f64 },
    AddRow,
    MeanRows { mask: Option<Vec<bool>> },
    Flatten,
    StackRows,
    Transpose,
    GatherRows { ids: Vec<usize> },
    SumAll,
    Bce { target: f64, prob: f64 },
}

struct Node {
    parents: Vec<usize>,
    kind: OpKind,
    out: Tensor,
    needs_grad: bool,
}

/// Records differentiable operations in topological order; every node's
/// parents precede it. Rebuilt per forward pass (define-by-run).
pub struct Tape {
    gen: u64,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            gen: NEXT_TAPE_GEN.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Node index of `t` on this tape, registering it as a leaf if it has
    /// not been seen here yet. Tensors created by a *different* tape's op
    /// are rejected: their history lives elsewhere.
    fn ensure_node(&self, t: &Tensor) -> Result<usize> {
        {
            let d = t.inner.borrow();
            if let Some((gen, idx)) = d.slot {
                if gen == self.gen {
                    return Ok(idx);
                }
            }
            if let Some(origin) = d.origin {
                if origin != self.gen {
                    return Err(Error::Contract(
                        "tensor produced by another tape used as an operand here".into(),
                    ));
                }
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        nodes.push(Node {
            parents: Vec::new(),
            kind: OpKind::Leaf,
            out: t.clone(),
            needs_grad: t.requires_grad(),
        });
        t.inner.borrow_mut().slot = Some((self.gen, idx));
        Ok(idx)
    }

    fn record(
        &self,
        parents: Vec<usize>,
        kind: OpKind,
        rows: usize,
        cols: usize,
        values: Vec<f64>,
    ) -> Tensor {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            parents.iter().any(|&p| nodes[p].needs_grad)
        };
        let out = Tensor::op_output(rows, cols, values, self.gen);
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        out.inner.borrow_mut().slot = Some((self.gen, idx));
        nodes.push(Node {
            parents,
            kind,
            out: out.clone(),
            needs_grad,
        });
        out
    }

    /// Matrix product `a (r x p) * b (p x q) -> r x q`.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        if ac != br {
            return Err(Error::shape("matmul", a.shape_string(), b.shape_string()));
        }
        let pa = self.ensure_node(a)?;
        let pb = self.ensure_node(b)?;
        let mut out = vec![0.0; ar * bc];
        {
            let av = a.inner.borrow();
            let bv = b.inner.borrow();
            matmul_into(&av.values, ar, ac, &bv.values, bc, &mut out);
        }
        Ok(self.record(
            vec![pa, pb],
            OpKind::Matmul {
                a: a.clone(),
                b: b.clone(),
            },
            ar,
            bc,
            out,
        ))
    }

    /// Concatenate on the last dimension: `r x p` and `r x q` -> `r x (p+q)`.
    pub fn concat_cols(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (ar, ac) = a.shape();
        let (br, bc) = b.shape();
        if ar != br {
            return Err(Error::shape(
                "concat_cols",
                a.shape_string(),
                b.shape_string(),
            ));
        }
        let pa = self.ensure_node(a)?;
        let pb = self.ensure_node(b)?;
        let mut out = Vec::with_capacity(ar * (ac + bc));
        {
            let av = a.inner.borrow();
            let bv = b.inner.borrow();
            for i in 0..ar {
                out.extend_from_slice(&av.values[i * ac..(i + 1) * ac]);
                out.extend_from_slice(&bv.values[i * bc..(i + 1) * bc]);
            }
        }
        Ok(self.record(
            vec![pa, pb],
            OpKind::ConcatCols { left_cols: ac },
            ar,
            ac + bc,
            out,
        ))
    }

    /// Column-wise softmax over valid rows. Masked rows get weight exactly 0
    /// and carry no gradient. Stabilized by per-column max subtraction.
    pub fn softmax_columns(&self, a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = a.shape();
        if r == 0 {
            return Err(Error::DegenerateInput("softmax_columns on empty tensor".into()));
        }
        if let Some(m) = mask {
            if m.len() != r {
                return Err(Error::Contract(format!(
                    "softmax mask length {} does not match {} rows",
                    m.len(),
                    r
                )));
            }
            if !m.iter().any(|&v| v) {
                return Err(Error::DegenerateInput(
                    "all rows masked in softmax_columns".into(),
                ));
            }
        }
        let pa = self.ensure_node(a)?;
        let valid = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = vec![0.0; r * c];
        {
            let av = a.inner.borrow();
            let x = &av.values;
            for j in 0..c {
                let mut max = f64::NEG_INFINITY;
                for i in 0..r {
                    if valid(i) {
                        max = max.max(x[i * c + j]);
                    }
                }
                let mut sum = 0.0;
                for i in 0..r {
                    if valid(i) {
                        let e = (x[i * c + j] - max).exp();
                        out[i * c + j] = e;
                        sum += e;
                    }
                }
                for i in 0..r {
                    if valid(i) {
                        out[i * c + j] /= sum;
                    }
                }
            }
        }
        Ok(self.record(
            vec![pa],
            OpKind::SoftmaxCols {
                mask: mask.map(|m| m.to_vec()),
            },
            r,
            c,
            out,
        ))
    }

    pub fn tanh(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.shape();
        let pa = self.ensure_node(a)?;
        let out: Vec<f64> = a.inner.borrow().values.iter().map(|v| v.tanh()).collect();
        Ok(self.record(vec![pa], OpKind::Tanh, r, c, out))
    }

    pub fn sigmoid(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.shape();
        let pa = self.ensure_node(a)?;
        let out: Vec<f64> = a
            .inner
            .borrow()
            .values
            .iter()
            .map(|&v| stable_sigmoid(v))
            .collect();
        Ok(self.record(vec![pa], OpKind::Sigmoid, r, c, out))
    }

    /// Elementwise sum of two equally shaped tensors.
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, c) = self.expect_same_shape("add", a, b)?;
        let pa = self.ensure_node(a)?;
        let pb = self.ensure_node(b)?;
        let out: Vec<f64> = {
            let av = a.inner.borrow();
            let bv = b.inner.borrow();
            av.values
                .iter()
                .zip(bv.values.iter())
                .map(|(x, y)| x + y)
                .collect()
        };
        Ok(self.record(vec![pa, pb], OpKind::Add, r, c, out))
    }

    /// Elementwise (Hadamard) product of two equally shaped tensors.
    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, c) = self.expect_same_shape("mul", a, b)?;
        let pa = self.ensure_node(a)?;
        let pb = self.ensure_node(b)?;
        let out: Vec<f64> = {
            let av = a.inner.borrow();
            let bv = b.inner.borrow();
            av.values
                .iter()
                .zip(bv.values.iter())
                .map(|(x, y)| x * y)
                .collect()
        };
        Ok(self.record(
            vec![pa, pb],
            OpKind::Mul {
                a: a.clone(),
                b: b.clone(),
            },
            r,
            c,
            out,
        ))
    }

    pub fn scale(&self, a: &Tensor, factor: f64) -> Result<Tensor> {
        let (r, c) = a.shape();
        let pa = self.ensure_node(a)?;
        let out: Vec<f64> = a.inner.borrow().values.iter().map(|v| v * factor).collect();
        Ok(self.record(vec![pa], OpKind::Scale { factor }, r, c, out))
    }

    /// `m (r x c) + row (1 x c)` with the row broadcast over all rows.
    pub fn add_row(&self, m: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (r, c) = m.shape();
        let (rr, rc) = row.shape();
        if rr != 1 || rc != c {
            return Err(Error::shape("add_row", m.shape_string(), row.shape_string()));
        }
        let pm = self.ensure_node(m)?;
        let pr = self.ensure_node(row)?;
        let mut out = m.values();
        {
            let rv = row.inner.borrow();
            for i in 0..r {
                for j in 0..c {
                    out[i * c + j] += rv.values[j];
                }
            }
        }
        Ok(self.record(vec![pm, pr], OpKind::AddRow, r, c, out))
    }

    /// Mean over valid rows; the divisor is the count of valid rows.
    pub fn mean_rows(&self, a: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
        let (r, c) = a.shape();
        if let Some(m) = mask {
            if m.len() != r {
                return Err(Error::Contract(format!(
                    "mean_rows mask length {} does not match {} rows",
                    m.len(),
                    r
                )));
            }
        }
        let count = match mask {
            Some(m) => m.iter().filter(|&&v| v).count(),
            None => r,
        };
        if count == 0 {
            return Err(Error::DegenerateInput("mean_rows over zero valid rows".into()));
        }
        let pa = self.ensure_node(a)?;
        let valid = |i: usize| mask.map_or(true, |m| m[i]);
        let mut out = vec![0.0; c];
        {
            let av = a.inner.borrow();
            for i in 0..r {
                if valid(i) {
                    for j in 0..c {
                        out[j] += av.values[i * c + j];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= count as f64);
        Ok(self.record(
            vec![pa],
            OpKind::MeanRows {
                mask: mask.map(|m| m.to_vec()),
            },
            1,
            c,
            out,
        ))
    }

    /// `r x c -> 1 x (r*c)`, rows concatenated in order.
    pub fn flatten(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.shape();
        let pa = self.ensure_node(a)?;
        let out = a.values();
        Ok(self.record(vec![pa], OpKind::Flatten, 1, r * c, out))
    }

    /// Stack single-row tensors into a `k x c` matrix; row i = input i.
    pub fn stack_rows(&self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Contract("stack_rows on an empty list".into()));
        }
        let c = rows[0].cols();
        let mut parents = Vec::with_capacity(rows.len());
        let mut out = Vec::with_capacity(rows.len() * c);
        for t in rows {
            let (tr, tc) = t.shape();
            if tr != 1 || tc != c {
                return Err(Error::shape(
                    "stack_rows",
                    format!("1x{c}"),
                    t.shape_string(),
                ));
            }
            parents.push(self.ensure_node(t)?);
            out.extend_from_slice(&t.inner.borrow().values);
        }
        Ok(self.record(parents, OpKind::StackRows, rows.len(), c, out))
    }

    pub fn transpose(&self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.shape();
        let pa = self.ensure_node(a)?;
        let mut out = vec![0.0; r * c];
        {
            let av = a.inner.borrow();
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = av.values[i * c + j];
                }
            }
        }
        Ok(self.record(vec![pa], OpKind::Transpose, c, r, out))
    }

    /// Row lookup: output row j = `table` row `ids[j]`. Gradients scatter
    /// additively back into the looked-up rows.
    pub fn gather_rows(&self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (tr, tc) = table.shape();
        for &id in ids {
            if id >= tr {
                return Err(Error::Index {
                    what: "embedding row",
                    index: id,
                    size: tr,
                });
            }
        }
        let pt = self.ensure_node(table)?;
        let mut out = Vec::with_capacity(ids.len() * tc);
        {
            let tv = table.inner.borrow();
            for &id in ids {
                out.extend_from_slice(&tv.values[id * tc..(id + 1) * tc]);
            }
        }
        Ok(self.record(
            vec![pt],
            OpKind::GatherRows { ids: ids.to_vec() },
            ids.len(),
            tc,
            out,
        ))
    }

    /// Sum of all entries -> 1x1.
    pub fn sum_all(&self, a: &Tensor) -> Result<Tensor> {
        let pa = self.ensure_node(a)?;
        let s: f64 = a.inner.borrow().values.iter().sum();
        Ok(self.record(vec![pa], OpKind::SumAll, 1, 1, vec![s]))
    }

    /// Binary cross-entropy `-(y ln p + (1-y) ln(1-p))` on a 1x1 probability.
    /// The probability is clamped into `[PROB_CLAMP, 1-PROB_CLAMP]`.
    pub fn bce(&self, p: &Tensor, target: f64) -> Result<Tensor> {
        if target != 0.0 && target != 1.0 {
            return Err(Error::Contract(format!(
                "cross-entropy target must be 0 or 1, got {target}"
            )));
        }
        let raw = p.expect_scalar("cross-entropy probability")?;
        let pa = self.ensure_node(p)?;
        let prob = raw.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        let loss = -(target * prob.ln() + (1.0 - target) * (1.0 - prob).ln());
        Ok(self.record(
            vec![pa],
            OpKind::Bce { target, prob },
            1,
            1,
            vec![loss],
        ))
    }

    /// Propagate `d loss / d node` from a scalar loss back through the tape,
    /// accumulating additively into every `requires_grad` tensor reachable
    /// from it. Calling twice without a gradient reset doubles every
    /// gradient.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        loss.expect_scalar("loss")?;
        let start = self.ensure_node(loss)?;
        let nodes = self.nodes.borrow();
        let mut adj: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        adj[start] = Some(vec![1.0]);
        for i in (0..=start).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.kind {
                OpKind::Leaf => {
                    let mut d = node.out.inner.borrow_mut();
                    if let Some(gr) = d.grad.as_mut() {
                        for (dst, src) in gr.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                }
                OpKind::Matmul { a, b } => {
                    let (ar, ac) = a.shape();
                    let bc = b.cols();
                    if nodes[node.parents[0]].needs_grad {
                        let bv = b.inner.borrow();
                        let ga = acc(&mut adj, node.parents[0], ar * ac);
                        // ga[i,k] += sum_j g[i,j] * b[k,j]
                        for i in 0..ar {
                            let grow = &g[i * bc..(i + 1) * bc];
                            for k in 0..ac {
                                let brow = &bv.values[k * bc..(k + 1) * bc];
                                let mut s = 0.0;
                                for j in 0..bc {
                                    s += grow[j] * brow[j];
                                }
                                ga[i * ac + k] += s;
                            }
                        }
                    }
                    if nodes[node.parents[1]].needs_grad {
                        let av = a.inner.borrow();
                        let gb = acc(&mut adj, node.parents[1], ac * bc);
                        // gb[k,j] += sum_i a[i,k] * g[i,j]
                        for i in 0..ar {
                            let grow = &g[i * bc..(i + 1) * bc];
                            let arow = &av.values[i * ac..(i + 1) * ac];
                            for (k, &aik) in arow.iter().enumerate() {
                                let dst = &mut gb[k * bc..(k + 1) * bc];
                                for j in 0..bc {
                                    dst[j] += aik * grow[j];
                                }
                            }
                        }
                    }
                }
                OpKind::ConcatCols { left_cols } => {
                    let (r, c) = node.out.shape();
                    let lc = *left_cols;
                    let rc = c - lc;
                    if nodes[node.parents[0]].needs_grad {
                        let ga = acc(&mut adj, node.parents[0], r * lc);
                        for i in 0..r {
                            for j in 0..lc {
                                ga[i * lc + j] += g[i * c + j];
                            }
                        }
                    }
                    if nodes[node.parents[1]].needs_grad {
                        let gb = acc(&mut adj, node.parents[1], r * rc);
                        for i in 0..r {
                            for j in 0..rc {
                                gb[i * rc + j] += g[i * c + lc + j];
                            }
                        }
                    }
                }
                OpKind::SoftmaxCols { mask } => {
                    let (r, c) = node.out.shape();
                    let yv = node.out.inner.borrow();
                    let y = &yv.values;
                    let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                    let ga = acc(&mut adj, node.parents[0], r * c);
                    for j in 0..c {
                        let mut s = 0.0;
                        for i in 0..r {
                            if valid(i) {
                                s += g[i * c + j] * y[i * c + j];
                            }
                        }
                        for i in 0..r {
                            if valid(i) {
                                ga[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
                            }
                        }
                    }
                }
                OpKind::Tanh => {
                    let yv = node.out.inner.borrow();
                    let ga = acc(&mut adj, node.parents[0], g.len());
                    for (k, (&gk, &t)) in g.iter().zip(yv.values.iter()).enumerate() {
                        ga[k] += gk * (1.0 - t * t);
                    }
                }
                OpKind::Sigmoid => {
                    let yv = node.out.inner.borrow();
                    let ga = acc(&mut adj, node.parents[0], g.len());
                    for (k, (&gk, &s)) in g.iter().zip(yv.values.iter()).enumerate() {
                        ga[k] += gk * s * (1.0 - s);
                    }
                }
                OpKind::Add => {
                    for &side in &[0usize, 1] {
                        if nodes[node.parents[side]].needs_grad {
                            let gp = acc(&mut adj, node.parents[side], g.len());
                            for (dst, src) in gp.iter_mut().zip(g.iter()) {
                                *dst += src;
                            }
                        }
                    }
                }
                OpKind::Mul { a, b } => {
                    if nodes[node.parents[0]].needs_grad {
                        let bv = b.inner.borrow();
                        let ga = acc(&mut adj, node.parents[0], g.len());
                        for (k, (&gk, &bk)) in g.iter().zip(bv.values.iter()).enumerate() {
                            ga[k] += gk * bk;
                        }
                    }
                    if nodes[node.parents[1]].needs_grad {
                        let av = a.inner.borrow();
                        let gb = acc(&mut adj, node.parents[1], g.len());
                        for (k, (&gk, &ak)) in g.iter().zip(av.values.iter()).enumerate() {
                            gb[k] += gk * ak;
                        }
                    }
                }
                OpKind::Scale { factor } => {
                    let ga = acc(&mut adj, node.parents[0], g.len());
                    for (dst, &src) in ga.iter_mut().zip(g.iter()) {
                        *dst += factor * src;
                    }
                }
                OpKind::AddRow => {
                    let (r, c) = node.out.shape();
                    if nodes[node.parents[0]].needs_grad {
                        let gm = acc(&mut adj, node.parents[0], r * c);
                        for (dst, src) in gm.iter_mut().zip(g.iter()) {
                            *dst += src;
                        }
                    }
                    if nodes[node.parents[1]].needs_grad {
                        let gr = acc(&mut adj, node.parents[1], c);
                        for i in 0..r {
                            for j in 0..c {
                                gr[j] += g[i * c + j];
                            }
                        }
                    }
                }
                OpKind::MeanRows { mask } => {
                    let parent = &nodes[node.parents[0]].out;
                    let (r, c) = parent.shape();
                    let valid = |i: usize| mask.as_ref().map_or(true, |m| m[i]);
                    let count = match mask {
                        Some(m) => m.iter().filter(|&&v| v).count(),
                        None => r,
                    } as f64;
                    let ga = acc(&mut adj, node.parents[0], r * c);
                    for i in 0..r {
                        if valid(i) {
                            for j in 0..c {
                                ga[i * c + j] += g[j] / count;
                            }
                        }
                    }
                }
                OpKind::Flatten => {
                    // Row-major flatten: same buffer layout as the parent.
                    let gp = acc(&mut adj, node.parents[0], g.len());
                    for (dst, src) in gp.iter_mut().zip(g.iter()) {
                        *dst += src;
                    }
                }
                OpKind::StackRows => {
                    let c = node.out.cols();
                    for (i, &p) in node.parents.iter().enumerate() {
                        if nodes[p].needs_grad {
                            let gp = acc(&mut adj, p, c);
                            for j in 0..c {
                                gp[j] += g[i * c + j];
                            }
                        }
                    }
                }
                OpKind::Transpose => {
                    let (gr, gc) = node.out.shape();
                    let ga = acc(&mut adj, node.parents[0], gr * gc);
                    // parent is gc x gr
                    for i in 0..gr {
                        for j in 0..gc {
                            ga[j * gr + i] += g[i * gc + j];
                        }
                    }
                }
                OpKind::GatherRows { ids } => {
                    let parent = &nodes[node.parents[0]].out;
                    let (tr, tc) = parent.shape();
                    let gt = acc(&mut adj, node.parents[0], tr * tc);
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g[pos * tc..(pos + 1) * tc];
                        let dst = &mut gt[id * tc..(id + 1) * tc];
                        for j in 0..tc {
                            dst[j] += src[j];
                        }
                    }
                }
                OpKind::SumAll => {
                    let parent = &nodes[node.parents[0]].out;
                    let n = parent.len();
                    let ga = acc(&mut adj, node.parents[0], n);
                    for dst in ga.iter_mut() {
                        *dst += g[0];
                    }
                }
                OpKind::Bce { target, prob } => {
                    let ga = acc(&mut adj, node.parents[0], 1);
                    ga[0] += g[0] * (prob - target) / (prob * (1.0 - prob));
                }
            }
        }
        Ok(())
    }

    fn expect_same_shape(
        &self,
        op: &'static str,
        a: &Tensor,
        b: &Tensor,
    ) -> Result<(usize, usize)> {
        let sa = a.shape();
        if sa != b.shape() {
            return Err(Error::shape(op, a.shape_string(), b.shape_string()));
        }
        Ok(sa)
    }
}

fn acc<'v>(adj: &'v mut [Option<Vec<f64>>], idx: usize, len: usize) -> &'v mut Vec<f64> {
    let slot = &mut adj[idx];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn matmul_into(a: &[f64], ar: usize, ac: usize, b: &[f64], bc: usize, out: &mut [f64]) {
    for i in 0..ar {
        let arow = &a[i * ac..(i + 1) * ac];
        let orow = &mut out[i * bc..(i + 1) * bc];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * bc..(k + 1) * bc];
            for j in 0..bc {
                orow[j] += aik * brow[j];
            }
        }
    }
}
