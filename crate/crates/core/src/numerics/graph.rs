//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as a node appended to a flat list, so
//! node order is already a topological order and backward is a single reverse
//! sweep. Parameters are not copied into the graph: a parameter node reads its
//! value from the borrowed [`ParamStore`].

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};
use crate::error::{contract, shape, Error, Result};

/// Large negative constant standing in for `-inf` inside softmax.
pub const MASK_SENTINEL: f64 = -1e30;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Gather { table: Var, ids: Vec<usize> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SelectRows { x: Var, rows: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64> },
    LogSumExpRows(Var),
    Pick { x: Var, flat: Vec<usize> },
    Sum(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::MatMulBt(..) => "matmul_bt",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Silu(_) => "silu",
            Op::Softmax(_) => "softmax_rows",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gather { .. } => "gather",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::SelectRows { .. } => "select_rows",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<Tensor>,
    tracked: bool,
}

/// Recorded computation over a borrowed parameter store.
#[derive(Debug)]
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<'s> Graph<'s> {
    /// Graph without a parameter store; only [`input`](Self::input) and
    /// [`variable`](Self::variable) leaves are available.
    pub fn new() -> Self {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.expect("param node without store").get(*id),
            (None, _) => unreachable!("non-param node without value"),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, tracked: bool) -> Result<Var> {
        value.check_finite(op.name())?;
        self.nodes.push(Node {
            op,
            value: Some(value),
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t, false)
    }

    /// Leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| contract("graph has no parameter store"))?;
        if id.0 >= store.len() {
            return Err(Error::Index {
                index: id.0,
                size: store.len(),
            });
        }
        let tracked = store.get(id).requires_grad();
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            tracked,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMul(a, b), out, tracked)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (n, k2) = self.value(b).dims2()?;
        if k != k2 {
            return Err(shape(format!("matmul_bt {m}x{k} by ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::MatMulBt(a, b), Tensor::new(vec![m, n], out)?, tracked)
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape(format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x + y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Add(a, b), out, tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x - y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Sub(a, b), out, tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, |x, y| x * y)?;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Op::Mul(a, b), out, tracked)
    }

    /// Adds a length-`C` vector to every row of an `R×C` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let bias = self.value(row);
        if bias.numel() != c {
            return Err(shape(format!("row of {} added to {r}x{c}", bias.numel())));
        }
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(bias.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(row);
        self.push(Op::AddRow(x, row), Tensor::new(vec![r, c], data)?, tracked)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(Op::Scale(x, factor), out, tracked)
    }

    /// `x · sigmoid(x)` elementwise.
    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let tracked = self.tracked(x);
        self.push(Op::Silu(x), out, tracked)
    }

    /// Row-wise softmax of an `R×C` matrix, with an optional additive mask of
    /// the same shape holding only `0` or `-inf` entries.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = t.dims2()?;
        if let Some(m) = mask {
            if m.shape() != [r, c] {
                return Err(shape(format!("mask {:?} for scores {r}x{c}", m.shape())));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != f64::NEG_INFINITY && v != MASK_SENTINEL) {
                return Err(contract("mask entries must be 0 or -inf"));
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &t.data()[i * c..(i + 1) * c];
            let logits: Vec<f64> = match mask {
                Some(m) => row
                    .iter()
                    .zip(&m.data()[i * c..(i + 1) * c])
                    .map(|(&v, &mv)| if mv == 0.0 { v } else { v + MASK_SENTINEL })
                    .collect(),
                None => row.to_vec(),
            };
            if let Some(m) = mask {
                if m.data()[i * c..(i + 1) * c].iter().all(|&mv| mv != 0.0) {
                    return Err(Error::DegenerateRow { row: i });
                }
            }
            softmax_into(&logits, &mut out[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(x);
        self.push(Op::Softmax(x), Tensor::new(vec![r, c], out)?, tracked)
    }

    /// RMS normalisation of each row followed by a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let g = self.value(gain);
        if g.numel() != c {
            return Err(shape(format!("gain of {} for width {c}", g.numel())));
        }
        let xd = self.value(x).data();
        let mut out = vec![0.0; r * c];
        let mut inv_rms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, &v), &gv) in out[i * c..(i + 1) * c].iter_mut().zip(row).zip(g.data()) {
                *o = v * inv * gv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain);
        self.push(
            Op::RmsNorm { x, gain, inv_rms },
            Tensor::new(vec![r, c], out)?,
            tracked,
        )
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.value(table).dims2()?;
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { index: id, size: v });
            }
            out.extend_from_slice(&td[id * c..(id + 1) * c]);
        }
        let tracked = self.tracked(table);
        self.push(
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            Tensor::new(vec![ids.len(), c], out)?,
            tracked,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if start >= end || end > c {
            return Err(shape(format!("columns {start}..{end} of width {c}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&xd[i * c + start..i * c + end]);
        }
        let tracked = self.tracked(x);
        self.push(
            Op::SliceCols { x, start },
            Tensor::new(vec![r, end - start], out)?,
            tracked,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).dims2()?;
            if pr != r {
                return Err(shape(format!("concat rows {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for i in 0..r {
                out[i * total + offset..i * total + offset + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(
            Op::ConcatCols(parts.to_vec()),
            Tensor::new(vec![r, total], out)?,
            tracked,
        )
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::Index { index: i, size: r });
            }
            out.extend_from_slice(&xd[i * c..(i + 1) * c]);
        }
        let tracked = self.tracked(x);
        self.push(
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            Tensor::new(vec![rows.len(), c], out)?,
            tracked,
        )
    }

    /// Scales each row to unit Euclidean norm; a zero row is a contract error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(contract(format!("row {i} has zero norm")));
            }
            norms.push(norm);
            out.extend(row.iter().map(|v| v / norm));
        }
        let tracked = self.tracked(x);
        self.push(
            Op::NormalizeRows { x, norms },
            Tensor::new(vec![r, c], out)?,
            tracked,
        )
    }

    /// `log Σ_j exp(x[i][j])` per row, max-stabilised. Output has shape `[R]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let out = (0..r).map(|i| logsumexp(&xd[i * c..(i + 1) * c])).collect();
        let tracked = self.tracked(x);
        self.push(Op::LogSumExpRows(x), Tensor::new(vec![r], out)?, tracked)
    }

    /// Picks `x[i][j]` for each `(i, j)`; output has shape `[coords.len()]`.
    pub fn pick(&mut self, x: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        let mut flat = Vec::with_capacity(coords.len());
        for &(i, j) in coords {
            if i >= r || j >= c {
                return Err(Error::Index {
                    index: i * c + j,
                    size: r * c,
                });
            }
            flat.push(i * c + j);
        }
        let xd = self.value(x).data();
        let out = flat.iter().map(|&f| xd[f]).collect();
        let tracked = self.tracked(x);
        self.push(
            Op::Pick { x, flat },
            Tensor::new(vec![coords.len()], out)?,
            tracked,
        )
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let tracked = self.tracked(x);
        self.push(Op::Sum(x), Tensor::scalar(s), tracked)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                t.shape()
            )));
        }
        self.backward_with_seed(loss, &[1.0])
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `out`.
    pub fn backward_with_seed(&self, out: Var, seed: &[f64]) -> Result<Gradients> {
        if seed.len() != self.value(out).numel() {
            return Err(shape(format!(
                "seed of length {} for node with {} elements",
                seed.len(),
                self.value(out).numel()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adj[out.0] = Some(seed.to_vec());
        for idx in (0..=out.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            self.propagate(idx, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (&id, &v) in &self.param_nodes {
            if let Some(g) = adj[v.0].as_ref() {
                params.push((id, g.clone()));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Ok(Gradients { nodes: adj, params })
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_bt_into(g, self.value(*b).data(), &mut ga, m, n, k);
                    accumulate(adj, *a, &ga);
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; k * n];
                    matmul_at_into(self.value(*a).data(), g, &mut gb, m, k, n);
                    accumulate(adj, *b, &gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (n, _) = self.value(*b).dims2()?;
                if self.tracked(*a) {
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, self.value(*b).data(), &mut ga, m, n, k);
                    accumulate(adj, *a, &ga);
                }
                if self.tracked(*b) {
                    let mut gb = vec![0.0; n * k];
                    matmul_at_into(g, self.value(*a).data(), &mut gb, m, n, k);
                    accumulate(adj, *b, &gb);
                }
            }
            Op::Add(a, b) => {
                accumulate_if(self, adj, *a, g);
                accumulate_if(self, adj, *b, g);
            }
            Op::Sub(a, b) => {
                accumulate_if(self, adj, *a, g);
                if self.tracked(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(adj, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.tracked(*a) {
                    let ga: Vec<f64> = g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *a, &ga);
                }
                if self.tracked(*b) {
                    let gb: Vec<f64> = g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(adj, *b, &gb);
                }
            }
            Op::AddRow(x, row) => {
                accumulate_if(self, adj, *x, g);
                if self.tracked(*row) {
                    let c = self.value(*row).numel();
                    let mut gr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                    accumulate(adj, *row, &gr);
                }
            }
            Op::Scale(x, factor) => {
                if self.tracked(*x) {
                    let gx: Vec<f64> = g.iter().map(|v| v * factor).collect();
                    accumulate(adj, *x, &gx);
                }
            }
            Op::Silu(x) => {
                if self.tracked(*x) {
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(&gv, &v)| {
                            let s = sigmoid(v);
                            gv * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    accumulate(adj, *x, &gx);
                }
            }
            Op::Softmax(x) => {
                if self.tracked(*x) {
                    let (_, c) = out.dims2()?;
                    let mut gx = vec![0.0; g.len()];
                    for ((gr, yr), or) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &yv) in or.iter_mut().zip(gr).zip(yr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (_, c) = out.dims2()?;
                let xd = self.value(*x).data();
                let gd = self.value(*gain).data();
                if self.tracked(*gain) {
                    let mut gg = vec![0.0; c];
                    for ((gr, xr), inv) in g.chunks(c).zip(xd.chunks(c)).zip(inv_rms) {
                        for ((o, &gv), &xv) in gg.iter_mut().zip(gr).zip(xr) {
                            *o += gv * xv * inv;
                        }
                    }
                    accumulate(adj, *gain, &gg);
                }
                if self.tracked(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for (((gr, xr), inv), or) in g
                        .chunks(c)
                        .zip(xd.chunks(c))
                        .zip(inv_rms)
                        .zip(gx.chunks_mut(c))
                    {
                        // n = x·inv, gn = g⊙gain; dx = inv·(gn − n·mean(gn⊙n))
                        let mean: f64 = gr
                            .iter()
                            .zip(gd)
                            .zip(xr)
                            .map(|((&gv, &gain), &xv)| gv * gain * xv * inv)
                            .sum::<f64>()
                            / c as f64;
                        for (((o, &gv), &gain), &xv) in or.iter_mut().zip(gr).zip(gd).zip(xr) {
                            *o = inv * (gv * gain - xv * inv * mean);
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::Gather { table, ids } => {
                if self.tracked(*table) {
                    let (v, c) = self.value(*table).dims2()?;
                    let slot = adj[table.0].get_or_insert_with(|| vec![0.0; v * c]);
                    for (row, &id) in g.chunks(c).zip(ids) {
                        for (o, gv) in slot[id * c..(id + 1) * c].iter_mut().zip(row) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if self.tracked(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let w = out.dims2()?.1;
                    let slot = adj[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for (i, gr) in g.chunks(w).enumerate() {
                        for (o, gv) in slot[i * c + start..i * c + start + w].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = out.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).dims2()?.1;
                    if self.tracked(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(adj, p, &gp);
                    }
                    offset += w;
                }
            }
            Op::SelectRows { x, rows } => {
                if self.tracked(*x) {
                    let (r, c) = self.value(*x).dims2()?;
                    let slot = adj[x.0].get_or_insert_with(|| vec![0.0; r * c]);
                    for (gr, &i) in g.chunks(c).zip(rows) {
                        for (o, gv) in slot[i * c..(i + 1) * c].iter_mut().zip(gr) {
                            *o += gv;
                        }
                    }
                }
            }
            Op::NormalizeRows { x, norms } => {
                if self.tracked(*x) {
                    let (_, c) = out.dims2()?;
                    let mut gx = vec![0.0; g.len()];
                    for (((gr, nr), norm), or) in g
                        .chunks(c)
                        .zip(out.data().chunks(c))
                        .zip(norms)
                        .zip(gx.chunks_mut(c))
                    {
                        let dot: f64 = gr.iter().zip(nr).map(|(a, b)| a * b).sum();
                        for ((o, &gv), &nv) in or.iter_mut().zip(gr).zip(nr) {
                            *o = (gv - nv * dot) / norm;
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::LogSumExpRows(x) => {
                if self.tracked(*x) {
                    let (_, c) = self.value(*x).dims2()?;
                    let xd = self.value(*x).data();
                    let mut gx = vec![0.0; xd.len()];
                    for (((xr, &lse), &gv), or) in xd
                        .chunks(c)
                        .zip(out.data())
                        .zip(g)
                        .zip(gx.chunks_mut(c))
                    {
                        for (o, &v) in or.iter_mut().zip(xr) {
                            *o = gv * (v - lse).exp();
                        }
                    }
                    accumulate(adj, *x, &gx);
                }
            }
            Op::Pick { x, flat } => {
                if self.tracked(*x) {
                    let n = self.value(*x).numel();
                    let slot = adj[x.0].get_or_insert_with(|| vec![0.0; n]);
                    for (&f, gv) in flat.iter().zip(g) {
                        slot[f] += gv;
                    }
                }
            }
            Op::Sum(x) => {
                if self.tracked(*x) {
                    let n = self.value(*x).numel();
                    accumulate(adj, *x, &vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(g) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

fn accumulate_if(graph: &Graph<'_>, adj: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    if graph.tracked(v) {
        accumulate(adj, v, g);
    }
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Vec<f64>)>,
}

impl Gradients {
    /// Gradient with respect to a tracked node, if any flowed into it.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients in ascending id order.
    pub fn params(&self) -> &[(ParamId, Vec<f64>)] {
        &self.params
    }

    /// Adds the parameter gradients into the store's grad buffers. Calling
    /// this twice accumulates twice.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for (id, g) in &self.params {
            store.get_mut(*id).accumulate_grad(g)?;
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let Some((arg, &max)) = xs
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, &f64)>, (i, v)| match best {
            Some((_, b)) if *b >= *v => best,
            _ => Some((i, v)),
        })
    else {
        return f64::NEG_INFINITY;
    };
    // the max term contributes exactly one; ln_1p keeps the small remainder
    let rest: f64 = xs
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, v)| (v - max).exp())
        .sum();
    max + rest.ln_1p()
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}
