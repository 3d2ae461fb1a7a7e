//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass. Nodes are
//! appended in evaluation order, so a single reverse sweep over the node
//! list visits each node after all of its consumers. Parameters enter the
//! tape through [`Graph::param`], once per graph; [`Graph::backward`]
//! returns gradients that can be mapped back onto a [`ParamStore`].
//!
//! The tape is single-threaded (`RefCell`) and lives for one forward pass.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{matmul_into, matmul_nt_into, matmul_tn_into, sigmoid, Lanes, Tensor};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    ScaleBy(usize, usize),
    Affine(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Softmax(usize, usize),
    LogSoftmax(usize, usize),
    Transpose(usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Sum(usize),
    MeanRows(usize),
    MaxRows(usize, Vec<usize>),
    L2Norm(usize, usize),
    Gather(usize, Vec<Option<usize>>),
    Pick(usize, usize),
    ReverseRows(usize),
    Lstm(usize, usize, Box<LstmCache>),
}

/// Activations kept from a fused LSTM forward pass for BPTT.
#[derive(Clone, Debug)]
struct LstmCache {
    hidden: usize,
    /// Activated gates per step, `[t × 4h]` (i, f, g, o).
    gates: Vec<f64>,
    /// Cell states per step, `[t × h]`.
    cells: Vec<f64>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<Vec<(ParamId, usize)>>,
    rng: RefCell<Option<RngStream>>,
    stochastic: Cell<bool>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Graph {
    /// A deterministic (evaluation-mode) tape: dropout is the identity.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(Vec::new()),
            rng: RefCell::new(None),
            stochastic: Cell::new(false),
        }
    }

    /// A training-mode tape whose dropout masks are drawn from `rng`.
    pub fn training(rng: RngStream) -> Self {
        let g = Graph::new();
        *g.rng.borrow_mut() = Some(rng);
        g
    }

    pub fn is_training(&self) -> bool {
        self.rng.borrow().is_some()
    }

    /// Whether any stochastic operation has been recorded.
    pub fn used_randomness(&self) -> bool {
        self.stochastic.get()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    /// Frozen parameters enter as constants.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&(_, node)) = self.param_nodes.borrow().iter().find(|(p, _)| *p == id) {
            return Var { graph: self, id: node };
        }
        let p = store.get(id);
        let op = if p.trainable { Op::Param } else { Op::Leaf };
        let v = self.push(p.value.clone(), op);
        self.param_nodes.borrow_mut().push((id, v.id));
        v
    }

    pub fn concat_cols<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals.first().ok_or(Error::Empty("concat_cols"))?.rows();
        let mut cols = 0;
        for v in &vals {
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    left: vals[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &vals {
                out.extend_from_slice(v.row_slice(r));
            }
        }
        Ok(self.push(
            Tensor::raw(vec![rows, cols], out),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        ))
    }

    pub fn concat_rows<'g>(&'g self, parts: &[Var<'g>]) -> Result<Var<'g>> {
        let vals: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let cols = vals.first().ok_or(Error::Empty("concat_rows"))?.cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for v in &vals {
            let (r, c) = v.dims2()?;
            if c != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    left: vals[0].shape().to_vec(),
                    right: v.shape().to_vec(),
                });
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        Ok(self.push(
            Tensor::raw(vec![rows, cols], out),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
        ))
    }

    /// Row lookup into `table`; `None` entries yield zero rows with no gradient.
    pub fn gather<'g>(&'g self, table: Var<'g>, rows: &[Option<usize>]) -> Result<Var<'g>> {
        let t = table.value();
        let (n, d) = t.dims2()?;
        let mut out = Vec::with_capacity(rows.len() * d);
        for r in rows {
            match *r {
                Some(i) if i >= n => return Err(Error::Index { index: i, len: n }),
                Some(i) => out.extend_from_slice(t.row_slice(i)),
                None => out.extend(std::iter::repeat(0.0).take(d)),
            }
        }
        Ok(self.push(
            Tensor::new(vec![rows.len(), d], out)?,
            Op::Gather(table.id, rows.to_vec()),
        ))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate == 0`.
    pub fn dropout<'g>(&'g self, x: Var<'g>, rate: f64) -> Var<'g> {
        let mut rng = self.rng.borrow_mut();
        let Some(rng) = rng.as_mut() else { return x };
        if rate <= 0.0 {
            return x;
        }
        self.stochastic.set(true);
        let keep = 1.0 - rate;
        let shape = x.shape();
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.next_f64() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = self.push(Tensor::raw(shape, mask), Op::Leaf);
        let v = Tensor::raw(
            x.shape(),
            x.value()
                .data()
                .iter()
                .zip(mask.value().data())
                .map(|(a, b)| a * b)
                .collect(),
        );
        self.push(v, Op::Mul(x.id, mask.id))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape().to_vec();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(&shape, 1.0));

        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        grads.resize(nodes.len(), None);
        Ok(Gradients {
            nodes: grads,
            params: self.param_nodes.borrow().clone(),
        })
    }
}

fn grad_buf<'a>(grads: &'a mut [Option<Tensor>], nodes: &[Node], id: usize) -> &'a mut [f64] {
    grads[id]
        .get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()))
        .data_mut()
}

fn backprop(nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
    let gd = g.data();
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    match &node.op {
        Op::Leaf | Op::Param => {}
        Op::MatMul(a, b) => {
            let (m, k) = val(*a).dims2()?;
            let n = val(*b).cols();
            let bv = Rc::clone(&nodes[*b].value);
            let av = Rc::clone(&nodes[*a].value);
            matmul_nt_into(gd, bv.data(), grad_buf(grads, nodes, *a), m, n, k);
            matmul_tn_into(av.data(), gd, grad_buf(grads, nodes, *b), m, k, n);
        }
        Op::Add(a, b) => {
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gd) {
                *o += x;
            }
            for (o, x) in grad_buf(grads, nodes, *b).iter_mut().zip(gd) {
                *o += x;
            }
        }
        Op::Sub(a, b) => {
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gd) {
                *o += x;
            }
            for (o, x) in grad_buf(grads, nodes, *b).iter_mut().zip(gd) {
                *o -= x;
            }
        }
        Op::Mul(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            for ((o, x), y) in grad_buf(grads, nodes, *a).iter_mut().zip(gd).zip(bv.data()) {
                *o += x * y;
            }
            for ((o, x), y) in grad_buf(grads, nodes, *b).iter_mut().zip(gd).zip(av.data()) {
                *o += x * y;
            }
        }
        Op::Div(a, b) => {
            let av = Rc::clone(&nodes[*a].value);
            let bv = Rc::clone(&nodes[*b].value);
            for ((o, x), y) in grad_buf(grads, nodes, *a).iter_mut().zip(gd).zip(bv.data()) {
                *o += x / y;
            }
            let ga = grad_buf(grads, nodes, *b);
            for i in 0..gd.len() {
                let y = bv.data()[i];
                ga[i] -= gd[i] * av.data()[i] / (y * y);
            }
        }
        Op::AddRow(a, row) => {
            let n = g.cols();
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gd) {
                *o += x;
            }
            let gr = grad_buf(grads, nodes, *row);
            for (i, x) in gd.iter().enumerate() {
                gr[i % n] += x;
            }
        }
        Op::MulCol(a, col) => {
            let n = g.cols();
            let av = Rc::clone(&nodes[*a].value);
            let cv = Rc::clone(&nodes[*col].value);
            let ga = grad_buf(grads, nodes, *a);
            for (i, x) in gd.iter().enumerate() {
                ga[i] += x * cv.data()[i / n];
            }
            let gc = grad_buf(grads, nodes, *col);
            for (i, x) in gd.iter().enumerate() {
                gc[i / n] += x * av.data()[i];
            }
        }
        Op::ScaleBy(a, s) => {
            let av = Rc::clone(&nodes[*a].value);
            let sv = nodes[*s].value.data()[0];
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gd) {
                *o += x * sv;
            }
            let dot: f64 = gd.iter().zip(av.data()).map(|(x, y)| x * y).sum();
            grad_buf(grads, nodes, *s)[0] += dot;
        }
        Op::Affine(a, mul) => {
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gd) {
                *o += x * mul;
            }
        }
        Op::Sigmoid(a) => {
            let y = node.value.data();
            for ((o, x), y) in grad_buf(grads, nodes, *a).iter_mut().zip(gd).zip(y) {
                *o += x * y * (1.0 - y);
            }
        }
        Op::Tanh(a) => {
            let y = node.value.data();
            for ((o, x), y) in grad_buf(grads, nodes, *a).iter_mut().zip(gd).zip(y) {
                *o += x * (1.0 - y * y);
            }
        }
        Op::Relu(a) => {
            let av = Rc::clone(&nodes[*a].value);
            for ((o, x), inp) in grad_buf(grads, nodes, *a).iter_mut().zip(gd).zip(av.data()) {
                if *inp > 0.0 {
                    *o += x;
                }
            }
        }
        Op::Softmax(a, axis) => {
            let y = node.value.data();
            let lanes = Lanes::new(node.value.shape(), *axis)?;
            let ga = grad_buf(grads, nodes, *a);
            for k in 0..lanes.count() {
                let dot: f64 = lanes.indices(k).map(|i| gd[i] * y[i]).sum();
                for i in lanes.indices(k) {
                    ga[i] += y[i] * (gd[i] - dot);
                }
            }
        }
        Op::LogSoftmax(a, axis) => {
            let y = node.value.data();
            let lanes = Lanes::new(node.value.shape(), *axis)?;
            let ga = grad_buf(grads, nodes, *a);
            for k in 0..lanes.count() {
                let total: f64 = lanes.indices(k).map(|i| gd[i]).sum();
                for i in lanes.indices(k) {
                    ga[i] += gd[i] - y[i].exp() * total;
                }
            }
        }
        Op::Transpose(a) => {
            let gt = g.transpose()?;
            for (o, x) in grad_buf(grads, nodes, *a).iter_mut().zip(gt.data()) {
                *o += x;
            }
        }
        Op::ConcatCols(parts) => {
            let (rows, cols) = g.dims2()?;
            let mut offset = 0;
            for &p in parts {
                let c = val(p).cols();
                let gp = grad_buf(grads, nodes, p);
                for r in 0..rows {
                    for j in 0..c {
                        gp[r * c + j] += gd[r * cols + offset + j];
                    }
                }
                offset += c;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).len();
                for (o, x) in grad_buf(grads, nodes, p).iter_mut().zip(&gd[offset..offset + len]) {
                    *o += x;
                }
                offset += len;
            }
        }
        Op::SliceCols(a, start) => {
            let (rows, c) = g.dims2()?;
            let full = val(*a).cols();
            let ga = grad_buf(grads, nodes, *a);
            for r in 0..rows {
                for j in 0..c {
                    ga[r * full + start + j] += gd[r * c + j];
                }
            }
        }
        Op::SliceRows(a, start) => {
            let c = g.cols();
            let ga = grad_buf(grads, nodes, *a);
            for (i, x) in gd.iter().enumerate() {
                ga[start * c + i] += x;
            }
        }
        Op::Sum(a) => {
            for o in grad_buf(grads, nodes, *a).iter_mut() {
                *o += gd[0];
            }
        }
        Op::MeanRows(a) => {
            let (m, n) = val(*a).dims2()?;
            let ga = grad_buf(grads, nodes, *a);
            for (i, o) in ga.iter_mut().enumerate() {
                *o += gd[i % n] / m as f64;
            }
        }
        Op::MaxRows(a, argmax) => {
            let n = val(*a).cols();
            let ga = grad_buf(grads, nodes, *a);
            for (j, &r) in argmax.iter().enumerate() {
                ga[r * n + j] += gd[j];
            }
        }
        Op::L2Norm(a, axis) => {
            let av = Rc::clone(&nodes[*a].value);
            let norms = node.value.data();
            let lanes = Lanes::new(av.shape(), *axis)?;
            let ga = grad_buf(grads, nodes, *a);
            for k in 0..lanes.count() {
                // zero subgradient at the origin
                if norms[k] == 0.0 {
                    continue;
                }
                for i in lanes.indices(k) {
                    ga[i] += gd[k] * av.data()[i] / norms[k];
                }
            }
        }
        Op::Gather(table, rows) => {
            let d = g.cols();
            let gt = grad_buf(grads, nodes, *table);
            for (r, idx) in rows.iter().enumerate() {
                if let Some(i) = idx {
                    for j in 0..d {
                        gt[i * d + j] += gd[r * d + j];
                    }
                }
            }
        }
        Op::Pick(a, idx) => {
            grad_buf(grads, nodes, *a)[*idx] += gd[0];
        }
        Op::Lstm(x, u, cache) => {
            let uv = Rc::clone(&nodes[*u].value);
            let hs = Rc::clone(&node.value);
            let h = cache.hidden;
            let steps = hs.rows();
            let mut dpre_all = vec![0.0; steps * 4 * h];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for t in (0..steps).rev() {
                let gates = &cache.gates[t * 4 * h..(t + 1) * 4 * h];
                let c = &cache.cells[t * h..(t + 1) * h];
                let dpre = &mut dpre_all[t * 4 * h..(t + 1) * 4 * h];
                for k in 0..h {
                    let (i, f, gg, o) = (gates[k], gates[h + k], gates[2 * h + k], gates[3 * h + k]);
                    let c_prev = if t > 0 { cache.cells[(t - 1) * h + k] } else { 0.0 };
                    let tc = c[k].tanh();
                    let dh = gd[t * h + k] + dh_next[k];
                    let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                    dpre[k] = dc * gg * i * (1.0 - i);
                    dpre[h + k] = dc * c_prev * f * (1.0 - f);
                    dpre[2 * h + k] = dc * i * (1.0 - gg * gg);
                    dpre[3 * h + k] = dh * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                dh_next.iter_mut().for_each(|x| *x = 0.0);
                if t > 0 {
                    matmul_nt_into(dpre, uv.data(), &mut dh_next, 1, 4 * h, h);
                    let h_prev = &hs.data()[(t - 1) * h..t * h];
                    matmul_tn_into(h_prev, dpre, grad_buf(grads, nodes, *u), 1, h, 4 * h);
                }
            }
            for (o, x) in grad_buf(grads, nodes, *x).iter_mut().zip(&dpre_all) {
                *o += x;
            }
        }
        Op::ReverseRows(a) => {
            let (m, n) = g.dims2()?;
            let ga = grad_buf(grads, nodes, *a);
            for r in 0..m {
                for j in 0..n {
                    ga[(m - 1 - r) * n + j] += gd[r * n + j];
                }
            }
        }
    }
    Ok(())
}

/// Result of a reverse sweep.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to a node, if the loss depends on it.
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.nodes.get(v.id).and_then(Option::as_ref)
    }

    /// Gradients for every parameter in `store`; zero where the loss does
    /// not reach the parameter or the parameter is frozen.
    pub fn params(&self, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        self.accumulate_params(store, &mut out, 1.0);
        out
    }

    /// Adds `scale ×` the parameter gradients into `out`.
    pub fn accumulate_params(&self, store: &ParamStore, out: &mut ParamGrads, scale: f64) {
        for &(pid, node) in &self.params {
            if !store.get(pid).trainable {
                continue;
            }
            if let Some(g) = self.nodes.get(node).and_then(Option::as_ref) {
                for (o, x) in out.get_mut(pid).data_mut().iter_mut().zip(g.data()) {
                    *o += scale * x;
                }
            }
        }
    }
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Scalar value of a single-element node.
    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    fn unary(self, op: &'static str, f: impl Fn(f64) -> f64, mk: impl FnOnce(usize) -> Op) -> Result<Var<'g>> {
        let out = self.value().map(f);
        check(op, &out)?;
        Ok(self.graph.push(out, mk(self.id)))
    }

    fn binary(
        self,
        other: Var<'g>,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'g>> {
        let out = self.value().zip(&other.value(), op, f)?;
        check(op, &out)?;
        Ok(self.graph.push(out, mk(self.id, other.id)))
    }

    pub fn matmul(self, other: Var<'g>) -> Result<Var<'g>> {
        let out = self.value().matmul(&other.value())?;
        check("matmul", &out)?;
        Ok(self.graph.push(out, Op::MatMul(self.id, other.id)))
    }

    pub fn add(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, other: Var<'g>) -> Result<Var<'g>> {
        self.binary(other, "div", |a, b| a / b, Op::Div)
    }

    pub fn square(self) -> Result<Var<'g>> {
        self.mul(self)
    }

    /// `self[m×n] + row[1×n]` broadcast over rows.
    pub fn add_row(self, row: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let r = row.value();
        let (_, n) = a.dims2()?;
        if r.dims2()? != (1, n) {
            return Err(Error::Shape {
                op: "add_row",
                left: a.shape().to_vec(),
                right: r.shape().to_vec(),
            });
        }
        let data = a.data().iter().enumerate().map(|(i, x)| x + r.data()[i % n]).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        check("add_row", &out)?;
        Ok(self.graph.push(out, Op::AddRow(self.id, row.id)))
    }

    /// Scales row `i` of `self[m×n]` by `col[i]` where `col` is `[m×1]`.
    pub fn mul_col(self, col: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let c = col.value();
        let (m, n) = a.dims2()?;
        if c.dims2()? != (m, 1) {
            return Err(Error::Shape {
                op: "mul_col",
                left: a.shape().to_vec(),
                right: c.shape().to_vec(),
            });
        }
        let data = a.data().iter().enumerate().map(|(i, x)| x * c.data()[i / n]).collect();
        let out = Tensor::raw(a.shape().to_vec(), data);
        check("mul_col", &out)?;
        Ok(self.graph.push(out, Op::MulCol(self.id, col.id)))
    }

    /// Multiplies every entry by the single entry of `s`.
    pub fn scale_by(self, s: Var<'g>) -> Result<Var<'g>> {
        let sv = s.value();
        if sv.len() != 1 {
            return Err(Error::Shape {
                op: "scale_by",
                left: self.shape(),
                right: sv.shape().to_vec(),
            });
        }
        let k = sv.data()[0];
        let out = self.value().map(|x| x * k);
        check("scale_by", &out)?;
        Ok(self.graph.push(out, Op::ScaleBy(self.id, s.id)))
    }

    /// `mul * self + add` with constant coefficients.
    pub fn affine(self, mul: f64, add: f64) -> Result<Var<'g>> {
        self.unary("affine", |x| mul * x + add, |a| Op::Affine(a, mul))
    }

    pub fn scale(self, mul: f64) -> Result<Var<'g>> {
        self.affine(mul, 0.0)
    }

    pub fn sigmoid(self) -> Result<Var<'g>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid)
    }

    pub fn tanh(self) -> Result<Var<'g>> {
        self.unary("tanh", f64::tanh, Op::Tanh)
    }

    pub fn relu(self) -> Result<Var<'g>> {
        self.unary("relu", |x| x.max(0.0), Op::Relu)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = self.value().softmax(axis)?;
        check("softmax", &out)?;
        Ok(self.graph.push(out, Op::Softmax(self.id, axis)))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'g>> {
        let out = self.value().log_softmax(axis)?;
        check("log_softmax", &out)?;
        Ok(self.graph.push(out, Op::LogSoftmax(self.id, axis)))
    }

    pub fn transpose(self) -> Result<Var<'g>> {
        let out = self.value().transpose()?;
        Ok(self.graph.push(out, Op::Transpose(self.id)))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        if start + len > n || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: n,
            });
        }
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&a.row_slice(r)[start..start + len]);
        }
        Ok(self.graph.push(Tensor::raw(vec![m, len], out), Op::SliceCols(self.id, start)))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        if start + len > m || len == 0 {
            return Err(Error::Index {
                index: start + len,
                len: m,
            });
        }
        let out = a.data()[start * n..(start + len) * n].to_vec();
        Ok(self.graph.push(Tensor::raw(vec![len, n], out), Op::SliceRows(self.id, start)))
    }

    pub fn row(self, i: usize) -> Result<Var<'g>> {
        self.slice_rows(i, 1)
    }

    pub fn col(self, j: usize) -> Result<Var<'g>> {
        self.slice_cols(j, 1)
    }

    /// Sum of all entries as a `[1×1]` node.
    pub fn sum(self) -> Result<Var<'g>> {
        let s = self.value().sum();
        check("sum", &Tensor::scalar(s))?;
        Ok(self.graph.push(Tensor::scalar(s), Op::Sum(self.id)))
    }

    /// Column means of `[m×n]` as `[1×n]`.
    pub fn mean_rows(self) -> Result<Var<'g>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, x) in out.iter_mut().zip(a.row_slice(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= m as f64);
        Ok(self.graph.push(Tensor::raw(vec![1, n], out), Op::MeanRows(self.id)))
    }

    /// Column maxima of `[m×n]` as `[1×n]`.
    pub fn max_rows(self) -> Result<Var<'g>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        let mut argmax = vec![0usize; n];
        for r in 1..m {
            for j in 0..n {
                if a.get(r, j) > a.get(argmax[j], j) {
                    argmax[j] = r;
                }
            }
        }
        let out = argmax.iter().enumerate().map(|(j, &r)| a.get(r, j)).collect();
        Ok(self.graph.push(Tensor::raw(vec![1, n], out), Op::MaxRows(self.id, argmax)))
    }

    pub fn l2_norm(self, axis: usize) -> Result<Var<'g>> {
        let out = self.value().l2_norm(axis)?;
        check("l2_norm", &out)?;
        Ok(self.graph.push(out, Op::L2Norm(self.id, axis)))
    }

    /// Entry `(r, c)` as a `[1×1]` node.
    pub fn pick(self, r: usize, c: usize) -> Result<Var<'g>> {
        let a = self.value();
        let (m, n) = a.dims2()?;
        if r >= m || c >= n {
            return Err(Error::Index {
                index: r * n + c,
                len: m * n,
            });
        }
        Ok(self.graph.push(Tensor::scalar(a.get(r, c)), Op::Pick(self.id, r * n + c)))
    }

    /// Fused LSTM recurrence with zero initial state. `self` holds the
    /// projected inputs `x W + b` as `[t × 4h]` (gate blocks i, f, g, o) and
    /// `u` the recurrent weights `[h × 4h]`. Returns the hidden states `[t × h]`.
    pub fn lstm(self, u: Var<'g>) -> Result<Var<'g>> {
        let xp = self.value();
        let uv = u.value();
        let (steps, four_h) = xp.dims2()?;
        let (h, four_h2) = uv.dims2()?;
        if four_h != 4 * h || four_h2 != four_h {
            return Err(Error::Shape {
                op: "lstm",
                left: xp.shape().to_vec(),
                right: uv.shape().to_vec(),
            });
        }
        let mut gates = vec![0.0; steps * 4 * h];
        let mut cells = vec![0.0; steps * h];
        let mut hs = vec![0.0; steps * h];
        for t in 0..steps {
            let pre = &mut gates[t * 4 * h..(t + 1) * 4 * h];
            pre.copy_from_slice(xp.row_slice(t));
            if t > 0 {
                let (done, _) = hs.split_at(t * h);
                matmul_into(&done[(t - 1) * h..], uv.data(), pre, 1, h, 4 * h);
            }
            for (k, v) in pre.iter_mut().enumerate() {
                *v = if (2 * h..3 * h).contains(&k) { v.tanh() } else { sigmoid(*v) };
            }
            for k in 0..h {
                let c_prev = if t > 0 { cells[(t - 1) * h + k] } else { 0.0 };
                let c = pre[h + k] * c_prev + pre[k] * pre[2 * h + k];
                cells[t * h + k] = c;
                hs[t * h + k] = pre[3 * h + k] * c.tanh();
            }
        }
        let out = Tensor::raw(vec![steps, h], hs);
        check("lstm", &out)?;
        Ok(self.graph.push(
            out,
            Op::Lstm(self.id, u.id, Box::new(LstmCache { hidden: h, gates, cells })),
        ))
    }

    pub fn reverse_rows(self) -> Result<Var<'g>> {
        let a = self.value();
        let (m, _) = a.dims2()?;
        let mut out = Vec::with_capacity(a.len());
        for r in (0..m).rev() {
            out.extend_from_slice(a.row_slice(r));
        }
        Ok(self.graph.push(Tensor::raw(a.shape().to_vec(), out), Op::ReverseRows(self.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn sum_of_wx_gradient_is_outer_product() {
        // loss = Σ_ij (W x)_ij with W [2×3], x [3×1] → dL/dW_ij = x_j
        let mut store = ParamStore::new();
        let w = store.add("W", t(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]])).unwrap();
        let g = Graph::new();
        let x = g.constant(t(&[&[0.5], &[-1.0], &[2.0]]));
        let loss = g.param(&store, w).matmul(x).unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap().params(&store);
        assert_eq!(grads.get(w).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(&[1.0, 2.0])).unwrap();
        let b = store.add("b", Tensor::row(&[3.0, 4.0])).unwrap();
        let g = Graph::new();
        let _ = g.param(&store, b);
        let loss = g.param(&store, a).square().unwrap().sum().unwrap();
        let grads = g.backward(loss).unwrap().params(&store);
        assert_eq!(grads.get(a).data(), &[2.0, 4.0]);
        assert_eq!(grads.get(b).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn l2_norm_at_origin_has_zero_gradient() {
        let mut store = ParamStore::new();
        let p = store.add("v", Tensor::row(&[0.0, 0.0, 0.0])).unwrap();
        let g = Graph::new();
        let n = g.param(&store, p).l2_norm(1).unwrap();
        assert_eq!(n.item(), 0.0);
        let grads = g.backward(n).unwrap().params(&store);
        assert_eq!(grads.get(p).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn frozen_parameter_receives_no_gradient() {
        let mut store = ParamStore::new();
        let p = store.add_frozen("emb", Tensor::row(&[1.0, 2.0])).unwrap();
        let g = Graph::new();
        let loss = g.param(&store, p).sum().unwrap();
        let grads = g.backward(loss).unwrap().params(&store);
        assert_eq!(grads.get(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let g = Graph::new();
        let a = g.constant(Tensor::row(&[1.0]));
        let z = g.constant(Tensor::row(&[0.0]));
        assert!(matches!(a.div(z), Err(Error::NonFinite { op: "div" })));
    }

    #[test]
    fn gather_pad_rows_are_zero() {
        let g = Graph::new();
        let table = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = g.gather(table, &[Some(1), None, Some(1)]).unwrap().value();
        assert_eq!(out.data(), &[3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        assert!(g.gather(table, &[Some(2)]).is_err());
    }

    #[test]
    fn eval_dropout_is_identity_and_training_dropout_is_flagged() {
        let g = Graph::new();
        let x = g.constant(Tensor::row(&[1.0, 2.0]));
        assert_eq!(g.dropout(x, 0.5).value().data(), &[1.0, 2.0]);
        assert!(!g.used_randomness());
        let g = Graph::training(RngStream::new(1));
        let x = g.constant(Tensor::full(&[1, 64], 1.0));
        let y = g.dropout(x, 0.5).value();
        assert!(g.used_randomness());
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
