//! Reverse-mode gradient tape over a closed set of matrix operations.
//!
//! Every node stores its forward value. `backward` walks the tape in reverse
//! and accumulates adjoints into the parents of each node. Only the
//! operations the detector and its baselines use are provided.

use std::sync::Arc;

use super::params::{ParamId, ParamStore};
use crate::graph::GraphTopology;
use crate::matrix::{matmul_a_bt_into, matmul_at_b_into, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Arc<Vec<usize>>),
    GroupMeanRows(Var, usize),
    SeriesExpand {
        x: Var,
        window: usize,
        prefix: usize,
    },
    EdgeLogits {
        src: Var,
        dst: Var,
        graph: Arc<GraphTopology>,
    },
    SoftmaxRows(Var),
    NeighborAggregate {
        alpha: Var,
        z: Var,
        graph: Arc<GraphTopology>,
    },
}

struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(Var, ParamId)>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a trainable array; its adjoint is collected by
    /// [`Tape::accumulate_into`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.params.push((v, id));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols(), bv.rows(), "matmul {:?} x {:?}", av.shape(), bv.shape());
        let out = av.matmul(bv);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + row` with `row` of shape `[1][cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x + y);
        self.push(out, Op::AddRow(a, row))
    }

    /// `a * row` elementwise with `row` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = broadcast_rows(self.value(a), self.value(row), |x, y| x * y);
        self.push(out, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = self.value(a).map(|x| x * f);
        self.push(out, Op::Scale(a, f))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(out, Op::Clamp(a, lo, hi))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Matrix::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Matrix::scalar(v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Column sums, `[r][c] -> [1][c]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = Matrix::zeros(1, v.cols());
        for r in 0..v.rows() {
            for (o, x) in out.as_mut_slice().iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Rows `[start, start + len)`.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a);
        assert!(start + len <= v.rows(), "slice_rows out of range");
        let idx: Vec<usize> = (start..start + len).collect();
        let out = v.select_rows(&idx);
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn select_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let out = self.value(a).select_rows(&idx);
        self.push(out, Op::SelectRows(a, idx))
    }

    /// Mean over consecutive groups of `group` rows: `[n*group][c] -> [n][c]`.
    pub fn group_mean_rows(&mut self, a: Var, group: usize) -> Var {
        let v = self.value(a);
        assert!(group > 0 && v.rows() % group == 0, "group_mean_rows");
        let n = v.rows() / group;
        let mut out = Matrix::zeros(n, v.cols());
        let inv = 1.0 / group as f64;
        for g in 0..n {
            let o = out.row_mut(g);
            for r in g * group..(g + 1) * group {
                for (ov, x) in o.iter_mut().zip(v.row(r)) {
                    *ov += x * inv;
                }
            }
        }
        self.push(out, Op::GroupMeanRows(a, group))
    }

    /// Turns day-major windows into per-attribute series with a causal mask.
    ///
    /// `x` stacks `n` windows of `window` day rows by `d` attribute columns.
    /// Output row `e * d + i` holds attribute `i` of window `e` over days
    /// `0..prefix`; later days are zero.
    pub fn series_expand(&mut self, x: Var, window: usize, prefix: usize) -> Var {
        let v = self.value(x);
        assert!(prefix <= window && v.rows() % window == 0, "series_expand");
        let n = v.rows() / window;
        let d = v.cols();
        let mut out = Matrix::zeros(n * d, window);
        for e in 0..n {
            for day in 0..prefix {
                let src = v.row(e * window + day);
                for (i, &val) in src.iter().enumerate() {
                    out[(e * d + i, day)] = val;
                }
            }
        }
        self.push(out, Op::SeriesExpand { x, window, prefix })
    }

    /// `out[i][m] = src[i] + dst[neighbor(i, m)]` for column vectors `src`, `dst`.
    pub fn edge_logits(&mut self, src: Var, dst: Var, graph: Arc<GraphTopology>) -> Var {
        let (s, t) = (self.value(src), self.value(dst));
        let n = graph.n_nodes();
        assert_eq!(s.shape(), (n, 1), "edge_logits src");
        assert_eq!(t.shape(), (n, 1), "edge_logits dst");
        let k = graph.k();
        let mut out = Matrix::zeros(n, k);
        for i in 0..n {
            for (m, &j) in graph.neighbors(i).iter().enumerate() {
                out[(i, m)] = s.as_slice()[i] + t.as_slice()[j];
            }
        }
        self.push(out, Op::EdgeLogits { src, dst, graph })
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// `out[i] = sum_m alpha[i][m] * z[neighbor(i, m)]`.
    pub fn neighbor_aggregate(&mut self, alpha: Var, z: Var, graph: Arc<GraphTopology>) -> Var {
        let (a, zv) = (self.value(alpha), self.value(z));
        let n = graph.n_nodes();
        assert_eq!(a.shape(), (n, graph.k()), "neighbor_aggregate alpha");
        assert_eq!(zv.rows(), n, "neighbor_aggregate z");
        let mut out = Matrix::zeros(n, zv.cols());
        for i in 0..n {
            for (m, &j) in graph.neighbors(i).iter().enumerate() {
                let w = a[(i, m)];
                for (o, x) in out.row_mut(i).iter_mut().zip(zv.row(j)) {
                    *o += w * x;
                }
            }
        }
        self.push(out, Op::NeighborAggregate { alpha, z, graph })
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Adds the adjoints of every parameter leaf into the store's gradient slots.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for &(v, id) in &self.params {
            if let Some(g) = grads.wrt(v) {
                store.grad_mut(id).add_assign(g);
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                matmul_a_bt_into(g, bv, slot(grads, *a, av));
                matmul_at_b_into(av, g, slot(grads, *b, bv));
            }
            Op::Add(a, b) => {
                slot(grads, *a, g).add_assign(g);
                slot(grads, *b, g).add_assign(g);
            }
            Op::Sub(a, b) => {
                slot(grads, *a, g).add_assign(g);
                zip_acc(slot(grads, *b, g), g, |gv| -gv);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                zip3_acc(slot(grads, *a, av), g, bv, |gv, y| gv * y);
                zip3_acc(slot(grads, *b, bv), g, av, |gv, x| gv * x);
            }
            Op::AddRow(a, row) => {
                slot(grads, *a, g).add_assign(g);
                let rs = slot(grads, *row, val(*row));
                for r in 0..g.rows() {
                    for (o, x) in rs.as_mut_slice().iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (val(*a), val(*row));
                {
                    let ga = slot(grads, *a, av);
                    for r in 0..g.rows() {
                        let gr = g.row(r);
                        for ((o, x), y) in ga.row_mut(r).iter_mut().zip(gr).zip(rv.as_slice()) {
                            *o += x * y;
                        }
                    }
                }
                let gr_slot = slot(grads, *row, rv);
                for r in 0..g.rows() {
                    for ((o, x), y) in gr_slot.as_mut_slice().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, f) => {
                let f = *f;
                zip_acc(slot(grads, *a, g), g, |gv| gv * f);
            }
            Op::Tanh(a) => {
                zip3_acc(slot(grads, *a, g), g, &node.value, |gv, y| gv * (1.0 - y * y));
            }
            Op::Sigmoid(a) => {
                zip3_acc(slot(grads, *a, g), g, &node.value, |gv, y| gv * y * (1.0 - y));
            }
            Op::LeakyRelu(a, slope) => {
                let slope = *slope;
                zip3_acc(slot(grads, *a, g), g, val(*a), |gv, x| {
                    if x > 0.0 {
                        gv
                    } else {
                        gv * slope
                    }
                });
            }
            Op::Exp(a) => {
                zip3_acc(slot(grads, *a, g), g, &node.value, |gv, y| gv * y);
            }
            Op::Square(a) => {
                zip3_acc(slot(grads, *a, g), g, val(*a), |gv, x| 2.0 * gv * x);
            }
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                zip3_acc(slot(grads, *a, g), g, val(*a), |gv, x| {
                    if x >= lo && x <= hi {
                        gv
                    } else {
                        0.0
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                let ga = slot(grads, *a, val(*a));
                ga.as_mut_slice().iter_mut().for_each(|o| *o += s);
            }
            Op::Mean(a) => {
                let av = val(*a);
                let s = g.item() / av.len() as f64;
                let ga = slot(grads, *a, av);
                ga.as_mut_slice().iter_mut().for_each(|o| *o += s);
            }
            Op::SumRows(a) => {
                let ga = slot(grads, *a, val(*a));
                for r in 0..ga.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.as_slice()) {
                        *o += x;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.cols();
                    let gp = slot(grads, p, pv);
                    for r in 0..g.rows() {
                        for (o, x) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *o += x;
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let ga = slot(grads, *a, val(*a));
                for r in 0..g.rows() {
                    for (o, x) in ga.row_mut(start + r).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::SelectRows(a, idx) => {
                let ga = slot(grads, *a, val(*a));
                for (r, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
            }
            Op::GroupMeanRows(a, group) => {
                let inv = 1.0 / *group as f64;
                let ga = slot(grads, *a, val(*a));
                for r in 0..ga.rows() {
                    for (o, x) in ga.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *o += x * inv;
                    }
                }
            }
            Op::SeriesExpand { x, window, prefix } => {
                let xv = val(*x);
                let d = xv.cols();
                let n = xv.rows() / window;
                let gx = slot(grads, *x, xv);
                for e in 0..n {
                    for day in 0..*prefix {
                        let row = gx.row_mut(e * window + day);
                        for (i, o) in row.iter_mut().enumerate() {
                            *o += g[(e * d + i, day)];
                        }
                    }
                }
            }
            Op::EdgeLogits { src, dst, graph } => {
                {
                    let gs = slot(grads, *src, val(*src));
                    for i in 0..g.rows() {
                        gs.as_mut_slice()[i] += g.row(i).iter().sum::<f64>();
                    }
                }
                let gd = slot(grads, *dst, val(*dst));
                for i in 0..g.rows() {
                    for (m, &j) in graph.neighbors(i).iter().enumerate() {
                        gd.as_mut_slice()[j] += g[(i, m)];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let ga = slot(grads, *a, y);
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((o, &yv), &gv) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
            Op::NeighborAggregate { alpha, z, graph } => {
                let (av, zv) = (val(*alpha), val(*z));
                {
                    let ga = slot(grads, *alpha, av);
                    for i in 0..g.rows() {
                        for (m, &j) in graph.neighbors(i).iter().enumerate() {
                            let dot: f64 = g.row(i).iter().zip(zv.row(j)).map(|(p, q)| p * q).sum();
                            ga[(i, m)] += dot;
                        }
                    }
                }
                let gz = slot(grads, *z, zv);
                for i in 0..g.rows() {
                    for (m, &j) in graph.neighbors(i).iter().enumerate() {
                        let w = av[(i, m)];
                        for (o, x) in gz.row_mut(j).iter_mut().zip(g.row(i)) {
                            *o += w * x;
                        }
                    }
                }
            }
        }
    }
}

fn slot<'a>(grads: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(like.rows(), like.cols()))
}

fn zip_acc(out: &mut Matrix, g: &Matrix, f: impl Fn(f64) -> f64) {
    for (o, &gv) in out.as_mut_slice().iter_mut().zip(g.as_slice()) {
        *o += f(gv);
    }
}

fn zip3_acc(out: &mut Matrix, g: &Matrix, other: &Matrix, f: impl Fn(f64, f64) -> f64) {
    for ((o, &gv), &x) in out.as_mut_slice().iter_mut().zip(g.as_slice()).zip(other.as_slice()) {
        *o += f(gv, x);
    }
}

fn broadcast_rows(a: &Matrix, row: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(row.shape(), (1, a.cols()), "row broadcast shape");
    let mut out = a.clone();
    for r in 0..out.rows() {
        for (o, &y) in out.row_mut(r).iter_mut().zip(row.as_slice()) {
            *o = f(*o, y);
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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
