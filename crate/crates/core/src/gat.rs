//! Single-head graph attention: `H_i = sigmoid(Z_i + Σ_j α_ij Z_j)` with
//! `α_i· = softmax_j LeakyReLU(w_e · [Z_i ‖ Z_j])` over out-neighbours.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::GraphTopology;
use crate::matrix::Matrix;
use crate::nn::lookup;

pub const LEAKY_SLOPE: f64 = 0.2;

/// Attention vector `w_e: [2d][1]`; the first `d` rows score the source node.
#[derive(Clone, Copy, Debug)]
pub struct GatLayer {
    pub w_e: ParamId,
}

impl GatLayer {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_e: store.insert_glorot(format!("{prefix}.w_e"), 2 * d, 1, rng),
        }
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_e: lookup(store, &format!("{prefix}.w_e"))?,
        })
    }

    pub fn dim(&self, store: &ParamStore) -> usize {
        store.value(self.w_e).rows() / 2
    }

    /// Attention weights `[n][k]`, one row per node over its neighbour list.
    pub fn attention(&self, tape: &mut Tape, store: &ParamStore, z: Var, graph: &Arc<GraphTopology>) -> Var {
        let w = tape.param(store, self.w_e);
        attention_with(tape, z, w, graph)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var, graph: &Arc<GraphTopology>) -> Var {
        let w = tape.param(store, self.w_e);
        forward_with(tape, z, w, graph)
    }
}

fn attention_with(tape: &mut Tape, z: Var, w_e: Var, graph: &Arc<GraphTopology>) -> Var {
    let d = tape.shape(z).1;
    let w_src = tape.slice_rows(w_e, 0, d);
    let w_dst = tape.slice_rows(w_e, d, d);
    let src = tape.matmul(z, w_src);
    let dst = tape.matmul(z, w_dst);
    let logits = tape.edge_logits(src, dst, Arc::clone(graph));
    let logits = tape.leaky_relu(logits, LEAKY_SLOPE);
    tape.softmax_rows(logits)
}

fn forward_with(tape: &mut Tape, z: Var, w_e: Var, graph: &Arc<GraphTopology>) -> Var {
    let alpha = attention_with(tape, z, w_e, graph);
    let agg = tape.neighbor_aggregate(alpha, z, Arc::clone(graph));
    let pre = tape.add(z, agg);
    tape.sigmoid(pre)
}

fn check(graph: &GraphTopology, z: &Matrix, w_e: &Matrix) -> Result<()> {
    if z.rows() != graph.n_nodes() {
        return Err(Error::Shape {
            op: "gat",
            detail: format!("{} feature rows for a {}-node graph", z.rows(), graph.n_nodes()),
        });
    }
    if w_e.shape() != (2 * z.cols(), 1) {
        return Err(Error::Shape {
            op: "gat",
            detail: format!("w_e is {:?}, expected [{}][1]", w_e.shape(), 2 * z.cols()),
        });
    }
    Ok(())
}

/// Attention weights `[n][k]`: row `i` aligns with `graph.neighbors(i)`.
pub fn attention_scores(graph: &Arc<GraphTopology>, z: &Matrix, w_e: &Matrix) -> Result<Matrix> {
    check(graph, z, w_e)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let w = tape.constant(w_e.clone());
    let alpha = attention_with(&mut tape, zv, w, graph);
    Ok(tape.value(alpha).clone())
}

pub fn gat_forward(graph: &Arc<GraphTopology>, z: &Matrix, w_e: &Matrix) -> Result<Matrix> {
    check(graph, z, w_e)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let w = tape.constant(w_e.clone());
    let h = forward_with(&mut tape, zv, w, graph);
    Ok(tape.value(h).clone())
}

/// Node features for the attribute graph: each attribute's series (a column
/// of `window`) times `w_a: [days][d_A]`, giving `[D][d_A]`.
pub fn project_attributes(window: &Matrix, w_a: &Matrix) -> Result<Matrix> {
    if window.rows() != w_a.rows() {
        return Err(Error::Shape {
            op: "project_attributes",
            detail: format!("window has {} days, w_a expects {}", window.rows(), w_a.rows()),
        });
    }
    Ok(window.transpose().matmul(w_a))
}
