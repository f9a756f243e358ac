//! Entity-temporal attention: the sum of four independent GAT layers over the
//! entity graph and the temporal graph, each applied to the representations
//! at the previous and the current timestep.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::gat::{gat_forward, GatLayer};
use crate::graph::{BlockAdjacency, GraphTopology};
use crate::matrix::Matrix;

/// Which graphs contribute. Ablations drop one of them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Terms {
    pub entity: bool,
    pub temporal: bool,
}

impl Terms {
    pub const ALL: Terms = Terms {
        entity: true,
        temporal: true,
    };
}

/// Layers in summation order: entity/prev, entity/curr, temporal/prev,
/// temporal/curr. Dropped terms hold `None` and own no parameters.
#[derive(Clone, Copy, Debug)]
pub struct EtGat {
    layers: [Option<GatLayer>; 4],
}

const NAMES: [&str; 4] = ["entity_prev", "entity_curr", "temporal_prev", "temporal_curr"];

impl EtGat {
    pub fn init(store: &mut ParamStore, prefix: &str, d: usize, terms: Terms, rng: &mut impl Rng) -> Result<Self> {
        check_terms(terms)?;
        let mut layers = [None; 4];
        for (i, slot) in layers.iter_mut().enumerate() {
            if enabled(terms, i) {
                *slot = Some(GatLayer::init(store, &format!("{prefix}.{}", NAMES[i]), d, rng));
            }
        }
        Ok(Self { layers })
    }

    pub fn lookup(store: &ParamStore, prefix: &str, terms: Terms) -> Result<Self> {
        check_terms(terms)?;
        let mut layers = [None; 4];
        for (i, slot) in layers.iter_mut().enumerate() {
            if enabled(terms, i) {
                *slot = Some(GatLayer::lookup(store, &format!("{prefix}.{}", NAMES[i]))?);
            }
        }
        Ok(Self { layers })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, block: &BlockAdjacency, h_prev: Var, h_curr: Var) -> Var {
        let graphs = [
            &block.entity_graph,
            &block.entity_graph,
            &block.temporal_graph,
            &block.temporal_graph,
        ];
        let inputs = [h_prev, h_curr, h_prev, h_curr];
        let mut acc: Option<Var> = None;
        for i in 0..4 {
            if let Some(layer) = self.layers[i] {
                let out = layer.forward(tape, store, inputs[i], graphs[i]);
                acc = Some(match acc {
                    Some(a) => tape.add(a, out),
                    None => out,
                });
            }
        }
        acc.expect("at least one term is enabled")
    }
}

fn enabled(terms: Terms, i: usize) -> bool {
    if i < 2 {
        terms.entity
    } else {
        terms.temporal
    }
}

fn check_terms(terms: Terms) -> Result<()> {
    if !terms.entity && !terms.temporal {
        return Err(Error::InvalidConfig("entity-temporal attention needs at least one graph".into()));
    }
    Ok(())
}

/// Attention vectors of the four layers, in summation order.
#[derive(Clone, Debug)]
pub struct EtGatWeights(pub [Matrix; 4]);

fn check_entities(block: &BlockAdjacency, h: &Matrix) -> Result<()> {
    if h.rows() != block.n_nodes() {
        return Err(Error::LengthMismatch {
            left: h.rows(),
            right: block.n_nodes(),
        });
    }
    Ok(())
}

/// `GAT(G_E, h_prev) + GAT(G_E, h_curr) + GAT(G_T, h_prev) + GAT(G_T, h_curr)`.
pub fn etgat_forward(block: &BlockAdjacency, h_prev: &Matrix, h_curr: &Matrix, w: &EtGatWeights) -> Result<Matrix> {
    check_entities(block, h_prev)?;
    check_entities(block, h_curr)?;
    let graphs: [&Arc<GraphTopology>; 4] = [
        &block.entity_graph,
        &block.entity_graph,
        &block.temporal_graph,
        &block.temporal_graph,
    ];
    let inputs = [h_prev, h_curr, h_prev, h_curr];
    let mut out = gat_forward(graphs[0], inputs[0], &w.0[0])?;
    for i in 1..4 {
        out.add_assign(&gat_forward(graphs[i], inputs[i], &w.0[i])?);
    }
    Ok(out)
}

/// Applies [`etgat_forward`] to each adjacent pair of raw inputs and returns
/// the last step's output.
pub fn etgat_unroll(block: &BlockAdjacency, sequence: &[Matrix], w: &EtGatWeights) -> Result<Matrix> {
    if sequence.len() < 2 {
        return Err(Error::InvalidRange(format!(
            "unroll needs at least 2 timesteps, got {}",
            sequence.len()
        )));
    }
    let mut last = None;
    for pair in sequence.windows(2) {
        last = Some(etgat_forward(block, &pair[0], &pair[1], w)?);
    }
    Ok(last.expect("non-empty"))
}
