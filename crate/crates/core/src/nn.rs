//! Parameter bundles shared by the model components.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Affine layer `x·w + b` with `w: [in][out]`, `b: [1][out]`.
#[derive(Clone, Copy, Debug)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn init(store: &mut ParamStore, prefix: &str, n_in: usize, n_out: usize, rng: &mut impl Rng) -> Self {
        let w = store.insert_glorot(format!("{prefix}.w"), n_in, n_out, rng);
        let b = store.insert_zeros(format!("{prefix}.b"), 1, n_out);
        Self { w, b }
    }

    pub fn lookup(store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: lookup(store, &format!("{prefix}.w"))?,
            b: lookup(store, &format!("{prefix}.b"))?,
        })
    }

    pub fn n_in(&self, store: &ParamStore) -> usize {
        store.value(self.w).rows()
    }

    pub fn n_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).cols()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let xw = tape.matmul(x, w);
        tape.add_row(xw, b)
    }
}

pub fn lookup(store: &ParamStore, name: &str) -> Result<ParamId> {
    store
        .id(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing parameter array `{name}`")))
}
