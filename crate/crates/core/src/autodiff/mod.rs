//! Parameter storage, reverse-mode gradients, Adam and finite-difference checks.

mod adam;
mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport, Probe};
pub use params::{ParamId, ParamStore};
pub use tape::{sigmoid, Gradients, Tape, Var};

