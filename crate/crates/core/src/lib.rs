pub mod autodiff;
pub mod baseline_ae;
pub mod data;
pub mod detector;
pub mod error;
pub mod et_gat;
pub mod experiment;
pub mod graph;
pub mod gat;
pub mod graphad;
pub mod kdecom;
pub mod matrix;
pub mod nn;
pub mod parallel;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::Matrix;
