//! The full detector: decomposition, attribute attention, entity-temporal
//! attention and an MLP head predicting the next-day KPI, trained on a
//! prediction loss with a mutual-information penalty.

mod batch;
mod checkpoint;
mod model;
mod train;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{Batch, Prepared};
pub use checkpoint::{load_checkpoint, save_checkpoint, write_training_log};
pub use model::{GraphAd, LossBreakdown};
pub use train::{detect, entity_errors, train, train_prepared, EpochLog, TrainOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    #[default]
    Last,
    Mean,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[default]
    #[serde(rename = "full")]
    Full,
    #[serde(rename = "no-kdecom")]
    NoKdecom,
    #[serde(rename = "no-agat")]
    NoAgat,
    #[serde(rename = "no-entitygat")]
    NoEntityGat,
    #[serde(rename = "no-temporalgat")]
    NoTemporalGat,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoKdecom,
        Variant::NoAgat,
        Variant::NoEntityGat,
        Variant::NoTemporalGat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoKdecom => "no-kdecom",
            Variant::NoAgat => "no-agat",
            Variant::NoEntityGat => "no-entitygat",
            Variant::NoTemporalGat => "no-temporalgat",
        }
    }

    pub fn uses_kdecom(self) -> bool {
        self != Variant::NoKdecom
    }

    pub fn uses_agat(self) -> bool {
        self != Variant::NoAgat
    }

    pub fn etgat_terms(self) -> crate::et_gat::Terms {
        crate::et_gat::Terms {
            entity: self != Variant::NoEntityGat,
            temporal: self != Variant::NoTemporalGat,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_a: usize,
    pub lambda_mi: f64,
    pub mu_recon: f64,
    pub epochs: usize,
    /// Calendar offsets whose gradients are averaged into one update.
    pub batch_size: usize,
    pub seed: u64,
    pub readout: Readout,
    pub variant: Variant,
    pub lr: f64,
    pub aux_lr: f64,
    pub aux_steps: usize,
    pub aux_hidden: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_a: 16,
            lambda_mi: 12.41,
            mu_recon: 1.0,
            epochs: 100,
            batch_size: 1,
            seed: 0,
            readout: Readout::Last,
            variant: Variant::Full,
            lr: 5e-6,
            aux_lr: 1e-3,
            aux_steps: 5,
            aux_hidden: 16,
            patience: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.lambda_mi >= 0.0) {
            return bad("lambda_mi must be >= 0");
        }
        if !(self.mu_recon >= 0.0) {
            return bad("mu_recon must be >= 0");
        }
        if self.d_a == 0 {
            return bad("d_a must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.aux_hidden == 0 {
            return bad("aux_hidden must be >= 1");
        }
        crate::autodiff::AdamConfig::with_lr(self.lr).validate()?;
        crate::autodiff::AdamConfig::with_lr(self.aux_lr).validate()?;
        Ok(())
    }
}
