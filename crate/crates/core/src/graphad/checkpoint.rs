//! Checkpoint layout: `manifest.json` (config and array table) plus
//! `params.f64`, the arrays in table order as little-endian f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochLog, GraphAd, ModelConfig};
use crate::autodiff::ParamStore;
use crate::data::io::csv_io;
use crate::error::{Error, Result};
use crate::matrix::Matrix;

const SCHEMA: u32 = 1;
const MANIFEST: &str = "manifest.json";
const PARAMS: &str = "params.f64";

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    config: ModelConfig,
    n_attributes: usize,
    arrays: Vec<ArrayEntry>,
}

pub fn save_checkpoint(model: &GraphAd, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let store = &model.store;
    let mut bytes = Vec::with_capacity(store.total_len() * 8);
    let mut arrays = Vec::with_capacity(store.len());
    for id in store.ids() {
        let v = store.value(id);
        arrays.push(ArrayEntry {
            name: store.name(id).to_string(),
            rows: v.rows(),
            cols: v.cols(),
        });
        for x in v.as_slice() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        schema: SCHEMA,
        config: model.config.clone(),
        n_attributes: model.n_attributes,
        arrays,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join(PARAMS), bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<GraphAd> {
    let path = dir.join(MANIFEST);
    let malformed = |reason: String| Error::MalformedManifest {
        path: path.clone(),
        reason,
    };
    let text = fs::read_to_string(&path).map_err(|e| malformed(e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    if manifest.schema != SCHEMA {
        return Err(malformed(format!("unsupported schema {}", manifest.schema)));
    }
    let params_path = dir.join(PARAMS);
    let bytes = fs::read(&params_path)?;
    let expected: usize = manifest.arrays.iter().map(|a| a.rows * a.cols * 8).sum();
    if bytes.len() < expected || bytes.len() % 8 != 0 {
        return Err(Error::TruncatedBinary {
            path: params_path,
            reason: format!("{} bytes, expected {expected}", bytes.len()),
        });
    }
    if bytes.len() > expected {
        return Err(Error::ShapeMismatch {
            expected: expected / 8,
            found: bytes.len() / 8,
        });
    }
    let mut store = ParamStore::new();
    let mut chunks = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for a in &manifest.arrays {
        if store.id(&a.name).is_some() {
            return Err(malformed(format!("duplicate array `{}`", a.name)));
        }
        let data: Vec<f64> = chunks.by_ref().take(a.rows * a.cols).collect();
        store.insert(a.name.clone(), Matrix::from_vec(a.rows, a.cols, data));
    }
    GraphAd::from_store(manifest.config, manifest.n_attributes, store)
}

/// CSV with header `epoch,mse,mi,recon,total,val_f1`.
pub fn write_training_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    for row in log {
        w.serialize(row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}
