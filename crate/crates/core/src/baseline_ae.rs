//! Reconstruction autoencoder baseline, scored through the same detector as
//! the main model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, ParamStore, Tape, Var};
use crate::data::{normalize, sliding_windows, split, train_day_range, Dataset, WindowSample, INPUT_DAYS, WINDOW};
use crate::detector::{detect as decide_all, evaluate, fit_thresholds, AnomalyReport};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Dense;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    pub hidden: usize,
    pub code: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Windows per update.
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
}

impl Default for AeConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            code: 16,
            epochs: 100,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            patience: 20,
        }
    }
}

/// Flattened 30-day windows ending at each target day, per split.
/// Rows are entity-major, chronological within an entity.
#[derive(Clone, Debug)]
pub struct AeSplit {
    pub x: Matrix,
    pub entity: Vec<usize>,
    pub day: Vec<usize>,
    pub label: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct AeData {
    pub entity_ids: Vec<String>,
    pub train: AeSplit,
    pub val: AeSplit,
    pub test: AeSplit,
}

impl AeData {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let t = &dataset.tensor;
        let (norm, _) = normalize(t, train_day_range(t.n_days(), WINDOW)?)?;
        let parts = split(sliding_windows(&norm, &dataset.labels, WINDOW)?)?;
        let width = INPUT_DAYS * t.n_attributes();
        let build = |ws: &[WindowSample]| {
            let mut x = Vec::with_capacity(ws.len() * width);
            for w in ws {
                x.extend_from_slice(norm.days(w.entity_index, w.start + 1..w.target_day() + 1));
            }
            AeSplit {
                x: Matrix::from_vec(ws.len(), width, x),
                entity: ws.iter().map(|w| w.entity_index).collect(),
                day: ws.iter().map(WindowSample::target_day).collect(),
                label: ws.iter().map(|w| w.target_label).collect(),
            }
        };
        Ok(Self {
            entity_ids: t.entity_ids().to_vec(),
            train: build(&parts.train),
            val: build(&parts.val),
            test: build(&parts.test),
        })
    }

    fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    pub store: ParamStore,
    layers: [Dense; 4],
}

impl Autoencoder {
    pub fn new(config: AeConfig, input_dim: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let (h, c) = (config.hidden, config.code);
        let layers = [
            Dense::init(&mut store, "enc.l1", input_dim, h, &mut rng),
            Dense::init(&mut store, "enc.l2", h, c, &mut rng),
            Dense::init(&mut store, "dec.l1", c, h, &mut rng),
            Dense::init(&mut store, "dec.l2", h, input_dim, &mut rng),
        ];
        Self { config, store, layers }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i < 3 {
                h = tape.tanh(h);
            }
        }
        h
    }

    pub fn reconstruct(&self, x: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &self.store, xv);
        tape.value(out).clone()
    }

    /// Mean squared reconstruction error per row.
    pub fn errors(&self, x: &Matrix) -> Vec<f64> {
        let r = self.reconstruct(x);
        (0..x.rows())
            .map(|i| {
                x.row(i)
                    .iter()
                    .zip(r.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    / x.cols() as f64
            })
            .collect()
    }

    fn step(&mut self, x: &Matrix, adam: &AdamConfig) -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &self.store, xv);
        let d = tape.sub(out, xv);
        let sq = tape.square(d);
        let loss = tape.mean(sq);
        let value = tape.value(loss).item();
        let g = tape.backward(loss);
        self.store.zero_grads();
        tape.accumulate_into(&g, &mut self.store);
        adam_step(&mut self.store, adam)?;
        Ok(value)
    }
}

fn per_entity<T: Copy>(split: &AeSplit, values: &[T], n: usize, keep: impl Fn(usize) -> bool) -> Vec<Vec<T>> {
    let mut out = vec![Vec::new(); n];
    for (i, &v) in values.iter().enumerate() {
        if keep(i) {
            out[split.entity[i]].push(v);
        }
    }
    out
}

fn thresholds(model: &Autoencoder, data: &AeData) -> Result<Vec<f64>> {
    let errs = model.errors(&data.train.x);
    fit_thresholds(&per_entity(&data.train, &errs, data.n_entities(), |i| data.train.label[i] == 0))
}

fn report(model: &Autoencoder, data: &AeData, split: &AeSplit) -> Result<AnomalyReport> {
    let t = thresholds(model, data)?;
    let n = data.n_entities();
    let errs = per_entity(split, &model.errors(&split.x), n, |_| true);
    let days = per_entity(split, &split.day, n, |_| true);
    let labels = per_entity(split, &split.label, n, |_| true);
    AnomalyReport::build(&data.entity_ids, &errs, &days, &labels, &t)
}

fn validation_f1(model: &Autoencoder, data: &AeData) -> Result<f64> {
    let t = thresholds(model, data)?;
    let n = data.n_entities();
    let errs = per_entity(&data.val, &model.errors(&data.val.x), n, |_| true);
    let labels = per_entity(&data.val, &data.val.label, n, |_| true);
    let decisions = decide_all(&errs, &t)?;
    let flags: Vec<bool> = decisions.iter().flatten().map(|d| d.anomalous).collect();
    let scores: Vec<f64> = decisions.iter().flatten().map(|d| d.score).collect();
    let truth: Vec<bool> = labels.iter().flatten().map(|&l| l == 1).collect();
    Ok(evaluate(&flags, &scores, &truth)?.f1)
}

#[derive(Clone, Debug)]
pub struct AeTrainOutput {
    pub model: Autoencoder,
    /// Mean reconstruction loss per epoch.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
}

pub fn ae_train(dataset: &Dataset, config: &AeConfig) -> Result<AeTrainOutput> {
    ae_train_data(&AeData::new(dataset)?, config)
}

/// Trains on training windows with normal targets; keeps the epoch with the
/// best validation F1, as the main model does.
pub fn ae_train_data(data: &AeData, config: &AeConfig) -> Result<AeTrainOutput> {
    AdamConfig::with_lr(config.lr).validate()?;
    if config.batch_size == 0 || config.epochs == 0 || config.hidden == 0 || config.code == 0 {
        return Err(Error::InvalidConfig("autoencoder sizes, epochs and batch_size must be >= 1".into()));
    }
    let normal: Vec<usize> = (0..data.train.x.rows()).filter(|&i| data.train.label[i] == 0).collect();
    if normal.is_empty() {
        return Err(Error::NoNormalSamples);
    }
    let mut model = Autoencoder::new(config.clone(), data.train.x.cols());
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let mut order = normal;
    let mut losses = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, 0, model.store.clone());
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut steps = 0;
        for chunk in order.chunks(config.batch_size) {
            sum += model.step(&data.train.x.select_rows(chunk), &adam)?;
            steps += 1;
        }
        losses.push(sum / steps as f64);
        let f1 = validation_f1(&model, data)?;
        if f1 > best.0 {
            best = (f1, epoch, model.store.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    let (_, best_epoch, store) = best;
    model.store = store;
    Ok(AeTrainOutput {
        model,
        losses,
        best_epoch,
    })
}

/// Test-split report through the shared threshold, decision and metric code.
pub fn ae_detect(model: &Autoencoder, data: &AeData) -> Result<AnomalyReport> {
    report(model, data, &data.test)
}
