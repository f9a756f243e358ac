use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, GraphAd, LossBreakdown, ModelConfig, Prepared};
use crate::autodiff::{adam_step, AdamConfig};
use crate::data::Dataset;
use crate::detector::{detect as decide_all, evaluate, fit_thresholds, AnomalyReport};
use crate::error::{Error, Result};
use crate::kdecom::ClubAux;
use crate::matrix::Matrix;
use crate::parallel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub mi: f64,
    pub recon: f64,
    pub total: f64,
    pub val_f1: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    /// Parameters from the epoch with the best validation F1.
    pub model: GraphAd,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Absolute prediction errors per entity, one per batch in order.
pub fn entity_errors(model: &GraphAd, batches: &[Batch]) -> Result<Vec<Vec<f64>>> {
    let n = batches.first().map_or(0, Batch::n_entities);
    let preds = parallel::map(batches, |b| model.predict(b));
    let mut out = vec![Vec::with_capacity(batches.len()); n];
    for (b, pred) in batches.iter().zip(preds) {
        for (e, y) in pred?.into_iter().enumerate() {
            out[e].push((y - b.targets[e]).abs());
        }
    }
    Ok(out)
}

/// Per-entity thresholds from the training windows with normal targets.
pub(crate) fn thresholds(errors: &[Vec<f64>], batches: &[Batch]) -> Result<Vec<f64>> {
    let normal: Vec<Vec<f64>> = errors
        .iter()
        .enumerate()
        .map(|(e, errs)| {
            errs.iter()
                .zip(batches)
                .filter(|(_, b)| b.labels[e] == 0)
                .map(|(&err, _)| err)
                .collect()
        })
        .collect();
    fit_thresholds(&normal)
}

fn labels_of(batches: &[Batch], n: usize) -> Vec<Vec<u8>> {
    (0..n).map(|e| batches.iter().map(|b| b.labels[e]).collect()).collect()
}

fn validation_f1(model: &GraphAd, p: &Prepared) -> Result<f64> {
    let t = thresholds(&entity_errors(model, &p.train)?, &p.train)?;
    let val = entity_errors(model, &p.val)?;
    let decisions = decide_all(&val, &t)?;
    let labels = labels_of(&p.val, p.n_entities());
    let flags: Vec<bool> = decisions.iter().flatten().map(|d| d.anomalous).collect();
    let scores: Vec<f64> = decisions.iter().flatten().map(|d| d.score).collect();
    let truth: Vec<bool> = labels.iter().flatten().map(|&l| l == 1).collect();
    Ok(evaluate(&flags, &scores, &truth)?.f1)
}

fn stack_rows(parts: &[Matrix]) -> Matrix {
    let cols = parts[0].cols();
    let rows = parts.iter().map(Matrix::rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.as_slice());
    }
    Matrix::from_vec(rows, cols, data)
}

pub fn train(dataset: &Dataset, config: &ModelConfig) -> Result<TrainOutput> {
    train_prepared(&Prepared::new(dataset)?, config)
}

/// Alternates CLUB auxiliary updates with main-model updates over shuffled
/// calendar offsets, keeping the parameters of the best validation epoch.
pub fn train_prepared(p: &Prepared, config: &ModelConfig) -> Result<TrainOutput> {
    config.validate()?;
    if !p.train.iter().any(|b| b.labels.contains(&0)) {
        return Err(Error::NoNormalSamples);
    }
    let mut model = GraphAd::new(config.clone(), p.n_attributes)?;
    let mut aux = config.variant.uses_kdecom().then(|| {
        ClubAux::new(
            p.n_attributes,
            p.n_attributes,
            config.aux_hidden,
            &mut rng(config.seed, 1),
        )
    });
    let adam = AdamConfig::with_lr(config.lr);
    let aux_adam = AdamConfig::with_lr(config.aux_lr);
    let mut shuffle = rng(config.seed, 2);
    let mut order: Vec<usize> = (0..p.train.len()).collect();

    let mut log = Vec::with_capacity(config.epochs);
    let mut best = (f64::NEG_INFINITY, 0, model.store.clone());
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = LossBreakdown::default();
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if let Some(aux) = aux.as_mut() {
                let (xs, vs): (Vec<Matrix>, Vec<Matrix>) =
                    chunk.iter().filter_map(|&i| model.mi_samples(&p.train[i])).unzip();
                if !xs.is_empty() {
                    let (x, v) = (stack_rows(&xs), stack_rows(&vs));
                    for _ in 0..config.aux_steps {
                        aux.train_step(&x, &v, &aux_adam)?;
                    }
                }
            }
            let results = parallel::map(chunk, |&i| {
                let mut g = model.store.clone();
                g.zero_grads();
                let r = model.accumulate_gradient(&model.store, &mut g, &p.train[i], aux.as_ref())?;
                Ok::<_, Error>(r.map(|b| (g, b)))
            });
            model.store.zero_grads();
            let mut n = 0usize;
            for r in results {
                if let Some((g, b)) = r? {
                    model.store.add_grads(&g);
                    sum.total += b.total;
                    sum.mse += b.mse;
                    sum.mi_estimate += b.mi_estimate;
                    sum.recon += b.recon;
                    n += 1;
                }
            }
            if n == 0 {
                continue;
            }
            steps += n;
            model.store.scale_grads(1.0 / n as f64);
            adam_step(&mut model.store, &adam)?;
        }
        let val_f1 = validation_f1(&model, p)?;
        let k = steps.max(1) as f64;
        log.push(EpochLog {
            epoch,
            mse: sum.mse / k,
            mi: sum.mi_estimate / k,
            recon: sum.recon / k,
            total: sum.total / k,
            val_f1,
        });
        if val_f1 > best.0 {
            best = (val_f1, epoch, model.store.clone());
        } else if epoch - best.1 >= config.patience {
            break;
        }
    }
    let (_, best_epoch, store) = best;
    model.store = store;
    Ok(TrainOutput {
        model,
        log,
        best_epoch,
    })
}

/// Scores the test windows against thresholds fitted on the training windows.
pub fn detect(model: &GraphAd, p: &Prepared) -> Result<AnomalyReport> {
    let t = thresholds(&entity_errors(model, &p.train)?, &p.train)?;
    let errors = entity_errors(model, &p.test)?;
    let days: Vec<Vec<usize>> = (0..p.n_entities())
        .map(|_| p.test.iter().map(Batch::target_day).collect())
        .collect();
    AnomalyReport::build(&p.entity_ids, &errors, &days, &labels_of(&p.test, p.n_entities()), &t)
}
