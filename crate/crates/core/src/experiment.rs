//! Multi-seed method comparison and ablation runs.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baseline_ae::{ae_detect, ae_train_data, AeConfig, AeData};
use crate::detector::Metrics;
use crate::error::{Error, Result};
use crate::graphad::{detect, train_prepared, GraphAd, ModelConfig, Prepared, Variant};
use crate::parallel;
use crate::data::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    GraphAd,
    Ae,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::GraphAd => "graphad",
            Method::Ae => "ae",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "graphad" => Ok(Method::GraphAd),
            "ae" => Ok(Method::Ae),
            _ => Err(Error::InvalidConfig(format!("unknown method `{s}` (expected graphad or ae)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub graphad: ModelConfig,
    pub ae: AeConfig,
}

/// One result line; `seed` is `None` on a per-method mean row.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: String,
    pub seed: Option<u64>,
    pub metrics: Metrics,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean_metrics(ms: &[Metrics]) -> Metrics {
    let n = ms.len() as f64;
    let aucs: Vec<f64> = ms.iter().filter_map(|m| m.auc).collect();
    Metrics {
        precision: ms.iter().map(|m| m.precision).sum::<f64>() / n,
        recall: ms.iter().map(|m| m.recall).sum::<f64>() / n,
        f1: ms.iter().map(|m| m.f1).sum::<f64>() / n,
        auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
    }
}

fn with_means(label_order: &[String], per_run: Vec<(String, u64, Metrics)>) -> Vec<BenchRow> {
    let mut rows = Vec::with_capacity(per_run.len() + label_order.len());
    for label in label_order {
        let runs: Vec<&(String, u64, Metrics)> = per_run.iter().filter(|r| &r.0 == label).collect();
        for r in &runs {
            rows.push(BenchRow {
                method: label.clone(),
                seed: Some(r.1),
                metrics: r.2,
            });
        }
        let ms: Vec<Metrics> = runs.iter().map(|r| r.2).collect();
        rows.push(BenchRow {
            method: label.clone(),
            seed: None,
            metrics: mean_metrics(&ms),
        });
    }
    rows
}

/// Trains and tests each method once per seed. Runs are independent and may
/// execute in parallel; results are ordered by method then seed.
pub fn run_bench(dataset: &Dataset, methods: &[Method], seeds: &[u64], config: &BenchConfig) -> Result<Vec<BenchRow>> {
    let prepared = if methods.contains(&Method::GraphAd) {
        Some(Prepared::new(dataset)?)
    } else {
        None
    };
    let ae_data = if methods.contains(&Method::Ae) {
        Some(AeData::new(dataset)?)
    } else {
        None
    };
    let jobs: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let results = parallel::map(&jobs, |&(method, seed)| -> Result<Metrics> {
        match method {
            Method::GraphAd => {
                let p = prepared.as_ref().expect("prepared");
                let cfg = ModelConfig {
                    seed,
                    ..config.graphad.clone()
                };
                let out = train_prepared(p, &cfg)?;
                Ok(detect(&out.model, p)?.metrics)
            }
            Method::Ae => {
                let d = ae_data.as_ref().expect("ae data");
                let cfg = AeConfig {
                    seed,
                    ..config.ae.clone()
                };
                let out = ae_train_data(d, &cfg)?;
                Ok(ae_detect(&out.model, d)?.metrics)
            }
        }
    });
    let mut per_run = Vec::with_capacity(jobs.len());
    for (&(m, s), r) in jobs.iter().zip(results) {
        per_run.push((m.name().to_string(), s, r?));
    }
    let order: Vec<String> = methods.iter().map(|m| m.name().to_string()).collect();
    Ok(with_means(&order, per_run))
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<BenchRow>,
    /// Median test F1 per variant, in run order.
    pub median_f1: Vec<(Variant, f64)>,
    /// Set when the entity-graph ablation is not the worst (or tied-worst)
    /// variant.
    pub ordering_flag: Option<String>,
    /// Trained models in run order, for checkpointing.
    pub models: Vec<(Variant, u64, GraphAd)>,
}

/// Runs every variant over every seed.
pub fn run_ablation(dataset: &Dataset, variants: &[Variant], seeds: &[u64], config: &ModelConfig) -> Result<AblationReport> {
    let prepared = Prepared::new(dataset)?;
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let results = parallel::map(&jobs, |&(variant, seed)| -> Result<(Metrics, GraphAd)> {
        let cfg = ModelConfig {
            variant,
            seed,
            ..config.clone()
        };
        let out = train_prepared(&prepared, &cfg)?;
        Ok((detect(&out.model, &prepared)?.metrics, out.model))
    });
    let mut per_run = Vec::with_capacity(jobs.len());
    let mut models = Vec::with_capacity(jobs.len());
    for (&(v, s), r) in jobs.iter().zip(results) {
        let (m, model) = r?;
        per_run.push((v.name().to_string(), s, m));
        models.push((v, s, model));
    }
    let f1s = |v: Variant| -> Vec<f64> {
        per_run
            .iter()
            .filter(|r| r.0 == v.name())
            .map(|r| r.2.f1)
            .collect()
    };
    let median_f1: Vec<(Variant, f64)> = variants.iter().map(|&v| (v, median(&f1s(v)))).collect();
    let ordering_flag = entity_ordering_flag(&median_f1, &f1s);
    let order: Vec<String> = variants.iter().map(|v| v.name().to_string()).collect();
    Ok(AblationReport {
        rows: with_means(&order, per_run),
        median_f1,
        ordering_flag,
        models,
    })
}

fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (var / n).sqrt()
}

/// The entity ablation counts as tied-worst when its median is within the
/// larger of the two standard errors of the worst variant's median.
fn entity_ordering_flag(median_f1: &[(Variant, f64)], f1s: &dyn Fn(Variant) -> Vec<f64>) -> Option<String> {
    let ablated: Vec<(Variant, f64)> = median_f1.iter().copied().filter(|(v, _)| *v != Variant::Full).collect();
    let entity = ablated.iter().find(|(v, _)| *v == Variant::NoEntityGat)?;
    let worst = ablated
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .expect("non-empty");
    if worst.0 == Variant::NoEntityGat {
        return None;
    }
    let tol = std_error(&f1s(Variant::NoEntityGat)).max(std_error(&f1s(worst.0)));
    if entity.1 - worst.1 <= tol {
        return None;
    }
    Some(format!(
        "ordering not replicated: no-entitygat median F1 {:.4} is above the worst variant {} ({:.4}) by more than {:.4}",
        entity.1, worst.0, worst.1, tol
    ))
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `method,seed,precision,recall,f1,auc`; mean rows carry `mean` as seed and
/// an empty auc when no run defined one.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from("method,seed,precision,recall,f1,auc\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |x| x.to_string());
        let m = &r.metrics;
        let _ = writeln!(s, "{},{},{},{},{},{}", r.method, seed, m.precision, m.recall, m.f1, fmt_opt(m.auc));
    }
    s
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    std::fs::write(path, bench_csv(rows))?;
    Ok(())
}
