//! Per-entity thresholds, decisions and evaluation metrics.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const THRESHOLD_FLOOR: f64 = 1e-8;

/// `θ_n = max(errors_n)`, floored at [`THRESHOLD_FLOOR`].
pub fn fit_thresholds(train_errors: &[Vec<f64>]) -> Result<Vec<f64>> {
    train_errors
        .iter()
        .enumerate()
        .map(|(n, errs)| {
            if errs.is_empty() {
                return Err(Error::EmptyEntityErrors(n));
            }
            Ok(errs.iter().map(|e| e.abs()).fold(THRESHOLD_FLOOR, f64::max))
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    pub anomalous: bool,
    pub score: f64,
}

pub fn decide(error: f64, threshold: f64) -> Decision {
    Decision {
        anomalous: error > threshold,
        score: error / threshold,
    }
}

/// Applies each entity's threshold to its errors.
pub fn detect(errors: &[Vec<f64>], thresholds: &[f64]) -> Result<Vec<Vec<Decision>>> {
    if errors.len() != thresholds.len() {
        return Err(Error::LengthMismatch {
            left: errors.len(),
            right: thresholds.len(),
        });
    }
    Ok(errors
        .iter()
        .zip(thresholds)
        .map(|(errs, &t)| errs.iter().map(|&e| decide(e, t)).collect())
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// `None` when the labels contain a single class.
    pub auc: Option<f64>,
}

pub fn evaluate(decisions: &[bool], scores: &[f64], labels: &[bool]) -> Result<Metrics> {
    if decisions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: decisions.len(),
            right: labels.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&d, &l) in decisions.iter().zip(labels) {
        match (d, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let auc = match auc(scores, labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClassLabels) => None,
        Err(e) => return Err(e),
    };
    Ok(Metrics {
        precision,
        recall,
        f1,
        auc,
    })
}

/// Mann-Whitney statistic: the probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: labels.len(),
        });
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps tied (half-integer) ranks exact.
    let mut twice_rank_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average (i + j + 2) / 2.
        let twice_avg = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u64;
        twice_rank_sum_pos += twice_avg * pos_in_group;
        i = j + 1;
    }
    let n_pos = n_pos as u64;
    let u_twice = twice_rank_sum_pos - n_pos * (n_pos + 1);
    Ok(u_twice as f64 / (2 * n_pos * n_neg as u64) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub entity_id: String,
    pub day: usize,
    pub error: f64,
    pub threshold: f64,
    pub score: f64,
    pub decision: u8,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyReport {
    pub rows: Vec<ReportRow>,
    pub metrics: Metrics,
}

#[derive(Serialize)]
struct MetricsJson {
    schema: u32,
    precision: f64,
    recall: f64,
    f1: f64,
    auc: Option<f64>,
}

impl AnomalyReport {
    /// Scores per-entity errors against thresholds and evaluates the result.
    /// `days` and `labels` align with `errors`.
    pub fn build(
        entity_ids: &[String],
        errors: &[Vec<f64>],
        days: &[Vec<usize>],
        labels: &[Vec<u8>],
        thresholds: &[f64],
    ) -> Result<Self> {
        let decisions = detect(errors, thresholds)?;
        let mut rows = Vec::new();
        for (n, decs) in decisions.iter().enumerate() {
            if days[n].len() != decs.len() || labels[n].len() != decs.len() {
                return Err(Error::LengthMismatch {
                    left: decs.len(),
                    right: days[n].len().min(labels[n].len()),
                });
            }
            for (i, d) in decs.iter().enumerate() {
                rows.push(ReportRow {
                    entity_id: entity_ids[n].clone(),
                    day: days[n][i],
                    error: errors[n][i],
                    threshold: thresholds[n],
                    score: d.score,
                    decision: d.anomalous as u8,
                    label: labels[n][i],
                });
            }
        }
        let flags: Vec<bool> = rows.iter().map(|r| r.decision == 1).collect();
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let truth: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
        let metrics = evaluate(&flags, &scores, &truth)?;
        Ok(Self { rows, metrics })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "entity_id,day,error,threshold,score,decision,label")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.entity_id, r.day, r.error, r.threshold, r.score, r.decision, r.label
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn metrics_json(&self) -> String {
        metrics_json(&self.metrics)
    }
}

pub fn metrics_json(m: &Metrics) -> String {
    serde_json::to_string_pretty(&MetricsJson {
        schema: 1,
        precision: m.precision,
        recall: m.recall,
        f1: m.f1,
        auc: m.auc,
    })
    .expect("metrics serialise")
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn pair_oracle(scores: &[f64], labels: &[bool]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(fit_thresholds(&[vec![0.1, 0.3, 0.2]]).unwrap(), vec![0.3]);
        assert_eq!(fit_thresholds(&[vec![0.0, 0.0]]).unwrap(), vec![1e-8]);
        let a = fit_thresholds(&[vec![0.1], vec![0.5]]).unwrap();
        let b = fit_thresholds(&[vec![9.0], vec![0.5]]).unwrap();
        assert_eq!(a[1], b[1]);
        assert!(matches!(fit_thresholds(&[vec![1.0], vec![]]), Err(Error::EmptyEntityErrors(1))));
    }

    #[test]
    fn decision_examples() {
        assert_eq!(decide(0.3, 0.3), Decision { anomalous: false, score: 1.0 });
        assert_eq!(decide(0.6, 0.3), Decision { anomalous: true, score: 2.0 });
    }

    #[test]
    fn metric_examples() {
        let m = evaluate(&[true, false, false], &[0.9, 0.1, 0.2], &[true, true, false]).unwrap();
        assert_eq!((m.precision, m.recall), (1.0, 0.5));
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(auc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        let m = evaluate(&[false, false], &[0.1, 0.2], &[false, false]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.auc), (0.0, 0.0, 0.0, None));
        assert!(matches!(auc(&[0.1], &[true]), Err(Error::SingleClassLabels)));
    }

    #[test]
    fn auc_matches_pair_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let n = rng.gen_range(2..80);
            // Coarse scores force ties.
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..12) as f64) / 4.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
            labels[0] = true;
            labels[1] = false;
            let got = auc(&scores, &labels).unwrap();
            assert!((got - pair_oracle(&scores, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn training_maximum_is_never_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let errs: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..rng.gen_range(1..30)).map(|_| rng.gen::<f64>()).collect())
            .collect();
        let t = fit_thresholds(&errs).unwrap();
        let d = detect(&errs, &t).unwrap();
        assert!(d.iter().flatten().all(|d| !d.anomalous));
    }

    #[test]
    fn report_csv_and_json_schema() {
        let r = AnomalyReport::build(
            &["a".into(), "b".into()],
            &[vec![0.1, 0.9], vec![0.2]],
            &[vec![30, 31], vec![30]],
            &[vec![0, 1], vec![0]],
            &[0.5, 0.5],
        )
        .unwrap();
        assert_eq!(r.rows.len(), 3);
        assert_eq!(r.metrics.f1, 1.0);
        let json: serde_json::Value = serde_json::from_str(&r.metrics_json()).unwrap();
        for k in ["schema", "precision", "recall", "f1", "auc"] {
            assert!(json.get(k).is_some(), "{k}");
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("entity_id,day,error,threshold,score,decision,label\na,30,"));
    }

    proptest! {
        #[test]
        fn raising_an_error_never_clears_a_flag(
            errs in prop::collection::vec(0.0f64..2.0, 1..20),
            idx in any::<prop::sample::Index>(),
            bump in 0.0f64..3.0,
            t in 0.01f64..2.0,
        ) {
            let i = idx.index(errs.len());
            let before = decide(errs[i], t);
            let after = decide(errs[i] + bump, t);
            prop_assert!(!before.anomalous || after.anomalous);
            prop_assert!(after.score >= before.score);
        }

        #[test]
        fn f1_is_harmonic_mean(d in prop::collection::vec(any::<bool>(), 2..40), l in prop::collection::vec(any::<bool>(), 2..40)) {
            let n = d.len().min(l.len());
            let scores: Vec<f64> = d[..n].iter().map(|&x| x as u8 as f64).collect();
            let m = evaluate(&d[..n], &scores, &l[..n]).unwrap();
            if m.precision + m.recall > 0.0 {
                prop_assert!((m.f1 - 2.0 * m.precision * m.recall / (m.precision + m.recall)).abs() < 1e-12);
            }
            for x in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            s in prop::collection::vec(-5.0f64..5.0, 4..40),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut labels: Vec<bool> = s.iter().map(|_| rng.gen_bool(0.5)).collect();
            labels[0] = true;
            labels[1] = false;
            let t: Vec<f64> = s.iter().map(|&x| (x / 2.0).exp() * 3.0 + 1.0).collect();
            prop_assert!((auc(&s, &labels).unwrap() - auc(&t, &labels).unwrap()).abs() < 1e-12);
        }
    }
}
