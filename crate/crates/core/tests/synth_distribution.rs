use graphad::synth::{anomaly_count, generate, GenConfig};

fn long_config(seed: u64) -> GenConfig {
    GenConfig {
        n_entities: 40,
        n_days: 400,
        seed,
        ..GenConfig::default()
    }
}

fn skewness(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

#[test]
fn abnormal_day_counts_are_long_tailed() {
    let cfg = GenConfig {
        n_entities: 1000,
        seed: 11,
        ..GenConfig::default()
    };
    let ds = generate(&cfg).unwrap();
    let mut hist = [0usize; 15];
    for e in 0..1000 {
        let c = ds.labels.count(e);
        assert_eq!(c, anomaly_count(&cfg, e));
        hist[c] += 1;
    }
    let below7: usize = hist[..7].iter().sum();
    assert!(below7 as f64 / 1000.0 > 0.8, "{hist:?}");
    let mode = (0..15).max_by_key(|&c| (hist[c], std::cmp::Reverse(c))).unwrap();
    assert_eq!(mode, 3, "{hist:?}");
}

#[test]
fn ahead_of_time_attribute_is_symmetric() {
    let ds = generate(&long_config(3)).unwrap();
    let t = &ds.tensor;
    let mut pooled = Vec::new();
    let mut zeros = 0usize;
    for e in 0..t.n_entities() {
        let xs: Vec<f64> = (0..t.n_days()).map(|d| t.get(e, d, 1)).collect();
        zeros += xs.iter().filter(|&&x| x == 0.0).count();
        let n = xs.len() as f64;
        let m = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        pooled.extend(xs.iter().map(|x| (x - m) / sd));
    }
    assert!(skewness(&pooled).abs() < 0.3);
    assert!((zeros as f64) / (pooled.len() as f64) < 0.01);
}

/// Pools every entity's days and compares against the matching mixture of
/// discrete uniforms on `0..=max_e`.
#[test]
fn overtime_attribute_is_discrete_uniform() {
    let ds = generate(&long_config(4)).unwrap();
    let t = &ds.tensor;
    let per: Vec<Vec<u32>> = (0..t.n_entities())
        .map(|e| (0..t.n_days()).map(|d| t.get(e, d, 2) as u32).collect())
        .collect();
    let tops: Vec<u32> = per.iter().map(|xs| *xs.iter().max().unwrap()).collect();
    let pooled: Vec<u32> = per.concat();
    let n = pooled.len() as f64;
    let ks = (0..=*tops.iter().max().unwrap())
        .map(|k| {
            let emp = pooled.iter().filter(|&&x| x <= k).count() as f64 / n;
            let model = tops
                .iter()
                .map(|&m| ((k + 1) as f64 / (m + 1) as f64).min(1.0))
                .sum::<f64>()
                / tops.len() as f64;
            (emp - model).abs()
        })
        .fold(0.0, f64::max);
    assert!(ks < 0.05, "distance {ks}");
}
