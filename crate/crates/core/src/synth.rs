//! Synthetic entity-wise transaction data with planted, labelled anomalies.
//!
//! Each entity is a retailer with a daily order count (the KPI) and a set of
//! delivery- and courier-related attributes. Retailers that share a product
//! type share a base KPI pattern, a weekly profile and market-level shocks,
//! so the static entity graph carries signal.

use rand::distributions::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetTensor, EntityStaticProfile, LabelMatrix};
use crate::error::{Error, Result};
use crate::parallel;

pub const MIN_ATTRIBUTES: usize = 8;
pub const MIN_DAYS: usize = 62;

/// Default distribution of abnormal-day counts 0..=14 per entity: mode 3,
/// 86% of the mass below 7.
pub const DEFAULT_ANOMALY_DAYS: [f64; 15] = [
    0.04, 0.09, 0.15, 0.24, 0.15, 0.11, 0.08, 0.04, 0.03, 0.02, 0.015, 0.015, 0.01, 0.005, 0.005,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Steady,
    Trend,
    Volatile,
    Bursty,
}

const PATTERNS: [Pattern; 4] = [Pattern::Steady, Pattern::Trend, Pattern::Volatile, Pattern::Bursty];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternMix {
    pub steady: f64,
    pub trend: f64,
    pub volatile: f64,
    pub bursty: f64,
}

impl Default for PatternMix {
    fn default() -> Self {
        Self {
            steady: 0.35,
            trend: 0.2,
            volatile: 0.25,
            bursty: 0.2,
        }
    }
}

impl PatternMix {
    fn weights(&self) -> [f64; 4] {
        [self.steady, self.trend, self.volatile, self.bursty]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub n_entities: usize,
    pub n_days: usize,
    pub n_attributes: usize,
    pub seed: u64,
    /// Probability of each abnormal-day count `0..len`.
    pub anomaly_day_distribution: Vec<f64>,
    /// Range of mean daily orders, sampled log-uniformly.
    pub base_scale_range: [f64; 2],
    pub pattern_mix: PatternMix,
    pub n_product_types: u32,
    pub n_locations: u32,
    /// KPI multiplier range for upward anomalies.
    pub spike_up_range: [f64; 2],
    /// KPI multiplier range for downward anomalies.
    pub spike_down_range: [f64; 2],
    /// Probability that an anomaly is a drop rather than a spike.
    pub down_probability: f64,
    /// Calendar day (days since epoch) of day 0.
    pub start_day: i64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_entities: 60,
            n_days: 120,
            n_attributes: MIN_ATTRIBUTES,
            seed: 0,
            anomaly_day_distribution: DEFAULT_ANOMALY_DAYS.to_vec(),
            base_scale_range: [20.0, 400.0],
            pattern_mix: PatternMix::default(),
            n_product_types: 6,
            n_locations: 4,
            spike_up_range: [1.5, 3.0],
            spike_down_range: [0.1, 0.5],
            down_probability: 0.5,
            // 2020-06-30
            start_day: 18443,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_attributes < MIN_ATTRIBUTES {
            return bad(format!(
                "n_attributes must be >= {MIN_ATTRIBUTES} (KPI, delivery, overtime and 5 auxiliaries), got {}",
                self.n_attributes
            ));
        }
        if self.n_days < MIN_DAYS {
            return bad(format!("n_days must be >= {MIN_DAYS}, got {}", self.n_days));
        }
        if self.n_entities == 0 {
            return bad("n_entities must be >= 1".into());
        }
        check_probabilities("anomaly_day_distribution", &self.anomaly_day_distribution)?;
        check_probabilities("pattern_mix", &self.pattern_mix.weights())?;
        let [lo, hi] = self.base_scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("base_scale_range must satisfy 0 < low <= high, got [{lo}, {hi}]"));
        }
        for (name, [a, b]) in [("spike_up_range", self.spike_up_range), ("spike_down_range", self.spike_down_range)] {
            if !(a >= 0.0 && a <= b) {
                return bad(format!("{name} must satisfy 0 <= low <= high, got [{a}, {b}]"));
            }
        }
        if !(0.0..=1.0).contains(&self.down_probability) {
            return bad("down_probability must lie in [0, 1]".into());
        }
        if self.n_product_types == 0 || self.n_locations == 0 {
            return bad("n_product_types and n_locations must be >= 1".into());
        }
        Ok(())
    }
}

fn check_probabilities(name: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|&x| !(x >= 0.0)) {
        return Err(Error::InvalidConfig(format!("{name} must be non-empty and non-negative")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("{name} sums to {total}, not 1")));
    }
    Ok(())
}

pub fn attribute_names(n_attributes: usize) -> Vec<String> {
    let fixed = [
        "order_count",
        "orders_ahead_of_time",
        "overtime_orders",
        "on_time_deliveries",
        "pay_amount",
        "active_couriers",
        "avg_delivery_minutes",
        "avg_distance_km",
    ];
    (0..n_attributes)
        .map(|i| fixed.get(i).map_or_else(|| format!("aux_{i}"), |s| s.to_string()))
        .collect()
}

/// Shared by every retailer of one product type.
struct ProductType {
    pattern: Pattern,
    weekly: [f64; 7],
    shocks: Vec<f64>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const TYPE_STREAM: u64 = u64::MAX;

fn product_types(config: &GenConfig) -> Vec<ProductType> {
    let mut rng = rng_for(config.seed, TYPE_STREAM);
    let mix = WeightedIndex::new(config.pattern_mix.weights()).expect("validated pattern mix");
    (0..config.n_product_types)
        .map(|_| {
            let pattern = PATTERNS[mix.sample(&mut rng)];
            let mut weekly = [1.0; 7];
            for w in &mut weekly {
                *w = 1.0 + 0.06 * z(&mut rng);
            }
            // Slow AR(1) market fluctuation, stationary sd 0.04.
            let phi: f64 = 0.85;
            let innov = 0.04 * (1.0 - phi * phi).sqrt();
            let mut a = 0.04 * z(&mut rng);
            let shocks = (0..config.n_days)
                .map(|_| {
                    a = phi * a + innov * z(&mut rng);
                    a
                })
                .collect();
            ProductType { pattern, weekly, shocks }
        })
        .collect()
}

/// Number of abnormal days planted for `entity`; the first draw of the
/// entity's stream.
pub fn anomaly_count(config: &GenConfig, entity: usize) -> usize {
    let mut rng = rng_for(config.seed, entity as u64);
    draw_count(config, &mut rng)
}

fn draw_count(config: &GenConfig, rng: &mut ChaCha8Rng) -> usize {
    let dist = WeightedIndex::new(&config.anomaly_day_distribution).expect("validated distribution");
    dist.sample(rng).min(config.n_days)
}

struct EntityData {
    profile: EntityStaticProfile,
    values: Vec<f64>,
    anomaly_days: Vec<usize>,
}

fn generate_entity(config: &GenConfig, types: &[ProductType], e: usize) -> EntityData {
    let mut rng = rng_for(config.seed, e as u64);
    let count = draw_count(config, &mut rng);
    let t_len = config.n_days;
    let d = config.n_attributes;
    let product_type = rng.gen_range(0..config.n_product_types);
    let location = rng.gen_range(0..config.n_locations);
    let open_time = config.start_day - rng.gen_range(60..2000);
    let [lo, hi] = config.base_scale_range;
    let base = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp();
    let avg_price = rng.gen_range(15.0..60.0);
    let on_time_rate = rng.gen_range(0.85..0.95);
    let ptype = &types[product_type as usize];

    // Expected KPI path before noise.
    let trend_slope = {
        let s = rng.gen_range(0.3..0.6);
        if rng.gen_bool(0.5) {
            s
        } else {
            -s
        }
    };
    let mut ar = 0.0;
    let mut mean_path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let frac = t as f64 / t_len as f64;
        let shape = match ptype.pattern {
            Pattern::Steady => 1.0,
            Pattern::Trend => 1.0 + trend_slope * frac,
            Pattern::Volatile => {
                ar = 0.8 * ar + 0.6 * 0.2 * z(&mut rng);
                (1.0 + ar).max(0.2)
            }
            Pattern::Bursty => {
                if t % 7 >= 5 {
                    1.5
                } else {
                    1.0
                }
            }
        };
        mean_path.push(base * shape * ptype.weekly[t % 7] * (1.0 + ptype.shocks[t]));
    }
    let mut kpi: Vec<f64> = mean_path
        .iter()
        .map(|&m| (m * (1.0 + 0.05 * z(&mut rng))).round().max(0.0))
        .collect();

    let mut anomaly_days: Vec<usize> = sample(&mut rng, t_len, count).into_vec();
    anomaly_days.sort_unstable();
    for &day in &anomaly_days {
        let factor = if rng.gen_bool(config.down_probability) {
            uniform(&mut rng, config.spike_down_range)
        } else {
            uniform(&mut rng, config.spike_up_range)
        };
        kpi[day] = (kpi[day] * factor).round().max(0.0);
    }

    let ahead_mean = (0.15 * base).max(8.0);
    let ahead = Normal::new(ahead_mean, ahead_mean / 4.0).unwrap();
    let overtime_max = 3 + (0.05 * base).round() as u32;
    let mut aux_state = vec![0.0; d.saturating_sub(MIN_ATTRIBUTES)];

    let mut values = Vec::with_capacity(t_len * d);
    let mut noise = rng_for(config.seed ^ 0x5eed, e as u64);
    let mut zn = || z(&mut noise);
    for &k in &kpi {
        let row_start = values.len();
        values.push(k);
        // Filled below from the entity stream.
        values.push(0.0);
        values.push(0.0);
        values.push((k * on_time_rate + 0.02 * k * zn()).round().max(0.0));
        values.push((k * avg_price * (1.0 + 0.03 * zn())).max(0.0));
        values.push((2.0 * k.sqrt() + zn()).round().max(0.0));
        values.push(32.0 + 2.0 * zn());
        values.push(2.5 + 0.15 * zn());
        for s in aux_state.iter_mut() {
            *s = 0.7 * *s + 0.3 * zn();
            values.push(0.3 * k / base + *s);
        }
        debug_assert_eq!(values.len() - row_start, d);
    }
    for t in 0..t_len {
        values[t * d + 1] = ahead.sample(&mut rng).round().max(0.0);
        values[t * d + 2] = rng.gen_range(0..=overtime_max) as f64;
    }
    // Stored as f32 on disk; quantise now so save/load is lossless.
    for v in &mut values {
        *v = *v as f32 as f64;
    }

    EntityData {
        profile: EntityStaticProfile {
            entity_id: format!("R{e:05}"),
            open_time,
            product_type,
            location,
            extra: vec![(avg_price as f32) as f64, (base.ln() as f32) as f64],
        },
        values,
        anomaly_days,
    }
}

fn z(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn uniform(rng: &mut impl Rng, [lo, hi]: [f64; 2]) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a dataset; deterministic in `config` (including `seed`).
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    config.validate()?;
    let types = product_types(config);
    let entities = parallel::map_range(config.n_entities, |e| generate_entity(config, &types, e));

    let mut values = Vec::with_capacity(config.n_entities * config.n_days * config.n_attributes);
    let mut labels = LabelMatrix::zeros(config.n_entities, config.n_days);
    let mut profiles = Vec::with_capacity(config.n_entities);
    for (e, ent) in entities.into_iter().enumerate() {
        values.extend(ent.values);
        for day in ent.anomaly_days {
            labels.set(e, day, true);
        }
        profiles.push(ent.profile);
    }
    let ids = profiles.iter().map(|p| p.entity_id.clone()).collect();
    let tensor = DatasetTensor::new(
        values,
        config.n_entities,
        config.n_days,
        ids,
        attribute_names(config.n_attributes),
        0,
    )?;
    Dataset::new(tensor, labels, profiles)
}

/// Pattern family assigned to each product type.
pub fn product_type_patterns(config: &GenConfig) -> Vec<Pattern> {
    product_types(config).into_iter().map(|t| t.pattern).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig {
            n_entities: 12,
            n_days: 70,
            seed: 5,
            ..GenConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&GenConfig { seed: 6, ..small() }).unwrap();
        assert_ne!(a.tensor.values(), c.tensor.values());
    }

    #[test]
    fn zero_anomaly_probability_gives_no_labels() {
        let mut dist = vec![0.0; 15];
        dist[0] = 1.0;
        let ds = generate(&GenConfig {
            anomaly_day_distribution: dist,
            ..small()
        })
        .unwrap();
        assert!(ds.labels.as_slice().iter().all(|&l| l == 0));
    }

    #[test]
    fn label_count_equals_drawn_count() {
        let cfg = small();
        let ds = generate(&cfg).unwrap();
        for e in 0..cfg.n_entities {
            assert_eq!(ds.labels.count(e), anomaly_count(&cfg, e));
        }
    }

    #[test]
    fn rejects_invalid_configs() {
        assert!(generate(&GenConfig { n_attributes: 7, ..small() }).is_err());
        assert!(generate(&GenConfig { n_days: 61, ..small() }).is_err());
        assert!(generate(&GenConfig {
            anomaly_day_distribution: vec![0.5, 0.4],
            ..small()
        })
        .is_err());
    }

    #[test]
    fn kpi_non_negative_and_values_finite() {
        let ds = generate(&GenConfig {
            n_attributes: 10,
            ..small()
        })
        .unwrap();
        for e in 0..ds.tensor.n_entities() {
            assert!(ds.tensor.kpi_series(e).iter().all(|&k| k >= 0.0));
        }
        assert_eq!(ds.tensor.attribute_names()[9], "aux_9");
    }

    #[test]
    fn planted_days_shift_kpi_and_dependents() {
        let cfg = GenConfig {
            n_entities: 20,
            spike_up_range: [5.0, 5.0],
            down_probability: 0.0,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let t = &ds.tensor;
        let mut checked = 0;
        for e in 0..cfg.n_entities {
            let kpi = t.kpi_series(e);
            let median = {
                let mut k = kpi.clone();
                k.sort_by(f64::total_cmp);
                k[k.len() / 2]
            };
            for day in 0..cfg.n_days {
                if ds.labels.get(e, day) == 1 {
                    assert!(kpi[day] > 2.5 * median, "entity {e} day {day}");
                    assert!(t.get(e, day, 3) > 2.0 * median * 0.8);
                    checked += 1;
                }
            }
        }
        assert!(checked > 0);
    }
}
