//! Dataset types, normalisation, sliding windows and chronological splits.

pub(crate) mod io;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, save_dataset};

/// Days per sample: 30 input days plus the target day.
pub const WINDOW: usize = 31;
/// Input days per sample.
pub const INPUT_DAYS: usize = WINDOW - 1;
/// Standard deviations below this are clamped during normalisation.
pub const STD_FLOOR: f64 = 1e-8;

/// Dense `[entity][day][attribute]` values.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetTensor {
    values: Vec<f64>,
    n_entities: usize,
    n_days: usize,
    n_attributes: usize,
    entity_ids: Vec<String>,
    attribute_names: Vec<String>,
    kpi_index: usize,
}

impl DatasetTensor {
    pub fn new(
        values: Vec<f64>,
        n_entities: usize,
        n_days: usize,
        entity_ids: Vec<String>,
        attribute_names: Vec<String>,
        kpi_index: usize,
    ) -> Result<Self> {
        let n_attributes = attribute_names.len();
        if n_entities < 1 || n_days < WINDOW || n_attributes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need N >= 1, T >= {WINDOW}, D >= 2; got N = {n_entities}, T = {n_days}, D = {n_attributes}"
            )));
        }
        if kpi_index >= n_attributes {
            return Err(Error::InvalidDataset(format!(
                "kpi_index {kpi_index} out of range for {n_attributes} attributes"
            )));
        }
        if entity_ids.len() != n_entities {
            return Err(Error::InvalidDataset(format!(
                "{} entity ids for {n_entities} entities",
                entity_ids.len()
            )));
        }
        let expected = n_entities * n_days * n_attributes;
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                found: values.len(),
            });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self {
            values,
            n_entities,
            n_days,
            n_attributes,
            entity_ids,
            attribute_names,
            kpi_index,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    pub fn n_attributes(&self) -> usize {
        self.n_attributes
    }

    pub fn kpi_index(&self) -> usize {
        self.kpi_index
    }

    pub fn entity_ids(&self) -> &[String] {
        &self.entity_ids
    }

    pub fn attribute_names(&self) -> &[String] {
        &self.attribute_names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, entity: usize, day: usize, attribute: usize) -> f64 {
        self.values[(entity * self.n_days + day) * self.n_attributes + attribute]
    }

    /// Attribute vector of one entity on one day.
    #[inline]
    pub fn day(&self, entity: usize, day: usize) -> &[f64] {
        let start = (entity * self.n_days + day) * self.n_attributes;
        &self.values[start..start + self.n_attributes]
    }

    /// Rows `days` of one entity, day-major.
    pub fn days(&self, entity: usize, days: Range<usize>) -> &[f64] {
        let d = self.n_attributes;
        let base = entity * self.n_days;
        &self.values[(base + days.start) * d..(base + days.end) * d]
    }

    pub fn kpi_series(&self, entity: usize) -> Vec<f64> {
        (0..self.n_days).map(|t| self.get(entity, t, self.kpi_index)).collect()
    }

    fn with_values(&self, values: Vec<f64>) -> Self {
        Self {
            values,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityStaticProfile {
    pub entity_id: String,
    /// Days since the Unix epoch.
    pub open_time: i64,
    pub product_type: u32,
    pub location: u32,
    pub extra: Vec<f64>,
}

/// Binary `[entity][day]` labels, 1 = abnormal day.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMatrix {
    n_entities: usize,
    n_days: usize,
    labels: Vec<u8>,
}

impl LabelMatrix {
    pub fn zeros(n_entities: usize, n_days: usize) -> Self {
        Self {
            n_entities,
            n_days,
            labels: vec![0; n_entities * n_days],
        }
    }

    pub fn new(n_entities: usize, n_days: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != n_entities * n_days {
            return Err(Error::ShapeMismatch {
                expected: n_entities * n_days,
                found: labels.len(),
            });
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::InvalidDataset("labels must be 0 or 1".into()));
        }
        Ok(Self {
            n_entities,
            n_days,
            labels,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.n_entities
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    #[inline]
    pub fn get(&self, entity: usize, day: usize) -> u8 {
        self.labels[entity * self.n_days + day]
    }

    pub fn set(&mut self, entity: usize, day: usize, label: bool) {
        self.labels[entity * self.n_days + day] = label as u8;
    }

    pub fn count(&self, entity: usize) -> usize {
        self.labels[entity * self.n_days..(entity + 1) * self.n_days]
            .iter()
            .map(|&l| l as usize)
            .sum()
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }
}

/// A dataset directory's full contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tensor: DatasetTensor,
    pub labels: LabelMatrix,
    pub profiles: Vec<EntityStaticProfile>,
}

impl Dataset {
    pub fn new(tensor: DatasetTensor, labels: LabelMatrix, profiles: Vec<EntityStaticProfile>) -> Result<Self> {
        if labels.n_entities() != tensor.n_entities() || labels.n_days() != tensor.n_days() {
            return Err(Error::InvalidDataset(format!(
                "labels are {}x{}, tensor is {}x{}",
                labels.n_entities(),
                labels.n_days(),
                tensor.n_entities(),
                tensor.n_days()
            )));
        }
        if profiles.len() != tensor.n_entities()
            || profiles.iter().zip(tensor.entity_ids()).any(|(p, id)| &p.entity_id != id)
        {
            return Err(Error::InvalidDataset(
                "static profiles must list every entity once, in tensor order".into(),
            ));
        }
        Ok(Self {
            tensor,
            labels,
            profiles,
        })
    }
}

/// One input window and its next-day KPI target.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub entity_index: usize,
    /// First input day.
    pub start: usize,
    pub n_attributes: usize,
    /// `[INPUT_DAYS][n_attributes]`, day-major.
    pub input: Vec<f64>,
    pub target: f64,
    pub target_label: u8,
}

impl WindowSample {
    pub fn input_days(&self) -> usize {
        self.input.len() / self.n_attributes
    }

    pub fn target_day(&self) -> usize {
        self.start + self.input_days()
    }

    /// One series per attribute over the input days.
    pub fn attribute_series(&self) -> Vec<Vec<f64>> {
        let d = self.n_attributes;
        (0..d)
            .map(|a| self.input.iter().skip(a).step_by(d).copied().collect())
            .collect()
    }
}

/// Per-entity, per-attribute z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub n_entities: usize,
    pub n_attributes: usize,
    /// `[entity][attribute]`, flattened.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn mean(&self, entity: usize, attribute: usize) -> f64 {
        self.mean[entity * self.n_attributes + attribute]
    }

    pub fn std(&self, entity: usize, attribute: usize) -> f64 {
        self.std[entity * self.n_attributes + attribute]
    }
}

/// Z-scores every entity's attributes with statistics from `train_range` days.
pub fn normalize(data: &DatasetTensor, train_range: Range<usize>) -> Result<(DatasetTensor, NormStats)> {
    if train_range.is_empty() || train_range.end > data.n_days() {
        return Err(Error::InvalidRange(format!(
            "train range {train_range:?} must be non-empty and within [0, {})",
            data.n_days()
        )));
    }
    let (n, d) = (data.n_entities(), data.n_attributes());
    let count = train_range.len() as f64;
    let mut mean = vec![0.0; n * d];
    let mut std = vec![0.0; n * d];
    for e in 0..n {
        for t in train_range.clone() {
            for (m, x) in mean[e * d..(e + 1) * d].iter_mut().zip(data.day(e, t)) {
                *m += x / count;
            }
        }
        for t in train_range.clone() {
            for (a, x) in data.day(e, t).iter().enumerate() {
                std[e * d + a] += (x - mean[e * d + a]).powi(2) / count;
            }
        }
    }
    for s in &mut std {
        *s = s.sqrt().max(STD_FLOOR);
    }
    let stats = NormStats {
        n_entities: n,
        n_attributes: d,
        mean,
        std,
    };
    let mut values = data.values().to_vec();
    for e in 0..n {
        for t in 0..data.n_days() {
            let base = (e * data.n_days() + t) * d;
            for a in 0..d {
                values[base + a] = (values[base + a] - stats.mean(e, a)) / stats.std(e, a);
            }
        }
    }
    Ok((data.with_values(values), stats))
}

pub fn denormalize(data: &DatasetTensor, stats: &NormStats) -> Result<DatasetTensor> {
    if stats.n_entities != data.n_entities() || stats.n_attributes != data.n_attributes() {
        return Err(Error::InvalidDataset("norm stats do not match tensor shape".into()));
    }
    let d = data.n_attributes();
    let mut values = data.values().to_vec();
    for e in 0..data.n_entities() {
        for t in 0..data.n_days() {
            let base = (e * data.n_days() + t) * d;
            for a in 0..d {
                values[base + a] = values[base + a] * stats.std(e, a) + stats.mean(e, a);
            }
        }
    }
    Ok(data.with_values(values))
}

/// Every window of `window` consecutive days, per entity in chronological
/// order: the first `window - 1` days are input, the last day's KPI the target.
pub fn sliding_windows(data: &DatasetTensor, labels: &LabelMatrix, window: usize) -> Result<Vec<WindowSample>> {
    if window < 2 {
        return Err(Error::InvalidRange(format!("window must be >= 2, got {window}")));
    }
    if data.n_days() < window {
        return Err(Error::InsufficientHistory {
            need: window,
            got: data.n_days(),
        });
    }
    if labels.n_entities() != data.n_entities() || labels.n_days() != data.n_days() {
        return Err(Error::InvalidDataset("label shape does not match tensor".into()));
    }
    let per_entity = data.n_days() - window + 1;
    let mut out = Vec::with_capacity(data.n_entities() * per_entity);
    for e in 0..data.n_entities() {
        for start in 0..per_entity {
            let target_day = start + window - 1;
            out.push(WindowSample {
                entity_index: e,
                start,
                n_attributes: data.n_attributes(),
                input: data.days(e, start..target_day).to_vec(),
                target: data.get(e, target_day, data.kpi_index()),
                target_label: labels.get(e, target_day),
            });
        }
    }
    Ok(out)
}

/// Per-entity counts `(train, val, test)` for `w` windows: floor 60%, floor
/// 20%, remainder.
pub fn split_counts(w: usize) -> (usize, usize, usize) {
    let train = w * 6 / 10;
    let val = w * 2 / 10;
    (train, val, w - train - val)
}

pub const MIN_WINDOWS_PER_ENTITY: usize = 5;

#[derive(Clone, Debug, Default)]
pub struct Split {
    pub train: Vec<WindowSample>,
    pub val: Vec<WindowSample>,
    pub test: Vec<WindowSample>,
}

/// Chronological 6:2:2 split of each entity's windows by start day.
pub fn split(samples: Vec<WindowSample>) -> Result<Split> {
    let n_entities = samples.iter().map(|s| s.entity_index + 1).max().unwrap_or(0);
    let mut per_entity: Vec<Vec<WindowSample>> = vec![Vec::new(); n_entities];
    for s in samples {
        per_entity[s.entity_index].push(s);
    }
    let mut out = Split::default();
    for (e, mut windows) in per_entity.into_iter().enumerate() {
        if windows.len() < MIN_WINDOWS_PER_ENTITY {
            return Err(Error::TooFewSamples {
                entity: e,
                got: windows.len(),
                need: MIN_WINDOWS_PER_ENTITY,
            });
        }
        windows.sort_by_key(|w| w.start);
        let (train, val, _) = split_counts(windows.len());
        let mut rest = windows.split_off(train);
        let test = rest.split_off(val);
        out.train.extend(windows);
        out.val.extend(rest);
        out.test.extend(test);
    }
    Ok(out)
}

/// Days touched by the training windows of a `n_days` series, used for
/// normalisation statistics.
pub fn train_day_range(n_days: usize, window: usize) -> Result<Range<usize>> {
    if n_days < window {
        return Err(Error::InsufficientHistory { need: window, got: n_days });
    }
    let (train, _, _) = split_counts(n_days - window + 1);
    if train == 0 {
        return Err(Error::TooFewSamples {
            entity: 0,
            got: n_days - window + 1,
            need: MIN_WINDOWS_PER_ENTITY,
        });
    }
    Ok(0..train - 1 + window)
}
