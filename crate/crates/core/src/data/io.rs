//! Dataset directory format.
//!
//! ```text
//! manifest.json  n_entities, n_days, n_attributes, kpi_index, attribute_names, entity_ids
//! values.f32     little-endian f32, row-major [entity][day][attribute]
//! labels.csv     entity_id,day,label
//! static.csv     entity_id,open_time,product_type,location,extra_0,...
//! ```
//!
//! Values are stored as `f32`; tensors whose values are exactly representable
//! in `f32` round-trip bit for bit.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetTensor, EntityStaticProfile, LabelMatrix};
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.json";
const VALUES: &str = "values.f32";
const LABELS: &str = "labels.csv";
const STATIC: &str = "static.csv";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    n_entities: usize,
    n_days: usize,
    n_attributes: usize,
    kpi_index: usize,
    attribute_names: Vec<String>,
    entity_ids: Vec<String>,
}

pub fn save_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let t = &dataset.tensor;
    let manifest = Manifest {
        n_entities: t.n_entities(),
        n_days: t.n_days(),
        n_attributes: t.n_attributes(),
        kpi_index: t.kpi_index(),
        attribute_names: t.attribute_names().to_vec(),
        entity_ids: t.entity_ids().to_vec(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;

    let mut bytes = Vec::with_capacity(t.values().len() * 4);
    for &v in t.values() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(dir.join(VALUES), bytes)?;

    let mut w = csv::Writer::from_path(dir.join(LABELS)).map_err(csv_io)?;
    w.write_record(["entity_id", "day", "label"]).map_err(csv_io)?;
    for (e, id) in t.entity_ids().iter().enumerate() {
        for day in 0..t.n_days() {
            w.write_record([id.as_str(), &day.to_string(), &dataset.labels.get(e, day).to_string()])
                .map_err(csv_io)?;
        }
    }
    w.flush()?;

    let n_extra = dataset.profiles.iter().map(|p| p.extra.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_path(dir.join(STATIC)).map_err(csv_io)?;
    let mut header: Vec<String> = ["entity_id", "open_time", "product_type", "location"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..n_extra).map(|i| format!("extra_{i}")));
    w.write_record(&header).map_err(csv_io)?;
    for p in &dataset.profiles {
        let mut row = vec![
            p.entity_id.clone(),
            p.open_time.to_string(),
            p.product_type.to_string(),
            p.location.to_string(),
        ];
        row.extend((0..n_extra).map(|i| p.extra.get(i).copied().unwrap_or(0.0).to_string()));
        w.write_record(&row).map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::MalformedManifest {
        path: manifest_path.clone(),
        reason: e.to_string(),
    })?;
    if m.attribute_names.len() != m.n_attributes || m.entity_ids.len() != m.n_entities {
        return Err(Error::MalformedManifest {
            path: manifest_path,
            reason: "attribute_names / entity_ids lengths disagree with declared sizes".into(),
        });
    }

    let values_path = dir.join(VALUES);
    let bytes = fs::read(&values_path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::TruncatedBinary {
            path: values_path,
            reason: format!("{} bytes is not a whole number of f32 values", bytes.len()),
        });
    }
    let expected = m.n_entities * m.n_days * m.n_attributes;
    let found = bytes.len() / 4;
    if found < expected {
        return Err(Error::TruncatedBinary {
            path: values_path,
            reason: format!("expected {expected} values, found {found}"),
        });
    }
    if found > expected {
        return Err(Error::ShapeMismatch { expected, found });
    }
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let tensor = DatasetTensor::new(
        values,
        m.n_entities,
        m.n_days,
        m.entity_ids.clone(),
        m.attribute_names.clone(),
        m.kpi_index,
    )?;

    let index: HashMap<&str, usize> = m.entity_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let labels = read_labels(&dir.join(LABELS), &index, m.n_entities, m.n_days)?;
    let profiles = read_profiles(&dir.join(STATIC), &m.entity_ids)?;
    Dataset::new(tensor, labels, profiles)
}

fn read_labels(path: &Path, index: &HashMap<&str, usize>, n: usize, t: usize) -> Result<LabelMatrix> {
    if !path.exists() {
        return Err(Error::MissingLabels(path.to_path_buf()));
    }
    let mut labels = LabelMatrix::zeros(n, t);
    let mut rdr = csv::Reader::from_path(path).map_err(csv_io)?;
    check_header(path, rdr.headers().map_err(csv_io)?, &["entity_id", "day", "label"])?;
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad_csv(path, line, e.to_string()))?;
        if rec.len() != 3 {
            return Err(bad_csv(path, line, format!("expected 3 fields, got {}", rec.len())));
        }
        let e = *index
            .get(&rec[0])
            .ok_or_else(|| bad_csv(path, line, format!("unknown entity {}", &rec[0])))?;
        let day: usize = rec[1].parse().map_err(|_| bad_csv(path, line, "bad day".into()))?;
        if day >= t {
            return Err(bad_csv(path, line, format!("day {day} out of range")));
        }
        let label = match &rec[2] {
            "0" => false,
            "1" => true,
            other => return Err(bad_csv(path, line, format!("label must be 0 or 1, got {other}"))),
        };
        labels.set(e, day, label);
    }
    Ok(labels)
}

fn read_profiles(path: &Path, ids: &[String]) -> Result<Vec<EntityStaticProfile>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_io)?;
    let header = rdr.headers().map_err(csv_io)?.clone();
    if header.len() < 4 {
        return Err(bad_csv(path, 1, "static header needs at least 4 columns".into()));
    }
    check_header(path, &header, &["entity_id", "open_time", "product_type", "location"])?;
    let mut by_id: HashMap<String, EntityStaticProfile> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| bad_csv(path, line, e.to_string()))?;
        let parse_err = |what: &str| bad_csv(path, line, format!("bad {what}"));
        let profile = EntityStaticProfile {
            entity_id: rec[0].to_string(),
            open_time: rec[1].parse().map_err(|_| parse_err("open_time"))?,
            product_type: rec[2].parse().map_err(|_| parse_err("product_type"))?,
            location: rec[3].parse().map_err(|_| parse_err("location"))?,
            extra: rec
                .iter()
                .skip(4)
                .map(|s| s.parse::<f64>().map_err(|_| parse_err("extra field")))
                .collect::<Result<_>>()?,
        };
        if by_id.insert(profile.entity_id.clone(), profile).is_some() {
            return Err(bad_csv(path, line, format!("duplicate entity {}", &rec[0])));
        }
    }
    ids.iter()
        .map(|id| {
            by_id
                .remove(id)
                .ok_or_else(|| Error::InvalidDataset(format!("no static profile for entity {id}")))
        })
        .collect()
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<()> {
    if got.iter().take(want.len()).ne(want.iter().copied()) {
        return Err(bad_csv(path, 1, format!("expected header starting with {}", want.join(","))));
    }
    Ok(())
}

fn bad_csv(path: &Path, line: usize, reason: String) -> Error {
    Error::MalformedCsv {
        path: PathBuf::from(path),
        line,
        reason,
    }
}

pub(crate) fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidDataset(format!("csv: {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(n: usize, d: usize) -> Dataset {
        let t = 31;
        let values: Vec<f64> = (0..n * t * d).map(|i| (i as f32 * 0.37 - 5.0) as f64).collect();
        let ids: Vec<String> = (0..n).map(|e| format!("E{e:03}")).collect();
        let tensor = DatasetTensor::new(
            values,
            n,
            t,
            ids.clone(),
            (0..d).map(|a| format!("attr_{a}")).collect(),
            0,
        )
        .unwrap();
        let mut labels = LabelMatrix::zeros(n, t);
        labels.set(0, 30, true);
        let profiles = ids
            .iter()
            .enumerate()
            .map(|(i, id)| EntityStaticProfile {
                entity_id: id.clone(),
                open_time: 18000 + i as i64,
                product_type: i as u32,
                location: 1,
                extra: vec![0.5 * i as f64],
            })
            .collect();
        Dataset::new(tensor, labels, profiles).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample(2, 3);
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let bits = |d: &Dataset| d.tensor.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&ds));

        let again = tempfile::tempdir().unwrap();
        save_dataset(&back, again.path()).unwrap();
        for f in [MANIFEST, VALUES, LABELS, STATIC] {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn larger_binary_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(2, 4), dir.path()).unwrap();
        // Rewrite the manifest to claim D = 3 while the binary holds 2x31x4 floats.
        let text = fs::read_to_string(dir.path().join(MANIFEST)).unwrap();
        let mut m: Manifest = serde_json::from_str(&text).unwrap();
        m.n_attributes = 3;
        m.attribute_names.pop();
        fs::write(dir.path().join(MANIFEST), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn truncated_binary() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(2, 3), dir.path()).unwrap();
        let path = dir.path().join(VALUES);
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::TruncatedBinary { .. })));
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::TruncatedBinary { .. })));
    }

    #[test]
    fn missing_labels() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(2, 3), dir.path()).unwrap();
        fs::remove_file(dir.path().join(LABELS)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingLabels(_))));
    }

    #[test]
    fn malformed_manifest() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(2, 3), dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST), "{ not json").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MalformedManifest { .. })));
    }

    #[test]
    fn bad_label_value() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&sample(1, 2), dir.path()).unwrap();
        fs::write(dir.path().join(LABELS), "entity_id,day,label\nE000,0,2\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MalformedCsv { line: 2, .. })));
    }
}
