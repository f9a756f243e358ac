use std::sync::Arc;

use crate::data::{normalize, sliding_windows, split, train_day_range, Dataset, WindowSample, INPUT_DAYS, WINDOW};
use crate::error::{Error, Result};
use crate::graph::{build_attribute_graph, build_entity_graph, build_temporal_graph, BlockAdjacency, GraphTopology};
use crate::matrix::Matrix;
use crate::parallel;

/// One window per entity, all sharing the same start day.
#[derive(Clone, Debug)]
pub struct Batch {
    pub start: usize,
    /// `[N * INPUT_DAYS][D]`, entity-major.
    pub x: Matrix,
    pub targets: Vec<f64>,
    pub labels: Vec<u8>,
    pub block: BlockAdjacency,
    /// Union of the per-entity attribute graphs; entity `e` owns nodes
    /// `e*D .. (e+1)*D`.
    pub attribute_graph: Arc<GraphTopology>,
}

impl Batch {
    /// `windows[e]` must belong to entity `e`.
    pub fn new(windows: &[&WindowSample], entity_graph: Arc<GraphTopology>) -> Result<Self> {
        let first = windows.first().ok_or(Error::TooFewNodes { need: 2, got: 0 })?;
        let d = first.n_attributes;
        let mut x = Vec::with_capacity(windows.len() * INPUT_DAYS * d);
        for w in windows {
            if w.start != first.start || w.n_attributes != d || w.input_days() != INPUT_DAYS {
                return Err(Error::InvalidRange("batch windows must share start day and shape".into()));
            }
            x.extend_from_slice(&w.input);
        }
        let temporal = Arc::new(build_temporal_graph(windows)?);
        let attribute_graphs = windows
            .iter()
            .map(|w| build_attribute_graph(w))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&GraphTopology> = attribute_graphs.iter().collect();
        Ok(Self {
            start: first.start,
            x: Matrix::from_vec(windows.len() * INPUT_DAYS, d, x),
            targets: windows.iter().map(|w| w.target).collect(),
            labels: windows.iter().map(|w| w.target_label).collect(),
            block: BlockAdjacency::new(entity_graph, temporal)?,
            attribute_graph: Arc::new(GraphTopology::block_diagonal(&refs)?),
        })
    }

    pub fn n_entities(&self) -> usize {
        self.targets.len()
    }

    pub fn n_attributes(&self) -> usize {
        self.x.cols()
    }

    pub fn target_day(&self) -> usize {
        self.start + INPUT_DAYS
    }

    pub fn normal_entities(&self) -> Vec<usize> {
        (0..self.n_entities()).filter(|&e| self.labels[e] == 0).collect()
    }
}

/// A dataset normalised with training-range statistics and cut into
/// per-offset batches for each split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub entity_ids: Vec<String>,
    pub n_attributes: usize,
    pub entity_graph: Arc<GraphTopology>,
    pub train: Vec<Batch>,
    pub val: Vec<Batch>,
    pub test: Vec<Batch>,
}

impl Prepared {
    pub fn new(dataset: &Dataset) -> Result<Self> {
        let t = &dataset.tensor;
        let range = train_day_range(t.n_days(), WINDOW)?;
        let (norm, _) = normalize(t, range)?;
        let windows = sliding_windows(&norm, &dataset.labels, WINDOW)?;
        let parts = split(windows)?;
        let entity_graph = Arc::new(build_entity_graph(&dataset.profiles)?);
        let n = t.n_entities();
        let to_batches = |samples: &[WindowSample]| -> Result<Vec<Batch>> {
            // Chronological per entity, entities concatenated.
            let per = samples.len() / n;
            let offsets: Vec<usize> = (0..per).collect();
            parallel::map(&offsets, |&i| {
                let ws: Vec<&WindowSample> = (0..n).map(|e| &samples[e * per + i]).collect();
                Batch::new(&ws, Arc::clone(&entity_graph))
            })
            .into_iter()
            .collect()
        };
        Ok(Self {
            entity_ids: t.entity_ids().to_vec(),
            n_attributes: t.n_attributes(),
            train: to_batches(&parts.train)?,
            val: to_batches(&parts.val)?,
            test: to_batches(&parts.test)?,
            entity_graph,
        })
    }

    pub fn n_entities(&self) -> usize {
        self.entity_ids.len()
    }
}
