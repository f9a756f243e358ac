use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Batch, ModelConfig, Readout};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::INPUT_DAYS;
use crate::error::{Error, Result};
use crate::et_gat::EtGat;
use crate::gat::GatLayer;
use crate::kdecom::{club_on_tape, ClubAux, KDecom};
use crate::matrix::Matrix;
use crate::nn::{lookup, Dense};

const BRANCHES: [&str; 2] = ["stable", "volatile"];

#[derive(Clone, Copy, Debug)]
struct Branch {
    w_a: ParamId,
    agat: Option<GatLayer>,
    etgat: EtGat,
}

#[derive(Clone, Copy, Debug)]
struct Parts {
    kdecom: Option<KDecom>,
    branches: [Branch; 2],
    mlp: [Dense; 2],
}

/// Objective components; `total = mse + λ·mi + μ·recon`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub mi_estimate: f64,
    pub recon: f64,
}

/// Tape handles for one forward pass.
pub(crate) struct Forward {
    pub x: Var,
    pub pred: Var,
    pub volatile: Option<Var>,
    pub stable: Option<Var>,
}

pub(crate) struct Objective {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct GraphAd {
    pub config: ModelConfig,
    pub n_attributes: usize,
    pub store: ParamStore,
    parts: Parts,
}

impl GraphAd {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ModelConfig, n_attributes: usize) -> Result<Self> {
        config.validate()?;
        if n_attributes < 2 {
            return Err(Error::InvalidConfig("need at least 2 attributes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.d_a;
        let v = config.variant;
        let kdecom = v
            .uses_kdecom()
            .then(|| KDecom::init(&mut store, n_attributes, &mut rng));
        let mut branch = |name: &str| -> Result<Branch> {
            let w_a = store.insert_glorot(format!("agat.{name}.w_a"), INPUT_DAYS, d, &mut rng);
            let agat = v
                .uses_agat()
                .then(|| GatLayer::init(&mut store, &format!("agat.{name}"), d, &mut rng));
            let etgat = EtGat::init(&mut store, &format!("etgat.{name}"), d, v.etgat_terms(), &mut rng)?;
            Ok(Branch { w_a, agat, etgat })
        };
        let branches = [branch(BRANCHES[0])?, branch(BRANCHES[1])?];
        let mlp = [
            Dense::init(&mut store, "mlp.l1", 2 * d, 2 * d, &mut rng),
            Dense::init(&mut store, "mlp.l2", 2 * d, 1, &mut rng),
        ];
        Ok(Self {
            config,
            n_attributes,
            store,
            parts: Parts { kdecom, branches, mlp },
        })
    }

    /// Rebinds a loaded parameter store, checking names and shapes against a
    /// freshly initialised model of the same configuration.
    pub fn from_store(config: ModelConfig, n_attributes: usize, store: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), n_attributes)?;
        let expected: Vec<&str> = template.store.names().collect();
        let found: Vec<&str> = store.names().collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "parameter arrays {found:?} do not match the configured model {expected:?}"
            )));
        }
        for id in template.store.ids() {
            let name = template.store.name(id);
            let other = lookup(&store, name)?;
            if store.value(other).shape() != template.store.value(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "array `{name}` is {:?}, the configured model needs {:?}",
                    store.value(other).shape(),
                    template.store.value(id).shape()
                )));
            }
        }
        let v = config.variant;
        let kdecom = if v.uses_kdecom() { Some(KDecom::lookup(&store)?) } else { None };
        let branch = |name: &str| -> Result<Branch> {
            Ok(Branch {
                w_a: lookup(&store, &format!("agat.{name}.w_a"))?,
                agat: if v.uses_agat() {
                    Some(GatLayer::lookup(&store, &format!("agat.{name}"))?)
                } else {
                    None
                },
                etgat: EtGat::lookup(&store, &format!("etgat.{name}"), v.etgat_terms())?,
            })
        };
        let branches = [branch(BRANCHES[0])?, branch(BRANCHES[1])?];
        let mlp = [Dense::lookup(&store, "mlp.l1")?, Dense::lookup(&store, "mlp.l2")?];
        Ok(Self {
            config,
            n_attributes,
            store,
            parts: Parts { kdecom, branches, mlp },
        })
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.n_attributes() != self.n_attributes {
            return Err(Error::Shape {
                op: "forward",
                detail: format!(
                    "batch has {} attributes, model expects {}",
                    batch.n_attributes(),
                    self.n_attributes
                ),
            });
        }
        if batch.block.n_nodes() != batch.n_entities() {
            return Err(Error::MissingGraph("entity/temporal graphs do not cover the batch".into()));
        }
        if batch.attribute_graph.n_nodes() != batch.n_entities() * self.n_attributes {
            return Err(Error::MissingGraph("attribute graph does not cover the batch".into()));
        }
        Ok(())
    }

    pub(crate) fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch) -> Forward {
        let x = tape.constant(batch.x.clone());
        let (stable, volatile) = match &self.parts.kdecom {
            Some(k) => {
                let (s, v) = k.forward(tape, store, x);
                (Some(s), Some(v))
            }
            None => (None, None),
        };
        let inputs = [stable.unwrap_or(x), volatile.unwrap_or(x)];
        let mut readouts = Vec::with_capacity(2);
        for (branch, &u) in self.parts.branches.iter().zip(&inputs) {
            readouts.push(self.branch_forward(tape, store, batch, branch, u));
        }
        let cat = tape.concat_cols(&readouts);
        let h = self.parts.mlp[0].forward(tape, store, cat);
        let h = tape.tanh(h);
        let pred = self.parts.mlp[1].forward(tape, store, h);
        Forward {
            x,
            pred,
            volatile,
            stable,
        }
    }

    /// Per-timestep attribute attention (timestep `t` sees days `0..=t`),
    /// mean-pooled per entity, then entity-temporal attention over adjacent
    /// timesteps.
    fn branch_forward(&self, tape: &mut Tape, store: &ParamStore, batch: &Batch, branch: &Branch, u: Var) -> Var {
        let d = self.n_attributes;
        let first = match self.config.readout {
            // Each step reads raw per-timestep inputs, so the last output only
            // needs the last two timesteps.
            Readout::Last => INPUT_DAYS - 2,
            Readout::Mean => 0,
        };
        let w_a = tape.param(store, branch.w_a);
        let mut pooled = Vec::with_capacity(INPUT_DAYS - first);
        for t in first..INPUT_DAYS {
            let series = tape.series_expand(u, INPUT_DAYS, t + 1);
            let z = tape.matmul(series, w_a);
            let h = match &branch.agat {
                Some(layer) => layer.forward(tape, store, z, &batch.attribute_graph),
                None => z,
            };
            pooled.push(tape.group_mean_rows(h, d));
        }
        let mut acc: Option<Var> = None;
        for pair in pooled.windows(2) {
            let out = branch.etgat.forward(tape, store, &batch.block, pair[0], pair[1]);
            acc = Some(match acc {
                Some(a) => tape.add(a, out),
                None => out,
            });
        }
        let steps = pooled.len() - 1;
        let sum = acc.expect("at least two timesteps");
        if steps == 1 {
            sum
        } else {
            tape.scale(sum, 1.0 / steps as f64)
        }
    }

    /// Next-day KPI prediction per entity, in normalised units.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<f64>> {
        self.check_batch(batch)?;
        let mut tape = Tape::new();
        let f = self.forward_tape(&mut tape, &self.store, batch);
        Ok(tape.value(f.pred).as_slice().to_vec())
    }

    /// Row indices of the day-vectors of `entities` in `batch.x`.
    fn day_rows(entities: &[usize]) -> Arc<Vec<usize>> {
        Arc::new(
            entities
                .iter()
                .flat_map(|&e| e * INPUT_DAYS..(e + 1) * INPUT_DAYS)
                .collect(),
        )
    }

    /// Detached `(x, x^V)` day-vector pairs of the normal-target entities,
    /// the training data of the CLUB auxiliary net. `None` without K-Decom or
    /// normal entities.
    pub fn mi_samples(&self, batch: &Batch) -> Option<(Matrix, Matrix)> {
        let kdecom = self.parts.kdecom.as_ref()?;
        let normal = batch.normal_entities();
        if normal.is_empty() {
            return None;
        }
        let rows = Self::day_rows(&normal);
        let mut tape = Tape::new();
        let x = tape.constant(batch.x.select_rows(&rows));
        let (_, v) = kdecom.forward(&mut tape, &self.store, x);
        Some((tape.value(x).clone(), tape.value(v).clone()))
    }

    /// Builds the objective over the normal-target entities of `batch`.
    /// Abnormal-target entities still feed message passing but contribute no
    /// loss term. `None` when the batch has no normal target.
    pub(crate) fn objective(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        batch: &Batch,
        aux: Option<&ClubAux>,
    ) -> Result<Option<Objective>> {
        self.check_batch(batch)?;
        let normal = batch.normal_entities();
        if normal.is_empty() {
            return Ok(None);
        }
        let f = self.forward_tape(tape, store, batch);
        let idx = Arc::new(normal.clone());
        let pred = tape.select_rows(f.pred, Arc::clone(&idx));
        let target = tape.constant(Matrix::from_vec(
            normal.len(),
            1,
            normal.iter().map(|&e| batch.targets[e]).collect(),
        ));
        let diff = tape.sub(pred, target);
        let sq = tape.square(diff);
        let mse = tape.mean(sq);
        let mut total = mse;
        let mut breakdown = LossBreakdown {
            mse: tape.value(mse).item(),
            ..LossBreakdown::default()
        };

        if let (Some(s), Some(v)) = (f.stable, f.volatile) {
            let rows = Self::day_rows(&normal);
            let xs = tape.select_rows(f.x, Arc::clone(&rows));
            let ss = tape.select_rows(s, Arc::clone(&rows));
            let vs = tape.select_rows(v, Arc::clone(&rows));

            let aux = aux.ok_or_else(|| Error::InvalidConfig("objective needs the CLUB auxiliary net".into()))?;
            if rows.len() >= 2 {
                let (mu, lv) = aux.predict(tape.value(xs))?;
                let mi = club_on_tape(tape, vs, &mu, &lv);
                breakdown.mi_estimate = tape.value(mi).item();
                let term = tape.scale(mi, self.config.lambda_mi);
                total = tape.add(total, term);
            }

            let sum = tape.add(ss, vs);
            let resid = tape.sub(xs, sum);
            let sq = tape.square(resid);
            let per_day = tape.sum(sq);
            let recon = tape.scale(per_day, 1.0 / rows.len() as f64);
            breakdown.recon = tape.value(recon).item();
            let term = tape.scale(recon, self.config.mu_recon);
            total = tape.add(total, term);
        }
        breakdown.total = tape.value(total).item();
        Ok(Some(Objective { total, breakdown }))
    }

    /// Loss components on one batch; `None` when every target is abnormal.
    pub fn loss(&self, batch: &Batch, aux: Option<&ClubAux>) -> Result<Option<LossBreakdown>> {
        self.loss_at(&self.store, batch, aux)
    }

    /// As [`GraphAd::loss`], evaluated at `store` instead of the model's own
    /// parameters. `store` must share the model's layout.
    pub fn loss_at(&self, store: &ParamStore, batch: &Batch, aux: Option<&ClubAux>) -> Result<Option<LossBreakdown>> {
        let mut tape = Tape::new();
        Ok(self.objective(&mut tape, store, batch, aux)?.map(|o| o.breakdown))
    }

    /// Adds the objective's gradient on `batch` into `grads` (a store with
    /// this model's layout). Returns the loss, or `None` for an all-abnormal
    /// batch.
    pub fn accumulate_gradient(
        &self,
        store: &ParamStore,
        grads: &mut ParamStore,
        batch: &Batch,
        aux: Option<&ClubAux>,
    ) -> Result<Option<LossBreakdown>> {
        let mut tape = Tape::new();
        let Some(obj) = self.objective(&mut tape, store, batch, aux)? else {
            return Ok(None);
        };
        let g = tape.backward(obj.total);
        tape.accumulate_into(&g, grads);
        Ok(Some(obj.breakdown))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::autodiff::grad_check;
    use crate::graphad::{Prepared, Variant};
    use crate::synth::{generate, GenConfig};

    fn toy() -> Prepared {
        let ds = generate(&GenConfig {
            n_entities: 3,
            n_days: 70,
            seed: 3,
            ..GenConfig::default()
        })
        .unwrap();
        Prepared::new(&ds).unwrap()
    }

    fn model(variant: Variant) -> GraphAd {
        GraphAd::new(
            ModelConfig {
                variant,
                d_a: 4,
                ..ModelConfig::default()
            },
            8,
        )
        .unwrap()
    }

    fn aux(seed: u64) -> ClubAux {
        ClubAux::new(8, 8, 6, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn output_has_one_prediction_per_entity() {
        let p = toy();
        let m = model(Variant::Full);
        let y = m.predict(&p.train[0]).unwrap();
        assert_eq!(y.len(), 3);
        assert!(y.iter().all(|v| v.is_finite()));
        assert_eq!(y, m.predict(&p.train[0]).unwrap());
    }

    #[test]
    fn last_readout_equals_full_unroll_of_last_step() {
        // Recompute the last ET-GAT step from two full per-timestep passes.
        let p = toy();
        let m = model(Variant::Full);
        let b = &p.train[2];
        let mut tape = Tape::new();
        let x = tape.constant(b.x.clone());
        let (s, _) = m.parts.kdecom.unwrap().forward(&mut tape, &m.store, x);
        let br = &m.parts.branches[0];
        let w_a = tape.param(&m.store, br.w_a);
        let mut pooled = Vec::new();
        for t in 0..INPUT_DAYS {
            let series = tape.series_expand(s, INPUT_DAYS, t + 1);
            let z = tape.matmul(series, w_a);
            let h = br.agat.unwrap().forward(&mut tape, &m.store, z, &b.attribute_graph);
            pooled.push(tape.group_mean_rows(h, 8));
        }
        let mut last = None;
        for pair in pooled.windows(2) {
            last = Some(br.etgat.forward(&mut tape, &m.store, &b.block, pair[0], pair[1]));
        }
        let full = tape.value(last.unwrap()).clone();
        let mut tape2 = Tape::new();
        let x2 = tape2.constant(b.x.clone());
        let (s2, _) = m.parts.kdecom.unwrap().forward(&mut tape2, &m.store, x2);
        let quick = m.branch_forward(&mut tape2, &m.store, b, br, s2);
        assert_eq!(tape2.value(quick), &full);
    }

    #[test]
    fn lambda_changes_loss_but_not_predictions() {
        let p = toy();
        let a = model(Variant::Full);
        let b = GraphAd::from_store(
            ModelConfig {
                lambda_mi: 2.0 * a.config.lambda_mi,
                ..a.config.clone()
            },
            8,
            a.store.clone(),
        )
        .unwrap();
        let batch = &p.train[1];
        assert_eq!(a.predict(batch).unwrap(), b.predict(batch).unwrap());
        let q = aux(1);
        let la = a.loss(batch, Some(&q)).unwrap().unwrap();
        let lb = b.loss(batch, Some(&q)).unwrap().unwrap();
        assert_ne!(la.total, lb.total);
    }

    #[test]
    fn breakdown_recombines() {
        let p = toy();
        let m = model(Variant::Full);
        let q = aux(2);
        for batch in &p.train[..5] {
            let l = m.loss(batch, Some(&q)).unwrap().unwrap();
            let again = l.mse + m.config.lambda_mi * l.mi_estimate + m.config.mu_recon * l.recon;
            assert!((l.total - again).abs() < 1e-9);
            assert!(l.mse >= 0.0 && l.recon >= 0.0);
        }
    }

    #[test]
    fn zero_residual_with_zero_weights_gives_zero_loss() {
        let p = toy();
        let m = GraphAd::new(
            ModelConfig {
                variant: Variant::NoKdecom,
                lambda_mi: 0.0,
                mu_recon: 0.0,
                d_a: 4,
                ..ModelConfig::default()
            },
            8,
        )
        .unwrap();
        let mut batch = p.train[0].clone();
        batch.labels = vec![0; 3];
        let y = m.predict(&batch).unwrap();
        batch.targets = y;
        let l = m.loss(&batch, None).unwrap().unwrap();
        assert_eq!(l.total, 0.0);
        batch.targets[0] += 2.0;
        let l = m.loss(&batch, None).unwrap().unwrap();
        assert!((l.mse - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn abnormal_targets_contribute_no_gradient() {
        let p = toy();
        let m = model(Variant::Full);
        let q = aux(3);
        let mut batch = p.train[4].clone();
        batch.labels = vec![0, 1, 0];
        let grad = |b: &Batch| {
            let mut g = m.store.clone();
            g.zero_grads();
            m.accumulate_gradient(&m.store, &mut g, b, Some(&q)).unwrap();
            g
        };
        let before = grad(&batch);
        batch.targets[1] += 100.0;
        let after = grad(&batch);
        for id in before.ids() {
            assert_eq!(before.grad(id), after.grad(id));
        }
        batch.labels = vec![1, 1, 1];
        assert!(m.loss(&batch, Some(&q)).unwrap().is_none());
    }

    #[test]
    fn ablations_own_only_their_arrays() {
        let names = |v| model(v).store.names().map(str::to_string).collect::<Vec<_>>();
        assert!(!names(Variant::NoKdecom).iter().any(|n| n.starts_with("kdecom.")));
        assert!(names(Variant::Full).iter().any(|n| n.starts_with("kdecom.")));
        assert!(!names(Variant::NoAgat).iter().any(|n| n.starts_with("agat.") && n.ends_with("w_e")));
        assert!(!names(Variant::NoEntityGat).iter().any(|n| n.contains(".entity_")));
        assert!(!names(Variant::NoTemporalGat).iter().any(|n| n.contains(".temporal_")));
        let p = toy();
        for v in Variant::ALL {
            assert_eq!(model(v).predict(&p.train[0]).unwrap().len(), 3);
        }
    }

    #[test]
    fn joint_entity_permutation_permutes_predictions() {
        let p = toy();
        let m = model(Variant::Full);
        let b = &p.train[3];
        let perm = [2usize, 0, 1]; // old -> new
        let inv = [1usize, 2, 0]; // new -> old
        let d = m.n_attributes;
        let rows: Vec<usize> = inv.iter().flat_map(|&e| e * INPUT_DAYS..(e + 1) * INPUT_DAYS).collect();
        let attr_perm: Vec<usize> = (0..3 * d).map(|node| perm[node / d] * d + node % d).collect();
        let pb = Batch {
            start: b.start,
            x: b.x.select_rows(&rows),
            targets: inv.iter().map(|&e| b.targets[e]).collect(),
            labels: inv.iter().map(|&e| b.labels[e]).collect(),
            block: crate::graph::BlockAdjacency::new(
                Arc::new(b.block.entity_graph.permuted(&perm)),
                Arc::new(b.block.temporal_graph.permuted(&perm)),
            )
            .unwrap(),
            attribute_graph: Arc::new(b.attribute_graph.permuted(&attr_perm)),
        };
        let y = m.predict(b).unwrap();
        let py = m.predict(&pb).unwrap();
        for new in 0..3 {
            assert!((py[new] - y[inv[new]]).abs() < 1e-12);
        }
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let p = toy();
        let m = model(Variant::Full);
        let q = aux(4);
        let batch = p.train[5].clone();
        let report = grad_check(
            &m.store,
            |s| {
                let mut tape = Tape::new();
                let o = m.objective(&mut tape, s, &batch, Some(&q)).unwrap().unwrap();
                tape.value(o.total).item()
            },
            |s| {
                let snapshot = s.clone();
                m.accumulate_gradient(&snapshot, s, &batch, Some(&q)).unwrap();
            },
            250,
            1e-5,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        assert!(report.probes.len() >= 200);
        assert!(report.max_rel_error() < 1e-4, "{:?}", report.worst());
    }
}
