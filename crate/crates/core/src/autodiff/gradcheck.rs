use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::parallel;

/// Result of a finite-difference comparison at one coordinate.
#[derive(Clone, Debug)]
pub struct Probe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&Probe> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares analytic gradients with central differences on `probes`
/// randomly chosen coordinates (without replacement when possible).
///
/// `loss_fn` returns the loss; `grad_fn` fills the gradient slots of the
/// store it is handed (they are zeroed first).
pub fn grad_check<L, G>(
    params: &ParamStore,
    loss_fn: L,
    grad_fn: G,
    probes: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheckReport
where
    L: Fn(&ParamStore) -> f64 + Sync,
    G: Fn(&mut ParamStore),
{
    let mut analytic = params.clone();
    analytic.zero_grads();
    grad_fn(&mut analytic);

    let coords: Vec<(usize, usize)> = params
        .ids()
        .flat_map(|id| (0..params.value(id).len()).map(move |i| (id.0, i)))
        .collect();
    let picks: Vec<(usize, usize)> = if probes >= coords.len() {
        coords
    } else {
        rand::seq::index::sample(rng, coords.len(), probes)
            .into_iter()
            .map(|i| coords[i])
            .collect()
    };

    let probes = parallel::map(&picks, |&(pid, idx)| {
        let id = ParamId(pid);
        let mut plus = params.clone();
        plus.value_mut(id).as_mut_slice()[idx] += h;
        let mut minus = params.clone();
        minus.value_mut(id).as_mut_slice()[idx] -= h;
        let numeric = (loss_fn(&plus) - loss_fn(&minus)) / (2.0 * h);
        let a = analytic.grad(id).as_slice()[idx];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        Probe {
            param: params.name(id).to_string(),
            index: idx,
            analytic: a,
            numeric,
            rel_error: (a - numeric).abs() / denom,
        }
    });
    GradCheckReport { probes }
}
