//! KPI decomposition into stable and volatile components, and the CLUB
//! upper bound on the mutual information between the input and the volatile
//! component.

use rand::Rng;

use crate::autodiff::{adam_step, AdamConfig, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::Dense;

pub const LOGVAR_CLAMP: f64 = 8.0;

/// Two stacked tanh layers per branch, hidden width `d`.
#[derive(Clone, Copy, Debug)]
pub struct KDecom {
    d: usize,
    stable: [Dense; 2],
    volatile: [Dense; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedSeries {
    pub stable: Matrix,
    pub volatile: Matrix,
}

impl KDecom {
    pub fn init(store: &mut ParamStore, d: usize, rng: &mut impl Rng) -> Self {
        let mut branch = |name: &str| {
            [
                Dense::init(store, &format!("kdecom.{name}.l1"), d, d, rng),
                Dense::init(store, &format!("kdecom.{name}.l2"), d, d, rng),
            ]
        };
        let stable = branch("stable");
        let volatile = branch("volatile");
        Self { d, stable, volatile }
    }

    pub fn lookup(store: &ParamStore) -> Result<Self> {
        let stable = [
            Dense::lookup(store, "kdecom.stable.l1")?,
            Dense::lookup(store, "kdecom.stable.l2")?,
        ];
        let volatile = [
            Dense::lookup(store, "kdecom.volatile.l1")?,
            Dense::lookup(store, "kdecom.volatile.l2")?,
        ];
        Ok(Self {
            d: stable[0].n_in(store),
            stable,
            volatile,
        })
    }

    pub fn n_attributes(&self) -> usize {
        self.d
    }

    /// Applies both branches row-wise to `x: [rows][d]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> (Var, Var) {
        let branch = |tape: &mut Tape, layers: &[Dense; 2]| {
            let h = layers[0].forward(tape, store, x);
            let h = tape.tanh(h);
            let h = layers[1].forward(tape, store, h);
            tape.tanh(h)
        };
        let s = branch(tape, &self.stable);
        let v = branch(tape, &self.volatile);
        (s, v)
    }
}

/// Splits a `[days][d]` window into its stable and volatile components.
pub fn decompose(window: &Matrix, store: &ParamStore, kdecom: &KDecom) -> Result<DecomposedSeries> {
    if window.cols() != kdecom.d {
        return Err(Error::Shape {
            op: "decompose",
            detail: format!("window has {} attributes, model expects {}", window.cols(), kdecom.d),
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(window.clone());
    let (s, v) = kdecom.forward(&mut tape, store, x);
    Ok(DecomposedSeries {
        stable: tape.value(s).clone(),
        volatile: tape.value(v).clone(),
    })
}

/// Variational diagonal Gaussian `q(v | x)` used by the CLUB estimator.
///
/// Holds its own parameter store and Adam state; it is trained on detached
/// `(x, v)` pairs and read as constants by the main objective.
#[derive(Clone, Debug)]
pub struct ClubAux {
    pub store: ParamStore,
    mean: [Dense; 2],
    logvar: [Dense; 2],
}

impl ClubAux {
    pub fn new(d_x: usize, d_v: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let mean = [
            Dense::init(&mut store, "club.mean.l1", d_x, hidden, rng),
            Dense::init(&mut store, "club.mean.l2", hidden, d_v, rng),
        ];
        let logvar = [
            Dense::init(&mut store, "club.logvar.l1", d_x, hidden, rng),
            Dense::init(&mut store, "club.logvar.l2", hidden, d_v, rng),
        ];
        Self { store, mean, logvar }
    }

    pub fn from_store(store: ParamStore) -> Result<Self> {
        let mean = [
            Dense::lookup(&store, "club.mean.l1")?,
            Dense::lookup(&store, "club.mean.l2")?,
        ];
        let logvar = [
            Dense::lookup(&store, "club.logvar.l1")?,
            Dense::lookup(&store, "club.logvar.l2")?,
        ];
        Ok(Self { store, mean, logvar })
    }

    pub fn d_x(&self) -> usize {
        self.mean[0].n_in(&self.store)
    }

    pub fn d_v(&self) -> usize {
        self.mean[1].n_out(&self.store)
    }

    fn forward(&self, tape: &mut Tape, x: Var) -> (Var, Var) {
        let net = |tape: &mut Tape, layers: &[Dense; 2]| {
            let h = layers[0].forward(tape, &self.store, x);
            let h = tape.sigmoid(h);
            layers[1].forward(tape, &self.store, h)
        };
        let mu = net(tape, &self.mean);
        let lv = net(tape, &self.logvar);
        let lv = tape.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }

    /// Mean and clamped log-variance of `q(v | x)` for each row of `x`.
    pub fn predict(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_x(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.forward(&mut tape, xv);
        Ok((tape.value(mu).clone(), tape.value(lv).clone()))
    }

    fn check_x(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.d_x() {
            return Err(Error::Shape {
                op: "club",
                detail: format!("x has {} columns, aux expects {}", x.cols(), self.d_x()),
            });
        }
        Ok(())
    }

    fn check_pair(&self, x: &Matrix, v: &Matrix) -> Result<()> {
        self.check_x(x)?;
        if v.cols() != self.d_v() {
            return Err(Error::Shape {
                op: "club",
                detail: format!("v has {} columns, aux expects {}", v.cols(), self.d_v()),
            });
        }
        if x.rows() != v.rows() {
            return Err(Error::LengthMismatch {
                left: x.rows(),
                right: v.rows(),
            });
        }
        Ok(())
    }

    /// Negative mean log-likelihood on tape; gradients reach aux params only.
    fn loss_on_tape(&self, tape: &mut Tape, x: &Matrix, v: &Matrix) -> Var {
        let xv = tape.constant(x.clone());
        let (mu, lv) = self.forward(tape, xv);
        let target = tape.constant(v.clone());
        let diff = tape.sub(target, mu);
        let sq = tape.square(diff);
        let neg_lv = tape.scale(lv, -1.0);
        let prec = tape.exp(neg_lv);
        let quad = tape.mul(sq, prec);
        let quad = tape.scale(quad, 0.5);
        let half_lv = tape.scale(lv, 0.5);
        let per = tape.add(quad, half_lv);
        let total = tape.sum(per);
        let b = x.rows() as f64;
        let d_v = v.cols() as f64;
        let mean = tape.scale(total, 1.0 / b);
        let c = tape.constant(Matrix::scalar(0.5 * d_v * (2.0 * std::f64::consts::PI).ln()));
        tape.add(mean, c)
    }

    /// One Adam step on the aux loss. Returns the loss before the step.
    pub fn train_step(&mut self, x: &Matrix, v: &Matrix, adam: &AdamConfig) -> Result<f64> {
        self.check_pair(x, v)?;
        if x.rows() == 0 {
            return Err(Error::BatchTooSmall { need: 1, got: 0 });
        }
        let mut tape = Tape::new();
        let loss = self.loss_on_tape(&mut tape, x, v);
        let value = tape.value(loss).item();
        let grads = tape.backward(loss);
        self.store.zero_grads();
        tape.accumulate_into(&grads, &mut self.store);
        adam_step(&mut self.store, adam)?;
        Ok(value)
    }
}

/// `−(1/B) Σ log q(v_i | x_i)`.
pub fn club_aux_loss(x: &Matrix, v: &Matrix, aux: &ClubAux) -> Result<f64> {
    aux.check_pair(x, v)?;
    if x.rows() == 0 {
        return Err(Error::BatchTooSmall { need: 1, got: 0 });
    }
    let mut tape = Tape::new();
    let loss = aux.loss_on_tape(&mut tape, x, v);
    Ok(tape.value(loss).item())
}

/// CLUB estimate `(1/B) Σ_i log q(v_i|x_i) − (1/B²) Σ_{i,j} log q(v_j|x_i)`.
pub fn club_upper_bound(x: &Matrix, v: &Matrix, aux: &ClubAux) -> Result<f64> {
    aux.check_pair(x, v)?;
    if x.rows() < 2 {
        return Err(Error::BatchTooSmall { need: 2, got: x.rows() });
    }
    let (mu, lv) = aux.predict(x)?;
    let mut tape = Tape::new();
    let vv = tape.constant(v.clone());
    let est = club_on_tape(&mut tape, vv, &mu, &lv);
    Ok(tape.value(est).item())
}

/// CLUB estimate as a differentiable function of `v`, with the aux outputs
/// `mu`, `logvar` held constant.
///
/// The all-pairs term only needs the column means of `v` and `v²`, so the
/// cost is linear in the batch size. Normalising constants cancel.
pub fn club_on_tape(tape: &mut Tape, v: Var, mu: &Matrix, logvar: &Matrix) -> Var {
    let b = tape.value(v).rows() as f64;
    let half_prec = logvar.map(|l| 0.5 * (-l).exp());
    let mu_c = tape.constant(mu.clone());
    let prec_c = tape.constant(half_prec.clone());

    let diff = tape.sub(v, mu_c);
    let sq = tape.square(diff);
    let pos = tape.mul(sq, prec_c);
    let pos = tape.sum(pos);

    let (rows, cols) = mu.shape();
    let mut c1 = Matrix::zeros(1, cols);
    let mut c2 = Matrix::zeros(1, cols);
    let mut c3 = 0.0;
    for r in 0..rows {
        for c in 0..cols {
            let p = half_prec[(r, c)];
            let m = mu[(r, c)];
            c1[(0, c)] += p;
            c2[(0, c)] += p * m;
            c3 += p * m * m;
        }
    }
    let m1 = tape.sum_rows(v);
    let m1 = tape.scale(m1, 1.0 / b);
    let v2 = tape.square(v);
    let m2 = tape.sum_rows(v2);
    let m2 = tape.scale(m2, 1.0 / b);
    let c1 = tape.constant(c1);
    let c2 = tape.constant(c2);
    let t1 = tape.mul(c1, m2);
    let t1 = tape.sum(t1);
    let t2 = tape.mul(c2, m1);
    let t2 = tape.sum(t2);
    let t2 = tape.scale(t2, -2.0);
    let c3 = tape.constant(Matrix::scalar(c3));
    let neg = tape.add(t1, t2);
    let neg = tape.add(neg, c3);

    let diff = tape.sub(neg, pos);
    tape.scale(diff, 1.0 / b)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    fn log_q(v: &[f64], mu: &[f64], lv: &[f64]) -> f64 {
        v.iter()
            .zip(mu)
            .zip(lv)
            .map(|((&v, &m), &l)| {
                -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * l - 0.5 * (v - m).powi(2) * (-l).exp()
            })
            .sum()
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let k = KDecom::init(&mut store, 5, &mut rng);
        let out = decompose(&Matrix::zeros(30, 5), &store, &k).unwrap();
        assert_eq!(out.stable.shape(), (30, 5));
        assert!(out.stable.as_slice().iter().all(|&x| x == 0.0));
        assert!(out.volatile.as_slice().iter().all(|&x| x == 0.0));
        assert!(decompose(&Matrix::zeros(30, 4), &store, &k).is_err());
    }

    #[test]
    fn decompose_is_row_local() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let k = KDecom::init(&mut store, 4, &mut rng);
        let x = random(30, 4, &mut rng);
        let perm: Vec<usize> = (0..30).rev().collect();
        let a = decompose(&x, &store, &k).unwrap();
        let b = decompose(&x.select_rows(&perm), &store, &k).unwrap();
        assert_eq!(a.stable.select_rows(&perm), b.stable);
        assert_eq!(a.volatile.select_rows(&perm), b.volatile);
    }

    #[test]
    fn estimator_matches_all_pairs_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let aux = ClubAux::new(3, 2, 6, &mut rng);
        let x = random(40, 3, &mut rng);
        let v = random(40, 2, &mut rng);
        let (mu, lv) = aux.predict(&x).unwrap();
        let b = x.rows();
        let mut pos = 0.0;
        let mut neg = 0.0;
        for i in 0..b {
            pos += log_q(v.row(i), mu.row(i), lv.row(i));
            for j in 0..b {
                neg += log_q(v.row(j), mu.row(i), lv.row(i));
            }
        }
        let oracle = pos / b as f64 - neg / (b * b) as f64;
        let got = club_upper_bound(&x, &v, &aux).unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn estimator_invariant_to_batch_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let aux = ClubAux::new(2, 2, 4, &mut rng);
        let x = random(25, 2, &mut rng);
        let v = random(25, 2, &mut rng);
        let perm: Vec<usize> = (0..25).map(|i| (i * 7) % 25).collect();
        let a = club_upper_bound(&x, &v, &aux).unwrap();
        let b = club_upper_bound(&x.select_rows(&perm), &v.select_rows(&perm), &aux).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let aux = ClubAux::new(1, 1, 4, &mut rng);
        let x = Matrix::zeros(1, 1);
        assert!(matches!(
            club_upper_bound(&x, &x, &aux),
            Err(Error::BatchTooSmall { need: 2, got: 1 })
        ));
        assert!(club_aux_loss(&x, &x, &aux).is_ok());
    }

    #[test]
    fn symmetric_pair_gives_positive_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut aux = ClubAux::new(1, 1, 8, &mut rng);
        let x = Matrix::from_vec(2, 1, vec![-1.0, 1.0]);
        for _ in 0..400 {
            aux.train_step(&x, &x, &AdamConfig::with_lr(0.05)).unwrap();
        }
        assert!(club_upper_bound(&x, &x, &aux).unwrap() > 0.0);
    }

    #[test]
    fn deterministic_target_saturates_at_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut aux = ClubAux::new(1, 1, 8, &mut rng);
        let x = random(64, 1, &mut rng);
        let v = x.map(|a| 0.5 * a);
        let adam = AdamConfig::with_lr(0.03);
        for _ in 0..3000 {
            aux.train_step(&x, &v, &adam).unwrap();
        }
        let floor = 0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * LOGVAR_CLAMP;
        let loss = club_aux_loss(&x, &v, &aux).unwrap();
        assert!(loss < floor + 0.5, "loss {loss}, floor {floor}");
        let (_, lv) = aux.predict(&x).unwrap();
        assert!(lv.as_slice().iter().all(|&l| l >= -LOGVAR_CLAMP));
    }

    #[test]
    fn aux_loss_gradient_ignores_main_parameters() {
        // The aux tape only registers aux arrays; a main store is untouched.
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut main = ParamStore::new();
        let _ = KDecom::init(&mut main, 2, &mut rng);
        let before = main.clone();
        let mut aux = ClubAux::new(2, 2, 4, &mut rng);
        let x = random(10, 2, &mut rng);
        aux.train_step(&x, &x, &AdamConfig::with_lr(0.01)).unwrap();
        assert!(main.values_equal(&before));
        for id in main.ids() {
            assert!(main.grad(id).as_slice().iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn true_conditional_gives_closed_form_bound() {
        // With q equal to the true conditional of a ρ-correlated Gaussian
        // pair, the estimator converges to ρ²/(1−ρ²).
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = 20_000;
        let x = random(b, 1, &mut rng);
        let noise = random(b, 1, &mut rng);
        let v = x.zip_map(&noise, |a, e| rho * a + (1.0 - rho * rho).sqrt() * e);
        let mu = x.map(|a| rho * a);
        let lv = Matrix::filled(b, 1, (1.0 - rho * rho).ln());
        let mut tape = Tape::new();
        let vv = tape.constant(v);
        let est = club_on_tape(&mut tape, vv, &mu, &lv);
        let est = tape.value(est).item();
        let expected = rho * rho / (1.0 - rho * rho);
        assert!((est - expected).abs() < 0.15, "{est} vs {expected}");
    }
}
