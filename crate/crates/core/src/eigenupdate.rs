//! Streaming estimate of the dominant singular triplet of a batch gradient.
//!
//! A layer sees samples `(x_j, δ_j)` whose mean outer product `G = (1/n) Σ δ_j x_jᵀ`
//! is the batch gradient. [`EigenState`] keeps a right estimate `X` (dim b),
//! a left estimate `D` (dim a) and a signed scale `σ²` and folds each sample
//! in with running-average weights `j/(j+1)` and `1/(j+1)`:
//!
//! ```text
//! X  ← w X  + c · x (δ·D)/|D|
//! D  ← w D  + c · δ (x·X)/|X|          (X already updated)
//! σ² ← w σ² + c · (x·X)/|X| · (δ·D)/|D|  (X, D already updated)
//! ```
//!
//! `σ²` converges to the top singular value `s₁ = u₁ᵀ G v₁`, and the applied
//! weight change is `-η σ² D̂ X̂ᵀ`. Either vector may come out anti-parallel to
//! the true one; when that happens the other vector or `σ²` flips with it, so
//! the product keeps the correct sign.
//!
//! At a batch boundary [`EigenState::finalize`] exports the normalized
//! triplet and keeps `(X, D, σ²)` as the prior of the next batch, counted as
//! one sample (`j = 1`).
//!
//! [`TaylorState`] is the division-free first-order variant with a fixed
//! step `ξ`, valid once `|X|` and `|D|` are near one.

use crate::error::{check_dim, Error, Result};
use crate::linalg::{self, dot_unchecked, norm, SvdResult, Vector};
use crate::network::GradSample;

/// Norm band enforced on the first-order variant.
pub const TAYLOR_NORM_BAND: (f64, f64) = (0.5, 2.0);

/// Outcome of feeding one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ingest {
    Accepted,
    /// `x = 0` or `δ = 0`: the sample carries no gradient and is ignored.
    Skipped,
}

/// Unit singular-vector estimates and the signed scale.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenTriplet {
    pub x_hat: Vector,
    pub d_hat: Vector,
    pub sigma_sq: f64,
}

impl EigenTriplet {
    /// The rank-1 matrix `σ² D̂ X̂ᵀ`.
    pub fn to_matrix(&self) -> linalg::Matrix {
        let mut m = linalg::outer(&self.d_hat, &self.x_hat);
        m.scale(self.sigma_sq);
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EigenState {
    x: Vector,
    d: Vector,
    sigma_sq: f64,
    /// Samples' worth of evidence in the running averages.
    j: u64,
    /// Completed batches.
    batch: u64,
    /// Samples accepted since the last finalize.
    pending: u64,
    warm: bool,
}

impl EigenState {
    /// Cold state for a layer with `rows` outputs (a) and `cols` inputs (b).
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            x: Vector::zeros(cols),
            d: Vector::zeros(rows),
            sigma_sq: 0.0,
            j: 0,
            batch: 0,
            pending: 0,
            warm: false,
        }
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    pub fn d(&self) -> &Vector {
        &self.d
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn j(&self) -> u64 {
        self.j
    }

    pub fn batch(&self) -> u64 {
        self.batch
    }

    pub fn pending(&self) -> u64 {
        self.pending
    }

    pub fn is_warm(&self) -> bool {
        self.warm
    }

    /// Scalars held by the estimator: `X`, `D`, `σ²` and the two counters.
    pub fn aux_scalars(&self) -> usize {
        self.x.len() + self.d.len() + 3
    }

    pub fn ingest_sample(&mut self, sample: &GradSample) -> Result<Ingest> {
        self.ingest(&sample.x, &sample.delta)
    }

    pub fn ingest(&mut self, x: &[f64], delta: &[f64]) -> Result<Ingest> {
        check_dim("EigenState::ingest x", self.x.len(), x.len())?;
        check_dim("EigenState::ingest delta", self.d.len(), delta.len())?;
        let xn = norm(x);
        let dn = norm(delta);
        if !(xn.is_finite() && dn.is_finite()) {
            return Err(Error::NonFinite("gradient sample"));
        }
        if xn == 0.0 || dn == 0.0 {
            return Ok(Ingest::Skipped);
        }
        if !self.warm {
            self.seed_from(x, delta, xn, dn);
            self.pending += 1;
            return Ok(Ingest::Accepted);
        }

        let jf = self.j as f64;
        let w = jf / (jf + 1.0);
        let c = 1.0 / (jf + 1.0);

        let d_norm = norm(&self.d);
        if d_norm == 0.0 {
            self.seed_from(x, delta, xn, dn);
            self.pending += 1;
            return Ok(Ingest::Accepted);
        }
        let err_align = dot_unchecked(delta, &self.d) / d_norm;
        let gain = c * err_align;
        for (xi, &si) in self.x.iter_mut().zip(x) {
            *xi = w * *xi + gain * si;
        }

        let x_norm = norm(&self.x);
        if x_norm == 0.0 {
            self.seed_from(x, delta, xn, dn);
            self.pending += 1;
            return Ok(Ingest::Accepted);
        }
        let act_align = dot_unchecked(x, &self.x) / x_norm;
        let gain = c * act_align;
        for (di, &ei) in self.d.iter_mut().zip(delta) {
            *di = w * *di + gain * ei;
        }

        let d_norm = norm(&self.d);
        if d_norm == 0.0 {
            self.seed_from(x, delta, xn, dn);
            self.pending += 1;
            return Ok(Ingest::Accepted);
        }
        let err_align = dot_unchecked(delta, &self.d) / d_norm;
        self.sigma_sq = w * self.sigma_sq + c * act_align * err_align;
        self.j += 1;
        self.pending += 1;
        Ok(Ingest::Accepted)
    }

    /// First sample: `X = x|δ|`, `D = δ|x|`, `σ² = |x||δ|`.
    fn seed_from(&mut self, x: &[f64], delta: &[f64], xn: f64, dn: f64) {
        for (xi, &si) in self.x.iter_mut().zip(x) {
            *xi = si * dn;
        }
        for (di, &ei) in self.d.iter_mut().zip(delta) {
            *di = ei * xn;
        }
        self.sigma_sq = xn * dn;
        self.j = 1;
        self.warm = true;
    }

    /// Normalized snapshot of the running estimate, if any.
    pub fn snapshot(&self) -> Option<EigenTriplet> {
        if !self.warm {
            return None;
        }
        Some(EigenTriplet {
            x_hat: self.x.normalized()?,
            d_hat: self.d.normalized()?,
            sigma_sq: self.sigma_sq,
        })
    }

    /// Closes the batch: returns the triplet and keeps the state as the next prior.
    pub fn finalize(&mut self) -> Result<EigenTriplet> {
        if self.pending == 0 {
            return Err(Error::State("finalize called with no samples ingested in this batch"));
        }
        let triplet = self
            .snapshot()
            .ok_or(Error::State("estimate collapsed to a zero vector"))?;
        self.j = 1;
        self.pending = 0;
        self.batch += 1;
        Ok(triplet)
    }
}

/// Distances between an estimated triplet and the exact leading triple.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvergenceError {
    pub eps_x: f64,
    pub eps_d: f64,
    pub eps_sigma: f64,
}

/// `ε_X = 1 - |X̂·v₁|`, `ε_D = 1 - |D̂·u₁|`, `ε_σ = 1 - |s₁/σ²|` (1 when `σ² = 0`).
pub fn convergence_error(est: &EigenTriplet, truth: &SvdResult) -> Result<ConvergenceError> {
    if truth.rank() == 0 {
        return Err(Error::State("reference decomposition has no singular triple"));
    }
    check_dim("convergence_error x", truth.v[0].len(), est.x_hat.len())?;
    check_dim("convergence_error d", truth.u[0].len(), est.d_hat.len())?;
    let eps_x = 1.0 - dot_unchecked(&est.x_hat, &truth.v[0]).abs();
    let eps_d = 1.0 - dot_unchecked(&est.d_hat, &truth.u[0]).abs();
    let eps_sigma = if est.sigma_sq == 0.0 {
        1.0
    } else {
        1.0 - (truth.s[0] / est.sigma_sq).abs()
    };
    Ok(ConvergenceError { eps_x, eps_d, eps_sigma })
}

/// Whether the applied update has the sign of the true leading term.
///
/// Returns `None` unless both vectors are clearly aligned (`|cos| > 0.5`)
/// with their true counterparts.
pub fn sign_consistent(est: &EigenTriplet, truth: &SvdResult) -> Option<bool> {
    let cd = dot_unchecked(&est.d_hat, truth.u.first()?);
    let cx = dot_unchecked(&est.x_hat, truth.v.first()?);
    if cd.abs() > 0.5 && cx.abs() > 0.5 {
        Some(cd * cx * est.sigma_sq > 0.0)
    } else {
        None
    }
}

/// First-order (division-free) estimator with step `xi`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaylorState {
    x: Vector,
    d: Vector,
    sigma_sq: f64,
    xi: f64,
    warm: bool,
    pending: u64,
}

impl TaylorState {
    pub fn new(rows: usize, cols: usize, xi: f64) -> Result<Self> {
        if !(xi >= 0.0 && xi.is_finite()) {
            return Err(Error::Config(alloc::format!("xi must be finite and nonnegative, got {xi}")));
        }
        Ok(Self {
            x: Vector::zeros(cols),
            d: Vector::zeros(rows),
            sigma_sq: 0.0,
            xi,
            warm: false,
            pending: 0,
        })
    }

    /// Starts from explicit unit vectors.
    pub fn from_triplet(t: &EigenTriplet, xi: f64) -> Result<Self> {
        let mut s = Self::new(t.d_hat.len(), t.x_hat.len(), xi)?;
        s.x = t.x_hat.clone();
        s.d = t.d_hat.clone();
        s.sigma_sq = t.sigma_sq;
        s.warm = true;
        s.check_band()?;
        Ok(s)
    }

    pub fn x(&self) -> &Vector {
        &self.x
    }

    pub fn d(&self) -> &Vector {
        &self.d
    }

    pub fn sigma_sq(&self) -> f64 {
        self.sigma_sq
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn pending(&self) -> u64 {
        self.pending
    }

    pub fn aux_scalars(&self) -> usize {
        self.x.len() + self.d.len() + 3
    }

    pub fn ingest_sample(&mut self, sample: &GradSample) -> Result<Ingest> {
        self.ingest(&sample.x, &sample.delta)
    }

    pub fn ingest(&mut self, x: &[f64], delta: &[f64]) -> Result<Ingest> {
        check_dim("TaylorState::ingest x", self.x.len(), x.len())?;
        check_dim("TaylorState::ingest delta", self.d.len(), delta.len())?;
        let xn = norm(x);
        let dn = norm(delta);
        if !(xn.is_finite() && dn.is_finite()) {
            return Err(Error::NonFinite("gradient sample"));
        }
        if xn == 0.0 || dn == 0.0 {
            return Ok(Ingest::Skipped);
        }
        if !self.warm {
            // Unit vectors are where the expansion is valid.
            for (xi, &si) in self.x.iter_mut().zip(x) {
                *xi = si / xn;
            }
            for (di, &ei) in self.d.iter_mut().zip(delta) {
                *di = ei / dn;
            }
            self.sigma_sq = xn * dn;
            self.warm = true;
            self.pending += 1;
            return Ok(Ingest::Accepted);
        }
        let act_align = dot_unchecked(x, &self.x);
        let err_align = dot_unchecked(delta, &self.d);
        let product = err_align * act_align;
        let xi = self.xi;
        let shrink = 1.0 - xi * product;
        for (xv, &s) in self.x.iter_mut().zip(x) {
            *xv = *xv * shrink + xi * err_align * s;
        }
        for (dv, &e) in self.d.iter_mut().zip(delta) {
            *dv = *dv * shrink + xi * act_align * e;
        }
        self.sigma_sq = self.sigma_sq * (1.0 - xi) + xi * product;
        self.pending += 1;
        self.check_band()?;
        Ok(Ingest::Accepted)
    }

    fn check_band(&self) -> Result<()> {
        let (lo, hi) = TAYLOR_NORM_BAND;
        let nx = norm(&self.x);
        let nd = norm(&self.d);
        if (lo..=hi).contains(&nx) && (lo..=hi).contains(&nd) {
            Ok(())
        } else {
            Err(Error::Drift {
                norm_x: nx,
                norm_d: nd,
                xi: self.xi,
            })
        }
    }

    pub fn snapshot(&self) -> Option<EigenTriplet> {
        if !self.warm {
            return None;
        }
        Some(EigenTriplet {
            x_hat: self.x.normalized()?,
            d_hat: self.d.normalized()?,
            sigma_sq: self.sigma_sq,
        })
    }

    /// Exports the normalized triplet; the state carries over unchanged.
    pub fn finalize(&mut self) -> Result<EigenTriplet> {
        if self.pending == 0 {
            return Err(Error::State("finalize called with no samples ingested in this batch"));
        }
        self.pending = 0;
        self.snapshot().ok_or(Error::State("estimate collapsed to a zero vector"))
    }
}

/// Convenience: run a whole slice of samples through a fresh state and finalize.
pub fn estimate(rows: usize, cols: usize, samples: &[GradSample]) -> Result<EigenTriplet> {
    let mut st = EigenState::new(rows, cols);
    for s in samples {
        st.ingest_sample(s)?;
    }
    st.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{svd, Matrix};
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn first_sample_sets_directions_exactly() {
        let x0 = [1.0, 2.0, 0.0, -1.0];
        let d0 = [0.5, -0.5, 2.0];
        let mut st = EigenState::new(3, 4);
        assert_eq!(st.ingest(&x0, &d0).unwrap(), Ingest::Accepted);
        let t = st.snapshot().unwrap();
        let xn = norm(&x0);
        let dn = norm(&d0);
        for (a, b) in t.x_hat.iter().zip(x0.iter()) {
            assert!((a - b / xn).abs() < 1e-15);
        }
        for (a, b) in t.d_hat.iter().zip(d0.iter()) {
            assert!((a - b / dn).abs() < 1e-15);
        }
        assert_eq!(st.sigma_sq(), xn * dn);
        assert_eq!(st.j(), 1);
    }

    #[test]
    fn zero_samples_are_skipped_without_advancing() {
        let mut st = EigenState::new(2, 3);
        assert_eq!(st.ingest(&[0.0; 3], &[1.0, 1.0]).unwrap(), Ingest::Skipped);
        assert_eq!(st.ingest(&[1.0, 0.0, 0.0], &[0.0, 0.0]).unwrap(), Ingest::Skipped);
        assert!(!st.is_warm());
        assert!(st.finalize().is_err());
        st.ingest(&[1.0, 0.0, 0.0], &[0.0, 1.0]).unwrap();
        let j = st.j();
        st.ingest(&[0.0; 3], &[1.0, 1.0]).unwrap();
        assert_eq!(st.j(), j);
    }

    #[test]
    fn ingest_rejects_bad_input() {
        let mut st = EigenState::new(2, 3);
        assert!(st.ingest(&[1.0, 2.0], &[1.0, 1.0]).is_err());
        assert!(st.ingest(&[1.0, 2.0, 3.0], &[1.0]).is_err());
        assert!(st.ingest(&[f64::NAN, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn stationary_stream_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randn_vec(&mut rng, 30);
        let d0 = randn_vec(&mut rng, 12);
        let truth = svd(&linalg::outer(&d0, &x0)).unwrap();
        let mut st = EigenState::new(12, 30);
        for _ in 0..1000 {
            st.ingest(&x0, &d0).unwrap();
        }
        let t = st.finalize().unwrap();
        let e = convergence_error(&t, &truth).unwrap();
        assert!(e.eps_x.abs() < 1e-6 && e.eps_d.abs() < 1e-6 && e.eps_sigma.abs() < 1e-6, "{e:?}");
        assert!((t.sigma_sq - norm(&x0) * norm(&d0)).abs() < 1e-6);
    }

    #[test]
    fn finalize_twice_is_an_error_and_carryover_keeps_state() {
        let mut st = EigenState::new(2, 2);
        st.ingest(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
        st.ingest(&[1.0, 0.1], &[0.0, 2.0]).unwrap();
        let x_before = st.x().clone();
        let t = st.finalize().unwrap();
        assert!((norm(&t.x_hat) - 1.0).abs() < 1e-12);
        assert!((norm(&t.d_hat) - 1.0).abs() < 1e-12);
        assert_eq!(st.x(), &x_before);
        assert_eq!(st.j(), 1);
        assert_eq!(st.batch(), 1);
        assert!(matches!(st.finalize(), Err(Error::State(_))));
    }

    #[test]
    fn convergence_error_examples() {
        let m = Matrix::from_rows(&[&[3.0, 1.0, 0.0], &[1.0, 2.0, 0.5]]);
        let truth = svd(&m).unwrap();
        let exact = EigenTriplet {
            x_hat: truth.v[0].clone(),
            d_hat: truth.u[0].clone(),
            sigma_sq: truth.s[0],
        };
        let e = convergence_error(&exact, &truth).unwrap();
        assert!(e.eps_x.abs() < 1e-12 && e.eps_d.abs() < 1e-12 && e.eps_sigma.abs() < 1e-12);

        let mut flipped = exact.clone();
        flipped.x_hat.scale(-1.0);
        flipped.d_hat.scale(-1.0);
        let e = convergence_error(&flipped, &truth).unwrap();
        assert!(e.eps_x.abs() < 1e-12 && e.eps_d.abs() < 1e-12);
        assert_eq!(sign_consistent(&flipped, &truth), Some(true));

        // One vector flipped together with σ² still yields the right update.
        let mut pair = exact.clone();
        pair.x_hat.scale(-1.0);
        pair.sigma_sq = -pair.sigma_sq;
        assert_eq!(sign_consistent(&pair, &truth), Some(true));
        pair.sigma_sq = -pair.sigma_sq;
        assert_eq!(sign_consistent(&pair, &truth), Some(false));

        let mut zero = exact.clone();
        zero.sigma_sq = 0.0;
        assert_eq!(convergence_error(&zero, &truth).unwrap().eps_sigma, 1.0);
        let empty = SvdResult { u: vec![], s: vec![], v: vec![] };
        assert!(convergence_error(&exact, &empty).is_err());
    }

    #[test]
    fn scale_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let samples: Vec<(Vec<f64>, Vec<f64>)> =
            (0..40).map(|_| (randn_vec(&mut rng, 9), randn_vec(&mut rng, 4))).collect();
        let run = |c: f64| {
            let mut st = EigenState::new(4, 9);
            for (x, d) in &samples {
                let d: Vec<f64> = d.iter().map(|v| v * c).collect();
                st.ingest(x, &d).unwrap();
            }
            st.finalize().unwrap()
        };
        let base = run(1.0);
        let scaled = run(3.5);
        assert!((scaled.sigma_sq - 3.5 * base.sigma_sq).abs() < 1e-10 * base.sigma_sq.abs().max(1.0));
        for (a, b) in base.x_hat.iter().zip(scaled.x_hat.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in base.d_hat.iter().zip(scaled.d_hat.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn taylor_frozen_at_zero_step() {
        let t = EigenTriplet {
            x_hat: Vector::new(vec![0.6, 0.8]),
            d_hat: Vector::new(vec![1.0, 0.0, 0.0]),
            sigma_sq: 0.7,
        };
        let mut st = TaylorState::from_triplet(&t, 0.0).unwrap();
        for _ in 0..10 {
            st.ingest(&[1.0, -2.0], &[0.3, 0.2, 0.1]).unwrap();
        }
        assert_eq!(st.x().as_slice(), t.x_hat.as_slice());
        assert_eq!(st.d().as_slice(), t.d_hat.as_slice());
        assert_eq!(st.sigma_sq(), 0.7);
    }

    #[test]
    fn taylor_sigma_is_geometric() {
        // x·X = 1 and δ·D = c along fixed unit directions.
        let c = 0.4;
        let xi = 0.01;
        let t = EigenTriplet {
            x_hat: Vector::new(vec![1.0, 0.0]),
            d_hat: Vector::new(vec![0.0, 1.0]),
            sigma_sq: 0.0,
        };
        let mut st = TaylorState::from_triplet(&t, xi).unwrap();
        // Fixed point of both vectors requires |x||δ| = product; choose x = X, δ = c D.
        for k in 1..=200 {
            st.ingest(&[1.0, 0.0], &[0.0, c]).unwrap();
            let expect = c * (1.0 - libm::pow(1.0 - xi, k as f64));
            assert!((st.sigma_sq() - expect).abs() < 1e-12, "step {k}");
        }
    }

    #[test]
    fn taylor_drift_guard_fires() {
        let t = EigenTriplet {
            x_hat: Vector::new(vec![1.0, 0.0]),
            d_hat: Vector::new(vec![1.0]),
            sigma_sq: 1.0,
        };
        let mut st = TaylorState::from_triplet(&t, 0.9).unwrap();
        let mut fired = false;
        for _ in 0..50 {
            if let Err(Error::Drift { .. }) = st.ingest(&[30.0, 5.0], &[20.0]) {
                fired = true;
                break;
            }
        }
        assert!(fired);
        assert!(TaylorState::new(1, 1, -1.0).is_err());
    }
}
