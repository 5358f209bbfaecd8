//! State-space model of an `m`-clock ensemble of order-`n` clocks.
//!
//! The ensemble state is laid out derivative-order-major: `x = (x_1, ..., x_n)`
//! where `x_i` stacks the `i`-th derivative of every clock, so clock `j`'s
//! order-`i` component lives at index `i * m + j` (both zero based). Every
//! Kronecker product in this crate (`A ⊗ I_m`, `C ⊗ V̄`, `Q ⊗ I_m`, ...) follows
//! that convention.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Tolerance on `Σβ = 1`.
pub const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Model order and white-noise diffusion coefficients of one clock.
#[derive(Debug, Clone, PartialEq)]
pub struct ClockSpec {
    sigma: Vec<f64>,
}

impl ClockSpec {
    /// `sigma[i]` is the intensity of the white noise driving the `i`-th
    /// derivative; the order is `sigma.len()`.
    pub fn new(sigma: Vec<f64>) -> Result<Self> {
        if sigma.is_empty() {
            return Err(Error::InvalidOrder(0));
        }
        if let Some(channel) = sigma.iter().position(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::InvalidSigma { clock: 0, channel });
        }
        Ok(ClockSpec { sigma })
    }

    pub fn order(&self) -> usize {
        self.sigma.len()
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }
}

/// Sampling intervals `τ_k`.
#[derive(Debug, Clone, PartialEq)]
pub enum Sampling {
    Constant(f64),
    /// One interval per step; entry `k` is `t_{k+1} - t_k`.
    PerStep(Vec<f64>),
}

impl Sampling {
    pub fn tau(&self, k: usize) -> f64 {
        match self {
            Sampling::Constant(t) => *t,
            Sampling::PerStep(ts) => ts[k],
        }
    }

    pub fn constant(&self) -> Option<f64> {
        match self {
            Sampling::Constant(t) => Some(*t),
            Sampling::PerStep(ts) => {
                let first = *ts.first()?;
                ts.iter().all(|t| *t == first).then_some(first)
            }
        }
    }

    /// Epoch of step `k`, with `t_0 = 0`.
    pub fn time(&self, k: usize) -> f64 {
        match self {
            Sampling::Constant(t) => *t * k as f64,
            Sampling::PerStep(ts) => ts[..k].iter().sum(),
        }
    }
}

/// Guess of the process-noise covariance used by the Kalman filter.
#[derive(Debug, Clone, PartialEq)]
pub enum CovGuess {
    /// Use the true `W[k]` of each step.
    True,
    Fixed(DMatrix<f64>),
}

/// Everything needed to simulate an ensemble and run both algorithms on it.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleConfig {
    pub clocks: Vec<ClockSpec>,
    /// Averaging weights `β`; must sum to one.
    pub weights: DVector<f64>,
    pub sampling: Sampling,
    /// Number of steps `T`; runs produce `T + 1` epochs.
    pub horizon: usize,
    pub w_guess: CovGuess,
    /// `R̂`, `(m-1) x (m-1)`.
    pub r_guess: DMatrix<f64>,
    /// Actual measurement-noise covariance `R`, `(m-1) x (m-1)`.
    pub r_true: DMatrix<f64>,
    /// Initial filter covariance is `p0 * I`.
    pub p0: f64,
    /// True initial state (the `α` parameters).
    pub x0: DVector<f64>,
    /// Initial prediction `x̂[0]`.
    pub x0_guess: DVector<f64>,
    /// When positive, the true initial state is drawn as
    /// `x0 + N(0, x0_variance * I)`.
    pub x0_variance: f64,
}

impl EnsembleConfig {
    /// Homogeneous ensemble with equal weights, `Ŵ = W`, `R = R̂ = 0`,
    /// `p0 = 1e-8` and a zero initial state.
    pub fn homogeneous(m: usize, clock: ClockSpec, tau: f64, horizon: usize) -> Self {
        let n = clock.order();
        let mm1 = m.saturating_sub(1);
        EnsembleConfig {
            clocks: vec![clock; m],
            weights: DVector::from_element(m, 1.0 / m as f64),
            sampling: Sampling::Constant(tau),
            horizon,
            w_guess: CovGuess::True,
            r_guess: DMatrix::zeros(mm1, mm1),
            r_true: DMatrix::zeros(mm1, mm1),
            p0: 1e-8,
            x0: DVector::zeros(n * m),
            x0_guess: DVector::zeros(n * m),
            x0_variance: 0.0,
        }
    }

    /// Sets `R = R̂ = r I`.
    pub fn with_measurement_variance(mut self, r: f64) -> Self {
        let mm1 = self.m() - 1;
        self.r_true = DMatrix::identity(mm1, mm1) * r;
        self.r_guess = self.r_true.clone();
        self
    }

    pub fn m(&self) -> usize {
        self.clocks.len()
    }

    pub fn n(&self) -> usize {
        self.clocks.first().map_or(0, ClockSpec::order)
    }

    pub fn dim(&self) -> usize {
        self.n() * self.m()
    }

    pub fn tau(&self, k: usize) -> f64 {
        self.sampling.tau(k)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m();
        if m < 2 {
            return Err(Error::TooFewClocks(m));
        }
        let n = self.n();
        for (j, c) in self.clocks.iter().enumerate() {
            if c.order() != n {
                return Err(Error::MixedOrders {
                    clock: j,
                    expected: n,
                    found: c.order(),
                });
            }
            if let Some(channel) = c.sigma.iter().position(|s| !s.is_finite() || *s < 0.0) {
                return Err(Error::InvalidSigma { clock: j, channel });
            }
        }
        check_len("weights", m, self.weights.len())?;
        check_weights(self.weights.as_slice())?;
        match &self.sampling {
            Sampling::Constant(t) => check_tau(*t)?,
            Sampling::PerStep(ts) => {
                if ts.len() < self.horizon {
                    return Err(Error::Dimension {
                        what: "sampling schedule",
                        expected: self.horizon,
                        found: ts.len(),
                    });
                }
                ts.iter().try_for_each(|t| check_tau(*t))?;
            }
        }
        let nm = n * m;
        if let CovGuess::Fixed(w) = &self.w_guess {
            check_square("w_guess", w, nm)?;
            check_psd("w_guess", w)?;
        }
        check_square("r_true", &self.r_true, m - 1)?;
        check_psd("r_true", &self.r_true)?;
        check_square("r_guess", &self.r_guess, m - 1)?;
        check_psd("r_guess", &self.r_guess)?;
        if !(self.p0 > 0.0 && self.p0.is_finite()) {
            return Err(Error::NotPositive("p0"));
        }
        check_len("x0", nm, self.x0.len())?;
        check_len("x0_guess", nm, self.x0_guess.len())?;
        if !(self.x0_variance >= 0.0 && self.x0_variance.is_finite()) {
            return Err(Error::InvalidArgument("x0_variance must be finite and nonnegative"));
        }
        Ok(())
    }

    /// `Ŵ` at step `k`.
    pub fn w_hat(&self, k: usize) -> Result<DMatrix<f64>> {
        match &self.w_guess {
            CovGuess::True => ensemble_noise_cov(&self.clocks, self.tau(k)),
            CovGuess::Fixed(w) => Ok(w.clone()),
        }
    }

    /// True when every clock has the same diffusion coefficients.
    pub fn is_homogeneous(&self) -> bool {
        self.clocks.windows(2).all(|w| w[0] == w[1])
    }
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension { what, expected, found })
    }
}

fn check_square(what: &'static str, a: &DMatrix<f64>, dim: usize) -> Result<()> {
    check_len(what, dim, a.nrows())?;
    check_len(what, dim, a.ncols())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}

pub(crate) fn check_weights(beta: &[f64]) -> Result<()> {
    let sum: f64 = beta.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL || beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::WeightsSum(sum));
    }
    Ok(())
}

/// Symmetric within `1e-12` relative and no eigenvalue below
/// `-1e-12 * max(|λ|)`.
pub fn is_psd(a: &DMatrix<f64>) -> bool {
    if a.nrows() != a.ncols() {
        return false;
    }
    if a.iter().any(|v| !v.is_finite()) || a.diagonal().iter().any(|v| *v < 0.0) {
        return false;
    }
    let scale = a.amax();
    if scale == 0.0 {
        return true;
    }
    if (a - a.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    let (_, eig) = equilibrated_eigen(a);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    eig.eigenvalues.iter().all(|v| *v >= -1e-12 * top)
}

fn check_psd(what: &'static str, a: &DMatrix<f64>) -> Result<()> {
    if is_psd(a) {
        Ok(())
    } else {
        Err(Error::NotPsd(what))
    }
}

/// Symmetric eigendecomposition of `D⁻¹ A D⁻¹` with `D = diag(√A_ii)`.
///
/// Covariances in this domain are graded (entries from `1e-20` down to
/// `1e-48`); equilibrating first keeps the small channels accurate.
/// Returns `(D, eigen)`; zero diagonal entries get `D_ii = 0`.
pub(crate) fn equilibrated_eigen(a: &DMatrix<f64>) -> (DVector<f64>, SymmetricEigen<f64, nalgebra::Dyn>) {
    let d = DVector::from_iterator(
        a.nrows(),
        a.diagonal().iter().map(|v| if *v > 0.0 { libm::sqrt(*v) } else { 0.0 }),
    );
    let sym = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
        if d[i] > 0.0 && d[j] > 0.0 {
            0.5 * (a[(i, j)] + a[(j, i)]) / (d[i] * d[j])
        } else if i == j {
            1.0
        } else {
            0.0
        }
    });
    (d, SymmetricEigen::new(sym))
}

/// `A(τ)`: upper triangular with `A_ij = τ^(j-i) / (j-i)!`.
pub fn transition_matrix(n: usize, tau: f64) -> Result<DMatrix<f64>> {
    if n < 1 {
        return Err(Error::InvalidOrder(n));
    }
    check_tau(tau)?;
    Ok(taylor_matrix(n, tau))
}

pub(crate) fn taylor_matrix(n: usize, tau: f64) -> DMatrix<f64> {
    let coeff = taylor_coefficients(n, tau);
    DMatrix::from_fn(n, n, |i, j| if j >= i { coeff[j - i] } else { 0.0 })
}

/// `τ^p / p!` for `p = 0..n`.
fn taylor_coefficients(n: usize, tau: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n);
    let mut c = 1.0;
    for p in 0..n {
        if p > 0 {
            c *= tau / p as f64;
        }
        out.push(c);
    }
    out
}

/// Covariance of one clock's discretized noise over an interval `τ`.
///
/// Entry `(a, b)` is `Σ_i σ_i ∫_0^τ A(s)_{a,i} A(s)_{b,i} ds`, integrated in
/// closed form: channel `i >= max(a, b)` contributes
/// `σ_i τ^(p+q+1) / (p! q! (p+q+1))` with `p = i - a`, `q = i - b`.
pub fn process_noise_cov(clock: &ClockSpec, tau: f64) -> Result<DMatrix<f64>> {
    check_tau(tau)?;
    let n = clock.order();
    let mut fact = vec![1.0_f64; 2 * n];
    for p in 1..2 * n {
        fact[p] = fact[p - 1] * p as f64;
    }
    Ok(DMatrix::from_fn(n, n, |a, b| {
        let mut acc = 0.0;
        for i in a.max(b)..n {
            let (p, q) = (i - a, i - b);
            let e = p + q + 1;
            acc += clock.sigma[i] * libm::pow(tau, e as f64) / (fact[p] * fact[q] * e as f64);
        }
        acc
    }))
}

/// True `W` for one step: per-clock `Qʲ(τ)` placed on the order blocks of
/// clock `j`; clocks are mutually independent.
pub fn ensemble_noise_cov(clocks: &[ClockSpec], tau: f64) -> Result<DMatrix<f64>> {
    let m = clocks.len();
    let n = clocks.first().map_or(0, ClockSpec::order);
    let mut w = DMatrix::zeros(n * m, n * m);
    for (j, clock) in clocks.iter().enumerate() {
        let q = process_noise_cov(clock, tau)?;
        for a in 0..n {
            for b in 0..n {
                w[(a * m + j, b * m + j)] = q[(a, b)];
            }
        }
    }
    Ok(w)
}

/// `C = [1 0 ... 0]`.
pub fn output_row(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(1, n, |_, j| if j == 0 { 1.0 } else { 0.0 })
}

/// `V̄ = [I_{m-1}, -1_{m-1}]`: differences against the reference clock `m`.
pub fn diff_matrix(m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(Error::TooFewClocks(m));
    }
    Ok(DMatrix::from_fn(m - 1, m, |i, j| {
        if j == m - 1 {
            -1.0
        } else if i == j {
            1.0
        } else {
            0.0
        }
    }))
}

/// Moore–Penrose pseudoinverse of `V̄`, `V̄ᵀ (I - 11ᵀ/m)`.
///
/// Row `j < m-1` is `e_j - 1/m`; the reference row is all `-1/m`.
pub fn pinv_diff(m: usize) -> Result<DMatrix<f64>> {
    if m < 2 {
        return Err(Error::TooFewClocks(m));
    }
    let inv_m = 1.0 / m as f64;
    Ok(DMatrix::from_fn(
        m,
        m - 1,
        |i, j| if i == j { 1.0 - inv_m } else { -inv_m },
    ))
}

/// The three projection-type matrices of the JST error analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    /// `P = 1 βᵀ`
    pub p: DMatrix<f64>,
    /// `P̄ = I - 1 βᵀ`
    pub p_bar: DMatrix<f64>,
    /// `V̄‡ = V̄† - 1 (β - 1/m)ᵀ e_{1:m-1}`
    pub v_ddag: DMatrix<f64>,
}

pub fn projections(beta: &DVector<f64>) -> Result<Projections> {
    let m = beta.len();
    if m < 2 {
        return Err(Error::TooFewClocks(m));
    }
    check_weights(beta.as_slice())?;
    let ones = DVector::from_element(m, 1.0);
    let p = &ones * beta.transpose();
    let p_bar = DMatrix::identity(m, m) - &p;
    let inv_m = 1.0 / m as f64;
    let pinv = pinv_diff(m)?;
    let v_ddag = DMatrix::from_fn(m, m - 1, |i, j| pinv[(i, j)] - (beta[j] - inv_m));
    Ok(Projections { p, p_bar, v_ddag })
}

impl Projections {
    /// `F‡ = [[C ⊗ P], [0, I_{n-1} ⊗ I_m]]`, the noise input map of the JST
    /// error recursion.
    pub fn f_ddag(&self, n: usize) -> DMatrix<f64> {
        let m = self.p.nrows();
        let mut out = DMatrix::zeros(n * m, n * m);
        out.view_mut((0, 0), (m, m)).copy_from(&self.p);
        for i in m..n * m {
            out[(i, i)] = 1.0;
        }
        out
    }
}

/// `e_{1:m-1} = [I_{m-1}; 0]`.
pub fn embed_measurement(m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m - 1, |i, j| if i == j { 1.0 } else { 0.0 })
}

/// Matrices of the ensemble system at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMatrices {
    /// `F[k] = A(τ_k) ⊗ I_m`
    pub f: DMatrix<f64>,
    /// `H = C ⊗ V̄`
    pub h: DMatrix<f64>,
    /// True process-noise covariance `W[k]`.
    pub w: DMatrix<f64>,
}

pub fn ensemble_matrices(cfg: &EnsembleConfig, k: usize) -> Result<EnsembleMatrices> {
    let (n, m) = (cfg.n(), cfg.m());
    let a = transition_matrix(n, cfg.tau(k))?;
    let f = a.kronecker(&DMatrix::identity(m, m));
    let h = measurement_matrix(n, m)?;
    let w = ensemble_noise_cov(&cfg.clocks, cfg.tau(k))?;
    Ok(EnsembleMatrices { f, h, w })
}

/// `H = C ⊗ V̄`.
pub fn measurement_matrix(n: usize, m: usize) -> Result<DMatrix<f64>> {
    Ok(output_row(n).kronecker(&diff_matrix(m)?))
}

/// Observable subsystem of the Kalman canonical decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableSystem {
    /// `F_o[k] = A(τ_k) ⊗ I_{m-1}`
    pub f_o: DMatrix<f64>,
    /// `H_o = C ⊗ I_{m-1}`
    pub h_o: DMatrix<f64>,
    /// `W_o = (I_n ⊗ V̄) Ŵ (I_n ⊗ V̄)ᵀ`
    pub w_o: DMatrix<f64>,
}

pub fn observable_decomp(cfg: &EnsembleConfig, k: usize) -> Result<ObservableSystem> {
    let (n, m) = (cfg.n(), cfg.m());
    let a = transition_matrix(n, cfg.tau(k))?;
    Ok(ObservableSystem {
        f_o: a.kronecker(&DMatrix::identity(m - 1, m - 1)),
        h_o: output_row(n).kronecker(&DMatrix::identity(m - 1, m - 1)),
        w_o: diff_congruence(&cfg.w_hat(k)?, n, m),
    })
}

/// `(I_n ⊗ V̄) x`: per order block, each clock minus the reference clock.
pub fn observable_part(x: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
    DVector::from_fn(n * (m - 1), |r, _| {
        let (a, i) = (r / (m - 1), r % (m - 1));
        x[a * m + i] - x[a * m + m - 1]
    })
}

/// `(1/m) (I_n ⊗ 1ᵀ) x`: per order block, the clock average.
pub fn unobservable_part(x: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
    DVector::from_fn(n, |a, _| x.rows(a * m, m).sum() / m as f64)
}

/// `x = (I_n ⊗ V̄†) ξ_o + (I_n ⊗ 1) ξ_ō`.
pub fn reconstruct(xi_o: &DVector<f64>, xi_obar: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
    let inv_m = 1.0 / m as f64;
    DVector::from_fn(n * m, |r, _| {
        let (a, j) = (r / m, r % m);
        let block = xi_o.rows(a * (m - 1), m - 1);
        let mean = block.sum() * inv_m;
        let own = if j < m - 1 { block[j] } else { 0.0 };
        own - mean + xi_obar[a]
    })
}

/// `(I_n ⊗ V̄) M (I_n ⊗ V̄)ᵀ`, computed by differencing rows and columns.
pub fn diff_congruence(w: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    let rows = diff_rows(w, n, m);
    diff_rows(&rows.transpose(), n, m).transpose()
}

/// `(I_n ⊗ V̄) M`.
pub(crate) fn diff_rows(w: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n * (m - 1), w.ncols(), |r, c| {
        let (a, i) = (r / (m - 1), r % (m - 1));
        w[(a * m + i, c)] - w[(a * m + m - 1, c)]
    })
}

/// `(1/m) (I_n ⊗ 1ᵀ) M`.
pub(crate) fn mean_rows(w: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    let inv_m = 1.0 / m as f64;
    DMatrix::from_fn(n, w.ncols(), |a, c| {
        let mut s = 0.0;
        for j in 0..m {
            s += w[(a * m + j, c)];
        }
        s * inv_m
    })
}

/// `Q` such that `w = Q ⊗ I_m`, if one exists within `rel_tol * max|w|`.
pub fn kronecker_factor(w: &DMatrix<f64>, n: usize, m: usize, rel_tol: f64) -> Option<DMatrix<f64>> {
    if w.nrows() != n * m || w.ncols() != n * m {
        return None;
    }
    let q = DMatrix::from_fn(n, n, |a, b| w[(a * m, b * m)]);
    let expected = q.kronecker(&DMatrix::identity(m, m));
    let tol = rel_tol * w.amax();
    ((w - expected).amax() <= tol).then_some(q)
}

/// `y ← (A ⊗ I_m) y` in place, for a block upper triangular `A`.
pub(crate) fn apply_transition(a: &DMatrix<f64>, m: usize, x: &mut [f64]) {
    let n = a.nrows();
    for row in 0..n {
        for j in 0..m {
            let mut acc = x[row * m + j];
            for col in row + 1..n {
                acc += a[(row, col)] * x[col * m + j];
            }
            x[row * m + j] = acc;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn trapezoid_q(sigma: &[f64], tau: f64, steps: usize) -> DMatrix<f64> {
        // Quadrature of Σ_i σ_i A(s)_{a,i} A(s)_{b,i} over [0, τ].
        let n = sigma.len();
        let h = tau / steps as f64;
        let mut acc = DMatrix::zeros(n, n);
        for s in 0..=steps {
            let t = s as f64 * h;
            let a = taylor_matrix(n, t);
            let wgt = if s == 0 || s == steps { 0.5 } else { 1.0 };
            for i in 0..n {
                let col = a.column(i);
                acc += (col * col.transpose()) * (sigma[i] * wgt * h);
            }
        }
        acc
    }

    #[test]
    fn transition_matrix_examples() {
        let a = transition_matrix(2, 0.1).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]));
        let a = transition_matrix(3, 1.0).unwrap();
        assert_eq!(
            a,
            DMatrix::from_row_slice(3, 3, &[1.0, 1.0, 0.5, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0])
        );
        assert_eq!(transition_matrix(1, 5.0).unwrap(), DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn transition_matrix_rejects_bad_input() {
        assert_eq!(transition_matrix(0, 1.0), Err(Error::InvalidOrder(0)));
        assert_eq!(transition_matrix(2, 0.0), Err(Error::InvalidTau(0.0)));
        assert!(transition_matrix(2, -1.0).is_err());
        assert!(transition_matrix(2, f64::NAN).is_err());
    }

    #[test]
    fn process_noise_white_pm_channel() {
        let q = process_noise_cov(&ClockSpec::new(vec![1.0, 0.0]).unwrap(), 2.0).unwrap();
        assert_eq!(q, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn process_noise_matches_quadrature() {
        // Frozen from the trapezoid oracle with 10^4 panels.
        let q = process_noise_cov(&ClockSpec::new(vec![0.0, 1.0]).unwrap(), 1.0).unwrap();
        let oracle = trapezoid_q(&[0.0, 1.0], 1.0, 10_000);
        assert_relative_eq!(q, oracle, epsilon = 1e-8);
        assert_relative_eq!(
            q,
            DMatrix::from_row_slice(2, 2, &[1.0 / 3.0, 0.5, 0.5, 1.0]),
            epsilon = 1e-15
        );

        let q = process_noise_cov(&ClockSpec::new(vec![0.0, 0.0, 1.0]).unwrap(), 1.0).unwrap();
        let oracle = trapezoid_q(&[0.0, 0.0, 1.0], 1.0, 10_000);
        assert_relative_eq!(q, oracle, epsilon = 1e-8);
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[
                1.0 / 20.0,
                1.0 / 8.0,
                1.0 / 6.0,
                1.0 / 8.0,
                1.0 / 3.0,
                0.5,
                1.0 / 6.0,
                0.5,
                1.0,
            ],
        );
        assert_relative_eq!(q, expected, epsilon = 1e-15);
    }

    #[test]
    fn process_noise_mixed_channels_against_quadrature() {
        let sigma = [0.7, 0.2, 0.05];
        let q = process_noise_cov(&ClockSpec::new(sigma.to_vec()).unwrap(), 1.7).unwrap();
        let oracle = trapezoid_q(&sigma, 1.7, 20_000);
        // trapezoid error is O(h^2) on smooth polynomials
        assert_relative_eq!(q, oracle, max_relative = 1e-7);
    }

    #[test]
    fn ensemble_matrices_small_cases() {
        let cfg = EnsembleConfig::homogeneous(2, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 1);
        let em = ensemble_matrices(&cfg, 0).unwrap();
        assert_eq!(em.f, DMatrix::identity(2, 2));
        assert_eq!(em.h, DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));

        let cfg = EnsembleConfig::homogeneous(2, ClockSpec::new(vec![1.0, 1.0]).unwrap(), 0.5, 1);
        let em = ensemble_matrices(&cfg, 0).unwrap();
        let expected = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        assert_eq!(em.f, expected);
        assert_eq!(em.h, DMatrix::from_row_slice(1, 4, &[1.0, -1.0, 0.0, 0.0]));
    }

    #[test]
    fn homogeneous_noise_is_kronecker() {
        let clock = ClockSpec::new(vec![0.3, 0.02, 0.001]).unwrap();
        let cfg = EnsembleConfig::homogeneous(4, clock.clone(), 0.7, 1);
        let w = ensemble_matrices(&cfg, 0).unwrap().w;
        let q = process_noise_cov(&clock, 0.7).unwrap();
        assert_eq!(w, q.kronecker(&DMatrix::identity(4, 4)));
        assert_eq!(kronecker_factor(&w, 3, 4, 0.0), Some(q));
    }

    #[test]
    fn heterogeneous_noise_is_block_diagonal_by_clock() {
        let clocks = vec![
            ClockSpec::new(vec![1.0, 0.5]).unwrap(),
            ClockSpec::new(vec![2.0, 0.1]).unwrap(),
            ClockSpec::new(vec![0.3, 0.0]).unwrap(),
        ];
        let w = ensemble_noise_cov(&clocks, 1.0).unwrap();
        for (j, c) in clocks.iter().enumerate() {
            let q = process_noise_cov(c, 1.0).unwrap();
            for a in 0..2 {
                for b in 0..2 {
                    assert_eq!(w[(a * 3 + j, b * 3 + j)], q[(a, b)]);
                }
            }
        }
        assert_eq!(w[(0, 1)], 0.0);
        assert_eq!(w[(0, 4)], 0.0);
        assert!(kronecker_factor(&w, 2, 3, 1e-12).is_none());
    }

    fn check_moore_penrose(m: usize) {
        let v = diff_matrix(m).unwrap();
        let p = pinv_diff(m).unwrap();
        let tol = 1e-12;
        assert_relative_eq!(&v * &p * &v, v.clone(), epsilon = tol);
        assert_relative_eq!(&p * &v * &p, p.clone(), epsilon = tol);
        let vp = &v * &p;
        let pv = &p * &v;
        assert_relative_eq!(vp.transpose(), vp, epsilon = tol);
        assert_relative_eq!(pv.transpose(), pv, epsilon = tol);
    }

    #[test]
    fn pinv_diff_examples() {
        assert_eq!(diff_matrix(2).unwrap(), DMatrix::from_row_slice(1, 2, &[1.0, -1.0]));
        assert_eq!(pinv_diff(2).unwrap(), DMatrix::from_row_slice(2, 1, &[0.5, -0.5]));
        let expected = DMatrix::from_row_slice(3, 2, &[2.0, -1.0, -1.0, 2.0, -1.0, -1.0]) / 3.0;
        assert_relative_eq!(pinv_diff(3).unwrap(), expected, epsilon = 1e-15);
        for m in 2..=20 {
            check_moore_penrose(m);
        }
        assert_eq!(diff_matrix(1), Err(Error::TooFewClocks(1)));
        assert_eq!(pinv_diff(0), Err(Error::TooFewClocks(0)));
    }

    #[test]
    fn projections_equal_weights() {
        let pr = projections(&DVector::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(pr.p, DMatrix::from_element(2, 2, 0.5));
        assert!(projections(&DVector::from_vec(vec![0.5, 0.6])).is_err());
    }

    #[test]
    fn projection_identities_for_skewed_weights() {
        let beta = DVector::from_vec(vec![0.250, 0.375, 0.125, 0.125, 0.125]);
        let pr = projections(&beta).unwrap();
        let v = diff_matrix(5).unwrap();
        let e = embed_measurement(5);
        assert!((beta.transpose() * &pr.v_ddag).amax() < 1e-15);
        assert_relative_eq!(&pr.p_bar * &e * &v, pr.p_bar.clone(), epsilon = 1e-15);
        assert_relative_eq!(beta.transpose() * &pr.p, beta.transpose(), epsilon = 1e-15);
        let n = 3;
        let lhs = DMatrix::identity(n, n).kronecker(&beta.transpose()) * pr.f_ddag(n);
        assert_relative_eq!(
            lhs,
            DMatrix::identity(n, n).kronecker(&beta.transpose()),
            epsilon = 1e-15
        );
    }

    #[test]
    fn observable_decomp_first_order() {
        let cfg = EnsembleConfig::homogeneous(3, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 1);
        let obs = observable_decomp(&cfg, 0).unwrap();
        assert_eq!(obs.f_o, DMatrix::identity(2, 2));
        assert_eq!(obs.h_o, DMatrix::identity(2, 2));
    }

    #[test]
    fn observable_noise_of_kronecker_guess() {
        let clock = ClockSpec::new(vec![0.4, 0.1]).unwrap();
        let cfg = EnsembleConfig::homogeneous(4, clock.clone(), 0.3, 1);
        let obs = observable_decomp(&cfg, 0).unwrap();
        let q = process_noise_cov(&clock, 0.3).unwrap();
        let v = diff_matrix(4).unwrap();
        assert_relative_eq!(obs.w_o, q.kronecker(&(&v * v.transpose())), epsilon = 1e-15);
        // generic congruence agrees with the structured one
        let iv = DMatrix::identity(2, 2).kronecker(&v);
        let w = cfg.w_hat(0).unwrap();
        assert_relative_eq!(obs.w_o, &iv * w * iv.transpose(), epsilon = 1e-15);
    }

    #[test]
    fn config_validation_names_the_problem() {
        let clock = ClockSpec::new(vec![1.0, 1.0]).unwrap();
        let mut cfg = EnsembleConfig::homogeneous(3, clock, 1.0, 10);
        assert!(cfg.validate().is_ok());
        cfg.weights[0] = 0.5;
        assert!(matches!(cfg.validate(), Err(Error::WeightsSum(_))));
        let mut cfg = EnsembleConfig::homogeneous(1, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 10);
        assert_eq!(cfg.validate(), Err(Error::TooFewClocks(1)));
        cfg = EnsembleConfig::homogeneous(2, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 10);
        cfg.clocks[1] = ClockSpec::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::MixedOrders { .. })));
        cfg = EnsembleConfig::homogeneous(2, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 10);
        cfg.r_true = DMatrix::from_element(1, 1, -1.0);
        assert_eq!(cfg.validate(), Err(Error::NotPsd("r_true")));
        cfg = EnsembleConfig::homogeneous(2, ClockSpec::new(vec![1.0]).unwrap(), 1.0, 10);
        cfg.sampling = Sampling::PerStep(vec![1.0; 5]);
        assert!(matches!(cfg.validate(), Err(Error::Dimension { .. })));
        assert!(ClockSpec::new(vec![1.0, -1.0]).is_err());
        assert!(ClockSpec::new(vec![]).is_err());
    }

    #[test]
    fn transition_applies_in_place() {
        let a = transition_matrix(3, 0.7).unwrap();
        let m = 4;
        let x = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let expected = a.kronecker(&DMatrix::identity(m, m)) * &x;
        let mut y = x.as_slice().to_vec();
        apply_transition(&a, m, &mut y);
        assert_relative_eq!(DVector::from_vec(y), expected, epsilon = 1e-15);
    }
}
