//! Conventional Kalman filter time scale.
//!
//! Each step computes, in this order,
//! `K = P Hᵀ (H P Hᵀ + R̂)⁻¹`, `P⁺ = F (P - K H P) Fᵀ + Ŵ` and
//! `x̂⁺ = F x̂ + K (y - H x̂)`.
//!
//! Two realizations of the same filter are provided. [`CkfForm::Direct`]
//! runs it on the full ensemble state. [`CkfForm::Canonical`] runs it after
//! the change of coordinates `ξ = T x`, `T = [I_n ⊗ V̄; (1/m)(I_n ⊗ 1ᵀ)]`,
//! which splits the measurable clock differences from the unobservable
//! common mode. The two are algebraically identical; the canonical one keeps
//! the (structurally zero) common-mode gain exactly zero in floating point.

use alloc::boxed::Box;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::jst::check_trajectory;
use crate::model::{self, EnsembleConfig};
use crate::output::RunOutput;
use crate::simulate::Trajectory;

/// Full-state filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct CkfState {
    pub x_hat: DVector<f64>,
    pub p: DMatrix<f64>,
    /// Gain of the last step.
    pub k: DMatrix<f64>,
}

impl CkfState {
    /// `x̂[0] = x0_guess`, `P₀ = p0 I`.
    pub fn new(x0_guess: DVector<f64>, p0: f64, meas_dim: usize) -> Self {
        let dim = x0_guess.len();
        CkfState {
            x_hat: x0_guess,
            p: DMatrix::identity(dim, dim) * p0,
            k: DMatrix::zeros(dim, meas_dim),
        }
    }
}

/// Observable-subspace filter state.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsCkfState {
    pub xi_hat: DVector<f64>,
    pub p_hat: DMatrix<f64>,
    pub k_hat: DMatrix<f64>,
}

impl ObsCkfState {
    /// Initial conditions consistent with a full filter started at
    /// `(x̂₀, p0 I)`: `ξ̂ = (I ⊗ V̄) x̂₀`, `P̂ = p0 (I ⊗ V̄)(I ⊗ V̄)ᵀ`.
    pub fn consistent_with(x0_guess: &DVector<f64>, p0: f64, n: usize, m: usize) -> Self {
        let p_full = DMatrix::identity(n * m, n * m) * p0;
        ObsCkfState {
            xi_hat: model::observable_part(x0_guess, n, m),
            p_hat: model::diff_congruence(&p_full, n, m),
            k_hat: DMatrix::zeros(n * (m - 1), m - 1),
        }
    }
}

/// `K = P Hᵀ S⁻¹` through a Cholesky solve of `S = H P Hᵀ + R̂`.
fn gain(p: &DMatrix<f64>, h: &DMatrix<f64>, r_hat: &DMatrix<f64>, step: usize) -> Result<DMatrix<f64>> {
    let hp = h * p;
    let mut s = &hp * h.transpose() + r_hat;
    symmetrize(&mut s);
    let chol = s.cholesky().ok_or(Error::SingularInnovation { step })?;
    Ok(chol.solve(&hp).transpose())
}

pub(crate) fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

/// One filter step on generic matrices; returns the gain and innovation.
#[allow(clippy::too_many_arguments)]
fn kalman_step(
    x: &mut DVector<f64>,
    p: &mut DMatrix<f64>,
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
    y: &DVector<f64>,
    step: usize,
    joseph: bool,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let k = gain(p, h, r_hat, step)?;
    let inner = if joseph {
        let dim = p.nrows();
        let i_kh = DMatrix::identity(dim, dim) - &k * h;
        &i_kh * &*p * i_kh.transpose() + &k * r_hat * k.transpose()
    } else {
        &*p - &k * (h * &*p)
    };
    let mut next = f * inner * f.transpose() + w_hat;
    symmetrize(&mut next);
    *p = next;
    let innovation = y - h * &*x;
    *x = f * &*x + &k * &innovation;
    Ok((k, innovation))
}

/// One full-state step with `F[k]`, `H`, `Ŵ`, `R̂` and `y[k]`; returns the
/// innovation `y - H x̂`.
#[allow(clippy::too_many_arguments)]
pub fn ckf_step(
    state: &mut CkfState,
    f: &DMatrix<f64>,
    h: &DMatrix<f64>,
    w_hat: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
    y: &DVector<f64>,
    step: usize,
    joseph: bool,
) -> Result<DVector<f64>> {
    let (k, innov) = kalman_step(&mut state.x_hat, &mut state.p, f, h, w_hat, r_hat, y, step, joseph)?;
    state.k = k;
    Ok(innov)
}

/// One step of the observable-subspace filter with `F_o[k]`, `H_o`, `W_o`.
#[allow(clippy::too_many_arguments)]
pub fn obs_ckf_step(
    state: &mut ObsCkfState,
    f_o: &DMatrix<f64>,
    h_o: &DMatrix<f64>,
    w_o: &DMatrix<f64>,
    r_hat: &DMatrix<f64>,
    y: &DVector<f64>,
    step: usize,
) -> Result<DVector<f64>> {
    let (k, innov) = kalman_step(
        &mut state.xi_hat,
        &mut state.p_hat,
        f_o,
        h_o,
        w_o,
        r_hat,
        y,
        step,
        false,
    )?;
    state.k_hat = k;
    Ok(innov)
}

/// A covariance reduction applied to `P` after every covariance update.
pub trait CovarianceReduction {
    fn reduce(&self, p: &DMatrix<f64>) -> DMatrix<f64>;
}

impl<F> CovarianceReduction for F
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    fn reduce(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        self(p)
    }
}

/// Removes the common-mode part of `P` and puts back at most `bound` of its
/// trace: `P ← M P M + s (I_n ⊗ 1) C (I_n ⊗ 1ᵀ)` with
/// `M = I_n ⊗ (I_m - 11ᵀ/m)`, `C = (1/m²)(I_n ⊗ 1ᵀ) P (I_n ⊗ 1)` and
/// `s = min(1, bound / trace C)`.
///
/// Since `H M = H`, the gain is unaffected when the common mode of `P` is
/// uncorrelated with the rest (the equal-noise case).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommonModeProjection {
    pub n: usize,
    pub m: usize,
    pub bound: f64,
}

impl CommonModeProjection {
    pub fn new(n: usize, m: usize) -> Self {
        CommonModeProjection { n, m, bound: 0.0 }
    }
}

impl CovarianceReduction for CommonModeProjection {
    fn reduce(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let (n, m) = (self.n, self.m);
        let row_means = model::mean_rows(p, n, m);
        let c = model::mean_rows(&row_means.transpose(), n, m).transpose();
        let centered = DMatrix::from_fn(n * m, n * m, |r, col| p[(r, col)] - row_means[(r / m, col)]);
        let col_means = model::mean_rows(&centered.transpose(), n, m).transpose();
        let tr = c.trace();
        let s = if tr > 0.0 { (self.bound / tr).min(1.0) } else { 0.0 };
        let mut out = DMatrix::from_fn(n * m, n * m, |r, col| {
            centered[(r, col)] - col_means[(r, col / m)] + s * c[(r / m, col / m)]
        });
        symmetrize(&mut out);
        out
    }
}

/// Which realization of the filter to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CkfForm {
    /// The full-state recursion as written, on `x`.
    Direct,
    /// The same recursion in observable canonical coordinates.
    #[default]
    Canonical,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CkfOptions {
    pub form: CkfForm,
    /// Joseph-form covariance update instead of the plain one.
    pub joseph: bool,
    /// Record the largest eigenvalue of `P_k` each step.
    pub max_eigenvalue: bool,
}

/// A running filter in either form.
pub struct CkfFilter<'a> {
    cfg: &'a EnsembleConfig,
    opts: CkfOptions,
    inner: Inner,
    reduction: Option<&'a dyn CovarianceReduction>,
}

enum Inner {
    Direct {
        state: CkfState,
        h: DMatrix<f64>,
    },
    Canonical {
        xi: DVector<f64>,
        pi: DMatrix<f64>,
        k: DMatrix<f64>,
        h: DMatrix<f64>,
        /// `T⁻¹ = [I_n ⊗ V̄†, I_n ⊗ 1]`, for covariance reporting.
        t_inv: Box<DMatrix<f64>>,
    },
}

/// `T M Tᵀ` with `T = [I_n ⊗ V̄; (1/m)(I_n ⊗ 1ᵀ)]`, computed with
/// differences and means so structural zeros stay exact.
pub fn to_canonical_cov(w: &DMatrix<f64>, n: usize, m: usize) -> DMatrix<f64> {
    let no = n * (m - 1);
    let dr = model::diff_rows(w, n, m);
    let mr = model::mean_rows(w, n, m);
    let oo = model::diff_rows(&dr.transpose(), n, m).transpose();
    let ob = model::mean_rows(&dr.transpose(), n, m).transpose();
    let bb = model::mean_rows(&mr.transpose(), n, m).transpose();
    let mut out = DMatrix::zeros(n * m, n * m);
    out.view_mut((0, 0), (no, no)).copy_from(&oo);
    out.view_mut((0, no), (no, n)).copy_from(&ob);
    out.view_mut((no, 0), (n, no)).copy_from(&ob.transpose());
    out.view_mut((no, no), (n, n)).copy_from(&bb);
    out
}

/// `T x`.
pub fn to_canonical(x: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
    let o = model::observable_part(x, n, m);
    let b = model::unobservable_part(x, n, m);
    let mut out = DVector::zeros(n * m);
    out.rows_mut(0, o.len()).copy_from(&o);
    out.rows_mut(o.len(), n).copy_from(&b);
    out
}

/// `T⁻¹ ξ`.
pub fn from_canonical(xi: &DVector<f64>, n: usize, m: usize) -> DVector<f64> {
    let no = n * (m - 1);
    model::reconstruct(&xi.rows(0, no).into_owned(), &xi.rows(no, n).into_owned(), n, m)
}

fn canonical_transition(a: &DMatrix<f64>, m: usize) -> DMatrix<f64> {
    let n = a.nrows();
    let no = n * (m - 1);
    let mut f = DMatrix::zeros(n * m, n * m);
    f.view_mut((0, 0), (no, no))
        .copy_from(&a.kronecker(&DMatrix::<f64>::identity(m - 1, m - 1)));
    f.view_mut((no, no), (n, n)).copy_from(a);
    f
}

impl<'a> CkfFilter<'a> {
    pub fn new(
        cfg: &'a EnsembleConfig,
        opts: CkfOptions,
        reduction: Option<&'a dyn CovarianceReduction>,
    ) -> Result<Self> {
        cfg.validate()?;
        let (n, m) = (cfg.n(), cfg.m());
        let inner = match opts.form {
            CkfForm::Direct => Inner::Direct {
                state: CkfState::new(cfg.x0_guess.clone(), cfg.p0, m - 1),
                h: model::measurement_matrix(n, m)?,
            },
            CkfForm::Canonical => {
                if reduction.is_some() {
                    return Err(Error::InvalidArgument(
                        "covariance reduction applies to the direct form only",
                    ));
                }
                let no = n * (m - 1);
                let mut h = DMatrix::zeros(m - 1, n * m);
                h.view_mut((0, 0), (m - 1, m - 1)).fill_with_identity();
                let p_full = DMatrix::identity(n * m, n * m) * cfg.p0;
                let mut t_inv = DMatrix::zeros(n * m, n * m);
                let pinv = model::pinv_diff(m)?;
                for a in 0..n {
                    t_inv.view_mut((a * m, a * (m - 1)), (m, m - 1)).copy_from(&pinv);
                    for j in 0..m {
                        t_inv[(a * m + j, no + a)] = 1.0;
                    }
                }
                Inner::Canonical {
                    xi: to_canonical(&cfg.x0_guess, n, m),
                    pi: to_canonical_cov(&p_full, n, m),
                    k: DMatrix::zeros(n * m, m - 1),
                    h,
                    t_inv: Box::new(t_inv),
                }
            }
        };
        Ok(CkfFilter {
            cfg,
            opts,
            inner,
            reduction,
        })
    }

    /// Current prediction `x̂[k]` of the full state.
    pub fn x_hat(&self) -> DVector<f64> {
        match &self.inner {
            Inner::Direct { state, .. } => state.x_hat.clone(),
            Inner::Canonical { xi, .. } => from_canonical(xi, self.cfg.n(), self.cfg.m()),
        }
    }

    /// Current `P_k` in state coordinates.
    pub fn covariance(&self) -> DMatrix<f64> {
        match &self.inner {
            Inner::Direct { state, .. } => state.p.clone(),
            Inner::Canonical { pi, t_inv, .. } => {
                let mut p = &**t_inv * pi * t_inv.transpose();
                symmetrize(&mut p);
                p
            }
        }
    }

    /// Gain of the last step in state coordinates.
    pub fn gain(&self) -> DMatrix<f64> {
        match &self.inner {
            Inner::Direct { state, .. } => state.k.clone(),
            Inner::Canonical { k, t_inv, .. } => &**t_inv * k,
        }
    }

    /// Largest absolute common-mode gain entry, `max |(I_n ⊗ 1ᵀ) K|`.
    pub fn common_mode_gain(&self) -> f64 {
        let (n, m) = (self.cfg.n(), self.cfg.m());
        match &self.inner {
            Inner::Direct { state, .. } => (model::mean_rows(&state.k, n, m) * m as f64).amax(),
            Inner::Canonical { k, .. } => k.rows(n * (m - 1), n).amax() * m as f64,
        }
    }

    pub fn trace_p(&self) -> f64 {
        match &self.inner {
            Inner::Direct { state, .. } => state.p.trace(),
            Inner::Canonical { .. } => self.covariance().trace(),
        }
    }

    pub fn max_eig_p(&self) -> f64 {
        let p = self.covariance();
        SymmetricEigen::new(p).eigenvalues.max()
    }

    /// Advances from `k` to `k + 1` with `y[k]`; returns the innovation.
    pub fn step(&mut self, k: usize, y: &DVector<f64>) -> Result<DVector<f64>> {
        let cfg = self.cfg;
        let (n, m) = (cfg.n(), cfg.m());
        let a = model::transition_matrix(n, cfg.tau(k))?;
        let w_hat = cfg.w_hat(k)?;
        match &mut self.inner {
            Inner::Direct { state, h } => {
                let f = a.kronecker(&DMatrix::<f64>::identity(m, m));
                let innov = ckf_step(state, &f, h, &w_hat, &cfg.r_guess, y, k, self.opts.joseph)?;
                if let Some(red) = self.reduction {
                    state.p = red.reduce(&state.p);
                }
                Ok(innov)
            }
            Inner::Canonical { xi, pi, k: gain, h, .. } => {
                let f = canonical_transition(&a, m);
                let w_c = to_canonical_cov(&w_hat, n, m);
                let (kk, innov) = kalman_step(xi, pi, &f, h, &w_c, &cfg.r_guess, y, k, self.opts.joseph)?;
                *gain = kk;
                Ok(innov)
            }
        }
    }
}

/// Runs the filter over a stored trajectory. Step `k` reports `TA[k]`, the
/// residuals and `trace(P_k)` of the prediction `x̂[k]` made from
/// `y[0..k]`, then consumes `y[k]`.
pub fn ckf_run(
    cfg: &EnsembleConfig,
    traj: &Trajectory,
    opts: CkfOptions,
    reduction: Option<&dyn CovarianceReduction>,
) -> Result<RunOutput> {
    check_trajectory(cfg, traj)?;
    let m = cfg.m();
    let horizon = traj.horizon();
    let mut filter = CkfFilter::new(cfg, opts, reduction)?;
    let mut out = RunOutput::with_capacity(horizon + 1);
    out.trace_p.reserve(horizon + 1);
    for k in 0..=horizon {
        let x_hat = filter.x_hat();
        let x = &traj.states[k];
        let mut ta = Dd::ZERO;
        for i in 0..m {
            ta += (Dd::new(x[i]) - x_hat[i]) * cfg.weights[i];
        }
        out.ta.push(ta.value());
        out.residuals.push(DVector::from_fn(m, |i, _| x[i] - x_hat[i]));
        out.estimates.push(x_hat.rows(0, m).into_owned());
        out.trace_p.push(filter.trace_p());
        if opts.max_eigenvalue {
            out.max_eig_p.push(filter.max_eig_p());
        }
        if k < horizon {
            filter.step(k, &traj.measurements[k])?;
        }
    }
    Ok(out)
}

/// Gains of the canonical filter for `k = 0..steps` together with
/// `trace(P_k)`. They depend on the model alone, so Monte-Carlo paths can
/// share one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    gains: Vec<DMatrix<f64>>,
    traces: Vec<f64>,
}

impl GainSchedule {
    pub fn new(cfg: &EnsembleConfig, steps: usize) -> Result<Self> {
        let mut filter = CkfFilter::new(cfg, CkfOptions::default(), None)?;
        let dummy = DVector::zeros(cfg.m() - 1);
        let mut gains = Vec::with_capacity(steps);
        let mut traces = Vec::with_capacity(steps + 1);
        for k in 0..steps {
            traces.push(filter.trace_p());
            filter.step(k, &dummy)?;
            if let Inner::Canonical { k: gain, .. } = &filter.inner {
                gains.push(gain.clone());
            }
        }
        traces.push(filter.trace_p());
        Ok(GainSchedule { gains, traces })
    }

    pub fn steps(&self) -> usize {
        self.gains.len()
    }
}

/// [`ckf_run`] in canonical form with precomputed gains; bit-identical
/// estimates.
pub fn ckf_run_scheduled(cfg: &EnsembleConfig, traj: &Trajectory, schedule: &GainSchedule) -> Result<RunOutput> {
    check_trajectory(cfg, traj)?;
    let (n, m) = (cfg.n(), cfg.m());
    let horizon = traj.horizon();
    if schedule.steps() < horizon {
        return Err(Error::Dimension {
            what: "gain schedule",
            expected: horizon,
            found: schedule.steps(),
        });
    }
    let mut h = DMatrix::zeros(m - 1, n * m);
    h.view_mut((0, 0), (m - 1, m - 1)).fill_with_identity();
    let mut xi = to_canonical(&cfg.x0_guess, n, m);
    let mut f_tau = f64::NAN;
    let mut f = DMatrix::zeros(0, 0);
    let mut out = RunOutput::with_capacity(horizon + 1);
    for k in 0..=horizon {
        let x_hat = from_canonical(&xi, n, m);
        let x = &traj.states[k];
        let mut ta = Dd::ZERO;
        for i in 0..m {
            ta += (Dd::new(x[i]) - x_hat[i]) * cfg.weights[i];
        }
        out.ta.push(ta.value());
        out.residuals.push(DVector::from_fn(m, |i, _| x[i] - x_hat[i]));
        out.estimates.push(x_hat.rows(0, m).into_owned());
        out.trace_p.push(schedule.traces[k]);
        if k < horizon {
            let tau = cfg.tau(k);
            if tau != f_tau {
                f = canonical_transition(&model::transition_matrix(n, tau)?, m);
                f_tau = tau;
            }
            let innovation = &traj.measurements[k] - &h * &xi;
            xi = &f * &xi + &schedule.gains[k] * &innovation;
        }
    }
    Ok(out)
}

/// Innovation sequences of the observable-subspace filter.
pub fn obs_ckf_run(cfg: &EnsembleConfig, traj: &Trajectory) -> Result<Vec<DVector<f64>>> {
    check_trajectory(cfg, traj)?;
    cfg.validate()?;
    let (n, m) = (cfg.n(), cfg.m());
    let mut state = ObsCkfState::consistent_with(&cfg.x0_guess, cfg.p0, n, m);
    let horizon = traj.horizon();
    let mut innovations = Vec::with_capacity(horizon);
    for k in 0..horizon {
        let obs = model::observable_decomp(cfg, k)?;
        let innov = obs_ckf_step(
            &mut state,
            &obs.f_o,
            &obs.h_o,
            &obs.w_o,
            &cfg.r_guess,
            &traj.measurements[k],
            k,
        )?;
        innovations.push(innov);
    }
    Ok(innovations)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ClockSpec;
    use crate::simulate::{run_truth, NoiseSeeds};
    use alloc::vec;
    use approx::assert_relative_eq;

    #[test]
    fn gain_of_two_clock_first_order_system() {
        for r in [0.0, 0.5, 3.0] {
            let mut st = CkfState::new(DVector::zeros(2), 1.0, 1);
            let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
            let f = DMatrix::identity(2, 2);
            let rr = DMatrix::from_element(1, 1, r);
            ckf_step(
                &mut st,
                &f,
                &h,
                &DMatrix::zeros(2, 2),
                &rr,
                &DVector::from_element(1, 1.0),
                0,
                false,
            )
            .unwrap();
            let expected = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]) / (2.0 + r);
            assert_relative_eq!(st.k, expected, epsilon = 1e-15);
        }
    }

    #[test]
    fn huge_measurement_noise_means_pure_prediction() {
        let mut st = CkfState::new(DVector::from_vec(vec![1.0, 2.0]), 1.0, 1);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let rr = DMatrix::from_element(1, 1, 1e30);
        ckf_step(
            &mut st,
            &DMatrix::identity(2, 2),
            &h,
            &DMatrix::zeros(2, 2),
            &rr,
            &DVector::from_element(1, 5.0),
            0,
            false,
        )
        .unwrap();
        assert!(st.k.amax() < 1e-29);
        assert_relative_eq!(st.x_hat, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-28);
    }

    #[test]
    fn singular_innovation_is_reported() {
        let mut st = CkfState::new(DVector::zeros(2), 1.0, 1);
        st.p = DMatrix::zeros(2, 2);
        let h = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let err = ckf_step(
            &mut st,
            &DMatrix::identity(2, 2),
            &h,
            &DMatrix::zeros(2, 2),
            &DMatrix::zeros(1, 1),
            &DVector::zeros(1),
            7,
            false,
        );
        assert_eq!(err, Err(Error::SingularInnovation { step: 7 }));
    }

    #[test]
    fn scalar_observable_riccati_fixed_point() {
        // n=1, m=2: W_o = 2q, H_o = 1, F_o = 1
        let q = 0.3;
        let r = 0.7;
        let mut st = ObsCkfState {
            xi_hat: DVector::zeros(1),
            p_hat: DMatrix::from_element(1, 1, 1.0),
            k_hat: DMatrix::zeros(1, 1),
        };
        let one = DMatrix::from_element(1, 1, 1.0);
        let wo = DMatrix::from_element(1, 1, 2.0 * q);
        let rr = DMatrix::from_element(1, 1, r);
        for k in 0..200 {
            obs_ckf_step(&mut st, &one, &one, &wo, &rr, &DVector::zeros(1), k).unwrap();
        }
        let qq = 2.0 * q;
        let expected = (qq + libm::sqrt(qq * qq + 4.0 * qq * r)) / 2.0;
        // oracle: plain fixed-point iteration of the scalar map
        let mut p = 1.0;
        for _ in 0..10_000 {
            p = p - p * p / (p + r) + qq;
        }
        assert!((p - expected).abs() < 1e-12);
        assert!((st.p_hat[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn observable_covariance_contracts_without_process_noise() {
        let h = DMatrix::identity(2, 2);
        let f = DMatrix::identity(2, 2);
        let mut st = ObsCkfState {
            xi_hat: DVector::zeros(2),
            p_hat: DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]),
            k_hat: DMatrix::zeros(2, 2),
        };
        let mut prev = st.p_hat.clone();
        for k in 0..100 {
            obs_ckf_step(
                &mut st,
                &f,
                &h,
                &DMatrix::zeros(2, 2),
                &DMatrix::identity(2, 2),
                &DVector::zeros(2),
                k,
            )
            .unwrap();
            let diff = &prev - &st.p_hat;
            let eig = SymmetricEigen::new(diff).eigenvalues;
            assert!(eig.min() >= -1e-15, "step {k}");
            prev = st.p_hat.clone();
        }
    }

    fn unit_cfg(m: usize, n: usize, horizon: usize) -> EnsembleConfig {
        let sigma: Vec<f64> = (0..n).map(|i| 0.5 / (i + 1) as f64).collect();
        let mut cfg =
            EnsembleConfig::homogeneous(m, ClockSpec::new(sigma).unwrap(), 1.0, horizon).with_measurement_variance(0.8);
        cfg.p0 = 1.0;
        cfg
    }

    #[test]
    fn forms_agree() {
        let mut cfg = unit_cfg(4, 2, 300);
        cfg.weights = DVector::from_vec(vec![0.1, 0.2, 0.3, 0.4]);
        let tr = run_truth(&cfg, NoiseSeeds::new(1, 2)).unwrap();
        let direct = ckf_run(
            &cfg,
            &tr,
            CkfOptions {
                form: CkfForm::Direct,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        let canon = ckf_run(&cfg, &tr, CkfOptions::default(), None).unwrap();
        let scale = direct.max_abs_ta();
        for k in 0..=300 {
            assert!((direct.ta[k] - canon.ta[k]).abs() <= 1e-9 * scale);
            assert!((direct.trace_p[k] - canon.trace_p[k]).abs() <= 1e-9 * direct.trace_p[k]);
        }
    }

    #[test]
    fn joseph_form_agrees_with_plain_form() {
        let cfg = unit_cfg(3, 2, 100);
        let tr = run_truth(&cfg, NoiseSeeds::new(3, 4)).unwrap();
        let plain = ckf_run(&cfg, &tr, CkfOptions::default(), None).unwrap();
        let joseph = ckf_run(
            &cfg,
            &tr,
            CkfOptions {
                joseph: true,
                ..Default::default()
            },
            None,
        )
        .unwrap();
        for k in 0..=100 {
            assert!((plain.ta[k] - joseph.ta[k]).abs() <= 1e-9 * plain.max_abs_ta());
        }
    }

    #[test]
    fn canonical_common_mode_gain_is_exactly_zero() {
        let cfg = unit_cfg(5, 3, 200);
        let tr = run_truth(&cfg, NoiseSeeds::new(5, 6)).unwrap();
        let mut f = CkfFilter::new(&cfg, CkfOptions::default(), None).unwrap();
        for k in 0..200 {
            f.step(k, &tr.measurements[k]).unwrap();
            assert_eq!(f.common_mode_gain(), 0.0);
        }
    }

    #[test]
    fn zero_noise_perfect_start_gives_zero_ta() {
        let mut cfg = EnsembleConfig::homogeneous(3, ClockSpec::new(vec![0.0, 0.0]).unwrap(), 1.0, 50);
        cfg.x0 = DVector::from_vec(vec![1.0, 2.0, 3.0, 0.1, 0.2, 0.3]);
        cfg.x0_guess = cfg.x0.clone();
        // R̂ = 0 with W = 0 would make the innovation covariance collapse
        cfg.r_guess = DMatrix::identity(2, 2) * 1e-6;
        let tr = run_truth(&cfg, NoiseSeeds::new(1, 1)).unwrap();
        for form in [CkfForm::Direct, CkfForm::Canonical] {
            let out = ckf_run(
                &cfg,
                &tr,
                CkfOptions {
                    form,
                    ..Default::default()
                },
                None,
            )
            .unwrap();
            let worst = out.ta.iter().fold(0.0_f64, |a, t| a.max(t.abs()));
            assert!(worst < 1e-13, "{form:?} {worst}");
        }
    }

    #[test]
    fn reduction_leaves_common_mode_free_matrix_alone() {
        let red = CommonModeProjection::new(2, 3);
        let inner = DMatrix::from_row_slice(
            4,
            4,
            &[
                4.0, 1.0, 0.5, 0.0, 1.0, 3.0, 0.0, 0.2, 0.5, 0.0, 2.0, 0.1, 0.0, 0.2, 0.1, 1.0,
            ],
        );
        let pinv = DMatrix::<f64>::identity(2, 2).kronecker(&model::pinv_diff(3).unwrap());
        let p = &pinv * inner * pinv.transpose();
        assert_relative_eq!(red.reduce(&p), p, epsilon = 1e-14);
    }

    #[test]
    fn reduction_lowers_trace_of_identity() {
        let red = CommonModeProjection::new(2, 4);
        let p = DMatrix::identity(8, 8);
        let out = red.reduce(&p);
        assert!((out.trace() - 6.0).abs() < 1e-14);
        let bounded = CommonModeProjection { bound: 0.1, ..red }.reduce(&p);
        assert!(bounded.trace() < 8.0 && bounded.trace() > out.trace());
    }

    #[test]
    fn closures_are_reductions() {
        let halve = |p: &DMatrix<f64>| p * 0.5;
        let r: &dyn CovarianceReduction = &halve;
        assert_eq!(r.reduce(&DMatrix::identity(2, 2)), DMatrix::identity(2, 2) * 0.5);
    }

    #[test]
    fn scheduled_run_is_bit_identical() {
        let mut cfg = unit_cfg(4, 2, 120);
        cfg.weights = DVector::from_vec(vec![0.4, 0.3, 0.2, 0.1]);
        let tr = run_truth(&cfg, NoiseSeeds::new(8, 9)).unwrap();
        let sched = GainSchedule::new(&cfg, 120).unwrap();
        assert_eq!(
            ckf_run_scheduled(&cfg, &tr, &sched).unwrap(),
            ckf_run(&cfg, &tr, CkfOptions::default(), None).unwrap()
        );
        assert!(ckf_run_scheduled(&cfg, &tr, &GainSchedule::new(&cfg, 10).unwrap()).is_err());
    }

    #[test]
    fn reduction_with_canonical_form_is_rejected() {
        let cfg = unit_cfg(3, 1, 5);
        let red = CommonModeProjection::new(1, 3);
        assert!(CkfFilter::new(&cfg, CkfOptions::default(), Some(&red)).is_err());
    }
}
