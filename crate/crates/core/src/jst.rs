//! The generalized JST time-scale algorithm: predict every clock with its own
//! model, then replace the predicted time deviations by their weighted
//! average corrected with the raw clock-difference measurements.
//!
//! `x̂[0]` is the configured guess; steps `k = 1..=T` predict from `k - 1`
//! and update with `y[k]`.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::model::{self, EnsembleConfig};
use crate::output::RunOutput;
use crate::simulate::Trajectory;

/// Predicted ensemble state. The time deviations meet the raw measurements
/// and are held in double-double precision; the higher-order blocks only
/// ever see the transition and stay in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct JstState {
    dev: Vec<Dd>,
    higher: Vec<f64>,
    n: usize,
    m: usize,
}

impl JstState {
    pub fn new(x0_guess: &DVector<f64>, n: usize, m: usize) -> Self {
        assert_eq!(x0_guess.len(), n * m, "initial guess must have n*m entries");
        JstState {
            dev: x0_guess.iter().take(m).map(|v| Dd::new(*v)).collect(),
            higher: x0_guess.iter().skip(m).copied().collect(),
            n,
            m,
        }
    }

    pub fn x_hat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.n * self.m,
            self.dev.iter().map(|v| v.value()).chain(self.higher.iter().copied()),
        )
    }

    /// Block 1: predicted time deviations of every clock.
    pub fn deviations(&self) -> DVector<f64> {
        DVector::from_iterator(self.m, self.dev.iter().map(|v| v.value()))
    }

    /// `x̂ ← (A ⊗ I_m) x̂`; returns the predicted deviations `d`.
    pub fn predict(&mut self, a: &DMatrix<f64>) -> DVector<f64> {
        self.advance(a);
        self.deviations()
    }

    fn advance(&mut self, a: &DMatrix<f64>) {
        let (n, m) = (self.n, self.m);
        for j in 0..m {
            let mut inc = 0.0;
            for col in 1..n {
                inc += a[(0, col)] * self.higher[(col - 1) * m + j];
            }
            self.dev[j] = self.dev[j] + inc;
        }
        for row in 1..n {
            for j in 0..m {
                let mut acc = self.higher[(row - 1) * m + j];
                for col in row + 1..n {
                    acc += a[(row, col)] * self.higher[(col - 1) * m + j];
                }
                self.higher[(row - 1) * m + j] = acc;
            }
        }
    }

    /// Weighting and update of the time deviations with `y[k]`; blocks
    /// `2..n` are left untouched.
    pub fn weight_update(&mut self, y: &DVector<f64>, beta: &DVector<f64>) {
        self.update(y, beta, weight_defect(beta));
    }

    fn update(&mut self, y: &DVector<f64>, beta: &DVector<f64>, defect: f64) {
        let m = self.m;
        let mut reference = self.dev[m - 1] * defect;
        for i in 0..m {
            let yi = if i + 1 < m { y[i] } else { 0.0 };
            reference += (self.dev[i] - yi) * beta[i];
        }
        for i in 0..m - 1 {
            self.dev[i] = reference + y[i];
        }
        self.dev[m - 1] = reference;
    }

    /// `TA = Σ βᵢ (x₁ᵢ - x̂₁ᵢ)` against the true state `x`.
    pub fn ensemble_error(&self, x: &DVector<f64>, beta: &DVector<f64>) -> f64 {
        let m = self.m;
        let mut acc = (-self.dev[m - 1] + x[m - 1]) * weight_defect(beta);
        for i in 0..m {
            acc += (-self.dev[i] + x[i]) * beta[i];
        }
        acc.value()
    }

    /// `x₁ - x̂₁` per clock.
    pub fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| (-self.dev[i] + x[i]).value())
    }

    /// [`Self::ensemble_error`] and [`Self::residuals`] in one pass.
    pub fn errors(&self, x: &DVector<f64>, beta: &DVector<f64>) -> (f64, DVector<f64>) {
        self.errors_with(x, beta, weight_defect(beta))
    }

    fn errors_with(&self, x: &DVector<f64>, beta: &DVector<f64>, defect: f64) -> (f64, DVector<f64>) {
        let m = self.m;
        let mut ta = Dd::ZERO;
        let res = DVector::from_fn(m, |i, _| {
            let r = -self.dev[i] + x[i];
            ta += r * beta[i];
            if i + 1 == m {
                ta += r * defect;
            }
            r.value()
        });
        (ta.value(), res)
    }
}

/// `1 - Σ βᵢ` evaluated exactly. Weights that sum to one in `f64` can
/// still miss it by an ulp in real arithmetic, which would let measurement
/// noise leak into the time scale; the reference clock absorbs the defect.
fn weight_defect(beta: &DVector<f64>) -> f64 {
    let mut sum = Dd::ZERO;
    for b in beta.iter() {
        sum = sum + *b;
    }
    (Dd::new(1.0) - sum).value()
}

/// One prediction step on a plain `f64` state.
pub fn jst_predict(x_hat: &DVector<f64>, a: &DMatrix<f64>, m: usize) -> (DVector<f64>, DVector<f64>) {
    let mut out = x_hat.as_slice().to_vec();
    model::apply_transition(a, m, &mut out);
    let advanced = DVector::from_vec(out);
    (advanced.rows(0, m).into_owned(), advanced)
}

/// Weighting and update: `d'_m = Σ βᵢ (dᵢ - y_im)` with `y_mm = 0`, then
/// `d'_i = d'_m + y_im`.
pub fn jst_weight_update(d: &DVector<f64>, y: &DVector<f64>, beta: &DVector<f64>) -> Result<DVector<f64>> {
    let m = d.len();
    if y.len() + 1 != m {
        return Err(Error::Dimension {
            what: "measurement",
            expected: m.saturating_sub(1),
            found: y.len(),
        });
    }
    if beta.len() != m {
        return Err(Error::Dimension {
            what: "weights",
            expected: m,
            found: beta.len(),
        });
    }
    model::check_weights(beta.as_slice())?;
    let reference: f64 = (0..m)
        .map(|i| beta[i] * (d[i] - if i + 1 < m { y[i] } else { 0.0 }))
        .sum();
    Ok(DVector::from_fn(m, |i, _| {
        if i + 1 < m {
            reference + y[i]
        } else {
            reference
        }
    }))
}

/// Runs the algorithm over a stored trajectory.
pub fn jst_run(cfg: &EnsembleConfig, traj: &Trajectory) -> Result<RunOutput> {
    cfg.validate()?;
    let (n, m) = (cfg.n(), cfg.m());
    let horizon = traj.horizon();
    check_trajectory(cfg, traj)?;
    let mut state = JstState::new(&cfg.x0_guess, n, m);
    let defect = weight_defect(&cfg.weights);
    let mut out = RunOutput::with_capacity(horizon + 1);
    let mut a_tau = f64::NAN;
    let mut a = DMatrix::zeros(0, 0);
    for k in 0..=horizon {
        if k > 0 {
            let tau = cfg.tau(k - 1);
            if tau != a_tau {
                a = model::transition_matrix(n, tau)?;
                a_tau = tau;
            }
            state.advance(&a);
            state.update(&traj.measurements[k], &cfg.weights, defect);
        }
        let x = &traj.states[k];
        let (ta, res) = state.errors_with(x, &cfg.weights, defect);
        out.ta.push(ta);
        out.residuals.push(res);
        out.estimates.push(state.deviations());
    }
    Ok(out)
}

pub(crate) fn check_trajectory(cfg: &EnsembleConfig, traj: &Trajectory) -> Result<()> {
    let horizon = traj.horizon();
    if traj.measurements.len() != horizon + 1 {
        return Err(Error::Dimension {
            what: "trajectory measurements",
            expected: horizon + 1,
            found: traj.measurements.len(),
        });
    }
    if horizon > 0 {
        if let Some(x) = traj.states.first() {
            if x.len() != cfg.dim() {
                return Err(Error::Dimension {
                    what: "trajectory state",
                    expected: cfg.dim(),
                    found: x.len(),
                });
            }
        }
    }
    if let model::Sampling::PerStep(ts) = &cfg.sampling {
        if ts.len() < horizon {
            return Err(Error::Dimension {
                what: "sampling schedule",
                expected: horizon,
                found: ts.len(),
            });
        }
    }
    Ok(())
}

/// The same step written with dense matrices:
/// `x̂₁[k+1] = 1βᵀ((C ⊗ I_m) F x̂[k] - e y[k+1]) + e y[k+1]` and
/// `x̂_{2:n}[k+1] = (A_{2:n} ⊗ I_m) x̂_{2:n}[k]`, with `e = [I_{m-1}; 0]`.
pub fn matrix_form_step(
    x_hat: &DVector<f64>,
    a: &DMatrix<f64>,
    beta: &DVector<f64>,
    y_next: &DVector<f64>,
) -> DVector<f64> {
    let n = a.nrows();
    let m = beta.len();
    let f = a.kronecker(&DMatrix::<f64>::identity(m, m));
    let c = model::output_row(n).kronecker(&DMatrix::<f64>::identity(m, m));
    let e = model::embed_measurement(m);
    let ones = DVector::from_element(m, 1.0);
    let predicted = &f * x_hat;
    let ey = &e * y_next;
    let first = &ones * (beta.transpose() * (&c * &predicted - &ey)) + &ey;
    let mut out = predicted;
    out.rows_mut(0, m).copy_from(&first);
    out
}

/// The second-order special case: clock `j` keeps a time deviation and a
/// rate `α₂ʲ`; each step advances `Δĥʲ += α̂₂ʲ τ` and then applies the
/// weighting and update. Requires `n = 2`.
pub fn algorithm1_run(cfg: &EnsembleConfig, traj: &Trajectory) -> Result<RunOutput> {
    if cfg.n() != 2 {
        return Err(Error::InvalidOrder(cfg.n()));
    }
    jst_run(cfg, traj)
}
