use alloc::vec::Vec;

use nalgebra::DVector;

/// Per-step results of one algorithm on one trajectory, `k = 0..=T`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    /// `TA[k] = Σ βᵢ (Δhⁱ[k] - Δĥⁱ[k])`.
    pub ta: Vec<f64>,
    /// Clock residuals `ε₁[k] = x₁[k] - x̂₁[k]`.
    pub residuals: Vec<DVector<f64>>,
    /// Time-deviation estimates `x̂₁[k]` the residuals were taken against.
    pub estimates: Vec<DVector<f64>>,
    /// `trace(P_k)` (Kalman filter only).
    pub trace_p: Vec<f64>,
    /// Largest eigenvalue of `P_k`, when requested.
    pub max_eig_p: Vec<f64>,
}

impl RunOutput {
    pub fn with_capacity(steps: usize) -> Self {
        RunOutput {
            ta: Vec::with_capacity(steps),
            residuals: Vec::with_capacity(steps),
            estimates: Vec::with_capacity(steps),
            trace_p: Vec::new(),
            max_eig_p: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ta.is_empty()
    }

    pub fn max_abs_ta(&self) -> f64 {
        self.ta.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    /// Residual of clock `clock` over all steps.
    pub fn residual_series(&self, clock: usize) -> Vec<f64> {
        self.residuals.iter().map(|e| e[clock]).collect()
    }
}
