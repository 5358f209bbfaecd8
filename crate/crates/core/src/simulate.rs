//! Ground-truth trajectories and noisy clock-difference measurements.
//!
//! Every Gaussian draw comes from a ChaCha8 stream keyed by
//! `(seed, channel)` with the step index as stream id, so the process,
//! measurement and initial-state noises are independent of each other and
//! of how many draws any other step consumed.

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{self, EnsembleConfig};

const TAG_PROCESS: u64 = 0x7072_6f63_6573_7331;
const TAG_MEASUREMENT: u64 = 0x6d65_6173_7572_6532;
const TAG_INITIAL: u64 = 0x696e_6974_6961_6c33;

/// Seeds of the independent noise channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NoiseSeeds {
    /// Drives `v[k]` and the random part of the initial state.
    pub process_seed: u64,
    /// Drives `w[k]`.
    pub measurement_seed: u64,
}

impl NoiseSeeds {
    pub fn new(process_seed: u64, measurement_seed: u64) -> Self {
        NoiseSeeds {
            process_seed,
            measurement_seed,
        }
    }

    /// Both channels derived from one seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut s = seed;
        NoiseSeeds::new(splitmix64(&mut s), splitmix64(&mut s))
    }

    /// Seeds for Monte-Carlo path `path`, derived from `base` so that paths
    /// never share a stream.
    pub fn for_path(base: u64, path: u64) -> Self {
        let mut s = base ^ path.wrapping_mul(0xd1b5_4a32_d192_ed03);
        splitmix64(&mut s);
        NoiseSeeds::from_seed(splitmix64(&mut s))
    }
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Standard-normal stream for one `(seed, channel, step)` triple.
pub fn keyed_stream(seed: u64, channel: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ channel);
    rng.set_stream(step);
    rng
}

/// `L` with `L Lᵀ = W` for a symmetric PSD `W`.
///
/// Built from the eigendecomposition of the diagonally equilibrated matrix,
/// so singular directions (zero diffusion channels) and widely graded
/// variances are both handled. Eigenvalues below `-1e-10` (relative) are
/// rejected; smaller negative ones are rounding and are clipped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PsdFactor {
    l: DMatrix<f64>,
}

impl PsdFactor {
    pub fn new(w: &DMatrix<f64>) -> Result<Self> {
        if w.nrows() != w.ncols() {
            return Err(Error::NotPsd("noise covariance"));
        }
        let dim = w.nrows();
        if w.iter().all(|v| *v == 0.0) {
            return Ok(PsdFactor {
                l: DMatrix::zeros(dim, dim),
            });
        }
        if w.iter().any(|v| !v.is_finite()) || w.diagonal().iter().any(|v| *v < 0.0) {
            return Err(Error::NotPsd("noise covariance"));
        }
        let (d, eig) = model::equilibrated_eigen(w);
        let top = eig.eigenvalues.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if eig.eigenvalues.iter().any(|v| *v < -1e-10 * top) {
            return Err(Error::NotPsd("noise covariance"));
        }
        let mut l = eig.eigenvectors;
        for (c, lambda) in eig.eigenvalues.iter().enumerate() {
            let s = libm::sqrt(lambda.max(0.0));
            l.column_mut(c).scale_mut(s);
        }
        for (r, dr) in d.iter().enumerate() {
            l.row_mut(r).scale_mut(*dr);
        }
        Ok(PsdFactor { l })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.l
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L z` for `z` drawn from `rng`.
    pub fn sample<R: rand_core::RngCore>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.l.ncols(), |_, _| StandardNormal.sample(rng));
        &self.l * z
    }
}

/// One zero-mean Gaussian draw with covariance `w`.
pub fn sample_process_noise<R: rand_core::RngCore>(rng: &mut R, w: &DMatrix<f64>) -> Result<DVector<f64>> {
    Ok(PsdFactor::new(w)?.sample(rng))
}

/// A simulated run of the ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// `x[k]`, `k = 0..=T`.
    pub states: Vec<DVector<f64>>,
    /// `y[k] = H x[k] + w[k]`, `k = 0..=T`.
    pub measurements: Vec<DVector<f64>>,
    /// `v[k]`, `k = 0..T`; `x[k+1] = F[k] x[k] + v[k]`.
    pub process_noises: Vec<DVector<f64>>,
    /// `w[k]`, `k = 0..=T`.
    pub measurement_noises: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    /// Time deviations `x_1[k]` of every clock.
    pub fn time_deviations(&self, k: usize, m: usize) -> DVector<f64> {
        self.states[k].rows(0, m).into_owned()
    }
}

/// Caches the process-noise factor while `τ` stays the same.
struct ProcessFactors {
    tau: f64,
    factor: PsdFactor,
}

impl ProcessFactors {
    fn get(&mut self, cfg: &EnsembleConfig, tau: f64) -> Result<&PsdFactor> {
        if tau != self.tau {
            self.factor = PsdFactor::new(&model::ensemble_noise_cov(&cfg.clocks, tau)?)?;
            self.tau = tau;
        }
        Ok(&self.factor)
    }
}

/// The true initial state: `x0`, plus `N(0, x0_variance I)` when the
/// variance is positive.
pub fn initial_state(cfg: &EnsembleConfig, seeds: NoiseSeeds) -> DVector<f64> {
    if cfg.x0_variance > 0.0 {
        let mut rng = keyed_stream(seeds.process_seed, TAG_INITIAL, 0);
        let s = libm::sqrt(cfg.x0_variance);
        DVector::from_fn(cfg.dim(), |i, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            cfg.x0[i] + s * z
        })
    } else {
        cfg.x0.clone()
    }
}

/// Simulates `x[k+1] = F[k] x[k] + v[k]`, `y[k] = H x[k] + w[k]` with the
/// true `W[k]` and the true measurement covariance `cfg.r_true`.
pub fn run_truth(cfg: &EnsembleConfig, seeds: NoiseSeeds) -> Result<Trajectory> {
    cfg.validate()?;
    let (n, m) = (cfg.n(), cfg.m());
    let horizon = cfg.horizon;
    let r_factor = PsdFactor::new(&cfg.r_true)?;
    let tau0 = cfg.tau(0);
    let mut factors = ProcessFactors {
        tau: tau0,
        factor: PsdFactor::new(&model::ensemble_noise_cov(&cfg.clocks, tau0)?)?,
    };

    let mut states = Vec::with_capacity(horizon + 1);
    let mut measurements = Vec::with_capacity(horizon + 1);
    let mut process_noises = Vec::with_capacity(horizon);
    let mut measurement_noises = Vec::with_capacity(horizon + 1);

    let mut x = initial_state(cfg, seeds);
    let mut a_tau = f64::NAN;
    let mut a = DMatrix::zeros(0, 0);
    for k in 0..=horizon {
        let mut wrng = keyed_stream(seeds.measurement_seed, TAG_MEASUREMENT, k as u64);
        let w = r_factor.sample(&mut wrng);
        let y = observe(&x, n, m) + &w;
        measurements.push(y);
        measurement_noises.push(w);
        states.push(x.clone());
        if k == horizon {
            break;
        }
        let tau = cfg.tau(k);
        let mut vrng = keyed_stream(seeds.process_seed, TAG_PROCESS, k as u64);
        let v = factors.get(cfg, tau)?.sample(&mut vrng);
        if tau != a_tau {
            a = model::taylor_matrix(n, tau);
            a_tau = tau;
        }
        model::apply_transition(&a, m, x.as_mut_slice());
        x += &v;
        process_noises.push(v);
    }
    Ok(Trajectory {
        states,
        measurements,
        process_noises,
        measurement_noises,
    })
}

/// `(A(τ) ⊗ I_m) x`.
pub fn propagate(x: &DVector<f64>, n: usize, m: usize, tau: f64) -> DVector<f64> {
    let a = model::taylor_matrix(n, tau);
    let mut out = x.as_slice().to_vec();
    model::apply_transition(&a, m, &mut out);
    DVector::from_vec(out)
}

/// Noise-free measurement `H x`: time deviations of clocks `1..m-1` minus
/// that of the reference clock `m`.
pub fn observe(x: &DVector<f64>, _n: usize, m: usize) -> DVector<f64> {
    DVector::from_fn(m - 1, |i, _| x[i] - x[m - 1])
}
