//! Experiment configuration files (TOML).
//!
//! ```toml
//! [ensemble]
//! clocks = 5
//! sigma = [2.0587e-20, 4.0760e-28]   # shared by every clock; n = len
//! tau = 0.1                           # or one value per step
//! horizon = 36000
//!
//! [measurement]
//! r = 1e-12                           # scalar (r I), diagonal list or matrix
//!
//! [run]
//! algorithm = "both"
//! paths = 1
//! seed = 1
//! ```
//!
//! Everything except `clocks`, `sigma` (or `clock_sigma`), `tau` and
//! `horizon` has a default; unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use clockens_core::ckf::{CkfForm, CkfOptions};
use clockens_core::model::{ClockSpec, CovGuess, EnsembleConfig, Sampling};
use clockens_core::Error as CoreError;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

pub const DEFAULT_P0: f64 = 1e-8;
pub const DEFAULT_TAIL_FRACTION: f64 = 0.2;
pub const DEFAULT_BAND_LEVEL: f64 = 0.98;

/// A parse or validation failure, tied to the offending key.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    fn new(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError {
            key: key.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.key.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.key, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Jst,
    Ckf,
    #[default]
    Both,
    ObsCkf,
}

impl Algorithm {
    pub fn runs_jst(self) -> bool {
        matches!(self, Algorithm::Jst | Algorithm::Both)
    }

    pub fn runs_ckf(self) -> bool {
        matches!(self, Algorithm::Ckf | Algorithm::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Reduction {
    None,
    CommonMode { bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub ensemble: EnsembleConfig,
    pub algorithm: Algorithm,
    pub ckf: CkfOptions,
    pub reduction: Reduction,
    pub paths: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Fraction of the run used for asymptotic variances.
    pub tail_fraction: f64,
    pub band_level: f64,
    /// Averaging factors for ADEV; octaves when absent.
    pub adev_factors: Option<Vec<usize>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    ensemble: RawEnsemble,
    #[serde(default)]
    measurement: RawMeasurement,
    #[serde(default)]
    filter: RawFilter,
    #[serde(default)]
    run: RawRun,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnsemble {
    clocks: usize,
    order: Option<usize>,
    sigma: Option<Vec<f64>>,
    clock_sigma: Option<Vec<Vec<f64>>>,
    tau: TauSpec,
    horizon: usize,
    weights: Option<Vec<f64>>,
    #[serde(default = "default_p0")]
    p0: f64,
    x0: Option<Vec<f64>>,
    x0_guess: Option<Vec<f64>>,
    #[serde(default)]
    x0_variance: f64,
}

fn default_p0() -> f64 {
    DEFAULT_P0
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TauSpec {
    Constant(f64),
    PerStep(Vec<f64>),
}

#[derive(Deserialize, Clone)]
#[serde(untagged)]
enum MatrixSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawMeasurement {
    r: Option<MatrixSpec>,
    r_guess: Option<MatrixSpec>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum WGuessSpec {
    Keyword(String),
    Matrix(Vec<Vec<f64>>),
}

#[derive(Deserialize, Clone, Copy, Default)]
#[serde(rename_all = "kebab-case")]
enum FormName {
    #[default]
    Canonical,
    Direct,
}

#[derive(Deserialize, Clone, Copy, Default)]
#[serde(rename_all = "kebab-case")]
enum ReductionName {
    #[default]
    None,
    CommonMode,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RawFilter {
    w_guess: Option<WGuessSpec>,
    #[serde(default)]
    form: FormName,
    #[serde(default)]
    joseph: bool,
    #[serde(default)]
    reduction: ReductionName,
    #[serde(default)]
    reduction_bound: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default)]
    algorithm: Algorithm,
    #[serde(default = "one")]
    paths: usize,
    #[serde(default = "one_u64")]
    seed: u64,
    out: Option<PathBuf>,
    #[serde(default = "default_tail")]
    tail_fraction: f64,
    #[serde(default = "default_band")]
    band_level: f64,
    adev_factors: Option<Vec<usize>>,
}

impl Default for RawRun {
    fn default() -> Self {
        RawRun {
            algorithm: Algorithm::default(),
            paths: 1,
            seed: 1,
            out: None,
            tail_fraction: DEFAULT_TAIL_FRACTION,
            band_level: DEFAULT_BAND_LEVEL,
            adev_factors: None,
        }
    }
}

fn one() -> usize {
    1
}

fn one_u64() -> u64 {
    1
}

fn default_tail() -> f64 {
    DEFAULT_TAIL_FRACTION
}

fn default_band() -> f64 {
    DEFAULT_BAND_LEVEL
}

/// Parses and validates a configuration text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::new("", e.to_string()))?;
    let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let key = e.path().to_string();
        let key = if key == "." { String::new() } else { key };
        ConfigError::new(key, e.into_inner().message().trim().to_string())
    })?;
    build(raw)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new("", format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

fn build(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let e = raw.ensemble;
    let m = e.clocks;
    if m < 2 {
        return Err(ConfigError::new(
            "ensemble.clocks",
            format!("an ensemble needs at least 2 clocks, got {m}"),
        ));
    }
    let (clocks, sigma_key) = match (e.sigma, e.clock_sigma) {
        (Some(s), None) => {
            let c = ClockSpec::new(s).map_err(|err| ConfigError::new("ensemble.sigma", err.to_string()))?;
            (vec![c; m], "ensemble.sigma")
        }
        (None, Some(per)) => {
            if per.len() != m {
                return Err(ConfigError::new(
                    "ensemble.clock_sigma",
                    format!("expected {m} entries (one per clock), found {}", per.len()),
                ));
            }
            let clocks = per
                .into_iter()
                .enumerate()
                .map(|(j, s)| {
                    ClockSpec::new(s)
                        .map_err(|err| ConfigError::new(format!("ensemble.clock_sigma[{j}]"), err.to_string()))
                })
                .collect::<Result<Vec<_>, _>>()?;
            (clocks, "ensemble.clock_sigma")
        }
        (Some(_), Some(_)) => {
            return Err(ConfigError::new(
                "ensemble.clock_sigma",
                "give either sigma or clock_sigma, not both",
            ))
        }
        (None, None) => return Err(ConfigError::new("ensemble.sigma", "missing diffusion coefficients")),
    };
    let n = clocks[0].order();
    if let Some(order) = e.order {
        if order != n {
            return Err(ConfigError::new(
                "ensemble.order",
                format!("order {order} does not match the {n} diffusion coefficients given"),
            ));
        }
    }
    let sampling = match e.tau {
        TauSpec::Constant(t) => Sampling::Constant(t),
        TauSpec::PerStep(ts) => Sampling::PerStep(ts),
    };
    let weights = match e.weights {
        Some(w) => DVector::from_vec(w),
        None => DVector::from_element(m, 1.0 / m as f64),
    };
    let x0 = state_vector("ensemble.x0", e.x0, n, m)?;
    let x0_guess = match e.x0_guess {
        Some(v) => state_vector("ensemble.x0_guess", Some(v), n, m)?,
        None => x0.clone(),
    };

    let r_true = match raw.measurement.r {
        Some(spec) => matrix("measurement.r", spec, m - 1)?,
        None => DMatrix::zeros(m - 1, m - 1),
    };
    let r_guess = match raw.measurement.r_guess {
        Some(spec) => matrix("measurement.r_guess", spec, m - 1)?,
        None => r_true.clone(),
    };

    let f = raw.filter;
    let w_guess = match f.w_guess {
        None => CovGuess::True,
        Some(WGuessSpec::Keyword(k)) if k == "true" => CovGuess::True,
        Some(WGuessSpec::Keyword(k)) => {
            return Err(ConfigError::new(
                "filter.w_guess",
                format!("expected \"true\" or a matrix, found \"{k}\""),
            ))
        }
        Some(WGuessSpec::Matrix(rows)) => CovGuess::Fixed(matrix("filter.w_guess", MatrixSpec::Full(rows), n * m)?),
    };
    let form = match f.form {
        FormName::Canonical => CkfForm::Canonical,
        FormName::Direct => CkfForm::Direct,
    };
    let reduction = match f.reduction {
        ReductionName::None => Reduction::None,
        ReductionName::CommonMode => {
            if !(f.reduction_bound >= 0.0 && f.reduction_bound.is_finite()) {
                return Err(ConfigError::new(
                    "filter.reduction_bound",
                    "must be finite and nonnegative",
                ));
            }
            if form == CkfForm::Canonical {
                return Err(ConfigError::new(
                    "filter.reduction",
                    "covariance reduction needs form = \"direct\"",
                ));
            }
            Reduction::CommonMode {
                bound: f.reduction_bound,
            }
        }
    };

    let ensemble = EnsembleConfig {
        clocks,
        weights,
        sampling,
        horizon: e.horizon,
        w_guess,
        r_guess,
        r_true,
        p0: e.p0,
        x0,
        x0_guess,
        x0_variance: e.x0_variance,
    };
    ensemble.validate().map_err(|err| core_error(err, sigma_key))?;

    let run = raw.run;
    if run.paths == 0 {
        return Err(ConfigError::new("run.paths", "must be at least 1"));
    }
    if !(run.tail_fraction > 0.0 && run.tail_fraction <= 1.0) {
        return Err(ConfigError::new("run.tail_fraction", "must lie in (0, 1]"));
    }
    if !(run.band_level > 0.0 && run.band_level < 1.0) {
        return Err(ConfigError::new("run.band_level", "must lie in (0, 1)"));
    }
    if let Some(fs) = &run.adev_factors {
        if fs.is_empty() || fs.contains(&0) {
            return Err(ConfigError::new("run.adev_factors", "factors must be positive"));
        }
    }
    Ok(ExperimentConfig {
        ensemble,
        algorithm: run.algorithm,
        ckf: CkfOptions {
            form,
            joseph: f.joseph,
            max_eigenvalue: false,
        },
        reduction,
        paths: run.paths,
        seed: run.seed,
        out: run.out,
        tail_fraction: run.tail_fraction,
        band_level: run.band_level,
        adev_factors: run.adev_factors,
    })
}

/// `m` entries set the time deviations and leave the other blocks at zero;
/// `n m` entries give the full state.
fn state_vector(key: &str, v: Option<Vec<f64>>, n: usize, m: usize) -> Result<DVector<f64>, ConfigError> {
    match v {
        None => Ok(DVector::zeros(n * m)),
        Some(v) if v.len() == n * m => Ok(DVector::from_vec(v)),
        Some(v) if v.len() == m => Ok(DVector::from_fn(n * m, |i, _| if i < m { v[i] } else { 0.0 })),
        Some(v) => Err(ConfigError::new(
            key,
            format!("expected {m} or {} entries, found {}", n * m, v.len()),
        )),
    }
}

fn matrix(key: &str, spec: MatrixSpec, dim: usize) -> Result<DMatrix<f64>, ConfigError> {
    match spec {
        MatrixSpec::Scalar(r) => Ok(DMatrix::identity(dim, dim) * r),
        MatrixSpec::Diagonal(d) => {
            if d.len() != dim {
                return Err(ConfigError::new(
                    key,
                    format!("expected {dim} diagonal entries, found {}", d.len()),
                ));
            }
            Ok(DMatrix::from_diagonal(&DVector::from_vec(d)))
        }
        MatrixSpec::Full(rows) => {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(ConfigError::new(key, format!("expected a {dim}x{dim} matrix")));
            }
            Ok(DMatrix::from_fn(dim, dim, |i, j| rows[i][j]))
        }
    }
}

fn core_error(err: CoreError, sigma_key: &str) -> ConfigError {
    let key = match &err {
        CoreError::TooFewClocks(_) => "ensemble.clocks",
        CoreError::InvalidOrder(_) | CoreError::InvalidSigma { .. } | CoreError::MixedOrders { .. } => sigma_key,
        CoreError::WeightsSum(_) => "ensemble.weights",
        CoreError::InvalidTau(_) => "ensemble.tau",
        CoreError::NotPositive("p0") => "ensemble.p0",
        CoreError::InvalidArgument(msg) if msg.contains("x0_variance") => "ensemble.x0_variance",
        CoreError::Dimension { what, .. } | CoreError::NotPsd(what) => match *what {
            "weights" => "ensemble.weights",
            "sampling schedule" => "ensemble.tau",
            "w_guess" => "filter.w_guess",
            "r_guess" => "measurement.r_guess",
            "r_true" => "measurement.r",
            "x0" => "ensemble.x0",
            "x0_guess" => "ensemble.x0_guess",
            _ => "",
        },
        _ => "",
    };
    ConfigError::new(key, err.to_string())
}
