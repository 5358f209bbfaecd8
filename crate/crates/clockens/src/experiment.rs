//! Experiment orchestration: single runs, Monte-Carlo fan-out and the CSV
//! artifacts of each subcommand.

use std::fs;
use std::path::Path;

use clockens_core::analysis::{self, AdevCurve, PathResiduals, VarianceDiff};
use clockens_core::ckf::{self, CommonModeProjection, CovarianceReduction, GainSchedule};
use clockens_core::jst;
use clockens_core::output::RunOutput;
use clockens_core::simulate::{self, NoiseSeeds, Trajectory};
use clockens_core::theory::{self, Definiteness, TheoryOracle, Verdict};
use nalgebra::DVector;
use rayon::prelude::*;

use crate::config::{Algorithm, ExperimentConfig, Reduction};
use crate::csvio::{self, SeriesColumns, Summary};
use crate::error::{Error, Result};

/// Everything produced on one Monte-Carlo path.
#[derive(Debug, Clone)]
pub struct PathRun {
    pub traj: Trajectory,
    pub jst: Option<RunOutput>,
    pub ckf: Option<RunOutput>,
    pub obs_innovations: Option<Vec<DVector<f64>>>,
}

/// Runs paths of one experiment. The CKF gains do not depend on the data,
/// so in canonical form they are computed once and shared by every path.
pub struct Runner<'a> {
    exp: &'a ExperimentConfig,
    schedule: Option<GainSchedule>,
    reduction: Option<CommonModeProjection>,
}

impl<'a> Runner<'a> {
    pub fn new(exp: &'a ExperimentConfig) -> Result<Self> {
        let cfg = &exp.ensemble;
        let reduction = match exp.reduction {
            Reduction::None => None,
            Reduction::CommonMode { bound } => Some(CommonModeProjection {
                n: cfg.n(),
                m: cfg.m(),
                bound,
            }),
        };
        let schedulable = exp.ckf == Default::default() && reduction.is_none();
        let schedule = if exp.algorithm.runs_ckf() && schedulable {
            Some(GainSchedule::new(cfg, cfg.horizon)?)
        } else {
            None
        };
        Ok(Runner {
            exp,
            schedule,
            reduction,
        })
    }

    pub fn seeds(&self, path: usize) -> NoiseSeeds {
        NoiseSeeds::for_path(self.exp.seed, path as u64)
    }

    pub fn truth(&self, path: usize) -> Result<Trajectory> {
        Ok(simulate::run_truth(&self.exp.ensemble, self.seeds(path))?)
    }

    pub fn run_path(&self, path: usize) -> Result<PathRun> {
        let traj = self.truth(path)?;
        self.run_on(traj)
    }

    pub fn run_on(&self, traj: Trajectory) -> Result<PathRun> {
        let cfg = &self.exp.ensemble;
        let alg = self.exp.algorithm;
        let jst = alg.runs_jst().then(|| jst::jst_run(cfg, &traj)).transpose()?;
        let ckf = if alg.runs_ckf() {
            Some(match &self.schedule {
                Some(s) => ckf::ckf_run_scheduled(cfg, &traj, s)?,
                None => {
                    let red = self.reduction.as_ref().map(|r| r as &dyn CovarianceReduction);
                    ckf::ckf_run(cfg, &traj, self.exp.ckf, red)?
                }
            })
        } else {
            None
        };
        let obs_innovations = (alg == Algorithm::ObsCkf)
            .then(|| ckf::obs_ckf_run(cfg, &traj))
            .transpose()?;
        Ok(PathRun {
            traj,
            jst,
            ckf,
            obs_innovations,
        })
    }

    /// Maps every path through `f`, in parallel, keeping path order.
    pub fn monte_carlo<T, F>(&self, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize, PathRun) -> Result<T> + Sync,
    {
        (0..self.exp.paths)
            .into_par_iter()
            .map(|p| f(p, self.run_path(p)?))
            .collect()
    }
}

pub fn times(exp: &ExperimentConfig) -> Vec<f64> {
    (0..=exp.ensemble.horizon)
        .map(|k| exp.ensemble.sampling.time(k))
        .collect()
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })
}

/// `simulate`: writes `trajectory.csv` for path 0.
pub fn simulate(exp: &ExperimentConfig, out: &Path) -> Result<()> {
    create_dir(out)?;
    let truth_only = ExperimentConfig {
        algorithm: Algorithm::Jst,
        ..exp.clone()
    };
    let traj = Runner::new(&truth_only)?.truth(0)?;
    let cfg = &exp.ensemble;
    csvio::write_trajectory(&out.join("trajectory.csv"), &traj, &times(exp), cfg.n(), cfg.m())
}

/// ADEV of a time-error series; octave factors unless configured.
pub fn ta_adev(exp: &ExperimentConfig, ta: &[f64]) -> Result<Option<AdevCurve>> {
    let Some(tau0) = exp.ensemble.sampling.constant() else {
        return Ok(None);
    };
    let curve = match &exp.adev_factors {
        Some(f) => analysis::overlapping_adev_at(ta, tau0, f)?,
        None => analysis::overlapping_adev(ta, tau0)?,
    };
    Ok(Some(curve))
}

fn verdict_name(v: Verdict) -> &'static str {
    match v {
        Verdict::JstBetter => "jst",
        Verdict::CkfBetter => "ckf",
        Verdict::Tie => "tie",
    }
}

fn definiteness_name(d: Definiteness) -> &'static str {
    match d {
        Definiteness::Negative => "negative",
        Definiteness::Positive => "positive",
        Definiteness::Indefinite => "indefinite",
    }
}

/// Hypothesis report and, when it applies, the asymptotic criterion.
pub fn theory_summary(exp: &ExperimentConfig, summary: &mut Summary) {
    let cfg = &exp.ensemble;
    let rep = theory::check_equivalence_hypotheses(cfg);
    let yes_no = |b: bool| if b { "true" } else { "false" };
    summary.push("hypothesis", "w_hat_kronecker", yes_no(rep.kronecker_guess()));
    summary.push("hypothesis", "equal_weights", yes_no(rep.equal_weights));
    summary.push("hypothesis", "p0_scaled_identity", yes_no(rep.p0_scaled_identity));
    summary.push("hypothesis", "constant_tau", yes_no(rep.constant_tau));
    summary.push("hypothesis", "homogeneous_truth", yes_no(rep.homogeneous_truth));
    let pred = match rep.predicts_equal_ta() {
        Some(b) => yes_no(b),
        None => "unknown",
    };
    summary.push("hypothesis", "predicts_equal_ta", pred);

    let report = TheoryOracle::new(cfg).and_then(|o| Ok((o.li_criterion(&cfg.r_true)?, o)));
    match report {
        Ok((li, oracle)) => {
            for (i, (l, v)) in li.values.iter().zip(&li.verdicts).enumerate() {
                summary.push_f64("theory", format!("L_{}", i + 1), *l);
                summary.push("theory", format!("verdict_{}", i + 1), verdict_name(*v));
            }
            summary.push("theory", "gap_definiteness", definiteness_name(li.global));
            summary.push_f64("theory", "verdict_tolerance", li.tolerance);
            summary.push("theory", "riccati_iterations", oracle.riccati_iterations.to_string());
            summary.push_f64("theory", "riccati_residual", oracle.riccati_residual());
        }
        Err(e) => summary.push("theory", "status", format!("not applicable: {e}")),
    }
}

fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |a, v| a.max(v.abs()))
}

/// `compare`: runs the configured algorithms and writes `series.csv`,
/// `summary.csv`, ADEV tables, and with several paths the TA bands.
pub fn run_experiment(exp: &ExperimentConfig, out: &Path) -> Result<Summary> {
    create_dir(out)?;
    let cfg = &exp.ensemble;
    let runner = Runner::new(exp)?;
    let first = runner.run_path(0)?;
    let ts = times(exp);
    let ta_theory = theory::ta_series_jst(cfg, &first.traj).ok();
    let trace_p = first.ckf.as_ref().map(|c| c.trace_p.as_slice());
    csvio::write_series(
        &out.join("series.csv"),
        &SeriesColumns {
            m: cfg.m(),
            times: &ts,
            ta_jst: first.jst.as_ref().map(|r| r.ta.as_slice()),
            ta_ckf: first.ckf.as_ref().map(|r| r.ta.as_slice()),
            ta_theory: ta_theory.as_deref(),
            eps_jst: first.jst.as_ref().map(|r| r.residuals.as_slice()),
            eps_ckf: first.ckf.as_ref().map(|r| r.residuals.as_slice()),
            trace_p,
        },
    )?;
    if let Some(innov) = &first.obs_innovations {
        write_innovations(&out.join("innovations.csv"), innov, cfg.m())?;
    }

    let mut summary = Summary::default();
    summary.push("run", "algorithm", format!("{:?}", exp.algorithm).to_lowercase());
    summary.push("run", "horizon", cfg.horizon.to_string());
    summary.push("run", "paths", exp.paths.to_string());
    summary.push("run", "seed", exp.seed.to_string());
    if let Some(j) = &first.jst {
        summary.push_f64("run", "ta_jst_max_abs", max_abs(&j.ta));
    }
    if let Some(c) = &first.ckf {
        summary.push_f64("run", "ta_ckf_max_abs", max_abs(&c.ta));
    }
    if let (Some(j), Some(c)) = (&first.jst, &first.ckf) {
        let gap = j.ta.iter().zip(&c.ta).fold(0.0_f64, |a, (x, y)| a.max((x - y).abs()));
        let scale = max_abs(&j.ta).max(max_abs(&c.ta));
        summary.push_f64("run", "ta_max_rel_gap", if scale > 0.0 { gap / scale } else { 0.0 });
    }
    theory_summary(exp, &mut summary);
    for (name, run) in [("jst", &first.jst), ("ckf", &first.ckf)] {
        let Some(run) = run else { continue };
        if let Some(curve) = ta_adev(exp, &run.ta)? {
            csvio::write_adev(&out.join(format!("adev_{name}.csv")), &curve)?;
            for (t, a) in curve.taus.iter().zip(&curve.adev) {
                summary.push_f64("adev", format!("{name}@{}", csvio::fmt_f64(*t)), *a);
            }
        }
    }
    if exp.paths > 1 {
        monte_carlo_summary(exp, &runner, out, &mut summary)?;
    }
    summary.write(&out.join("summary.csv"))?;
    Ok(summary)
}

/// TA series and tail residuals of every path.
struct PathStats {
    ta_jst: Option<Vec<f64>>,
    ta_ckf: Option<Vec<f64>>,
    tail: Option<PathResiduals>,
}

fn monte_carlo_summary(exp: &ExperimentConfig, runner: &Runner, out: &Path, summary: &mut Summary) -> Result<()> {
    let window = analysis::tail_window(exp.ensemble.horizon + 1, exp.tail_fraction);
    let stats = runner.monte_carlo(|_, run| {
        let tail = match (&run.jst, &run.ckf) {
            (Some(j), Some(c)) => Some(PathResiduals {
                jst: j.residuals[window.clone()].to_vec(),
                ckf: c.residuals[window.clone()].to_vec(),
            }),
            _ => None,
        };
        Ok(PathStats {
            ta_jst: run.jst.map(|r| r.ta),
            ta_ckf: run.ckf.map(|r| r.ta),
            tail,
        })
    })?;
    summary.push("montecarlo", "tail_start", window.start.to_string());
    summary.push("montecarlo", "tail_steps", window.len().to_string());
    for (name, pick) in [("jst", 0), ("ckf", 1)] {
        let series: Option<Vec<Vec<f64>>> = stats
            .iter()
            .map(|s| if pick == 0 { s.ta_jst.clone() } else { s.ta_ckf.clone() })
            .collect();
        if let Some(series) = series {
            let band = analysis::confidence_band(&series, exp.band_level)?;
            csvio::write_band(&out.join(format!("band_{name}.csv")), &band)?;
        }
    }
    let tails: Option<Vec<PathResiduals>> = stats.into_iter().map(|s| s.tail).collect();
    if let Some(tails) = tails {
        let diffs = analysis::residual_variance_compare(&tails)?;
        push_variance_diffs(summary, &diffs);
    }
    Ok(())
}

pub fn push_variance_diffs(summary: &mut Summary, diffs: &[VarianceDiff]) {
    for (i, d) in diffs.iter().enumerate() {
        let i = i + 1;
        summary.push_f64("montecarlo", format!("var_jst_{i}"), d.jst_var);
        summary.push_f64("montecarlo", format!("var_ckf_{i}"), d.ckf_var);
        summary.push_f64("montecarlo", format!("var_diff_{i}"), d.diff);
        summary.push_f64("montecarlo", format!("var_diff_se_{i}"), d.std_err);
    }
}

fn write_innovations(path: &Path, innov: &[DVector<f64>], m: usize) -> Result<()> {
    let mut header = vec!["k".to_string()];
    header.extend((1..m).map(|i| format!("nu_{i}")));
    csvio::write_table(
        path,
        &header,
        innov.iter().enumerate().map(|(k, v)| {
            let mut row = vec![k.to_string()];
            row.extend(v.iter().map(|x| csvio::fmt_f64(*x)));
            row
        }),
    )
}

/// `allan`: ADEV of the TA series of path 0 for each configured algorithm.
pub fn allan(exp: &ExperimentConfig, out: &Path) -> Result<Vec<(String, AdevCurve)>> {
    create_dir(out)?;
    let run = Runner::new(exp)?.run_path(0)?;
    let mut curves = Vec::new();
    for (name, r) in [("jst", &run.jst), ("ckf", &run.ckf)] {
        let Some(r) = r else { continue };
        let curve =
            ta_adev(exp, &r.ta)?.ok_or_else(|| Error::Usage("ADEV needs a constant sampling interval".into()))?;
        csvio::write_adev(&out.join(format!("adev_{name}.csv")), &curve)?;
        curves.push((name.to_string(), curve));
    }
    Ok(curves)
}

/// `theory`: writes `theory.csv` with the hypothesis report and the
/// asymptotic criterion.
pub fn theory(exp: &ExperimentConfig, out: &Path) -> Result<Summary> {
    create_dir(out)?;
    let mut summary = Summary::default();
    theory_summary(exp, &mut summary);
    summary.write(&out.join("theory.csv"))?;
    Ok(summary)
}
