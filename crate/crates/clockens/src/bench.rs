//! Wall-clock runtime of both algorithms against the ensemble size.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use clockens_core::ckf::{self, CkfOptions};
use clockens_core::jst;
use clockens_core::model::{ClockSpec, EnsembleConfig};
use clockens_core::simulate::{run_truth, NoiseSeeds};

use crate::csvio::{self, fmt_f64};
use crate::error::{Error, Result};

pub const MIN_CLOCKS: usize = 2;
pub const MAX_CLOCKS: usize = 64;
/// Groups for the median-of-means estimate.
const GROUPS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub m: usize,
    /// Mean seconds per run.
    pub jst_mean: f64,
    pub ckf_mean: f64,
    pub jst_median_of_means: f64,
    pub ckf_median_of_means: f64,
}

/// The benchmark ensemble: two-state clocks with the noise levels of a
/// hydrogen-maser-like clock, `τ = 0.1 s`, `R = 1e-12 I`.
pub fn bench_config(m: usize, horizon: usize) -> EnsembleConfig {
    let clock = ClockSpec::new(vec![2.0587e-20, 4.0760e-28]).expect("valid diffusion coefficients");
    let mut cfg = EnsembleConfig::homogeneous(m, clock, 0.1, horizon).with_measurement_variance(1e-12);
    cfg.p0 = 1e-8;
    cfg
}

fn median_of_means(samples: &[f64]) -> f64 {
    let groups = GROUPS.min(samples.len()).max(1);
    let size = samples.len() / groups;
    let mut means: Vec<f64> = (0..groups)
        .map(|g| {
            let end = if g + 1 == groups { samples.len() } else { (g + 1) * size };
            let chunk = &samples[g * size..end];
            chunk.iter().sum::<f64>() / chunk.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    means[means.len() / 2]
}

/// Times `repeats` runs of each algorithm over one pre-generated trajectory
/// of `horizon` steps for every `m`; noise generation is not timed.
pub fn bench_runtime(ms: &[usize], repeats: usize, horizon: usize) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::Usage("repeats must be at least 1".into()));
    }
    if let Some(m) = ms.iter().find(|m| !(MIN_CLOCKS..=MAX_CLOCKS).contains(*m)) {
        return Err(Error::Usage(format!(
            "clock counts must lie in {MIN_CLOCKS}..={MAX_CLOCKS}, got {m}"
        )));
    }
    let mut rows = Vec::with_capacity(ms.len());
    for &m in ms {
        let cfg = bench_config(m, horizon);
        let traj = run_truth(&cfg, NoiseSeeds::from_seed(m as u64))?;
        let mut jst_t = Vec::with_capacity(repeats);
        let mut ckf_t = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t0 = Instant::now();
            black_box(jst::jst_run(&cfg, black_box(&traj))?);
            jst_t.push(t0.elapsed().as_secs_f64());
            let t0 = Instant::now();
            black_box(ckf::ckf_run(&cfg, black_box(&traj), CkfOptions::default(), None)?);
            ckf_t.push(t0.elapsed().as_secs_f64());
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        rows.push(BenchRow {
            m,
            jst_mean: mean(&jst_t),
            ckf_mean: mean(&ckf_t),
            jst_median_of_means: median_of_means(&jst_t),
            ckf_median_of_means: median_of_means(&ckf_t),
        });
    }
    Ok(rows)
}

pub fn write_bench(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let header = [
        "m",
        "jst_mean",
        "ckf_mean",
        "jst_median_of_means",
        "ckf_median_of_means",
    ]
    .map(String::from);
    csvio::write_table(
        path,
        &header,
        rows.iter().map(|r| {
            vec![
                r.m.to_string(),
                fmt_f64(r.jst_mean),
                fmt_f64(r.ckf_mean),
                fmt_f64(r.jst_median_of_means),
                fmt_f64(r.ckf_median_of_means),
            ]
        }),
    )
}
