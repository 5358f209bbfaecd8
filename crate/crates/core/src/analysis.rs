//! Statistics over runs: overlapping Allan deviation, pointwise confidence
//! bands and tail-window residual-variance comparisons.

use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Overlapping Allan deviation at a set of averaging times.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdevCurve {
    pub taus: Vec<f64>,
    pub adev: Vec<f64>,
}

/// Overlapping ADEV of a phase (time deviation) series at octave-spaced
/// averaging factors `1, 2, 4, ...` up to the largest with `N - 2m >= 1`.
pub fn overlapping_adev(phase: &[f64], tau0: f64) -> Result<AdevCurve> {
    if phase.len() < 3 {
        return Err(Error::SeriesTooShort {
            len: phase.len(),
            factor: 1,
        });
    }
    let mut factors = Vec::new();
    let mut m = 1;
    while phase.len() > 2 * m {
        factors.push(m);
        m *= 2;
    }
    overlapping_adev_at(phase, tau0, &factors)
}

/// Overlapping ADEV at the given averaging factors:
/// `σ²(mτ₀) = Σ_{i<N-2m} (x_{i+2m} - 2x_{i+m} + x_i)² / (2 (mτ₀)² (N - 2m))`.
pub fn overlapping_adev_at(phase: &[f64], tau0: f64, factors: &[usize]) -> Result<AdevCurve> {
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(Error::InvalidTau(tau0));
    }
    let n = phase.len();
    let mut curve = AdevCurve::default();
    for &m in factors {
        if m == 0 || n < 2 * m + 1 {
            return Err(Error::SeriesTooShort { len: n, factor: m });
        }
        let terms = n - 2 * m;
        let mut acc = 0.0;
        for i in 0..terms {
            let d = phase[i + 2 * m] - 2.0 * phase[i + m] + phase[i];
            acc += d * d;
        }
        let t = m as f64 * tau0;
        curve.taus.push(t);
        curve.adev.push(libm::sqrt(acc / (2.0 * t * t * terms as f64)));
    }
    Ok(curve)
}

/// Least-squares slope of `log10 adev` against `log10 tau` over points with
/// `tau` in `[lo, hi]`.
pub fn loglog_slope(curve: &AdevCurve, lo: f64, hi: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve
        .taus
        .iter()
        .zip(&curve.adev)
        .filter(|(t, a)| **t >= lo && **t <= hi && **a > 0.0)
        .map(|(t, a)| (libm::log10(*t), libm::log10(*a)))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Pointwise mean and empirical quantile band of one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandPoint {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = libm::floor(h) as usize;
    if i + 1 >= sorted.len() {
        return sorted[sorted.len() - 1];
    }
    sorted[i] + (h - i as f64) * (sorted[i + 1] - sorted[i])
}

/// Per-step mean and the central `level` band of the empirical distribution
/// across paths. Paths may differ in length; the band covers the shortest.
pub fn confidence_band(paths: &[Vec<f64>], level: f64) -> Result<Vec<BandPoint>> {
    if paths.len() < 2 {
        return Err(Error::InvalidArgument("a confidence band needs at least two paths"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidArgument("confidence level must lie in (0, 1)"));
    }
    let steps = paths.iter().map(Vec::len).min().unwrap_or(0);
    let lo_p = (1.0 - level) / 2.0;
    let hi_p = 1.0 - lo_p;
    let mut column = Vec::with_capacity(paths.len());
    let mut out = Vec::with_capacity(steps);
    for k in 0..steps {
        column.clear();
        column.extend(paths.iter().map(|p| p[k]));
        let mean = column.iter().sum::<f64>() / column.len() as f64;
        column.sort_by(f64::total_cmp);
        out.push(BandPoint {
            mean,
            lo: quantile_sorted(&column, lo_p),
            hi: quantile_sorted(&column, hi_p),
        });
    }
    Ok(out)
}

/// Final `fraction` of `0..len`.
pub fn tail_window(len: usize, fraction: f64) -> Range<usize> {
    let keep = libm::ceil(len as f64 * fraction.clamp(0.0, 1.0)) as usize;
    len - keep.min(len)..len
}

/// Default tail fraction for asymptotic statistics.
pub const TAIL_FRACTION: f64 = 0.2;

/// Residuals of both algorithms on one path, restricted to a common window.
#[derive(Debug, Clone, PartialEq)]
pub struct PathResiduals {
    pub jst: Vec<DVector<f64>>,
    pub ckf: Vec<DVector<f64>>,
}

/// `Var(ε₁ᴶˢᵀ) - Var(ε₁ᶜᴷᶠ)` for one clock with its Monte-Carlo standard
/// error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceDiff {
    pub jst_var: f64,
    pub ckf_var: f64,
    pub diff: f64,
    pub std_err: f64,
}

/// Per-clock difference of residual variances across paths, pooled over
/// the steps of the window.
///
/// Variances are taken about the per-step mean over paths. The per-path
/// statistic `z_p = mean_k [(ε_J - ε̄_J(k))² - (ε_C - ε̄_C(k))²]` gives the
/// estimate `N/(N-1) mean z_p` and its standard error from the spread of
/// `z_p`, which accounts for the correlation of the two algorithms'
/// residuals on the same path.
pub fn residual_variance_compare(paths: &[PathResiduals]) -> Result<Vec<VarianceDiff>> {
    let np = paths.len();
    if np < 2 {
        return Err(Error::InvalidArgument("variance comparison needs at least two paths"));
    }
    let steps = paths[0].jst.len();
    if steps == 0 || paths.iter().any(|p| p.jst.len() != steps || p.ckf.len() != steps) {
        return Err(Error::InvalidArgument("all paths must cover the same nonempty window"));
    }
    let m = paths[0].jst[0].len();
    let mut mean_j = alloc::vec![DVector::<f64>::zeros(m); steps];
    let mut mean_c = alloc::vec![DVector::<f64>::zeros(m); steps];
    for p in paths {
        for k in 0..steps {
            mean_j[k] += &p.jst[k];
            mean_c[k] += &p.ckf[k];
        }
    }
    let inv = 1.0 / np as f64;
    for k in 0..steps {
        mean_j[k] *= inv;
        mean_c[k] *= inv;
    }
    let bessel = np as f64 / (np as f64 - 1.0);
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let mut z = Vec::with_capacity(np);
        let (mut vj, mut vc) = (0.0, 0.0);
        for p in paths {
            let (mut sj, mut sc) = (0.0, 0.0);
            for k in 0..steps {
                let dj = p.jst[k][i] - mean_j[k][i];
                let dc = p.ckf[k][i] - mean_c[k][i];
                sj += dj * dj;
                sc += dc * dc;
            }
            sj /= steps as f64;
            sc /= steps as f64;
            vj += sj;
            vc += sc;
            z.push((sj - sc) * bessel);
        }
        let zbar = z.iter().sum::<f64>() * inv;
        let zvar = z.iter().map(|v| (v - zbar) * (v - zbar)).sum::<f64>() / (np as f64 - 1.0);
        out.push(VarianceDiff {
            jst_var: vj * inv * bessel,
            ckf_var: vc * inv * bessel,
            diff: zbar,
            std_err: libm::sqrt(zvar / np as f64),
        });
    }
    Ok(out)
}

/// Sample mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::keyed_stream;
    use alloc::vec;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn constant_and_ramp_have_zero_adev() {
        let c = vec![3.0; 100];
        assert!(overlapping_adev(&c, 1.0).unwrap().adev.iter().all(|a| *a == 0.0));
        let ramp: Vec<f64> = (0..128).map(|k| 2.5 * k as f64 * 0.5).collect();
        assert!(overlapping_adev(&ramp, 0.5).unwrap().adev.iter().all(|a| *a < 1e-12));
    }

    #[test]
    fn adev_hand_example() {
        let x = [0.0, 1.0, 0.0, 1.0, 0.0];
        let c = overlapping_adev_at(&x, 1.0, &[1]).unwrap();
        // second differences: -2, 2, -2 -> 12 / (2 * 3)
        assert!((c.adev[0] - libm::sqrt(2.0)).abs() < 1e-15);
        assert!(matches!(
            overlapping_adev_at(&x, 1.0, &[3]),
            Err(Error::SeriesTooShort { .. })
        ));
        assert!(overlapping_adev(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn adev_ignores_offset_and_ramp() {
        let mut rng = keyed_stream(1, 1, 0);
        let x: Vec<f64> = (0..500).map(|_| StandardNormal.sample(&mut rng)).collect();
        let shifted: Vec<f64> = x.iter().enumerate().map(|(k, v)| v + 7.0 + 0.3 * k as f64).collect();
        let a = overlapping_adev(&x, 1.0).unwrap();
        let b = overlapping_adev(&shifted, 1.0).unwrap();
        for (u, v) in a.adev.iter().zip(&b.adev) {
            assert!((u - v).abs() <= 1e-9 * u);
        }
    }

    #[test]
    fn white_pm_slope_is_minus_one() {
        let mut rng = keyed_stream(2, 1, 0);
        let x: Vec<f64> = (0..1 << 14).map(|_| StandardNormal.sample(&mut rng)).collect();
        let c = overlapping_adev(&x, 1.0).unwrap();
        let s = loglog_slope(&c, 1.0, 256.0).unwrap();
        assert!((s + 1.0).abs() < 0.1, "{s}");
    }

    #[test]
    fn band_of_identical_paths_is_degenerate() {
        let p = vec![vec![1.0, 2.0, 3.0]; 5];
        let b = confidence_band(&p, 0.98).unwrap();
        for (k, bp) in b.iter().enumerate() {
            assert_eq!(bp.lo, (k + 1) as f64);
            assert_eq!(bp.hi, bp.lo);
            assert_eq!(bp.mean, bp.lo);
        }
        assert!(confidence_band(&p[..1], 0.9).is_err());
    }

    #[test]
    fn bands_nest_and_cover() {
        let mut rng = keyed_stream(3, 1, 0);
        let paths: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..50).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let b90 = confidence_band(&paths, 0.90).unwrap();
        let b99 = confidence_band(&paths, 0.99).unwrap();
        for (a, b) in b90.iter().zip(&b99) {
            assert!(b.lo <= a.lo && a.hi <= b.hi);
        }
        // N(0,1) 98% band is ±2.326
        let b98 = confidence_band(&paths, 0.98).unwrap();
        let avg_hi = b98.iter().map(|b| b.hi).sum::<f64>() / 50.0;
        assert!((avg_hi - 2.326).abs() < 0.1, "{avg_hi}");
    }

    #[test]
    fn tail_window_is_final_fraction() {
        assert_eq!(tail_window(100, 0.2), 80..100);
        assert_eq!(tail_window(7, 0.2), 5..7);
        assert_eq!(tail_window(5, 1.0), 0..5);
    }

    #[test]
    fn variance_comparison_recovers_known_difference() {
        // jst residual variance 4, ckf residual variance 1
        let mut rng = keyed_stream(4, 1, 0);
        let paths: Vec<PathResiduals> = (0..2000)
            .map(|_| {
                let mut jst = Vec::new();
                let mut ckf = Vec::new();
                for _ in 0..20 {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    jst.push(DVector::from_vec(vec![2.0 * a]));
                    ckf.push(DVector::from_vec(vec![b]));
                }
                PathResiduals { jst, ckf }
            })
            .collect();
        let d = residual_variance_compare(&paths).unwrap()[0];
        assert!((d.diff - 3.0).abs() < 4.0 * d.std_err, "{d:?}");
        assert!(d.std_err < 0.1);
    }
}
