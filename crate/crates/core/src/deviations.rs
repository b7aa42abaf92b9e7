//! Empirical large deviations of `u_n(x) = (1/n) log ‖A^(n)(x)‖`, fits of
//! the deviation shapes `C·n^{−a}` and `e^{−n^b}`, almost-invariance scans and
//! uniform measurements of the determinant.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{
    certify_not_identically_singular, determinant_function, log_factorial, orbit_matrices,
    sup_norm_strip, FourierCocycle, STRIP_GRID, ZERO_GUARD,
};
use crate::error::{LabError, Result};
use crate::linalg::{Matrix, ScaledMatrix};
use crate::stats::{linear_fit, quantile, MeanEstimate};
use crate::torus::{Frequency, Sampler, TorusPoint};

/// Per-sample `u_n`, `None` where the product degenerates.
pub(crate) fn sample_u(
    a: &FourierCocycle,
    omega: &Frequency,
    points: &[TorusPoint],
    n: usize,
) -> Vec<Option<f64>> {
    points
        .par_iter()
        .map(|p| {
            let prod = crate::cocycle::orbit_product(a, omega, p.coords(), 0, n);
            let v = prod.log_norm() / n as f64;
            (prod.is_finite() && v.is_finite()).then_some(v)
        })
        .collect()
}

/// `u_n` at each point, `−∞` where the product degenerates.
pub fn u_values(
    a: &FourierCocycle,
    omega: &Frequency,
    points: &[TorusPoint],
    n: usize,
) -> Result<Vec<f64>> {
    check_scale(a, omega, n)?;
    if let Some(p) = points.iter().find(|p| p.dim() != a.dim()) {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            found: p.dim(),
        });
    }
    Ok(sample_u(a, omega, points, n)
        .into_iter()
        .map(|v| v.unwrap_or(f64::NEG_INFINITY))
        .collect())
}

fn check_scale(a: &FourierCocycle, omega: &Frequency, n: usize) -> Result<()> {
    if n == 0 {
        return Err(LabError::InvalidParameter("scale n must be >= 1".into()));
    }
    if omega.dim() != a.dim() {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            found: omega.dim(),
        });
    }
    Ok(())
}

/// Deviation measures at one scale for several thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationSlice {
    pub n: usize,
    /// `L^(n)_1` the deviations are measured from.
    pub l_n: f64,
    pub epsilons: Vec<f64>,
    pub measures: Vec<f64>,
    pub sample_count: usize,
    pub excluded: usize,
}

/// Fractions of samples with `|u_n(x) − L^(n)_1| > ε` for each `ε`.
///
/// `L^(n)_1` is averaged over the same samples unless `supplied_l` is given.
pub fn deviation_slice(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    epsilons: &[f64],
    points: &[TorusPoint],
    supplied_l: Option<f64>,
) -> Result<DeviationSlice> {
    check_scale(a, omega, n)?;
    if points.is_empty() {
        return Err(LabError::InvalidParameter("sampler is empty".into()));
    }
    if epsilons.iter().any(|e| !(*e > 0.0)) {
        return Err(LabError::InvalidParameter(
            "deviation thresholds must be positive".into(),
        ));
    }
    let u: Vec<f64> = sample_u(a, omega, points, n)
        .into_iter()
        .flatten()
        .collect();
    if u.is_empty() {
        return Err(LabError::TooManyExcluded {
            excluded: points.len(),
            total: points.len(),
            limit: 1.0,
        });
    }
    let l_n = supplied_l.unwrap_or_else(|| MeanEstimate::from_values(&u).mean);
    let measures = epsilons
        .iter()
        .map(|eps| u.iter().filter(|v| (*v - l_n).abs() > *eps).count() as f64 / u.len() as f64)
        .collect();
    Ok(DeviationSlice {
        n,
        l_n,
        epsilons: epsilons.to_vec(),
        measures,
        sample_count: u.len(),
        excluded: points.len() - u.len(),
    })
}

/// `|{x : |u_n(x) − L^(n)_1| > ε}|` estimated on the sampler.
pub fn deviation_measure(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    epsilon: f64,
    sampler: &Sampler,
    supplied_l: Option<f64>,
) -> Result<f64> {
    Ok(deviation_slice(a, omega, n, &[epsilon], &sampler.points()?, supplied_l)?.measures[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviationRow {
    pub n: usize,
    pub epsilon: f64,
    pub measure: f64,
    pub samples: usize,
}

/// Deviation rows over a grid of scales and thresholds, sorted by `n` then `ε`.
pub fn deviation_curve(
    a: &FourierCocycle,
    omega: &Frequency,
    ns: &[usize],
    epsilons: &[f64],
    sampler: &Sampler,
) -> Result<Vec<DeviationRow>> {
    let points = sampler.points()?;
    let mut ns = ns.to_vec();
    ns.sort_unstable();
    let mut eps = epsilons.to_vec();
    eps.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(ns.len() * eps.len());
    for n in ns {
        let slice = deviation_slice(a, omega, n, &eps, &points, None)?;
        for (e, m) in slice.epsilons.iter().zip(&slice.measures) {
            rows.push(DeviationRow {
                n,
                epsilon: *e,
                measure: *m,
                samples: slice.sample_count,
            });
        }
    }
    Ok(rows)
}

/// Measure level used to read off the deviation size `ε_n`.
pub const DEFAULT_FIT_TARGET: f64 = 0.05;

/// Fitted deviation shapes `measure ≈ K·e^{−s·n^b}` and `ε_n ≈ C·n^{−a}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LdtFit {
    pub b_hat: f64,
    /// Slope `s` of `log measure` against `n^b`, negated.
    pub rate: f64,
    pub log_prefactor: f64,
    pub r_squared: f64,
    /// Threshold whose rows were used for the `b` fit.
    pub epsilon_used: f64,
    pub residuals: Vec<f64>,
    pub c_hat: Option<f64>,
    pub a_hat: Option<f64>,
    pub a_r_squared: Option<f64>,
    pub target: f64,
}

fn fit_b(ns: &[f64], log_mu: &[f64], b: f64) -> Option<crate::stats::LinearFit> {
    let xs: Vec<f64> = ns.iter().map(|n| n.powf(b)).collect();
    linear_fit(&xs, log_mu)
}

/// Fits the deviation shapes; see [`LdtFit`].
pub fn ldt_fit(rows: &[DeviationRow]) -> Result<LdtFit> {
    ldt_fit_with_target(rows, DEFAULT_FIT_TARGET)
}

pub fn ldt_fit_with_target(rows: &[DeviationRow], target: f64) -> Result<LdtFit> {
    if rows.iter().any(|r| !(0.0..=1.0).contains(&r.measure)) {
        return Err(LabError::InvalidParameter(
            "measures must lie in [0, 1]".into(),
        ));
    }
    if rows.iter().all(|r| r.measure == 0.0) {
        return Err(LabError::BelowResolution);
    }
    let mut eps: Vec<f64> = rows.iter().map(|r| r.epsilon).collect();
    eps.sort_by(f64::total_cmp);
    eps.dedup();
    // The threshold with the most nonzero rows; ties go to the smallest ε.
    let nonzero = |e: f64| {
        rows.iter()
            .filter(|r| r.epsilon == e && r.measure > 0.0)
            .count()
    };
    let epsilon_used =
        eps.iter().copied().fold(
            eps[0],
            |best, e| if nonzero(e) > nonzero(best) { e } else { best },
        );
    let mut group: Vec<&DeviationRow> = rows
        .iter()
        .filter(|r| r.epsilon == epsilon_used && r.measure > 0.0)
        .collect();
    group.sort_by_key(|r| r.n);
    group.dedup_by_key(|r| r.n);
    if group.len() < 3 {
        return Err(LabError::Precondition(format!(
            "LDT fit needs at least 3 scales with nonzero measure, found {}",
            group.len()
        )));
    }
    let ns: Vec<f64> = group.iter().map(|r| r.n as f64).collect();
    let log_mu: Vec<f64> = group.iter().map(|r| r.measure.ln()).collect();

    let score = |b: f64| fit_b(&ns, &log_mu, b).map_or(f64::INFINITY, |f| f.sse);
    let mut b_best = 0.01;
    let mut s_best = score(b_best);
    for i in 2..=200 {
        let b = i as f64 * 0.01;
        let s = score(b);
        if s < s_best {
            (b_best, s_best) = (b, s);
        }
    }
    // Golden-section refinement inside the neighbouring grid cells.
    let (mut lo, mut hi) = ((b_best - 0.01).max(1e-3), (b_best + 0.01).min(2.0));
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let (x1, x2) = (hi - g * (hi - lo), lo + g * (hi - lo));
        if score(x1) <= score(x2) {
            hi = x2;
        } else {
            lo = x1;
        }
    }
    let refined = 0.5 * (lo + hi);
    let b_hat = if score(refined) <= s_best {
        refined
    } else {
        b_best
    };
    let fit = fit_b(&ns, &log_mu, b_hat).expect("at least 3 distinct scales");
    let residuals = ns
        .iter()
        .zip(&log_mu)
        .map(|(n, y)| y - fit.intercept - fit.slope * n.powf(b_hat))
        .collect();

    // ε_n: the smallest threshold whose measure is at most the target.
    let mut scales: Vec<usize> = rows.iter().map(|r| r.n).collect();
    scales.sort_unstable();
    scales.dedup();
    let (log_n, log_eps): (Vec<f64>, Vec<f64>) = scales
        .iter()
        .filter_map(|&n| {
            rows.iter()
                .filter(|r| r.n == n && r.measure <= target)
                .map(|r| r.epsilon)
                .min_by(f64::total_cmp)
                .map(|e| ((n as f64).ln(), e.ln()))
        })
        .unzip();
    let size_fit = linear_fit(&log_n, &log_eps);

    Ok(LdtFit {
        b_hat,
        rate: -fit.slope,
        log_prefactor: fit.intercept,
        r_squared: fit.r_squared,
        epsilon_used,
        residuals,
        c_hat: size_fit.map(|f| f.intercept.exp()),
        a_hat: size_fit.map(|f| -f.slope),
        a_r_squared: size_fit.map(|f| f.r_squared),
        target,
    })
}

/// Differences `|u_n(x) − u_n(Tx)|` below this are rounding and count as 0.
pub const ROUNDING_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceScan {
    pub n: usize,
    pub a_exp: f64,
    /// Mass of the evaluation half above `C_hat·n^{−a}`.
    pub violation_fraction: f64,
    /// 99th percentile of the calibration half, times `n^a`.
    pub c_hat: f64,
    pub max_difference: f64,
    pub calibration_count: usize,
    pub evaluation_count: usize,
    pub excluded: usize,
}

/// Measures `|u_n(x) − u_n(x + ω)|`.
///
/// The kept samples are split in sampler order: the first half calibrates
/// `C_hat`, the second half is scored against it.
pub fn almost_invariance_scan(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    a_exp: f64,
    sampler: &Sampler,
) -> Result<InvarianceScan> {
    check_scale(a, omega, n)?;
    if !(a_exp > 0.0 && a_exp < 1.0) {
        return Err(LabError::InvalidParameter(format!(
            "exponent a = {a_exp} must lie in (0, 1)"
        )));
    }
    let points = sampler.points()?;
    let m = a.size();
    let diffs: Vec<Option<f64>> = points
        .par_iter()
        .map(|p| {
            let steps = orbit_matrices(a, omega, p.coords(), n + 1);
            let mut scratch = Matrix::zeros(m, m);
            let mut here = ScaledMatrix::identity(m);
            let mut next = ScaledMatrix::identity(m);
            for s in &steps[..n] {
                here.left_mul_assign(s, &mut scratch);
            }
            for s in &steps[1..] {
                next.left_mul_assign(s, &mut scratch);
            }
            let d = ((here.log_norm() - next.log_norm()) / n as f64).abs();
            let d = if d < ROUNDING_FLOOR { 0.0 } else { d };
            (here.is_finite() && next.is_finite() && d.is_finite()).then_some(d)
        })
        .collect();
    let kept: Vec<f64> = diffs.iter().flatten().copied().collect();
    if kept.len() < 2 {
        return Err(LabError::TooManyExcluded {
            excluded: points.len() - kept.len(),
            total: points.len(),
            limit: 1.0,
        });
    }
    let half = kept.len() / 2;
    let (calibration, evaluation) = kept.split_at(half);
    let q99 = quantile(calibration, 0.99).expect("nonempty");
    let scale = (n as f64).powf(a_exp);
    let violations = evaluation.iter().filter(|d| **d > q99).count();
    Ok(InvarianceScan {
        n,
        a_exp,
        violation_fraction: violations as f64 / evaluation.len() as f64,
        c_hat: q99 * scale,
        max_difference: kept.iter().copied().fold(0.0, f64::max),
        calibration_count: calibration.len(),
        evaluation_count: evaluation.len(),
        excluded: points.len() - kept.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementReport {
    /// `log ‖A‖_r`.
    pub sup_log_norm: f64,
    /// `(mean of log²|det A|)^{1/2}`.
    pub det_l2: f64,
    pub det_l2_std_error: f64,
    /// `m·|log ‖A‖_r| + log (m − 1)!`.
    pub cramer_constant: f64,
    pub sample_count: usize,
    pub excluded: usize,
}

pub fn uniform_measurement(a: &FourierCocycle, sampler: &Sampler) -> Result<MeasurementReport> {
    uniform_measurement_on(a, &sampler.points()?)
}

pub fn uniform_measurement_on(
    a: &FourierCocycle,
    points: &[TorusPoint],
) -> Result<MeasurementReport> {
    if points.is_empty() {
        return Err(LabError::InvalidParameter("sampler is empty".into()));
    }
    if let Some(p) = points.iter().find(|p| p.dim() != a.dim()) {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            found: p.dim(),
        });
    }
    certify_not_identically_singular(a)?;
    let sup_log_norm = sup_norm_strip(a, STRIP_GRID)?.ln();
    let det = determinant_function(a);
    let squares: Vec<f64> = points
        .par_iter()
        .map(|p| det.eval_raw(p.coords()).abs())
        .collect::<Vec<f64>>()
        .into_iter()
        .filter(|f| *f >= ZERO_GUARD && f.is_finite())
        .map(|f| f.ln() * f.ln())
        .collect();
    if squares.is_empty() {
        return Err(LabError::IdenticallySingular {
            max_abs: 0.0,
            samples: points.len(),
        });
    }
    let est = MeanEstimate::from_values(&squares);
    let det_l2 = est.mean.sqrt();
    let det_l2_std_error = if det_l2 > 0.0 {
        est.std_error / (2.0 * det_l2)
    } else {
        est.std_error.sqrt()
    };
    let m = a.size();
    Ok(MeasurementReport {
        sup_log_norm,
        det_l2,
        det_l2_std_error,
        cramer_constant: m as f64 * sup_log_norm.abs() + log_factorial(m - 1),
        sample_count: squares.len(),
        excluded: points.len() - squares.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::presets;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    #[test]
    fn trivial_cocycles_never_deviate() {
        let w = Frequency::golden();
        let s = Sampler::random(1, 500, 1);
        assert_eq!(
            deviation_measure(&presets::rotation(1), &w, 100, 1e-6, &s, None).unwrap(),
            0.0
        );
        for n in [1, 10, 100] {
            assert_eq!(
                deviation_measure(&presets::const_diag(1), &w, n, 1e-9, &s, None).unwrap(),
                0.0
            );
        }
    }

    #[test]
    fn supplied_mean_is_respected() {
        let w = Frequency::golden();
        let s = Sampler::random(1, 50, 1);
        let m = deviation_measure(&presets::const_diag(1), &w, 10, 0.1, &s, Some(0.0)).unwrap();
        assert_eq!(m, 1.0);
    }

    #[test]
    fn schrodinger_deviations_decay() {
        let rows = deviation_curve(
            &presets::schrodinger(10.0, 0.0),
            &Frequency::golden(),
            &[50, 100, 200],
            &[0.05],
            &Sampler::random(1, 2000, 3),
        )
        .unwrap();
        for w in rows.windows(2) {
            let se = (w[0].measure * (1.0 - w[0].measure) / w[0].samples as f64).sqrt();
            assert!(w[1].measure <= w[0].measure + se, "{rows:?}");
        }
        assert!(rows.last().unwrap().measure < 0.05);
    }

    #[test]
    fn fit_recovers_synthetic_exponent() {
        let rows: Vec<DeviationRow> = [16usize, 36, 64, 100, 144, 196]
            .iter()
            .map(|&n| DeviationRow {
                n,
                epsilon: 0.1,
                measure: (-(n as f64).sqrt()).exp(),
                samples: 1,
            })
            .collect();
        let fit = ldt_fit(&rows).unwrap();
        assert!((fit.b_hat - 0.5).abs() < 0.02, "{fit:?}");
        assert!(fit.r_squared > 0.999);
        assert!((fit.rate - 1.0).abs() < 0.05);
    }

    #[test]
    fn fit_recovers_size_exponent() {
        // measure(n, ε) = exp(−n^{1.1}·ε²), so ε_n ∝ n^{−0.55} at a fixed target.
        let mut rows = Vec::new();
        for n in [20usize, 40, 80, 160] {
            for k in 1..=200 {
                let eps = k as f64 * 0.002;
                let arg = (n as f64).sqrt() * (eps * (n as f64).powf(0.3)).powi(2);
                rows.push(DeviationRow {
                    n,
                    epsilon: eps,
                    measure: (-arg).exp(),
                    samples: 1,
                });
            }
        }
        let fit = ldt_fit_with_target(&rows, 0.05).unwrap();
        assert!((fit.a_hat.unwrap() - 0.55).abs() < 0.03, "{fit:?}");
    }

    #[test]
    fn fit_below_resolution() {
        let rows = vec![
            DeviationRow {
                n: 10,
                epsilon: 0.1,
                measure: 0.0,
                samples: 10
            };
            3
        ];
        assert_eq!(ldt_fit(&rows), Err(LabError::BelowResolution));
        let rows = vec![
            DeviationRow {
                n: 10,
                epsilon: 0.1,
                measure: 0.1,
                samples: 10,
            },
            DeviationRow {
                n: 20,
                epsilon: 0.1,
                measure: 0.05,
                samples: 10,
            },
        ];
        assert!(matches!(ldt_fit(&rows), Err(LabError::Precondition(_))));
    }

    #[test]
    fn invariance_of_trivial_cocycles() {
        let w = Frequency::golden();
        let s = Sampler::random(1, 400, 2);
        for a in [presets::const_diag(1), presets::rotation(1)] {
            let r = almost_invariance_scan(&a, &w, 50, 0.5, &s).unwrap();
            assert!(r.max_difference < 1e-12);
            assert_eq!(r.violation_fraction, 0.0);
        }
    }

    #[test]
    fn invariance_near_zeros() {
        let r = almost_invariance_scan(
            &presets::diag_cos(1),
            &Frequency::golden(),
            100,
            0.5,
            &Sampler::random(1, 20_000, 5),
        )
        .unwrap();
        // The calibrated 99th percentile leaves 1% in expectation; allow three
        // binomial standard deviations.
        let sd = (0.01 * 0.99 / r.evaluation_count as f64).sqrt();
        assert!(r.violation_fraction <= 0.01 + 3.0 * sd, "{r:?}");
        assert!(r.c_hat > 0.0);
    }

    #[test]
    fn measurement_examples() {
        let s = Sampler::random(1, 1000, 0);
        let r = uniform_measurement(&presets::const_diag(1), &s).unwrap();
        assert!((r.det_l2 - 2f64.ln()).abs() < 1e-15);
        assert!((r.sup_log_norm - 2f64.ln()).abs() < 1e-15);
        assert!((r.cramer_constant - 2.0 * 2f64.ln()).abs() < 1e-15);
        let r = uniform_measurement(&presets::schrodinger(3.0, 0.0), &s).unwrap();
        assert!(r.det_l2 < 1e-14);
    }

    #[test]
    fn measurement_matches_log_cos_integral() {
        // ∫₀¹ log²|2cos 2πx| dx = π²/12.
        let exact = PI / 12f64.sqrt();
        // The rectangle rule misses O(h log² h) mass at the zero x = 1/4.
        let coarse =
            uniform_measurement(&presets::diag_cos(1), &Sampler::lattice(1, 1 << 22)).unwrap();
        let fine =
            uniform_measurement(&presets::diag_cos(1), &Sampler::lattice(1, 1 << 24)).unwrap();
        assert!((coarse.det_l2 - fine.det_l2).abs() < 1e-4);
        assert!(
            (fine.det_l2 - exact).abs() < 1e-4,
            "{} vs {exact}",
            fine.det_l2
        );
        assert!(fine.excluded >= 2);
    }

    #[test]
    fn measurement_is_translation_invariant() {
        let a = presets::diag_cos(1);
        let pts = Sampler::random(1, 20_000, 8).points().unwrap();
        let shifted: Vec<TorusPoint> = pts
            .iter()
            .map(|p| crate::torus::translate(p, &Frequency::golden(), 7).unwrap())
            .collect();
        let r1 = uniform_measurement_on(&a, &pts).unwrap();
        let r2 = uniform_measurement_on(&a, &shifted).unwrap();
        let se = (r1.det_l2_std_error.powi(2) + r2.det_l2_std_error.powi(2)).sqrt();
        assert!((r1.det_l2 - r2.det_l2).abs() <= 2.0 * se);
    }

    #[test]
    fn cramer_constant_bounds_every_sample() {
        let a = presets::schrodinger(2.0, 0.4);
        let r = uniform_measurement(&a, &Sampler::random(1, 100, 0)).unwrap();
        let check = crate::cocycle::cramer_bounds_check(
            &a,
            &Frequency::golden(),
            40,
            &Sampler::random(1, 500, 1).points().unwrap(),
        )
        .unwrap();
        assert!(r.cramer_constant >= check.c_lower);
        assert!(r.cramer_constant >= check.c_upper);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn measure_nonincreasing_in_epsilon(seed in 0u64..1000, e1 in 0.001f64..0.5, e2 in 0.001f64..0.5) {
            let (lo, hi) = if e1 < e2 { (e1, e2) } else { (e2, e1) };
            let pts = Sampler::random(1, 200, seed).points().unwrap();
            let s = deviation_slice(&presets::schrodinger(4.0, 0.0), &Frequency::golden(), 30, &[lo, hi], &pts, None).unwrap();
            prop_assert!(s.measures[1] <= s.measures[0]);
        }
    }
}
