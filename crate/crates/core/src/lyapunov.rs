//! Finite-scale Lyapunov spectra, gap patterns and finite-scale flags.
//!
//! `Λ^(n)_j` is the torus average of `(1/n) log ‖∧_j A^(n)(x)‖`, and
//! `L^(n)_j = Λ^(n)_j − Λ^(n)_{j−1}`. The exterior norms are accumulated as
//! renormalized products of the compound matrices of each step, which keeps
//! every exponent accurate even when the iterate itself is so badly
//! conditioned that its trailing singular values underflow.

use std::f64::consts::FRAC_PI_2;

use nalgebra::SVD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{orbit_matrices, FourierCocycle};
use crate::error::{LabError, Result};
use crate::linalg::{compound_matrix, singular_values, spectral_norm, Matrix, ScaledMatrix};
use crate::stats::{compensated_sum, linear_fit, LinearFit, MeanEstimate};
use crate::torus::{Frequency, Sampler, TorusPoint};

/// Per-step exterior norms below this count as underflow.
pub const UNDERFLOW_GUARD: f64 = 1e-300;

/// Flags are only computed when `log(s_τ/s_{τ+1}) > FLAG_GAP`, i.e. the
/// finite-scale gap exceeds `FLAG_GAP/n`.
pub const FLAG_GAP: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteScaleSpectrum {
    pub n: usize,
    /// `Λ^(n)_1..m`.
    pub lambdas: Vec<f64>,
    pub lambda_std_errors: Vec<f64>,
    /// `L^(n)_1..m`.
    pub les: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub sample_count: usize,
    /// Samples dropped by the underflow guard.
    pub excluded: usize,
}

/// Per-sample `(1/n) log ‖∧_j A^(n)(x)‖` for `j = 1..m`.
pub(crate) fn sample_exterior_logs(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &[f64],
    n: usize,
) -> Option<Vec<f64>> {
    let m = a.size();
    let steps = orbit_matrices(a, omega, x, n);
    let mut out = Vec::with_capacity(m);
    for j in 1..=m {
        let log_norm = if j == m {
            let mut logs = Vec::with_capacity(n);
            for s in &steps {
                let det = s.determinant().abs();
                if !(det >= UNDERFLOW_GUARD) || !det.is_finite() {
                    return None;
                }
                logs.push(det.ln());
            }
            compensated_sum(logs)
        } else {
            let mut prod = ScaledMatrix::identity(crate::linalg::binomial(m, j));
            let mut scratch = prod.mantissa.clone();
            for s in &steps {
                let c = if j == 1 {
                    s.clone()
                } else {
                    compound_matrix(s, j).ok()?
                };
                if !(spectral_norm(&c) >= UNDERFLOW_GUARD) {
                    return None;
                }
                prod.left_mul_assign(&c, &mut scratch);
            }
            if !prod.is_finite() {
                return None;
            }
            prod.log_norm()
        };
        if !log_norm.is_finite() {
            return None;
        }
        out.push(log_norm / n as f64);
    }
    Some(out)
}

fn check_inputs(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    points: &[TorusPoint],
) -> Result<()> {
    if n == 0 {
        return Err(LabError::InvalidParameter("scale n must be >= 1".into()));
    }
    if points.is_empty() {
        return Err(LabError::InvalidParameter("sampler is empty".into()));
    }
    if omega.dim() != a.dim() {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            found: omega.dim(),
        });
    }
    if let Some(p) = points.iter().find(|p| p.dim() != a.dim()) {
        return Err(LabError::DimensionMismatch {
            expected: a.dim(),
            found: p.dim(),
        });
    }
    Ok(())
}

fn assemble(n: usize, m: usize, per_sample: Vec<Option<Vec<f64>>>) -> Result<FiniteScaleSpectrum> {
    let total = per_sample.len();
    let kept: Vec<Vec<f64>> = per_sample.into_iter().flatten().collect();
    if kept.is_empty() {
        return Err(LabError::TooManyExcluded {
            excluded: total,
            total,
            limit: 1.0,
        });
    }
    let mut lambdas = Vec::with_capacity(m);
    let mut lambda_std_errors = Vec::with_capacity(m);
    let mut les = Vec::with_capacity(m);
    let mut std_errors = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<f64> = kept.iter().map(|v| v[j]).collect();
        let est = MeanEstimate::from_values(&col);
        lambdas.push(est.mean);
        lambda_std_errors.push(est.std_error);
        let diff: Vec<f64> = kept
            .iter()
            .map(|v| if j == 0 { v[0] } else { v[j] - v[j - 1] })
            .collect();
        let est = MeanEstimate::from_values(&diff);
        std_errors.push(est.std_error);
        // Keeps Λ_j = L_1 + … + L_j exact up to rounding.
        les.push(if j == 0 {
            lambdas[0]
        } else {
            lambdas[j] - lambdas[j - 1]
        });
    }
    Ok(FiniteScaleSpectrum {
        n,
        lambdas,
        lambda_std_errors,
        les,
        std_errors,
        sample_count: kept.len(),
        excluded: total - kept.len(),
    })
}

/// Finite-scale spectrum averaged over the sampler's points.
pub fn finite_scale_spectrum(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    sampler: &Sampler,
) -> Result<FiniteScaleSpectrum> {
    finite_scale_spectrum_on(a, omega, n, &sampler.points()?)
}

pub fn finite_scale_spectrum_on(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    points: &[TorusPoint],
) -> Result<FiniteScaleSpectrum> {
    check_inputs(a, omega, n, points)?;
    let per_sample: Vec<Option<Vec<f64>>> = points
        .par_iter()
        .map(|p| sample_exterior_logs(a, omega, p.coords(), n))
        .collect();
    assemble(n, a.size(), per_sample)
}

/// The same averages taken from the singular values of the iterate itself.
///
/// Agrees with [`finite_scale_spectrum_on`] while `A^(n)` is well conditioned;
/// trailing exponents degrade once `s_m/s_1` approaches machine precision.
pub fn finite_scale_spectrum_svd(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    points: &[TorusPoint],
) -> Result<FiniteScaleSpectrum> {
    check_inputs(a, omega, n, points)?;
    let per_sample: Vec<Option<Vec<f64>>> = points
        .par_iter()
        .map(|p| {
            let r = crate::cocycle::iterate(a, omega, p, n).ok()?;
            let logs = r.log_singular_values();
            let mut acc = 0.0;
            let mut out = Vec::with_capacity(logs.len());
            for l in logs {
                if !l.is_finite() {
                    return None;
                }
                acc += l;
                out.push(acc / n as f64);
            }
            Some(out)
        })
        .collect();
    assemble(n, a.size(), per_sample)
}

/// Gap signature `τ = (τ₁ < … < τ_k)`, `1 ≤ τ_i < m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Signature {
    tau: Vec<usize>,
}

impl Signature {
    pub fn new(tau: Vec<usize>, m: usize) -> Result<Self> {
        if tau.windows(2).any(|w| w[0] >= w[1]) || tau.iter().any(|t| *t == 0 || *t >= m) {
            return Err(LabError::InvalidParameter(format!(
                "signature {tau:?} is not strictly increasing in 1..{m}"
            )));
        }
        Ok(Signature { tau })
    }

    pub fn empty() -> Self {
        Signature { tau: Vec::new() }
    }

    pub fn tau(&self) -> &[usize] {
        &self.tau
    }

    pub fn is_empty(&self) -> bool {
        self.tau.is_empty()
    }
}

/// Indices `j` (1-based) with `L_j − L_{j+1} > tol`.
pub fn gap_pattern(spec: &FiniteScaleSpectrum, tol: f64) -> Result<Signature> {
    if !(tol > 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "gap tolerance {tol} must be positive"
        )));
    }
    let tau = spec
        .les
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[0] - w[1] > tol)
        .map(|(i, _)| i + 1)
        .collect();
    Ok(Signature { tau })
}

/// A finite-scale flag at one base point.
///
/// `components[i]` is an orthonormal basis (as columns) of the `i`-th flag
/// subspace; components increase in dimension, the first being the most
/// contracted directions.
#[derive(Debug, Clone, PartialEq)]
pub struct FlagSample {
    pub x: TorusPoint,
    pub signature: Signature,
    pub components: Vec<Matrix>,
}

/// Right singular vectors of `mantissa`, columns ordered by nonincreasing
/// singular value.
fn sorted_right_singular_vectors(mat: &Matrix) -> (Vec<f64>, Matrix) {
    let svd = SVD::new(mat.clone(), false, true);
    let v_t = svd.v_t.expect("requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|a, b| svd.singular_values[*b].total_cmp(&svd.singular_values[*a]));
    let m = mat.nrows();
    let v = Matrix::from_fn(m, m, |i, c| v_t[(order[c], i)]);
    (order.iter().map(|i| svd.singular_values[*i]).collect(), v)
}

/// Flag of signature `τ` from the right singular vectors of `A^(n)(x)`.
///
/// The component of dimension `m − τ_i` is spanned by the singular vectors
/// left after removing the top `τ_i` ones.
pub fn finite_scale_filtration(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &TorusPoint,
    n: usize,
    tau: &Signature,
) -> Result<FlagSample> {
    let m = a.size();
    if tau.tau.iter().any(|t| *t >= m) {
        return Err(LabError::InvalidParameter(format!(
            "signature {:?} exceeds m = {m}",
            tau.tau
        )));
    }
    let r = crate::cocycle::iterate(a, omega, x, n)?;
    let logs = r.log_singular_values();
    let (_, v) = sorted_right_singular_vectors(&r.product);
    let mut components = Vec::with_capacity(tau.tau.len());
    for &t in tau.tau.iter().rev() {
        let gap = logs[t - 1] - logs[t];
        if !(gap > FLAG_GAP) {
            return Err(LabError::GapTooSmall {
                index: t,
                gap: gap / n as f64,
                required: FLAG_GAP / n as f64,
            });
        }
        let basis = v.columns(t, m - t).into_owned();
        components.push(basis.qr().q());
    }
    Ok(FlagSample {
        x: x.clone(),
        signature: tau.clone(),
        components,
    })
}

/// Largest principal angle between two subspaces of equal dimension given
/// by orthonormal column bases.
pub fn max_principal_angle(u: &Matrix, w: &Matrix) -> f64 {
    let proj = u.transpose() * w;
    let resid = w - u * &proj;
    let sin = spectral_norm_rect(&resid);
    let cos = singular_values(&proj).last().copied().unwrap_or(0.0);
    sin.atan2(cos).clamp(0.0, FRAC_PI_2)
}

fn spectral_norm_rect(mat: &Matrix) -> f64 {
    if mat.is_empty() {
        return 0.0;
    }
    if mat.nrows() == mat.ncols() {
        return spectral_norm(mat);
    }
    mat.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Distance between two flags at one point: the worst angle over components.
pub fn flag_distance(f: &FlagSample, g: &FlagSample) -> Result<f64> {
    if f.signature != g.signature || f.components.len() != g.components.len() {
        return Err(LabError::SignatureMismatch(format!(
            "{:?} vs {:?}",
            f.signature.tau, g.signature.tau
        )));
    }
    let mut worst = 0.0_f64;
    for (u, w) in f.components.iter().zip(&g.components) {
        if u.shape() != w.shape() {
            return Err(LabError::SignatureMismatch(
                "component dimensions differ".into(),
            ));
        }
        worst = worst.max(max_principal_angle(u, w));
    }
    Ok(worst)
}

/// Sample average of [`flag_distance`] between paired flags.
pub fn filtration_distance(f: &[FlagSample], g: &[FlagSample]) -> Result<f64> {
    if f.len() != g.len() {
        return Err(LabError::SignatureMismatch(format!(
            "{} vs {} flag samples",
            f.len(),
            g.len()
        )));
    }
    if f.is_empty() {
        return Ok(0.0);
    }
    let d = f
        .iter()
        .zip(g)
        .map(|(a, b)| flag_distance(a, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(MeanEstimate::from_values(&d).mean)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub delta: f64,
    #[serde(rename = "dL1")]
    pub d_l1: f64,
    pub dist_tau: f64,
    /// Samples where either flag was below the gap gate.
    pub flag_skipped: usize,
}

/// Fit of `dL ≈ exp(−c (log 1/δ)^b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakHolderFit {
    pub c: f64,
    pub b: f64,
    pub r_squared: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuityProbe {
    pub n: usize,
    pub tau: Vec<usize>,
    pub base_l1: f64,
    pub rows: Vec<ProbeRow>,
    pub fit: Option<WeakHolderFit>,
}

fn flags_on(
    a: &FourierCocycle,
    omega: &Frequency,
    points: &[TorusPoint],
    n: usize,
    tau: &Signature,
) -> Vec<Option<FlagSample>> {
    points
        .par_iter()
        .map(|p| finite_scale_filtration(a, omega, p, n, tau).ok())
        .collect()
}

/// Sensitivity of `L^(n)_1` and of the finite-scale flag along `A + δ·direction`.
///
/// All evaluations share the same sample points. The signature is the gap
/// pattern of `A` at tolerance `FLAG_GAP/n`.
pub fn continuity_probe(
    a: &FourierCocycle,
    direction: &FourierCocycle,
    deltas: &[f64],
    omega: &Frequency,
    n: usize,
    sampler: &Sampler,
) -> Result<ContinuityProbe> {
    if deltas.is_empty()
        || deltas.iter().any(|d| !(*d > 0.0))
        || deltas.windows(2).any(|w| w[1] >= w[0])
    {
        return Err(LabError::InvalidParameter(
            "deltas must be positive and decreasing".into(),
        ));
    }
    let points = sampler.points()?;
    let base = finite_scale_spectrum_on(a, omega, n, &points)?;
    let tau = gap_pattern(&base, FLAG_GAP / n as f64)?;
    let base_flags = if tau.is_empty() {
        Vec::new()
    } else {
        flags_on(a, omega, &points, n, &tau)
    };

    let mut rows = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let moved = a.perturbed(direction, delta)?;
        let spec = finite_scale_spectrum_on(&moved, omega, n, &points)?;
        let d_l1 = (spec.les[0] - base.les[0]).abs();
        let (dist_tau, flag_skipped) = if tau.is_empty() {
            (0.0, 0)
        } else {
            let flags = flags_on(&moved, omega, &points, n, &tau);
            let mut f = Vec::new();
            let mut g = Vec::new();
            for (x, y) in base_flags.iter().zip(flags) {
                if let (Some(x), Some(y)) = (x, y) {
                    f.push(x.clone());
                    g.push(y);
                }
            }
            let skipped = points.len() - f.len();
            (filtration_distance(&f, &g)?, skipped)
        };
        rows.push(ProbeRow {
            delta,
            d_l1,
            dist_tau,
            flag_skipped,
        });
    }
    let fit = fit_weak_holder(&rows);
    Ok(ContinuityProbe {
        n,
        tau: tau.tau,
        base_l1: base.les[0],
        rows,
        fit,
    })
}

/// Regression of `log(−log dL)` on `log log(1/δ)`.
fn fit_weak_holder(rows: &[ProbeRow]) -> Option<WeakHolderFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.delta < 1.0 && r.d_l1 > 0.0 && r.d_l1 < 1.0)
        .map(|r| ((1.0 / r.delta).ln().ln(), (-r.d_l1.ln()).ln()))
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    let LinearFit {
        intercept,
        slope,
        r_squared,
        ..
    } = linear_fit(&xs, &ys)?;
    Some(WeakHolderFit {
        c: intercept.exp(),
        b: slope,
        r_squared,
    })
}
