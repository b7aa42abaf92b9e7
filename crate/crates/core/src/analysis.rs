//! Sublevel-set fits, `L²` bounds for log-moduli, separately-`L²` norms and
//! unimodular changes of torus coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{FourierCocycle, FourierMode, ZERO_GUARD};
use crate::error::{LabError, Result};
use crate::stats::{linear_fit, pairwise_sum};
use crate::torus::{
    sample_grid, torus_distance, wrap_unit, Frequency, SampleScheme, Sampler, TorusPoint,
};

/// Dyadic thresholds `2^{lo}, …, 2^{hi}`.
pub fn dyadic_grid(lo: i32, hi: i32) -> Vec<f64> {
    (lo..=hi).map(|e| 2f64.powi(e)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LojaFit {
    #[serde(rename = "S_hat")]
    pub s_hat: f64,
    pub b_hat: f64,
    /// Least-squares prefactor before it is raised to an envelope.
    #[serde(rename = "S_ls")]
    pub s_ls: f64,
    pub r_squared: f64,
    pub t_grid: Vec<f64>,
    pub measures: Vec<f64>,
    /// `max_t (measure(t) − S_hat·t^{b_hat})`.
    pub max_violation: f64,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum LojaOutcome {
    Fit(LojaFit),
    /// Every threshold has empty sublevel set at this resolution.
    NoSublevelMass {
        t_grid: Vec<f64>,
        sample_count: usize,
    },
}

impl LojaOutcome {
    pub fn fit(&self) -> Option<&LojaFit> {
        match self {
            LojaOutcome::Fit(f) => Some(f),
            LojaOutcome::NoSublevelMass { .. } => None,
        }
    }
}

/// Fits `|{|f| < t}| ≤ S·t^b` on the sampler.
///
/// `b_hat` is the least-squares slope of `log measure` against `log t` over
/// the thresholds with nonzero measure; `S_hat` is the smallest prefactor
/// that makes the bound hold at every threshold of the grid.
pub fn loja_fit<F>(f: F, sampler: &Sampler, t_grid: &[f64]) -> Result<LojaOutcome>
where
    F: Fn(&TorusPoint) -> f64 + Sync,
{
    loja_fit_on(f, &sampler.points()?, t_grid)
}

pub fn loja_fit_on<F>(f: F, points: &[TorusPoint], t_grid: &[f64]) -> Result<LojaOutcome>
where
    F: Fn(&TorusPoint) -> f64 + Sync,
{
    if t_grid.is_empty() || t_grid.iter().any(|t| !(*t > 0.0)) {
        return Err(LabError::InvalidParameter(
            "thresholds must be positive".into(),
        ));
    }
    if points.is_empty() {
        return Err(LabError::InvalidParameter("sampler is empty".into()));
    }
    let values: Vec<f64> = points.par_iter().map(|p| f(p).abs()).collect();
    if values.iter().any(|v| v.is_nan()) {
        return Err(LabError::NonFinite("sublevel function value".into()));
    }
    let max_abs = values.iter().copied().fold(0.0, f64::max);
    if max_abs < ZERO_GUARD {
        return Err(LabError::IdenticallySingular {
            max_abs,
            samples: points.len(),
        });
    }
    let mut t_grid = t_grid.to_vec();
    t_grid.sort_by(f64::total_cmp);
    let mut sorted = values;
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let measures: Vec<f64> = t_grid
        .iter()
        .map(|t| sorted.partition_point(|v| v < t) as f64 / n)
        .collect();

    let (xs, ys): (Vec<f64>, Vec<f64>) = t_grid
        .iter()
        .zip(&measures)
        .filter(|(_, m)| **m > 0.0)
        .map(|(t, m)| (t.ln(), m.ln()))
        .unzip();
    if xs.is_empty() {
        return Ok(LojaOutcome::NoSublevelMass {
            t_grid,
            sample_count: points.len(),
        });
    }
    let fit = linear_fit(&xs, &ys).ok_or_else(|| {
        LabError::Precondition(
            "sublevel fit needs at least 2 thresholds with nonzero measure".into(),
        )
    })?;
    let b_hat = fit.slope;
    if !(b_hat > 0.0) {
        return Err(LabError::Precondition(format!(
            "fitted sublevel exponent {b_hat} is not positive"
        )));
    }
    let s_ls = fit.intercept.exp();
    let envelope = t_grid
        .iter()
        .zip(&measures)
        .map(|(t, m)| m / t.powf(b_hat))
        .fold(0.0, f64::max)
        * (1.0 + 1e-12);
    let s_hat = s_ls.max(envelope);
    let max_violation = t_grid
        .iter()
        .zip(&measures)
        .map(|(t, m)| m - s_hat * t.powf(b_hat))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(LojaOutcome::Fit(LojaFit {
        s_hat,
        b_hat,
        s_ls,
        r_squared: fit.r_squared,
        t_grid,
        measures,
        max_violation,
        sample_count: points.len(),
    }))
}

/// `|log sup| + S·(2^b − 1)^{−3/2}`.
pub fn log_l2_bound(s: f64, b: f64, sup_norm: f64) -> Result<f64> {
    if !(b > 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "exponent b = {b} must be positive"
        )));
    }
    if !(s > 0.0 && sup_norm > 0.0) {
        return Err(LabError::InvalidParameter(
            "S and the sup norm must be positive".into(),
        ));
    }
    Ok(sup_norm.ln().abs() + s * (2f64.powf(b) - 1.0).powf(-1.5))
}

/// Samples with `u < log(1e−14)` (or non-finite) count as singular.
const SINGULAR_LOG: f64 = -32.236_191_301_916_64; // ln(1e-14)

/// Lines with more than this fraction of singular samples are divergent.
pub const DIVERGENT_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparateL2Report {
    /// Largest one-variable `L²` norm over the finite lines.
    pub norm: f64,
    pub lines: usize,
    pub divergent_lines: usize,
    /// Per-axis maximum over finite lines.
    pub axis_norms: Vec<f64>,
}

/// `max_{axis, anchor} (∫_T |u(…, t, …)|² dt)^{1/2}` over sampled axis lines.
///
/// Anchors come from the lattice sampler with `line_grid` nodes per axis;
/// each line is sampled at `axis_samples` equispaced points.
pub fn separate_l2_norm<F>(
    u: F,
    d: usize,
    axis_samples: usize,
    line_grid: usize,
) -> Result<SeparateL2Report>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if d == 0 || axis_samples == 0 || line_grid == 0 {
        return Err(LabError::InvalidParameter(
            "separate L2 norm needs d, samples and anchors >= 1".into(),
        ));
    }
    let anchors = sample_grid(d, line_grid, SampleScheme::Lattice, 0)?;
    let jobs: Vec<(usize, &TorusPoint)> = (0..d)
        .flat_map(|axis| anchors.iter().map(move |a| (axis, a)))
        .collect();
    let lines: Vec<Option<f64>> = jobs
        .par_iter()
        .map(|(axis, anchor)| {
            let mut x = anchor.coords().to_vec();
            let mut squares = Vec::with_capacity(axis_samples);
            let mut singular = 0usize;
            for i in 0..axis_samples {
                x[*axis] = i as f64 / axis_samples as f64;
                let v = u(&x);
                if v.is_nan() {
                    return Err(LabError::NonFinite("line integrand".into()));
                }
                if !v.is_finite() || v < SINGULAR_LOG {
                    singular += 1;
                } else {
                    squares.push(v * v);
                }
            }
            if singular as f64 > DIVERGENT_FRACTION * axis_samples as f64 || squares.is_empty() {
                Ok(None)
            } else {
                Ok(Some((pairwise_sum(&squares) / squares.len() as f64).sqrt()))
            }
        })
        .collect::<Result<_>>()?;
    let mut axis_norms = vec![0.0_f64; d];
    for ((axis, _), line) in jobs.iter().zip(&lines) {
        if let Some(v) = line {
            axis_norms[*axis] = axis_norms[*axis].max(*v);
        }
    }
    Ok(SeparateL2Report {
        norm: axis_norms.iter().copied().fold(0.0, f64::max),
        lines: lines.len(),
        divergent_lines: lines.iter().filter(|l| l.is_none()).count(),
        axis_norms,
    })
}

/// An integer `d×d` matrix with its unimodularity and primitivity checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoordinateChange {
    pub d: usize,
    #[serde(rename = "M")]
    pub m: Vec<Vec<i64>>,
    pub det_check: i128,
    /// Smallest `k` with `M^k` entrywise positive.
    pub primitive_power: Option<usize>,
    pub charpoly_ok: bool,
}

impl CoordinateChange {
    /// Wraps a user-supplied matrix; it must be square with determinant 1.
    pub fn from_matrix(m: Vec<Vec<i64>>) -> Result<Self> {
        let d = m.len();
        if d == 0 || m.iter().any(|r| r.len() != d) {
            return Err(LabError::Parse(
                "coordinate matrix must be square and nonempty".into(),
            ));
        }
        let det = integer_determinant(&to_i128(&m));
        if det != 1 {
            return Err(LabError::NotUnimodular(det));
        }
        let primitive_power = primitive_power(&m);
        let charpoly_ok = charpoly_check(&m, d)?;
        Ok(CoordinateChange {
            d,
            m,
            det_check: det,
            primitive_power,
            charpoly_ok,
        })
    }

    pub fn identity(d: usize) -> Result<Self> {
        CoordinateChange::from_matrix(
            (0..d)
                .map(|i| (0..d).map(|j| i64::from(i == j)).collect())
                .collect(),
        )
    }

    /// `‖M‖_∞`, the largest absolute row sum.
    pub fn row_norm(&self) -> i64 {
        self.m
            .iter()
            .map(|r| r.iter().map(|v| v.abs()).sum())
            .max()
            .unwrap_or(0)
    }

    /// `‖M‖₁`, the largest absolute column sum.
    pub fn column_norm(&self) -> i64 {
        (0..self.d)
            .map(|j| self.m.iter().map(|r| r[j].abs()).sum())
            .max()
            .unwrap_or(0)
    }
}

fn to_i128(m: &[Vec<i64>]) -> Vec<Vec<i128>> {
    m.iter()
        .map(|r| r.iter().map(|v| i128::from(*v)).collect())
        .collect()
}

/// Fraction-free Gaussian elimination (Bareiss); exact for integer input.
pub fn integer_determinant(m: &[Vec<i128>]) -> i128 {
    let d = m.len();
    if d == 0 {
        return 1;
    }
    let mut a = m.to_vec();
    let mut sign = 1;
    let mut prev = 1i128;
    for k in 0..d - 1 {
        if a[k][k] == 0 {
            match (k + 1..d).find(|&r| a[r][k] != 0) {
                Some(r) => {
                    a.swap(k, r);
                    sign = -sign;
                }
                None => return 0,
            }
        }
        for i in k + 1..d {
            for j in k + 1..d {
                a[i][j] = (a[i][j] * a[k][k] - a[i][k] * a[k][j]) / prev;
            }
        }
        prev = a[k][k];
    }
    sign * a[d - 1][d - 1]
}

fn int_matmul(a: &[Vec<i128>], b: &[Vec<i128>]) -> Vec<Vec<i128>> {
    let d = a.len();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| a[i][k] * b[k][j]).sum())
                .collect()
        })
        .collect()
}

/// Smallest `k ≤ (d−1)² + 1` with `M^k > 0`; that bound is Wielandt's, so
/// `None` means the matrix is not primitive.
pub fn primitive_power(m: &[Vec<i64>]) -> Option<usize> {
    let d = m.len();
    if m.iter().flatten().any(|v| *v < 0) {
        return None;
    }
    // Only the sign pattern matters.
    let pattern: Vec<Vec<i128>> = m
        .iter()
        .map(|r| r.iter().map(|v| i128::from(*v > 0)).collect())
        .collect();
    let mut power = pattern.clone();
    for k in 1..=(d - 1) * (d - 1) + 1 {
        if power.iter().flatten().all(|v| *v > 0) {
            return Some(k);
        }
        power = int_matmul(&power, &pattern)
            .into_iter()
            .map(|r| r.into_iter().map(|v| i128::from(v > 0)).collect())
            .collect();
    }
    None
}

/// The matrix `M_d`: `[[1, 1], [1, 2]]` for `d = 2`; for `d > 2`, ones on the
/// diagonal and subdiagonal plus the entries `(0, d−1)` and `(1, d−1)`.
pub fn m_d_matrix(d: usize) -> Result<Vec<Vec<i64>>> {
    if d < 2 {
        return Err(LabError::InvalidParameter(format!(
            "M_d needs d >= 2, got {d}"
        )));
    }
    if d == 2 {
        return Ok(vec![vec![1, 1], vec![1, 2]]);
    }
    let mut m = vec![vec![0i64; d]; d];
    for i in 0..d {
        m[i][i] = 1;
        if i > 0 {
            m[i][i - 1] = 1;
        }
    }
    m[0][d - 1] = 1;
    m[1][d - 1] = 1;
    Ok(m)
}

pub fn coordinate_matrix(d: usize) -> Result<CoordinateChange> {
    CoordinateChange::from_matrix(m_d_matrix(d)?)
}

/// The cyclic permutation `P` with `P e_j = e_{j+1 mod d}`.
pub fn cyclic_permutation(d: usize) -> Vec<Vec<i64>> {
    (0..d)
        .map(|i| (0..d).map(|j| i64::from((j + 1) % d == i)).collect())
        .collect()
}

/// Entrywise `M ≥ I + P`.
pub fn dominates_identity_plus_cycle(m: &[Vec<i64>]) -> bool {
    let d = m.len();
    let p = cyclic_permutation(d);
    (0..d).all(|i| (0..d).all(|j| m[i][j] >= i64::from(i == j) + p[i][j]))
}

/// Checks `det(M − λI) = (−1)^d((λ−1)^d − λ)` at `λ = 0..=d` and that
/// `μ^d − μ − 1` has no root at `μ = ±1`.
pub fn charpoly_check(m: &[Vec<i64>], d: usize) -> Result<bool> {
    if m.len() != d || m.iter().any(|r| r.len() != d) {
        return Err(LabError::DimensionMismatch {
            expected: d,
            found: m.len(),
        });
    }
    let sign: i128 = if d.is_multiple_of(2) { 1 } else { -1 };
    let base = to_i128(m);
    for lambda in 0..=d as i128 {
        let mut shifted = base.clone();
        for (i, row) in shifted.iter_mut().enumerate() {
            row[i] -= lambda;
        }
        let expect = sign * ((lambda - 1).pow(d as u32) - lambda);
        if integer_determinant(&shifted) != expect {
            return Ok(false);
        }
    }
    let selmer = |mu: i128| mu.pow(d as u32) - mu - 1;
    Ok(selmer(1) != 0 && selmer(-1) != 0)
}

/// Whether `{t·k mod 1}` comes within sup-distance `delta` of every sample.
///
/// Resolutions are raised to at least `10/δ²` and `10·|k|∞/δ` points on the
/// geodesic and `10/δ^d` torus samples.
pub fn delta_density_check(
    k: &[i64],
    delta: f64,
    line_samples: usize,
    torus_samples: usize,
) -> Result<bool> {
    if k.iter().all(|v| *v == 0) {
        return Err(LabError::InvalidParameter(
            "geodesic direction k must be nonzero".into(),
        ));
    }
    if !(delta > 0.0) {
        return Err(LabError::InvalidParameter("delta must be positive".into()));
    }
    let d = k.len();
    let kinf = k.iter().map(|v| v.unsigned_abs()).max().unwrap_or(1) as f64;
    let line_n = line_samples
        .max((10.0 / (delta * delta)).ceil() as usize)
        .max((10.0 * kinf / delta).ceil() as usize);
    let torus_n = torus_samples.max((10.0 / delta.powi(d as i32)).ceil() as usize);
    let geodesic: Vec<Vec<f64>> = (0..line_n)
        .map(|i| {
            let t = i as f64 / line_n as f64;
            k.iter().map(|kj| wrap_unit(*kj as f64 * t)).collect()
        })
        .collect();
    let points = sample_grid(d, torus_n, SampleScheme::Random, 0)?;
    Ok(points.par_iter().all(|p| {
        geodesic
            .iter()
            .any(|g| torus_distance(g, p.coords()) <= delta)
    }))
}

/// Integer inverse of a unimodular matrix via the adjugate.
fn unimodular_inverse(m: &[Vec<i64>]) -> Vec<Vec<i128>> {
    let d = m.len();
    let a = to_i128(m);
    let det = integer_determinant(&a);
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| {
                    // inverse[i][j] = cofactor(j, i) / det
                    let minor: Vec<Vec<i128>> = (0..d)
                        .filter(|r| *r != j)
                        .map(|r| (0..d).filter(|c| *c != i).map(|c| a[r][c]).collect())
                        .collect();
                    let sign = if (i + j) % 2 == 0 { 1 } else { -1 };
                    sign * integer_determinant(&minor) / det
                })
                .collect()
        })
        .collect()
}

/// `(A∘M, M^{−1}ω)`: modes `k ↦ Mᵀk`, strip width `rho/‖M‖_∞`.
pub fn change_coordinates(
    a: &FourierCocycle,
    omega: &Frequency,
    change: &CoordinateChange,
) -> Result<(FourierCocycle, Frequency)> {
    let d = change.d;
    if a.dim() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            found: a.dim(),
        });
    }
    if omega.dim() != d {
        return Err(LabError::DimensionMismatch {
            expected: d,
            found: omega.dim(),
        });
    }
    let det = integer_determinant(&to_i128(&change.m));
    if det != 1 {
        return Err(LabError::NotUnimodular(det));
    }
    let m = &change.m;
    let modes = a
        .modes()
        .iter()
        .map(|md| {
            let k = (0..d)
                .map(|j| {
                    (0..d)
                        .try_fold(0i64, |acc, i| {
                            acc.checked_add(m[i][j].checked_mul(md.k[i])?)
                        })
                        .ok_or_else(|| {
                            LabError::InvalidParameter("relabelled frequency overflows".into())
                        })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(FourierMode {
                k,
                cos: md.cos.clone(),
                sin: md.sin.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let changed = a.with_modes_and_rho(modes, a.rho() / change.row_norm() as f64)?;
    let inv = unimodular_inverse(m);
    let w = omega.components();
    let omega_new = inv
        .iter()
        .map(|row| {
            let v: f64 = row
                .iter()
                .zip(w)
                .map(|(c, wi)| wrap_unit(*c as f64 * wi))
                .sum();
            wrap_unit(v)
        })
        .collect();
    Ok((changed, Frequency::new(omega_new)?))
}

/// `M x mod 1`.
pub fn apply_change(change: &CoordinateChange, x: &TorusPoint) -> Result<TorusPoint> {
    if x.dim() != change.d {
        return Err(LabError::DimensionMismatch {
            expected: change.d,
            found: x.dim(),
        });
    }
    let c = x.coords();
    TorusPoint::new(
        change
            .m
            .iter()
            .map(|row| wrap_unit(row.iter().zip(c).map(|(mi, xi)| *mi as f64 * xi).sum()))
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::presets;
    use crate::linalg::Matrix;
    use crate::lyapunov::finite_scale_spectrum_on;
    use crate::torus::{diophantine_scan, DcMode};
    use proptest::prelude::*;
    use std::f64::consts::{PI, TAU};

    fn two_cos(p: &TorusPoint) -> f64 {
        2.0 * (TAU * p.coords()[0]).cos()
    }

    #[test]
    fn loja_constant_has_no_mass() {
        let out = loja_fit(|_| 2.0, &Sampler::random(1, 1000, 0), &dyadic_grid(-20, 1)).unwrap();
        assert!(matches!(out, LojaOutcome::NoSublevelMass { .. }));
        assert!(loja_fit(|_| 0.0, &Sampler::random(1, 10, 0), &[0.5]).is_err());
    }

    #[test]
    fn loja_cosine_matches_arcsin() {
        let grid = dyadic_grid(-20, 0);
        let out = loja_fit(two_cos, &Sampler::random(1, 1 << 20, 1), &grid).unwrap();
        let fit = out.fit().unwrap();
        assert!((0.9..=1.1).contains(&fit.b_hat), "{fit:?}");
        assert!(fit.max_violation <= 0.0);
        // Closed form (2/π) arcsin(t/2) at the coarse thresholds.
        for (t, m) in grid
            .iter()
            .zip(&fit.measures)
            .filter(|(t, _)| **t >= 1.0 / 64.0)
        {
            let exact = 2.0 / PI * (t / 2.0).asin();
            let sd = (exact / (1 << 20) as f64).sqrt();
            assert!((m - exact).abs() < 5.0 * sd, "t = {t}: {m} vs {exact}");
        }
    }

    #[test]
    fn loja_square_halves_exponent() {
        let out = loja_fit(
            |p| two_cos(p).powi(2),
            &Sampler::random(1, 1 << 20, 1),
            &dyadic_grid(-20, 0),
        )
        .unwrap();
        let fit = out.fit().unwrap();
        assert!((0.45..=0.55).contains(&fit.b_hat), "{fit:?}");
        assert!(fit.max_violation <= 0.0);
    }

    #[test]
    fn l2_bound_examples() {
        assert!((log_l2_bound(1.0, 1.0, std::f64::consts::E).unwrap() - 2.0).abs() < 1e-15);
        let big_b = log_l2_bound(1.0, 60.0, 3.0).unwrap();
        assert!((big_b - 3f64.ln()).abs() < 1e-15);
        assert!(log_l2_bound(1.0, 0.0, 2.0).is_err());
    }

    #[test]
    fn l2_bound_dominates_empirical_rms() {
        let pts = Sampler::random(1, 100_000, 4).points().unwrap();
        let fit = loja_fit_on(two_cos, &pts, &dyadic_grid(-16, 1))
            .unwrap()
            .fit()
            .cloned()
            .unwrap();
        let sq: Vec<f64> = pts.iter().map(|p| two_cos(p).abs().ln().powi(2)).collect();
        let rms = (pairwise_sum(&sq) / sq.len() as f64).sqrt();
        assert!(rms <= log_l2_bound(fit.s_hat, fit.b_hat, 2.0).unwrap());
    }

    #[test]
    fn separate_norm_examples() {
        let r = separate_l2_norm(|_| -1.5, 2, 64, 4).unwrap();
        assert!((r.norm - 1.5).abs() < 1e-15);
        assert_eq!(r.divergent_lines, 0);

        let u = |x: &[f64]| (2.0 * (TAU * x[0]).cos()).abs().ln();
        let r = separate_l2_norm(u, 2, 4096, 8).unwrap();
        assert!(r.divergent_lines > 0);
        // The x₁-lines all see the full singular integral π/√12.
        assert!((r.axis_norms[0] - PI / 12f64.sqrt()).abs() < 0.02, "{r:?}");

        let m2 = coordinate_matrix(2).unwrap();
        let composed = |x: &[f64]| {
            let y = apply_change(&m2, &TorusPoint::new(x.to_vec()).unwrap()).unwrap();
            u(y.coords())
        };
        let r = separate_l2_norm(composed, 2, 4096, 8).unwrap();
        assert_eq!(r.divergent_lines, 0, "{r:?}");
    }

    #[test]
    fn m_d_examples() {
        let c = coordinate_matrix(2).unwrap();
        assert_eq!(c.m, vec![vec![1, 1], vec![1, 2]]);
        assert_eq!(c.det_check, 1);
        // M₂ is already positive.
        assert_eq!(c.primitive_power, Some(1));
        assert!(c.charpoly_ok);
        let c3 = coordinate_matrix(3).unwrap();
        assert!(c3.primitive_power.unwrap() <= 3);
        for d in 2..=8 {
            let c = coordinate_matrix(d).unwrap();
            assert_eq!(c.det_check, 1);
            assert!(c.charpoly_ok);
            assert!(c.primitive_power.unwrap() <= 2 * d);
            if d > 2 {
                assert!(dominates_identity_plus_cycle(&c.m));
            }
        }
    }

    #[test]
    fn charpoly_hand_values() {
        let m2 = m_d_matrix(2).unwrap();
        assert_eq!(integer_determinant(&to_i128(&m2)), 1);
        let shifted = vec![vec![0i128, 1], vec![1, 1]];
        assert_eq!(integer_determinant(&shifted), -1);
        assert!(charpoly_check(&m2, 3).is_err());
        assert!(charpoly_check(&[vec![2, 1], vec![1, 1]], 2).unwrap());
        assert!(!charpoly_check(&[vec![1, 1], vec![0, 1]], 2).unwrap());
    }

    #[test]
    fn bareiss_matches_float_determinant() {
        let m = vec![
            vec![2i128, -1, 3, 0],
            vec![1, 4, -2, 5],
            vec![0, 3, 1, -1],
            vec![7, 0, 2, 2],
        ];
        let f = Matrix::from_fn(4, 4, |i, j| m[i][j] as f64).determinant();
        assert_eq!(integer_determinant(&m) as f64, f.round());
    }

    #[test]
    fn non_unimodular_is_rejected() {
        assert_eq!(
            CoordinateChange::from_matrix(vec![vec![2, 0], vec![0, 1]]),
            Err(LabError::NotUnimodular(2))
        );
    }

    #[test]
    fn density_examples() {
        assert!(!delta_density_check(&[1, 0], 0.4, 100, 100).unwrap());
        assert!(delta_density_check(&[1, 1], 0.6, 100, 100).unwrap());
        let m = to_i128(&m_d_matrix(2).unwrap());
        let mut p = m.clone();
        for _ in 1..5 {
            p = int_matmul(&p, &m);
        }
        for (a, b) in p[0].iter().zip(&p[1]) {
            let col = [*a as i64, *b as i64];
            assert!(delta_density_check(&col, 0.1, 100, 100).unwrap(), "{col:?}");
        }
    }

    #[test]
    fn identity_change_is_trivial() {
        let a = presets::diag_cos(2);
        let w = Frequency::preset("cbrt2-pair").unwrap();
        let (b, w2) = change_coordinates(&a, &w, &CoordinateChange::identity(2).unwrap()).unwrap();
        assert_eq!(b, a);
        assert_eq!(w2, w);
    }

    #[test]
    fn single_mode_relabels() {
        let mode = FourierMode {
            k: vec![1, 0],
            cos: Matrix::identity(2, 2),
            sin: Matrix::zeros(2, 2),
        };
        let a = FourierCocycle::new(2, 2, 0.3, vec![mode]).unwrap();
        let (b, _) = change_coordinates(
            &a,
            &Frequency::preset("cbrt2-pair").unwrap(),
            &coordinate_matrix(2).unwrap(),
        )
        .unwrap();
        assert_eq!(b.modes()[0].k, vec![1, 1]);
        assert!((b.rho() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn changed_cocycle_composes_with_m() {
        let a = presets::diag_cos(2);
        let m = coordinate_matrix(2).unwrap();
        let (b, _) = change_coordinates(&a, &Frequency::preset("cbrt2-pair").unwrap(), &m).unwrap();
        for p in Sampler::random(2, 200, 3).points().unwrap() {
            let lhs = b.evaluate_real(&p).unwrap();
            let rhs = a.evaluate_real(&apply_change(&m, &p).unwrap()).unwrap();
            assert!((lhs - rhs).abs().max() < 1e-10);
        }
    }

    #[test]
    fn changed_frequency_conjugates_translation() {
        let m = coordinate_matrix(3).unwrap();
        let w = Frequency::new(vec![
            2f64.sqrt() - 1.0,
            3f64.sqrt() - 1.0,
            5f64.sqrt() - 2.0,
        ])
        .unwrap();
        let a = FourierCocycle::constant(3, Matrix::identity(2, 2), 0.1).unwrap();
        let (_, w2) = change_coordinates(&a, &w, &m).unwrap();
        // M·ω' = ω mod 1.
        let back = apply_change(&m, &TorusPoint::new(w2.components().to_vec()).unwrap()).unwrap();
        assert!(torus_distance(back.coords(), w.components()) < 1e-12);
    }

    #[test]
    fn changed_frequency_keeps_diophantine_quality() {
        let w = Frequency::new(vec![2f64.sqrt() - 1.0, 3f64.sqrt() - 1.0]).unwrap();
        let m = coordinate_matrix(2).unwrap();
        let (_, w2) = change_coordinates(&presets::diag_cos(2), &w, &m).unwrap();
        let norm = m.column_norm() as f64;
        let k = 60;
        let before = diophantine_scan(&w, DcMode::Standard, 1.0, 3 * k).unwrap();
        let after = diophantine_scan(&w2, DcMode::Standard, 1.0, k).unwrap();
        // k'·ω' = (M^{−T}k')·ω and M₂^{−1} has the same norms as M₂, so every
        // small divisor of ω' at scale K is one of ω at scale 3K.
        assert!(
            after.t_hat >= before.t_hat / norm.powi(3),
            "{after:?} vs {before:?}"
        );
        let direct = diophantine_scan(&w, DcMode::Standard, 1.0, k).unwrap();
        assert!(
            after.t_hat >= direct.t_hat / norm.powi(3),
            "{after:?} vs {direct:?}"
        );
    }

    #[test]
    fn coordinate_change_preserves_exponent() {
        let a = presets::diag_cos(2);
        let w = Frequency::new(vec![2f64.sqrt() - 1.0, 3f64.sqrt() - 1.0]).unwrap();
        let m = coordinate_matrix(2).unwrap();
        let (b, w2) = change_coordinates(&a, &w, &m).unwrap();
        let pts = Sampler::random(2, 4000, 12).points().unwrap();
        let s1 = finite_scale_spectrum_on(&a, &w, 50, &pts).unwrap();
        let s2 = finite_scale_spectrum_on(&b, &w2, 50, &pts).unwrap();
        let se = (s1.std_errors[0].powi(2) + s2.std_errors[0].powi(2)).sqrt();
        assert!(
            (s1.les[0] - s2.les[0]).abs() <= 2.0 * se,
            "{} vs {} (se {se})",
            s1.les[0],
            s2.les[0]
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn relabelled_modes_evaluate_consistently(x in 0.0f64..1.0, y in 0.0f64..1.0, k1 in -3i64..4, k2 in -3i64..4) {
            let mode = FourierMode {
                k: vec![k1, k2],
                cos: Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 2.0]),
                sin: Matrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.3]),
            };
            let a = FourierCocycle::new(2, 2, 0.2, vec![mode]).unwrap();
            let m = coordinate_matrix(2).unwrap();
            let (b, _) = change_coordinates(&a, &Frequency::new(vec![0.3, 0.7]).unwrap(), &m).unwrap();
            let p = TorusPoint::new(vec![x, y]).unwrap();
            let lhs = b.evaluate_real(&p).unwrap();
            let rhs = a.evaluate_real(&apply_change(&m, &p).unwrap()).unwrap();
            prop_assert!((lhs - rhs).abs().max() < 1e-10);
        }

        #[test]
        fn unimodular_inverse_is_exact(d in 2usize..9) {
            let m = m_d_matrix(d).unwrap();
            let inv = unimodular_inverse(&m);
            let prod = int_matmul(&to_i128(&m), &inv);
            for (i, row) in prod.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    prop_assert_eq!(*v, i128::from(i == j));
                }
            }
        }
    }
}
