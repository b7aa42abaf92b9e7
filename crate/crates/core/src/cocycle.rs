//! Analytic matrix-valued cocycles given by finitely many Fourier modes.
//!
//! A cocycle is stored as
//!
//! ```text
//! A(x) = Σ_k  C_k·cos(2π k·x) + S_k·sin(2π k·x)
//! ```
//!
//! with real `m×m` coefficient matrices, which keeps `A` real on the real
//! torus. The complexification is the strip `|Im z_i| ≤ rho` in additive
//! coordinates, the image of the annulus `1 − r < |z| < 1 + r` under
//! `z = e(x + iy)` when `rho = log(1 + r)/(2π)`.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use nalgebra::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::linalg::{
    complex_spectral_norm, compound_matrix, singular_values, ComplexMatrix, Matrix, ScaledMatrix,
};
use crate::torus::{
    sample_grid, translate_unchecked, wrap_unit, Frequency, SampleScheme, TorusPoint,
};

/// Default strip half-width of the named presets.
pub const DEFAULT_RHO: f64 = 0.05;

/// Samples with `|det A| < ZERO_GUARD` are treated as lying on the zero set.
pub const ZERO_GUARD: f64 = 1e-14;

/// Threshold of the "not identically singular" certificate.
pub const SINGULAR_CERTIFICATE: f64 = 1e-10;

/// Strip half-width `log(1 + r)/(2π)` for an annulus of width `r`.
pub fn rho_from_annulus(r: f64) -> f64 {
    (1.0 + r).ln() / TAU
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierMode {
    pub k: Vec<i64>,
    pub cos: Matrix,
    pub sin: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierCocycle {
    d: usize,
    m: usize,
    rho: f64,
    modes: Vec<FourierMode>,
}

impl FourierCocycle {
    /// Validates the modes and merges repeated frequencies.
    pub fn new(d: usize, m: usize, rho: f64, modes: Vec<FourierMode>) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(LabError::InvalidParameter(
                "cocycle needs d >= 1 and m >= 1".into(),
            ));
        }
        if !(rho > 0.0 && rho.is_finite()) {
            return Err(LabError::InvalidParameter(format!(
                "strip width rho = {rho} must be positive"
            )));
        }
        if modes.is_empty() {
            return Err(LabError::InvalidParameter(
                "cocycle needs at least one mode".into(),
            ));
        }
        let mut merged: BTreeMap<Vec<i64>, (Matrix, Matrix)> = BTreeMap::new();
        for mode in modes {
            if mode.k.len() != d {
                return Err(LabError::DimensionMismatch {
                    expected: d,
                    found: mode.k.len(),
                });
            }
            for mat in [&mode.cos, &mode.sin] {
                if mat.nrows() != m || mat.ncols() != m {
                    return Err(LabError::DimensionMismatch {
                        expected: m,
                        found: mat.nrows(),
                    });
                }
                if mat.iter().any(|v| !v.is_finite()) {
                    return Err(LabError::NonFinite("mode coefficient".into()));
                }
            }
            let entry = merged
                .entry(mode.k)
                .or_insert_with(|| (Matrix::zeros(m, m), Matrix::zeros(m, m)));
            entry.0 += mode.cos;
            entry.1 += mode.sin;
        }
        let modes = merged
            .into_iter()
            .map(|(k, (cos, sin))| FourierMode { k, cos, sin })
            .collect();
        Ok(FourierCocycle { d, m, rho, modes })
    }

    /// The constant cocycle `A ≡ mat`.
    pub fn constant(d: usize, mat: Matrix, rho: f64) -> Result<Self> {
        let m = mat.nrows();
        FourierCocycle::new(
            d,
            m,
            rho,
            vec![FourierMode {
                k: vec![0; d],
                cos: mat,
                sin: Matrix::zeros(m, m),
            }],
        )
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn modes(&self) -> &[FourierMode] {
        &self.modes
    }

    pub(crate) fn with_modes_and_rho(&self, modes: Vec<FourierMode>, rho: f64) -> Result<Self> {
        FourierCocycle::new(self.d, self.m, rho, modes)
    }

    /// `A + δ·direction`, on the narrower of the two strips.
    pub fn perturbed(&self, direction: &FourierCocycle, delta: f64) -> Result<Self> {
        if direction.d != self.d {
            return Err(LabError::DimensionMismatch {
                expected: self.d,
                found: direction.d,
            });
        }
        if direction.m != self.m {
            return Err(LabError::DimensionMismatch {
                expected: self.m,
                found: direction.m,
            });
        }
        let mut modes = self.modes.clone();
        modes.extend(direction.modes.iter().map(|md| FourierMode {
            k: md.k.clone(),
            cos: &md.cos * delta,
            sin: &md.sin * delta,
        }));
        FourierCocycle::new(self.d, self.m, self.rho.min(direction.rho), modes)
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.d {
            return Err(LabError::DimensionMismatch {
                expected: self.d,
                found: x.len(),
            });
        }
        Ok(())
    }

    /// `A(x)` for real `x`, written into `out`.
    pub fn evaluate_real_into(&self, x: &[f64], out: &mut Matrix) {
        out.fill(0.0);
        for mode in &self.modes {
            let phase: f64 = mode.k.iter().zip(x).map(|(k, xi)| *k as f64 * xi).sum();
            if mode.k.iter().all(|k| *k == 0) {
                *out += &mode.cos;
                continue;
            }
            let (s, c) = (TAU * wrap_unit(phase)).sin_cos();
            out.zip_zip_apply(&mode.cos, &mode.sin, |o, cv, sv| *o += c * cv + s * sv);
        }
    }

    pub fn evaluate_real(&self, x: &TorusPoint) -> Result<Matrix> {
        self.check_point(x.coords())?;
        let mut out = Matrix::zeros(self.m, self.m);
        self.evaluate_real_into(x.coords(), &mut out);
        Ok(out)
    }

    /// `A(x + i·imag_offset)` on the complex strip.
    pub fn evaluate(&self, x: &TorusPoint, imag_offset: &[f64]) -> Result<ComplexMatrix> {
        self.check_point(x.coords())?;
        self.check_point(imag_offset)?;
        for y in imag_offset {
            if !(y.abs() <= self.rho * (1.0 + 1e-12)) {
                return Err(LabError::OffsetOutsideStrip {
                    offset: *y,
                    rho: self.rho,
                });
            }
        }
        Ok(self.evaluate_complex_unchecked(x.coords(), imag_offset))
    }

    fn evaluate_complex_unchecked(&self, x: &[f64], y: &[f64]) -> ComplexMatrix {
        let mut out = ComplexMatrix::from_element(self.m, self.m, Complex::new(0.0, 0.0));
        for mode in &self.modes {
            let re: f64 = mode.k.iter().zip(x).map(|(k, xi)| *k as f64 * xi).sum();
            let im: f64 = mode.k.iter().zip(y).map(|(k, yi)| *k as f64 * yi).sum();
            let (s, c) = (TAU * wrap_unit(re)).sin_cos();
            let (ch, sh) = ((TAU * im).cosh(), (TAU * im).sinh());
            // cos(a + ib) = cos a cosh b − i sin a sinh b
            // sin(a + ib) = sin a cosh b + i cos a sinh b
            let cos_z = Complex::new(c * ch, -s * sh);
            let sin_z = Complex::new(s * ch, c * sh);
            for (o, (cv, sv)) in out.iter_mut().zip(mode.cos.iter().zip(mode.sin.iter())) {
                *o += cos_z * *cv + sin_z * *sv;
            }
        }
        out
    }

    pub fn to_file(&self) -> CocycleFile {
        let rows = |mat: &Matrix| -> Vec<Vec<f64>> {
            (0..mat.nrows())
                .map(|i| mat.row(i).iter().copied().collect())
                .collect()
        };
        CocycleFile {
            d: self.d,
            m: self.m,
            rho: self.rho,
            modes: self
                .modes
                .iter()
                .map(|md| ModeFile {
                    k: md.k.clone(),
                    cos: rows(&md.cos),
                    sin: Some(rows(&md.sin)),
                })
                .collect(),
        }
    }

    pub fn from_file(file: CocycleFile) -> Result<Self> {
        let m = file.m;
        let to_matrix = |rows: &[Vec<f64>]| -> Result<Matrix> {
            if rows.len() != m || rows.iter().any(|r| r.len() != m) {
                return Err(LabError::Parse(format!("mode matrix is not {m}x{m}")));
            }
            Ok(Matrix::from_fn(m, m, |i, j| rows[i][j]))
        };
        let modes = file
            .modes
            .iter()
            .map(|md| {
                Ok(FourierMode {
                    k: md.k.clone(),
                    cos: to_matrix(&md.cos)?,
                    sin: match &md.sin {
                        Some(s) => to_matrix(s)?,
                        None => Matrix::zeros(m, m),
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        FourierCocycle::new(file.d, m, file.rho, modes)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CocycleFile = serde_json::from_str(text)
            .map_err(|e| LabError::Parse(format!("cocycle file: {e}")))?;
        FourierCocycle::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("cocycle serializes")
    }
}

/// On-disk cocycle description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocycleFile {
    pub d: usize,
    pub m: usize,
    pub rho: f64,
    pub modes: Vec<ModeFile>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeFile {
    pub k: Vec<i64>,
    pub cos: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sin: Option<Vec<Vec<f64>>>,
}

/// Named cocycles.
pub mod presets {
    use super::*;

    fn mat2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
        Matrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    /// `A ≡ diag(2, 1)` on `T^d`.
    pub fn const_diag(d: usize) -> FourierCocycle {
        FourierCocycle::constant(d, mat2(2.0, 0.0, 0.0, 1.0), DEFAULT_RHO).expect("valid preset")
    }

    /// Rotation by the angle `2πx₁`.
    pub fn rotation(d: usize) -> FourierCocycle {
        let mut k = vec![0; d];
        k[0] = 1;
        let mode = FourierMode {
            k,
            cos: mat2(1.0, 0.0, 0.0, 1.0),
            sin: mat2(0.0, -1.0, 1.0, 0.0),
        };
        FourierCocycle::new(d, 2, DEFAULT_RHO, vec![mode]).expect("valid preset")
    }

    /// Schrödinger transfer matrix `[[2λ cos(2πx) − E, −1], [1, 0]]` on `T`.
    pub fn schrodinger(lambda: f64, energy: f64) -> FourierCocycle {
        let modes = vec![
            FourierMode {
                k: vec![0],
                cos: mat2(-energy, -1.0, 1.0, 0.0),
                sin: Matrix::zeros(2, 2),
            },
            FourierMode {
                k: vec![1],
                cos: mat2(2.0 * lambda, 0.0, 0.0, 0.0),
                sin: Matrix::zeros(2, 2),
            },
        ];
        FourierCocycle::new(1, 2, DEFAULT_RHO, modes).expect("valid preset")
    }

    /// `diag(2 cos(2πx₁), 1)` on `T^d`; its determinant vanishes on the
    /// hyperplanes `x₁ ∈ {1/4, 3/4}`.
    pub fn diag_cos(d: usize) -> FourierCocycle {
        let mut k = vec![0; d];
        k[0] = 1;
        let modes = vec![
            FourierMode {
                k: vec![0; d],
                cos: mat2(0.0, 0.0, 0.0, 1.0),
                sin: Matrix::zeros(2, 2),
            },
            FourierMode {
                k,
                cos: mat2(2.0, 0.0, 0.0, 0.0),
                sin: Matrix::zeros(2, 2),
            },
        ];
        FourierCocycle::new(d, 2, DEFAULT_RHO, modes).expect("valid preset")
    }

    /// The energy direction `diag(1, 0)` for Schrödinger perturbations.
    pub fn energy_direction() -> FourierCocycle {
        FourierCocycle::constant(1, mat2(1.0, 0.0, 0.0, 0.0), DEFAULT_RHO).expect("valid preset")
    }

    /// Parses `const-diag`, `rotation`, `diag-cos`, `diag-cos:D`,
    /// `schrodinger:L`, `schrodinger:L,E` and `schrodinger(L, E)`.
    pub fn parse(spec: &str) -> Result<FourierCocycle> {
        let spec = spec.trim();
        let (name, args) = match spec.find([':', '(']) {
            Some(i) => (&spec[..i], spec[i + 1..].trim_end_matches(')')),
            None => (spec, ""),
        };
        let nums: Vec<f64> = if args.trim().is_empty() {
            Vec::new()
        } else {
            args.split(',')
                .map(|a| {
                    a.trim()
                        .parse::<f64>()
                        .map_err(|e| LabError::Parse(format!("preset argument {a:?}: {e}")))
                })
                .collect::<Result<_>>()?
        };
        let dim_arg = |nums: &[f64]| -> Result<usize> {
            match nums {
                [] => Ok(1),
                [d] if *d >= 1.0 && d.fract() == 0.0 => Ok(*d as usize),
                _ => Err(LabError::Parse(format!(
                    "bad dimension argument in {spec:?}"
                ))),
            }
        };
        match name {
            "const-diag" => Ok(const_diag(dim_arg(&nums)?)),
            "rotation" => Ok(rotation(dim_arg(&nums)?)),
            "diag-cos" => Ok(diag_cos(dim_arg(&nums)?)),
            "schrodinger" => match nums.as_slice() {
                [l] => Ok(schrodinger(*l, 0.0)),
                [l, e] => Ok(schrodinger(*l, *e)),
                _ => Err(LabError::Parse(format!(
                    "schrodinger preset needs lambda[,E]: {spec:?}"
                ))),
            },
            _ => Err(LabError::Parse(format!("unknown cocycle preset {spec:?}"))),
        }
    }
}

/// `A^(n)(x) = A(x + (n−1)ω) ⋯ A(x + ω) A(x)`, kept as a scaled product.
#[derive(Debug, Clone, PartialEq)]
pub struct IterateResult {
    pub n: usize,
    /// Normalized product; the iterate equals `product · 2^exp2`.
    pub product: Matrix,
    pub exp2: i64,
    /// `log ‖A^(n)(x)‖`.
    pub log_norm: f64,
    /// Singular values of the normalized product, nonincreasing.
    pub singular_values: Vec<f64>,
}

impl IterateResult {
    /// `u^(n)(x) = (1/n) log ‖A^(n)(x)‖`.
    pub fn u(&self) -> f64 {
        self.log_norm / self.n as f64
    }

    pub fn log_singular_values(&self) -> Vec<f64> {
        let shift = self.exp2 as f64 * std::f64::consts::LN_2;
        self.singular_values
            .iter()
            .map(|s| s.ln() + shift)
            .collect()
    }
}

fn check_orbit_inputs(a: &FourierCocycle, omega: &Frequency, x: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(LabError::InvalidParameter("scale n must be >= 1".into()));
    }
    if omega.dim() != a.d {
        return Err(LabError::DimensionMismatch {
            expected: a.d,
            found: omega.dim(),
        });
    }
    a.check_point(x)
}

/// Scaled product over the orbit segment `x + jω`, `j ∈ start..start + len`.
pub(crate) fn orbit_product(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &[f64],
    start: usize,
    len: usize,
) -> ScaledMatrix {
    let mut prod = ScaledMatrix::identity(a.m);
    let mut step = Matrix::zeros(a.m, a.m);
    let mut scratch = Matrix::zeros(a.m, a.m);
    for j in start..start + len {
        let p = translate_unchecked(x, omega.components(), j as i64);
        a.evaluate_real_into(p.coords(), &mut step);
        prod.left_mul_assign(&step, &mut scratch);
    }
    prod
}

/// The matrices `A(x + jω)` for `j < n`.
pub(crate) fn orbit_matrices(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &[f64],
    n: usize,
) -> Vec<Matrix> {
    (0..n)
        .map(|j| {
            let p = translate_unchecked(x, omega.components(), j as i64);
            let mut out = Matrix::zeros(a.m, a.m);
            a.evaluate_real_into(p.coords(), &mut out);
            out
        })
        .collect()
}

pub fn iterate(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &TorusPoint,
    n: usize,
) -> Result<IterateResult> {
    check_orbit_inputs(a, omega, x.coords(), n)?;
    let prod = orbit_product(a, omega, x.coords(), 0, n);
    if !prod.is_finite() {
        return Err(LabError::NonFinite(format!("iterate at scale {n}")));
    }
    let log_norm = prod.log_norm();
    let singular_values = singular_values(&prod.mantissa);
    Ok(IterateResult {
        n,
        product: prod.mantissa,
        exp2: prod.exp2,
        log_norm,
        singular_values,
    })
}

/// Grid estimate of `‖A‖_r = sup_{strip} ‖A(z)‖`.
///
/// Real points form the dyadic grid with `2^⌈log₂ grid_n⌉` nodes per axis, so
/// refining `grid_n` only adds nodes; imaginary parts range over
/// `{−rho, 0, rho}^d`.
pub fn sup_norm_strip(a: &FourierCocycle, grid_n: usize) -> Result<f64> {
    if grid_n < 2 {
        return Err(LabError::InvalidParameter("grid_N must be >= 2".into()));
    }
    let per_axis = grid_n.next_power_of_two();
    let d = a.d;
    let real_count = per_axis
        .checked_pow(d as u32)
        .filter(|c| c.saturating_mul(3usize.pow(d as u32)) <= 50_000_000)
        .ok_or(LabError::LatticeOverflow { n: per_axis, d })?;
    let offsets: Vec<Vec<f64>> = (0..3usize.pow(d as u32))
        .map(|mut idx| {
            (0..d)
                .map(|_| {
                    let v = [-a.rho, 0.0, a.rho][idx % 3];
                    idx /= 3;
                    v
                })
                .collect()
        })
        .collect();
    let best = (0..real_count)
        .into_par_iter()
        .map(|mut idx| {
            let x: Vec<f64> = (0..d)
                .map(|_| {
                    let v = (idx % per_axis) as f64 / per_axis as f64;
                    idx /= per_axis;
                    v
                })
                .collect();
            offsets
                .iter()
                .map(|y| complex_spectral_norm(&a.evaluate_complex_unchecked(&x, y)))
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

/// `x ↦ det A(x)` and its complexification.
#[derive(Debug, Clone, Copy)]
pub struct DeterminantFunction<'a> {
    cocycle: &'a FourierCocycle,
}

pub fn determinant_function(a: &FourierCocycle) -> DeterminantFunction<'_> {
    DeterminantFunction { cocycle: a }
}

impl DeterminantFunction<'_> {
    pub fn eval(&self, x: &TorusPoint) -> Result<f64> {
        Ok(self.cocycle.evaluate_real(x)?.determinant())
    }

    pub(crate) fn eval_raw(&self, x: &[f64]) -> f64 {
        let mut out = Matrix::zeros(self.cocycle.m, self.cocycle.m);
        self.cocycle.evaluate_real_into(x, &mut out);
        out.determinant()
    }

    pub fn eval_complex(&self, x: &TorusPoint, imag_offset: &[f64]) -> Result<Complex<f64>> {
        Ok(self.cocycle.evaluate(x, imag_offset)?.determinant())
    }
}

/// Pointwise `∧_j A(x)`, a `C(m, j)`-square matrix function.
#[derive(Debug, Clone, Copy)]
pub struct ExteriorPower<'a> {
    cocycle: &'a FourierCocycle,
    j: usize,
}

pub fn exterior_power(a: &FourierCocycle, j: usize) -> Result<ExteriorPower<'_>> {
    if j == 0 || j > a.m {
        return Err(LabError::InvalidParameter(format!(
            "exterior power {j} outside 1..={}",
            a.m
        )));
    }
    Ok(ExteriorPower { cocycle: a, j })
}

impl ExteriorPower<'_> {
    pub fn degree(&self) -> usize {
        self.j
    }

    pub fn eval(&self, x: &TorusPoint) -> Result<Matrix> {
        compound_matrix(&self.cocycle.evaluate_real(x)?, self.j)
    }
}

/// Empirical "not identically singular" certificate: the largest `|det A|`
/// over about `10^4` deterministic points must exceed `1e−10`.
pub fn certify_not_identically_singular(a: &FourierCocycle) -> Result<f64> {
    let points = match a.d {
        1 => sample_grid(1, 10_000, SampleScheme::Lattice, 0)?,
        2 => sample_grid(2, 100, SampleScheme::Lattice, 0)?,
        d => sample_grid(d, 10_000, SampleScheme::Random, 0)?,
    };
    let det = determinant_function(a);
    let max_abs = points
        .par_iter()
        .map(|p| det.eval_raw(p.coords()).abs())
        .reduce(|| 0.0, f64::max);
    if max_abs > SINGULAR_CERTIFICATE {
        Ok(max_abs)
    } else {
        Err(LabError::IdenticallySingular {
            max_abs,
            samples: points.len(),
        })
    }
}

/// Outcome of checking `−C_lo + (1/n)Σ log|det A(T^i x)| ≤ u^(n)(x) ≤ C_up`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CramerReport {
    pub n: usize,
    /// `log ‖A‖_r`.
    pub c_upper: f64,
    /// `(m − 1)·log ‖A‖_r + log (m − 1)!`, from `‖adj B‖ ≤ (m−1)!‖B‖^{m−1}`.
    pub c_lower: f64,
    pub sample_count: usize,
    /// Samples whose orbit meets `|det A| < 1e−14`.
    pub excluded: usize,
    pub min_lower_slack: f64,
    pub min_upper_slack: f64,
    pub violations: usize,
}

/// Violations smaller than this are rounding noise.
pub const SANDWICH_TOLERANCE: f64 = 1e-8;

/// Grid resolution used for `‖A‖_r` by the measurement routines.
pub const STRIP_GRID: usize = 64;

pub(crate) fn log_factorial(k: usize) -> f64 {
    (1..=k).map(|i| (i as f64).ln()).sum()
}

pub fn cramer_bounds_check(
    a: &FourierCocycle,
    omega: &Frequency,
    n: usize,
    samples: &[TorusPoint],
) -> Result<CramerReport> {
    if samples.is_empty() {
        return Err(LabError::InvalidParameter("no samples".into()));
    }
    check_orbit_inputs(a, omega, samples[0].coords(), n)?;
    certify_not_identically_singular(a)?;
    let c_upper = sup_norm_strip(a, STRIP_GRID)?.ln();
    let c_lower = (a.m - 1) as f64 * c_upper + log_factorial(a.m - 1);

    let per_sample: Vec<Option<(f64, f64)>> = samples
        .par_iter()
        .map(|x| {
            let mats = orbit_matrices(a, omega, x.coords(), n);
            let mut log_det = Vec::with_capacity(n);
            for m in &mats {
                let det = m.determinant().abs();
                if det < ZERO_GUARD {
                    return None;
                }
                log_det.push(det.ln());
            }
            let mut prod = ScaledMatrix::identity(a.m);
            let mut scratch = Matrix::zeros(a.m, a.m);
            for m in &mats {
                prod.left_mul_assign(m, &mut scratch);
            }
            let u = prod.log_norm() / n as f64;
            let avg = crate::stats::pairwise_sum(&log_det) / n as f64;
            Some((u - (avg - c_lower), c_upper - u))
        })
        .collect();

    let mut excluded = 0;
    let mut violations = 0;
    let mut min_lower_slack = f64::INFINITY;
    let mut min_upper_slack = f64::INFINITY;
    for entry in &per_sample {
        match entry {
            None => excluded += 1,
            Some((lo, up)) => {
                if !lo.is_finite() || !up.is_finite() {
                    return Err(LabError::NonFinite("Cramer sandwich slack".into()));
                }
                min_lower_slack = min_lower_slack.min(*lo);
                min_upper_slack = min_upper_slack.min(*up);
                if *lo < -SANDWICH_TOLERANCE || *up < -SANDWICH_TOLERANCE {
                    violations += 1;
                }
            }
        }
    }
    if excluded == samples.len() {
        return Err(LabError::IdenticallySingular {
            max_abs: 0.0,
            samples: samples.len(),
        });
    }
    let report = CramerReport {
        n,
        c_upper,
        c_lower,
        sample_count: samples.len(),
        excluded,
        min_lower_slack,
        min_upper_slack,
        violations,
    };
    if violations > 0 {
        return Err(LabError::SandwichViolated {
            violations,
            worst_slack: min_lower_slack.min(min_upper_slack),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::torus::Sampler;
    use proptest::prelude::*;

    fn pt(c: &[f64]) -> TorusPoint {
        TorusPoint::new(c.to_vec()).unwrap()
    }

    fn rel_err(a: &Matrix, b: &Matrix) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn evaluate_examples() {
        let c = presets::const_diag(1);
        let v = c.evaluate(&pt(&[0.37]), &[0.0]).unwrap();
        assert_eq!(v[(0, 0)], Complex::new(2.0, 0.0));
        assert_eq!(v[(1, 1)], Complex::new(1.0, 0.0));

        let s = presets::schrodinger(1.0, 0.0);
        let v = s.evaluate(&pt(&[0.0]), &[0.0]).unwrap();
        let expect = [[2.0, -1.0], [1.0, 0.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((v[(i, j)].re - expect[i][j]).abs() < 1e-15);
                assert!(v[(i, j)].im.abs() < 1e-12);
            }
        }
        let v = s.evaluate(&pt(&[0.0]), &[0.05]).unwrap();
        let oracle = 2.0 * (TAU * 0.05).cosh();
        assert!((v[(0, 0)].re - oracle).abs() < 1e-14);
        assert!((v[(0, 0)].re - 2.0995).abs() < 1e-4);
    }

    #[test]
    fn evaluate_rejects_offsets_outside_strip() {
        let s = presets::schrodinger(1.0, 0.0);
        assert!(matches!(
            s.evaluate(&pt(&[0.0]), &[0.06]),
            Err(LabError::OffsetOutsideStrip { .. })
        ));
    }

    #[test]
    fn constant_iterate_is_exact() {
        let c = presets::const_diag(1);
        let r = iterate(&c, &Frequency::golden(), &pt(&[0.3]), 10).unwrap();
        assert_eq!(r.log_norm, 10.0 * 2f64.ln());
        assert_eq!(r.singular_values, vec![1024.0, 1.0]);
        assert_eq!(r.exp2, 0);
    }

    #[test]
    fn rotation_iterates_stay_orthogonal() {
        let rot = presets::rotation(1);
        let r = iterate(&rot, &Frequency::golden(), &pt(&[0.123]), 50).unwrap();
        assert!(r.log_norm.abs() < 1e-12);
        for s in r.log_singular_values() {
            assert!(s.abs() < 1e-12);
        }
    }

    #[test]
    fn schrodinger_growth_near_log_lambda() {
        let s = presets::schrodinger(10.0, 0.0);
        let r = iterate(&s, &Frequency::golden(), &pt(&[0.1]), 100).unwrap();
        assert!((2.0..=2.7).contains(&r.u()), "u = {}", r.u());
    }

    #[test]
    fn long_products_do_not_overflow() {
        let s = presets::schrodinger(10.0, 0.0);
        let r = iterate(&s, &Frequency::golden(), &pt(&[0.1]), 2000).unwrap();
        assert!(r.log_norm.is_finite());
        assert!(r.exp2 > 1000);
    }

    #[test]
    fn sup_norm_examples() {
        let c = presets::const_diag(1);
        assert_eq!(sup_norm_strip(&c, 8).unwrap(), 2.0);

        // |2cos| on a vanishing strip approaches 2.
        let thin = FourierCocycle::new(
            1,
            2,
            1e-9,
            vec![FourierMode {
                k: vec![1],
                cos: Matrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]),
                sin: Matrix::zeros(2, 2),
            }],
        )
        .unwrap();
        assert!((sup_norm_strip(&thin, 16).unwrap() - 2.0).abs() < 1e-9);
    }

    /// Brute-force oracle: closed-form 2×2 complex singular values on a fine
    /// boundary grid, refined until stable.
    fn schrodinger_strip_oracle(lambda: f64, rho: f64) -> f64 {
        let s1 = |x: f64, y: f64| -> f64 {
            let arg = Complex::new(TAU * x, TAU * y);
            let v = arg.cos() * (2.0 * lambda);
            // [[v, −1], [1, 0]]: Frobenius² = |v|² + 2, |det| = 1.
            let f = v.norm_sqr() + 2.0;
            ((f + (f * f - 4.0).sqrt()) / 2.0).sqrt()
        };
        let mut prev = 0.0;
        for refine in [1000usize, 4000, 16000] {
            let mut best = 0.0_f64;
            for i in 0..refine {
                let x = i as f64 / refine as f64;
                for y in [-rho, 0.0, rho] {
                    best = best.max(s1(x, y));
                }
            }
            if (best - prev).abs() < 1e-6 {
                return best;
            }
            prev = best;
        }
        prev
    }

    #[test]
    fn sup_norm_matches_dense_grid_oracle() {
        let s = presets::schrodinger(1.0, 0.0);
        let oracle = schrodinger_strip_oracle(1.0, 0.05);
        let est = sup_norm_strip(&s, 64).unwrap();
        assert!((est - oracle).abs() < 1e-6, "{est} vs {oracle}");
    }

    #[test]
    fn sup_norm_monotone_under_refinement() {
        let s = presets::schrodinger(1.3, 0.2);
        let mut prev = 0.0;
        for n in [2, 3, 5, 8, 13, 21, 34] {
            let v = sup_norm_strip(&s, n).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn determinant_examples() {
        let cd = presets::const_diag(1);
        let det = determinant_function(&cd);
        assert!((det.eval(&pt(&[0.4])).unwrap() - 2.0).abs() < 1e-15);
        let s = presets::schrodinger(3.0, 0.7);
        let det = determinant_function(&s);
        for x in [0.0, 0.2, 0.77] {
            assert!((det.eval(&pt(&[x])).unwrap() - 1.0).abs() < 1e-14);
        }
        let dc = presets::diag_cos(1);
        let det = determinant_function(&dc);
        assert!(det.eval(&pt(&[0.25])).unwrap().abs() < 1e-15);
        assert!(det.eval(&pt(&[0.75])).unwrap().abs() < 1e-15);
        assert!((det.eval(&pt(&[0.1])).unwrap() - 2.0 * (TAU * 0.1).cos()).abs() < 1e-14);
        let z = det.eval_complex(&pt(&[0.0]), &[0.01]).unwrap();
        assert!((z.re - 2.0 * (TAU * 0.01).cosh()).abs() < 1e-14);
    }

    #[test]
    fn exterior_power_examples() {
        let s = presets::schrodinger(2.0, 0.0);
        let x = pt(&[0.3]);
        let one = exterior_power(&s, 1).unwrap().eval(&x).unwrap();
        assert_eq!(one, s.evaluate_real(&x).unwrap());
        let top = exterior_power(&s, 2).unwrap().eval(&x).unwrap();
        assert!((top[(0, 0)] - 1.0).abs() < 1e-14);
        let diag3 = FourierCocycle::constant(
            1,
            Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 2.0, 1.0])),
            DEFAULT_RHO,
        )
        .unwrap();
        let w = exterior_power(&diag3, 2).unwrap().eval(&x).unwrap();
        let expect = Matrix::from_diagonal(&nalgebra::DVector::from_vec(vec![6.0, 3.0, 2.0]));
        assert!((w - expect).abs().max() < 1e-14);
        assert!(exterior_power(&diag3, 4).is_err());
    }

    #[test]
    fn presets_parse_all_spellings() {
        assert_eq!(
            presets::parse("schrodinger:10").unwrap(),
            presets::schrodinger(10.0, 0.0)
        );
        assert_eq!(
            presets::parse("schrodinger(10, 0.5)").unwrap(),
            presets::schrodinger(10.0, 0.5)
        );
        assert_eq!(presets::parse("diag-cos:2").unwrap().dim(), 2);
        assert_eq!(presets::parse("rotation").unwrap(), presets::rotation(1));
        assert!(presets::parse("mystery").is_err());
    }

    #[test]
    fn file_format_round_trips() {
        let s = presets::rotation(2);
        let back = FourierCocycle::from_json(&s.to_json()).unwrap();
        assert_eq!(back, s);
        let text = r#"{"d":1,"m":2,"rho":0.1,"modes":[{"k":[0],"cos":[[2,0],[0,1]]}]}"#;
        let c = FourierCocycle::from_json(text).unwrap();
        assert_eq!(c.evaluate_real(&pt(&[0.2])).unwrap()[(0, 0)], 2.0);
        assert!(FourierCocycle::from_json(r#"{"d":1,"m":2,"rho":0.1,"modes":[]}"#).is_err());
        assert!(FourierCocycle::from_json(
            r#"{"d":1,"m":2,"rho":-1,"modes":[{"k":[0],"cos":[[1,0],[0,1]]}]}"#
        )
        .is_err());
    }

    #[test]
    fn cramer_sandwich_constant() {
        let c = presets::const_diag(1);
        let pts = Sampler::random(1, 200, 3).points().unwrap();
        let r = cramer_bounds_check(&c, &Frequency::golden(), 20, &pts).unwrap();
        assert!(r.min_lower_slack >= 0.0);
        assert!(r.min_upper_slack.abs() < 1e-12);
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn cramer_sandwich_near_zeros() {
        let dc = presets::diag_cos(1);
        let pts = Sampler::lattice(1, 2000).points().unwrap();
        let r = cramer_bounds_check(&dc, &Frequency::golden(), 30, &pts).unwrap();
        assert_eq!(r.violations, 0);
        // x = 1/4 and x = 3/4 are on the lattice and sit on the zero set.
        assert!(r.excluded >= 2);
    }

    #[test]
    fn cramer_rejects_identically_singular() {
        let zero = FourierCocycle::constant(1, Matrix::zeros(2, 2), DEFAULT_RHO).unwrap();
        let pts = Sampler::random(1, 10, 0).points().unwrap();
        assert!(matches!(
            cramer_bounds_check(&zero, &Frequency::golden(), 5, &pts),
            Err(LabError::IdenticallySingular { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn exterior_power_is_multiplicative(vals in proptest::collection::vec(-3.0f64..3.0, 18), j in 1usize..=3) {
            let a = Matrix::from_row_slice(3, 3, &vals[..9]);
            let b = Matrix::from_row_slice(3, 3, &vals[9..]);
            let lhs = compound_matrix(&(&a * &b), j).unwrap();
            let rhs = compound_matrix(&a, j).unwrap() * compound_matrix(&b, j).unwrap();
            let scale = compound_matrix(&a, j).unwrap().norm() * compound_matrix(&b, j).unwrap().norm();
            prop_assert!((lhs - rhs).norm() <= 1e-10 * scale.max(1e-300));
        }

        #[test]
        fn cocycle_identity(x in 0.0f64..1.0, n in 1usize..40, k in 1usize..40) {
            let s = presets::schrodinger(10.0, 0.3);
            let w = Frequency::golden();
            let p = pt(&[x]);
            let whole = iterate(&s, &w, &p, n + k).unwrap();
            let first = iterate(&s, &w, &p, n).unwrap();
            let shifted = crate::torus::translate(&p, &w, n as i64).unwrap();
            let second = iterate(&s, &w, &shifted, k).unwrap();
            let lhs = ScaledMatrix { mantissa: whole.product, exp2: whole.exp2 };
            let rhs = ScaledMatrix { mantissa: second.product, exp2: second.exp2 }
                .mul(&ScaledMatrix { mantissa: first.product, exp2: first.exp2 });
            let shift = 2f64.powi((rhs.exp2 - lhs.exp2) as i32);
            prop_assert!(rel_err(&(&rhs.mantissa * shift), &lhs.mantissa) < 1e-9);
        }

        #[test]
        fn rotation_singular_values_are_one(x in 0.0f64..1.0, n in 1usize..200) {
            let r = iterate(&presets::rotation(1), &Frequency::golden(), &pt(&[x]), n).unwrap();
            for s in r.log_singular_values() {
                prop_assert!(s.abs() < 1e-12);
            }
        }

        #[test]
        fn iterate_norm_is_top_singular_value(x in 0.0f64..1.0, n in 1usize..30) {
            let r = iterate(&presets::schrodinger(2.0, 0.1), &Frequency::golden(), &pt(&[x]), n).unwrap();
            prop_assert!(r.singular_values.windows(2).all(|w| w[0] >= w[1] && w[1] >= 0.0));
            let top = r.log_singular_values()[0];
            prop_assert!((top - r.log_norm).abs() <= 1e-10 * r.log_norm.abs().max(1.0));
        }
    }
}
