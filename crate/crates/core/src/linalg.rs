//! Small dense linear algebra: singular values, compound (exterior power)
//! matrices and long products kept as a mantissa times a power of two.

use std::f64::consts::LN_2;

use itertools::Itertools;
use nalgebra::{Complex, DMatrix};

use crate::error::{LabError, Result};

pub type Matrix = DMatrix<f64>;
pub type ComplexMatrix = DMatrix<Complex<f64>>;

/// Singular values in nonincreasing order.
pub fn singular_values(mat: &Matrix) -> Vec<f64> {
    match (mat.nrows(), mat.ncols()) {
        (0, _) | (_, 0) => Vec::new(),
        (1, 1) => vec![mat[(0, 0)].abs()],
        (2, 2) => {
            let (s1, s2) = singular_values_2x2(mat[(0, 0)], mat[(0, 1)], mat[(1, 0)], mat[(1, 1)]);
            vec![s1, s2]
        }
        _ => {
            let mut sv: Vec<f64> = mat.clone().singular_values().iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            sv
        }
    }
}

/// Closed form for `[[a, b], [c, d]]`.
fn singular_values_2x2(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let p = (a + d).hypot(c - b);
    let q = (a - d).hypot(b + c);
    let s1 = 0.5 * (p + q);
    // The smaller value via |det|/s1 avoids the cancellation in (p - q)/2.
    let s2 = if s1 > 0.0 {
        (a * d - b * c).abs() / s1
    } else {
        0.0
    };
    (s1, s2.min(s1))
}

/// Operator (spectral) norm.
pub fn spectral_norm(mat: &Matrix) -> f64 {
    match (mat.nrows(), mat.ncols()) {
        (1, 1) => mat[(0, 0)].abs(),
        (2, 2) => singular_values_2x2(mat[(0, 0)], mat[(0, 1)], mat[(1, 0)], mat[(1, 1)]).0,
        _ => singular_values(mat).first().copied().unwrap_or(0.0),
    }
}

pub fn complex_spectral_norm(mat: &ComplexMatrix) -> f64 {
    if mat.nrows() == 1 && mat.ncols() == 1 {
        return mat[(0, 0)].norm();
    }
    mat.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Number of `j`-element subsets of an `m`-set.
pub fn binomial(m: usize, j: usize) -> usize {
    if j > m {
        return 0;
    }
    let j = j.min(m - j);
    (0..j).fold(1usize, |acc, i| acc * (m - i) / (i + 1))
}

/// The `j`-th compound matrix: minors indexed by lexicographically ordered
/// `j`-subsets of rows and columns. It realizes `∧_j` in the standard basis,
/// so `compound(AB, j) = compound(A, j)·compound(B, j)`.
pub fn compound_matrix(mat: &Matrix, j: usize) -> Result<Matrix> {
    let m = mat.nrows();
    if mat.ncols() != m {
        return Err(LabError::DimensionMismatch {
            expected: m,
            found: mat.ncols(),
        });
    }
    if j == 0 || j > m {
        return Err(LabError::InvalidParameter(format!(
            "exterior power index {j} outside 1..={m}"
        )));
    }
    if j == 1 {
        return Ok(mat.clone());
    }
    if j == m {
        return Ok(Matrix::from_element(1, 1, mat.determinant()));
    }
    let subsets: Vec<Vec<usize>> = (0..m).combinations(j).collect();
    let size = subsets.len();
    let mut out = Matrix::zeros(size, size);
    for (r, rows) in subsets.iter().enumerate() {
        for (c, cols) in subsets.iter().enumerate() {
            let minor = Matrix::from_fn(j, j, |i, k| mat[(rows[i], cols[k])]);
            out[(r, c)] = minor.determinant();
        }
    }
    Ok(out)
}

const RESCALE_HI: f64 = 3.402_823_669_209_385e38; // 2^128
const RESCALE_LO: f64 = 2.938_735_877_055_719e-39; // 2^-128

/// A matrix stored as `mantissa · 2^exp2`.
///
/// Rescaling uses powers of two only, so it is exact; a product of matrices
/// whose entries stay within `[2^-128, 2^128]` is never rescaled at all.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledMatrix {
    pub mantissa: Matrix,
    pub exp2: i64,
}

impl ScaledMatrix {
    pub fn identity(m: usize) -> Self {
        ScaledMatrix {
            mantissa: Matrix::identity(m, m),
            exp2: 0,
        }
    }

    pub fn from_matrix(mat: Matrix) -> Self {
        let mut s = ScaledMatrix {
            mantissa: mat,
            exp2: 0,
        };
        s.renormalize();
        s
    }

    fn renormalize(&mut self) {
        let max = self
            .mantissa
            .iter()
            .fold(0.0_f64, |acc, v| acc.max(v.abs()));
        if max == 0.0 || !max.is_finite() {
            return;
        }
        if !(RESCALE_LO..=RESCALE_HI).contains(&max) {
            let e = max.log2().floor() as i32;
            self.mantissa *= 2.0_f64.powi(-e);
            self.exp2 += i64::from(e);
        }
    }

    /// `self ← factor · self`, reusing `scratch` for the product.
    pub fn left_mul_assign(&mut self, factor: &Matrix, scratch: &mut Matrix) {
        factor.mul_to(&self.mantissa, scratch);
        std::mem::swap(&mut self.mantissa, scratch);
        self.renormalize();
    }

    /// `self · rhs`.
    pub fn mul(&self, rhs: &ScaledMatrix) -> ScaledMatrix {
        let mut out = ScaledMatrix {
            mantissa: &self.mantissa * &rhs.mantissa,
            exp2: self.exp2 + rhs.exp2,
        };
        out.renormalize();
        out
    }

    pub fn is_finite(&self) -> bool {
        self.mantissa.iter().all(|v| v.is_finite())
    }

    /// `log ‖·‖`; `-inf` for the zero matrix.
    pub fn log_norm(&self) -> f64 {
        spectral_norm(&self.mantissa).ln() + self.exp2 as f64 * LN_2
    }

    /// Logs of the singular values, nonincreasing. Only the leading values
    /// carry full relative accuracy when the product is badly conditioned.
    pub fn log_singular_values(&self) -> Vec<f64> {
        singular_values(&self.mantissa)
            .into_iter()
            .map(|s| s.ln() + self.exp2 as f64 * LN_2)
            .collect()
    }

    /// The represented matrix, if it fits in `f64`.
    pub fn to_matrix(&self) -> Matrix {
        let scale = 2.0_f64.powf(self.exp2 as f64);
        &self.mantissa * scale
    }
}
