//! One-variable harmonic analysis: Fejér kernels, Birkhoff averages, Fourier
//! coefficient decay, dyadic BMO norms and John–Nirenberg boosting.

use std::f64::consts::{PI, TAU};

use nalgebra::Complex;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::stats::{compensated_sum, pairwise_sum};
use crate::torus::{torus_norm, translate, Frequency, TorusPoint};

/// Largest tolerated fraction of singular (`−∞`) samples.
pub const SINGULAR_LIMIT: f64 = 0.01;

/// John–Nirenberg constant `c` in `|{|u − ⟨u⟩| > λ}| ≤ e^{−cλ/‖u‖_BMO}`,
/// calibrated on `log|2 sin πx|` (see [`calibrate_jn_constant`]).
pub const JN_CONSTANT: f64 = 0.538;

/// `|K_n(y)| = |(1/n) Σ_{j<n} e(jy)|`.
pub fn fejer_kernel(n: usize, y: f64) -> Result<f64> {
    if n == 0 {
        return Err(LabError::InvalidParameter(
            "Fejér kernel needs n >= 1".into(),
        ));
    }
    let dist = torus_norm(y);
    if dist < 1e-12 {
        let (mut re, mut im) = (0.0, 0.0);
        for j in 0..n {
            let (s, c) = (TAU * j as f64 * dist).sin_cos();
            re += c;
            im += s;
        }
        return Ok((re.hypot(im) / n as f64).min(1.0));
    }
    let ratio = (PI * n as f64 * dist).sin().abs() / (n as f64 * (PI * dist).sin().abs());
    Ok(ratio.min(1.0))
}

/// `min{1, 1/(n‖y‖)}`.
pub fn fejer_bound(n: usize, y: f64) -> f64 {
    let dist = torus_norm(y);
    if dist == 0.0 {
        1.0
    } else {
        (1.0 / (n as f64 * dist)).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffAverage {
    pub value: f64,
    pub excluded: usize,
}

/// `(1/n) Σ_{j<n} u(x + jω)` with compensated summation.
///
/// Non-finite terms are dropped, counted, and the sum is normalized by the
/// number of kept terms.
pub fn birkhoff_average<F>(
    u: F,
    omega: &Frequency,
    x: &TorusPoint,
    n: usize,
) -> Result<BirkhoffAverage>
where
    F: Fn(&TorusPoint) -> f64,
{
    if n == 0 {
        return Err(LabError::InvalidParameter(
            "Birkhoff average needs n >= 1".into(),
        ));
    }
    let mut kept = Vec::with_capacity(n);
    for j in 0..n {
        let v = u(&translate(x, omega, j as i64)?);
        if v.is_nan() {
            return Err(LabError::NonFinite("Birkhoff term".into()));
        }
        if v.is_finite() {
            kept.push(v);
        }
    }
    let excluded = n - kept.len();
    if excluded as f64 > SINGULAR_LIMIT * n as f64 {
        return Err(LabError::TooManyExcluded {
            excluded,
            total: n,
            limit: SINGULAR_LIMIT,
        });
    }
    Ok(BirkhoffAverage {
        value: compensated_sum(kept.iter().copied()) / kept.len() as f64,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierCoefficient {
    pub k: i64,
    pub re: f64,
    pub im: f64,
}

impl FourierCoefficient {
    pub fn abs(&self) -> f64 {
        self.re.hypot(self.im)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FourierProfile {
    pub n_samples: usize,
    #[serde(rename = "K")]
    pub k_max: usize,
    /// `û(k)` for `k = −K..=K`.
    pub coefficients: Vec<FourierCoefficient>,
    /// `max_{1 ≤ |k| ≤ K} |k|·|û(k)|`.
    pub decay_constant: f64,
    pub excluded: usize,
}

impl FourierProfile {
    pub fn coefficient(&self, k: i64) -> Option<&FourierCoefficient> {
        let idx = k + self.k_max as i64;
        (idx >= 0)
            .then(|| self.coefficients.get(idx as usize))
            .flatten()
    }
}

/// Discrete Fourier coefficients `û(k) ≈ (1/N) Σ_i u(i/N) e(−ki/N)` of
/// samples on the uniform grid.
pub fn fourier_decay_profile(samples: &[f64], k_max: usize) -> Result<FourierProfile> {
    let n = samples.len();
    if k_max == 0 || n < 4 * k_max {
        return Err(LabError::InvalidParameter(format!(
            "need N >= 4K samples (N = {n}, K = {k_max})"
        )));
    }
    if samples.iter().any(|v| v.is_nan()) {
        return Err(LabError::NonFinite("profile sample".into()));
    }
    let valid = samples.iter().filter(|v| v.is_finite()).count();
    let excluded = n - valid;
    if excluded as f64 > SINGULAR_LIMIT * n as f64 || valid == 0 {
        return Err(LabError::TooManyExcluded {
            excluded,
            total: n,
            limit: SINGULAR_LIMIT,
        });
    }
    let twiddle: Vec<(f64, f64)> = (0..n)
        .map(|j| (TAU * j as f64 / n as f64).sin_cos())
        .collect();
    let kk = k_max as i64;
    let coefficients: Vec<FourierCoefficient> = (-kk..=kk)
        .into_par_iter()
        .map(|k| {
            let step = k.rem_euclid(n as i64) as usize;
            let mut idx = 0usize;
            let mut re = Vec::with_capacity(valid);
            let mut im = Vec::with_capacity(valid);
            for v in samples {
                if v.is_finite() {
                    let (s, c) = twiddle[idx];
                    re.push(v * c);
                    im.push(-v * s);
                }
                idx += step;
                if idx >= n {
                    idx -= n;
                }
            }
            FourierCoefficient {
                k,
                re: pairwise_sum(&re) / valid as f64,
                im: pairwise_sum(&im) / valid as f64,
            }
        })
        .collect();
    let decay_constant = coefficients
        .iter()
        .filter(|c| c.k != 0)
        .map(|c| c.k.unsigned_abs() as f64 * c.abs())
        .fold(0.0, f64::max);
    Ok(FourierProfile {
        n_samples: n,
        k_max,
        coefficients,
        decay_constant,
        excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QbetBound {
    #[serde(rename = "K_star")]
    pub k_star: u64,
    pub bound: f64,
    /// Stationary point `K^{d+3/2} = nt/(2(d+1))` of the continuous problem.
    pub continuous_k: f64,
    pub continuous_bound: f64,
}

/// Minimizes `S·(K^{−1/2} + K^{d+1}/(n·t))` over integers `K ≥ 1`.
pub fn qbet_bound(s: f64, t: f64, d: usize, n: f64) -> Result<QbetBound> {
    if !(s > 0.0 && t > 0.0 && n > 0.0) || d == 0 {
        return Err(LabError::InvalidParameter(
            "qBET inputs must be positive".into(),
        ));
    }
    let p = d as f64 + 1.0;
    let objective = |k: f64| s * (k.powf(-0.5) + k.powf(p) / (n * t));
    let continuous_k = (n * t / (2.0 * p)).powf(1.0 / (p + 0.5));
    // The objective is convex in K, so the integer optimum is a neighbour of
    // the continuous one.
    let lo = continuous_k.floor().max(1.0);
    let hi = continuous_k.ceil().max(1.0);
    let (k_star, bound) = if objective(hi) < objective(lo) {
        (hi, objective(hi))
    } else {
        (lo, objective(lo))
    };
    Ok(QbetBound {
        k_star: k_star.min(u64::MAX as f64) as u64,
        bound,
        continuous_k,
        continuous_bound: objective(continuous_k.max(1.0)),
    })
}

fn finite_values(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.iter().any(|v| v.is_nan()) {
        return Err(LabError::NonFinite("sample".into()));
    }
    let kept: Vec<f64> = samples.iter().copied().filter(|v| v.is_finite()).collect();
    let excluded = samples.len() - kept.len();
    if excluded as f64 > SINGULAR_LIMIT * samples.len() as f64 || kept.is_empty() {
        return Err(LabError::TooManyExcluded {
            excluded,
            total: samples.len(),
            limit: SINGULAR_LIMIT,
        });
    }
    Ok(kept)
}

fn mean_oscillation(values: &[f64]) -> f64 {
    let kept: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if kept.is_empty() {
        return 0.0;
    }
    let mean = pairwise_sum(&kept) / kept.len() as f64;
    let dev: Vec<f64> = kept.iter().map(|v| (v - mean).abs()).collect();
    pairwise_sum(&dev) / dev.len() as f64
}

/// Dyadic BMO norm: the largest mean oscillation over the dyadic intervals
/// of generations `0..=max_depth`, with samples assigned by index.
pub fn bmo_norm(samples: &[f64], max_depth: u32) -> Result<f64> {
    let n = samples.len();
    if max_depth >= usize::BITS || n < 1 << max_depth {
        return Err(LabError::InvalidParameter(format!(
            "need at least 2^{max_depth} samples, got {n}"
        )));
    }
    finite_values(samples)?;
    let best = (0..=max_depth)
        .flat_map(|level| (0..1usize << level).map(move |i| (level, i)))
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(level, i)| {
            let start = (i * n) >> level;
            let end = ((i + 1) * n) >> level;
            mean_oscillation(&samples[start..end])
        })
        .reduce(|| 0.0, f64::max);
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JnReport {
    pub mean: f64,
    pub eps0: f64,
    pub eps1: f64,
    /// `|{|u − ⟨u⟩| > ε₀}|`.
    pub weak_measure: f64,
    /// `|{|u − ⟨u⟩| > ε₀^{1/2}}|`.
    pub boosted_measure: f64,
    /// `exp(−c·[ε₀^{1/2} + S·ε₁^{1/4}·ε₀^{−1/2}]^{−1})`.
    pub predicted: f64,
    pub c: f64,
    pub pass: bool,
}

fn level_measure(values: &[f64], mean: f64, level: f64) -> f64 {
    values.iter().filter(|v| (*v - mean).abs() > level).count() as f64 / values.len() as f64
}

/// Checks the boosted concentration estimate with the frozen constant.
pub fn jn_boost_check(samples: &[f64], eps0: f64, eps1: f64, s_emp: f64) -> Result<JnReport> {
    jn_boost_check_with(samples, eps0, eps1, s_emp, JN_CONSTANT)
}

pub fn jn_boost_check_with(
    samples: &[f64],
    eps0: f64,
    eps1: f64,
    s_emp: f64,
    c: f64,
) -> Result<JnReport> {
    if !(eps0 > 0.0 && eps0 < 1.0) || !(eps1 >= 0.0) || !(s_emp >= 0.0) {
        return Err(LabError::InvalidParameter(
            "need 0 < ε₀ < 1, ε₁ >= 0 and S >= 0".into(),
        ));
    }
    if eps1 > eps0.powi(4) {
        return Err(LabError::Precondition(format!(
            "ε₁ = {eps1:e} exceeds ε₀⁴ = {:e}",
            eps0.powi(4)
        )));
    }
    let values = finite_values(samples)?;
    let mean = pairwise_sum(&values) / values.len() as f64;
    let weak_measure = level_measure(&values, mean, eps0);
    if weak_measure > eps1 {
        return Err(LabError::Precondition(format!(
            "weak estimate fails: measure {weak_measure:e} above ε₁ = {eps1:e}"
        )));
    }
    let boosted_measure = level_measure(&values, mean, eps0.sqrt());
    let denom = eps0.sqrt() + s_emp * eps1.powf(0.25) / eps0.sqrt();
    let predicted = (-c / denom).exp();
    Ok(JnReport {
        mean,
        eps0,
        eps1,
        weak_measure,
        boosted_measure,
        predicted,
        c,
        pass: boosted_measure <= predicted,
    })
}

/// Smallest `ε₀` on the grid `{0.001·k}` below 1 for which the weak estimate
/// holds with `ε₁ = ε₀⁴`.
pub fn weak_epsilon(samples: &[f64]) -> Result<Option<f64>> {
    let values = finite_values(samples)?;
    let mean = pairwise_sum(&values) / values.len() as f64;
    Ok((1..1000)
        .map(|k| k as f64 * 1e-3)
        .find(|e| level_measure(&values, mean, *e) <= e.powi(4)))
}

/// `min_λ −log|{|u − ⟨u⟩| > λ}|·‖u‖_BMO/λ` over `λ ∈ {0.01, 0.02, …}` while
/// the level set is nonempty: the largest `c` for which the samples satisfy
/// the John–Nirenberg inequality without prefactor.
pub fn calibrate_jn_constant(samples: &[f64], max_depth: u32) -> Result<f64> {
    let bmo = bmo_norm(samples, max_depth)?;
    let values = finite_values(samples)?;
    let mean = pairwise_sum(&values) / values.len() as f64;
    let mut best = f64::INFINITY;
    for k in 1.. {
        let lambda = k as f64 * 0.01;
        let mu = level_measure(&values, mean, lambda);
        if mu == 0.0 {
            break;
        }
        best = best.min(-mu.ln() * bmo / lambda);
    }
    Ok(best)
}

/// `log|2 sin πx|` on the grid `{i/N}`; the sample at `x = 0` is `−∞`.
pub fn log_two_sine_samples(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * (PI * i as f64 / n as f64).sin()).abs().ln())
        .collect()
}

/// `û(k)` as a complex number.
pub fn coefficient_value(c: &FourierCoefficient) -> Complex<f64> {
    Complex::new(c.re, c.im)
}
