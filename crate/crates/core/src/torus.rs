//! Points of the torus `T^d = R^d / Z^d`, translation frequencies, Diophantine
//! quality scans and deterministic samplers.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Reduce a real number to `[0, 1)`.
pub fn wrap_unit(v: f64) -> f64 {
    let r = v.rem_euclid(1.0);
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Fractional part of `j·w` with the product's rounding error folded back in.
fn frac_product(j: f64, w: f64) -> f64 {
    let p = j * w;
    let err = j.mul_add(w, -p);
    (p - p.floor()) + err
}

/// Distance from `y` to the nearest integer, `‖y‖ = min_k |y - k|`.
pub fn torus_norm(y: f64) -> f64 {
    (y - y.round()).abs()
}

/// Sup-metric distance on the torus.
pub fn torus_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| torus_norm(x - y))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TorusPoint {
    coords: Vec<f64>,
}

impl TorusPoint {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() {
            return Err(LabError::InvalidParameter(
                "torus points need d >= 1".into(),
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(LabError::NonFinite("torus coordinate".into()));
        }
        Ok(TorusPoint {
            coords: coords.into_iter().map(wrap_unit).collect(),
        })
    }

    pub fn origin(d: usize) -> Self {
        TorusPoint {
            coords: vec![0.0; d.max(1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }
}

/// `x + j·ω (mod 1)`, coordinatewise.
pub fn translate(x: &TorusPoint, omega: &Frequency, j: i64) -> Result<TorusPoint> {
    if x.dim() != omega.dim() {
        return Err(LabError::DimensionMismatch {
            expected: omega.dim(),
            found: x.dim(),
        });
    }
    Ok(translate_unchecked(x.coords(), omega.components(), j))
}

pub(crate) fn translate_unchecked(x: &[f64], omega: &[f64], j: i64) -> TorusPoint {
    let jf = j as f64;
    TorusPoint {
        coords: x
            .iter()
            .zip(omega)
            .map(|(xi, wi)| wrap_unit(xi + frac_product(jf, *wi)))
            .collect(),
    }
}

/// A translation vector `ω ∈ T^d`, optionally carrying declared Diophantine
/// constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frequency {
    omega: Vec<f64>,
    pub declared_t: Option<f64>,
    pub declared_delta0: Option<f64>,
}

impl Frequency {
    pub fn new(omega: Vec<f64>) -> Result<Self> {
        if omega.is_empty() {
            return Err(LabError::InvalidParameter("frequency needs d >= 1".into()));
        }
        if omega.iter().any(|w| !w.is_finite()) {
            return Err(LabError::NonFinite("frequency component".into()));
        }
        Ok(Frequency {
            omega: omega.into_iter().map(wrap_unit).collect(),
            declared_t: None,
            declared_delta0: None,
        })
    }

    pub fn with_declared(mut self, t: Option<f64>, delta0: Option<f64>) -> Result<Self> {
        for v in [t, delta0].into_iter().flatten() {
            if !(v > 0.0) {
                return Err(LabError::InvalidParameter(
                    "declared Diophantine constants must be positive".into(),
                ));
            }
        }
        self.declared_t = t;
        self.declared_delta0 = delta0;
        Ok(self)
    }

    /// The golden mean `(√5 − 1)/2`.
    pub fn golden() -> Self {
        Frequency::new(vec![(5f64.sqrt() - 1.0) / 2.0]).expect("finite")
    }

    pub fn preset(name: &str) -> Option<Self> {
        let omega = match name {
            "golden" => vec![(5f64.sqrt() - 1.0) / 2.0],
            "sqrt2" => vec![2f64.sqrt() - 1.0],
            "cbrt2-pair" => vec![2f64.cbrt() - 1.0, 4f64.cbrt() - 1.0],
            _ => return None,
        };
        Frequency::new(omega).ok()
    }

    pub fn dim(&self) -> usize {
        self.omega.len()
    }

    pub fn components(&self) -> &[f64] {
        &self.omega
    }
}

impl FromStr for Frequency {
    type Err = LabError;

    /// A preset name or comma-separated decimals.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(f) = Frequency::preset(s) {
            return Ok(f);
        }
        let omega = s
            .split(',')
            .map(|part| {
                part.trim()
                    .parse::<f64>()
                    .map_err(|e| LabError::Parse(format!("frequency component {part:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Frequency::new(omega)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DcMode {
    /// `‖k·ω‖ ≥ t / |k|^{d+δ₀}`
    Standard,
    /// `‖kω‖ ≥ t / (|k| (log|k|)^{1+η})`, one frequency only
    Strong,
}

impl FromStr for DcMode {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(DcMode::Standard),
            "strong" => Ok(DcMode::Strong),
            other => Err(LabError::Parse(format!(
                "unknown Diophantine mode {other:?}"
            ))),
        }
    }
}

/// Default `η` for the strong condition's unspecified `1+` power.
pub const DEFAULT_ETA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiophantineReport {
    pub mode: DcMode,
    #[serde(rename = "K_max")]
    pub k_max: u64,
    pub t_hat: f64,
    pub argmin_k: Vec<i64>,
    /// Strong-mode exponent surrogate; absent in standard mode.
    pub eta: Option<f64>,
    /// Standard-mode exponent excess; absent in strong mode.
    pub delta0: Option<f64>,
}

/// Exhaustive scan of the lattice box `0 < |k|∞ ≤ K_max` for the smallest
/// scaled distance `scale(|k|∞)·‖k·ω‖`.
///
/// `exponent` is `δ₀` in standard mode and `η` in strong mode. Only one of
/// `k, −k` is visited (the one whose first nonzero entry is positive).
pub fn diophantine_scan(
    omega: &Frequency,
    mode: DcMode,
    exponent: f64,
    k_max: u64,
) -> Result<DiophantineReport> {
    let d = omega.dim();
    if k_max == 0 {
        return Err(LabError::InvalidParameter("K_max must be >= 1".into()));
    }
    if mode == DcMode::Strong && d > 1 {
        return Err(LabError::StrongModeDimension(d));
    }
    if !(exponent >= 0.0) || (mode == DcMode::Strong && exponent <= 0.0) {
        return Err(LabError::InvalidParameter(format!(
            "invalid scan exponent {exponent}"
        )));
    }
    let side = 2 * k_max + 1;
    let total = (side as u128)
        .checked_pow(d as u32)
        .filter(|t| *t <= 1 << 40);
    if total.is_none() {
        return Err(LabError::InvalidParameter(format!(
            "lattice box (2·{k_max}+1)^{d} is too large to scan"
        )));
    }

    let w = omega.components();
    let kmax = k_max as i64;
    let scale = |sup: i64| -> f64 {
        let s = sup as f64;
        match mode {
            DcMode::Standard => s.powf(d as f64 + exponent),
            DcMode::Strong => s * (1.0 + s).ln().powf(1.0 + exponent),
        }
    };

    // Split on the first coordinate; k1 = 0 carries the lower-dimensional
    // half-space, k1 > 0 a full box in the remaining coordinates.
    let best = (0..=kmax)
        .into_par_iter()
        .filter_map(|k1| {
            let mut local: Option<(f64, Vec<i64>)> = None;
            let mut k = vec![0i64; d];
            k[0] = k1;
            scan_tail(&mut k, 1, k1 != 0, kmax, w, &scale, &mut local);
            local
        })
        .reduce_with(pick_better)
        .expect("nonempty lattice box");

    let (t_hat, argmin_k) = best;
    Ok(DiophantineReport {
        mode,
        k_max,
        t_hat,
        argmin_k,
        eta: (mode == DcMode::Strong).then_some(exponent),
        delta0: (mode == DcMode::Standard).then_some(exponent),
    })
}

fn pick_better(a: (f64, Vec<i64>), b: (f64, Vec<i64>)) -> (f64, Vec<i64>) {
    match a.0.total_cmp(&b.0) {
        std::cmp::Ordering::Less => a,
        std::cmp::Ordering::Greater => b,
        std::cmp::Ordering::Equal => {
            if a.1 <= b.1 {
                a
            } else {
                b
            }
        }
    }
}

fn scan_tail(
    k: &mut Vec<i64>,
    pos: usize,
    seen_nonzero: bool,
    kmax: i64,
    w: &[f64],
    scale: &dyn Fn(i64) -> f64,
    best: &mut Option<(f64, Vec<i64>)>,
) {
    if pos == k.len() {
        if !seen_nonzero {
            return;
        }
        let mut dot = 0.0;
        let mut sup = 0;
        for (ki, wi) in k.iter().zip(w) {
            dot += frac_product(*ki as f64, *wi);
            sup = sup.max(ki.abs());
        }
        let value = scale(sup) * torus_norm(dot);
        // Visiting order is lexicographic, so ties keep the incumbent.
        let improves = best.as_ref().is_none_or(|(v, _)| value < *v);
        if improves {
            *best = Some((value, k.clone()));
        }
        return;
    }
    let lo = if seen_nonzero { -kmax } else { 0 };
    for v in lo..=kmax {
        k[pos] = v;
        scan_tail(k, pos + 1, seen_nonzero || v != 0, kmax, w, scale, best);
    }
    k[pos] = 0;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleScheme {
    Random,
    Lattice,
}

impl FromStr for SampleScheme {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SampleScheme::Random),
            "lattice" => Ok(SampleScheme::Lattice),
            other => Err(LabError::Parse(format!(
                "unknown sampling scheme {other:?}"
            ))),
        }
    }
}

impl fmt::Display for SampleScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleScheme::Random => f.write_str("random"),
            SampleScheme::Lattice => f.write_str("lattice"),
        }
    }
}

/// A reproducible description of a point set on `T^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sampler {
    pub d: usize,
    pub n: usize,
    pub scheme: SampleScheme,
    pub seed: u64,
}

impl Sampler {
    pub fn random(d: usize, n: usize, seed: u64) -> Self {
        Sampler {
            d,
            n,
            scheme: SampleScheme::Random,
            seed,
        }
    }

    pub fn lattice(d: usize, n: usize) -> Self {
        Sampler {
            d,
            n,
            scheme: SampleScheme::Lattice,
            seed: 0,
        }
    }

    pub fn points(&self) -> Result<Vec<TorusPoint>> {
        sample_grid(self.d, self.n, self.scheme, self.seed)
    }
}

/// Deterministic point sets.
///
/// `Random` draws `n` uniform points from a ChaCha8 stream seeded by `seed`.
/// `Lattice` returns the `n^d` product grid `{i/n}` for `d ≤ 2` and an
/// `n`-point Korobov rank-1 lattice for `d > 2`.
pub fn sample_grid(d: usize, n: usize, scheme: SampleScheme, seed: u64) -> Result<Vec<TorusPoint>> {
    if d == 0 {
        return Err(LabError::InvalidParameter(
            "sampler dimension must be >= 1".into(),
        ));
    }
    if n == 0 {
        return Err(LabError::InvalidParameter("sampler needs N >= 1".into()));
    }
    match scheme {
        SampleScheme::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok((0..n)
                .map(|_| TorusPoint {
                    coords: (0..d).map(|_| rng.random::<f64>()).collect(),
                })
                .collect())
        }
        SampleScheme::Lattice if d <= 2 => {
            let total = n
                .checked_pow(d as u32)
                .ok_or(LabError::LatticeOverflow { n, d })?;
            let nf = n as f64;
            Ok((0..total)
                .map(|idx| {
                    let coords = match d {
                        1 => vec![idx as f64 / nf],
                        _ => vec![(idx / n) as f64 / nf, (idx % n) as f64 / nf],
                    };
                    TorusPoint { coords }
                })
                .collect())
        }
        SampleScheme::Lattice => {
            let generator = korobov_generator(n, d);
            Ok((0..n)
                .map(|i| TorusPoint {
                    coords: generator
                        .iter()
                        .map(|g| ((i as u128 * *g as u128) % n as u128) as f64 / n as f64)
                        .collect(),
                })
                .collect())
        }
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn korobov_generator(n: usize, d: usize) -> Vec<usize> {
    let mut a = ((n as f64) * (5f64.sqrt() - 1.0) / 2.0).round().max(1.0) as usize;
    while n > 1 && gcd(a, n) != 1 {
        a += 1;
    }
    let mut g = Vec::with_capacity(d);
    let mut cur = 1usize % n.max(1);
    for _ in 0..d {
        g.push(cur);
        cur = ((cur as u128 * a as u128) % n.max(1) as u128) as usize;
    }
    g
}
