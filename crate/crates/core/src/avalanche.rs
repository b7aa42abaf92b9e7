//! Avalanche-principle certificates for block products and the multiscale
//! refinement of finite-scale exponents.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cocycle::{orbit_matrices, FourierCocycle};
use crate::error::{LabError, Result};
use crate::linalg::{compound_matrix, spectral_norm, Matrix, ScaledMatrix};
use crate::lyapunov::finite_scale_spectrum_on;
use crate::stats::compensated_sum;
use crate::torus::{Frequency, Sampler};

/// Constant `c` of the hypothesis gate `ϰ ≤ c·ε²`.
pub const HYPOTHESIS_C: f64 = 0.01;

/// Constant `C` of the bound `C·n·ϰ/ε²`.
pub const DEFAULT_C_CAL: f64 = 40.0;

/// Required finite-scale gap `L_1 − L_2` at the base scale.
pub const REFINE_GAP: f64 = 0.2;

/// `s₁/s₂`, or infinity when `s₂ < 1e−300`.
pub fn gap_ratio(g: &Matrix) -> Result<f64> {
    if g.nrows() < 2 || g.ncols() != g.nrows() {
        return Err(LabError::InvalidParameter(
            "gap ratio needs a square matrix with m >= 2".into(),
        ));
    }
    let s1 = spectral_norm(g);
    // s₁s₂ = ‖∧₂g‖ avoids reading s₂ off a possibly inaccurate SVD tail.
    let s2 = if s1 > 0.0 {
        spectral_norm(&compound_matrix(g, 2)?) / s1
    } else {
        0.0
    };
    Ok(if s2 < 1e-300 { f64::INFINITY } else { s1 / s2 })
}

/// `‖g·h‖/(‖g‖·‖h‖)`.
pub fn cancellation_ratio(g: &Matrix, h: &Matrix) -> Result<f64> {
    if g.ncols() != h.nrows() {
        return Err(LabError::DimensionMismatch {
            expected: g.ncols(),
            found: h.nrows(),
        });
    }
    let (ng, nh) = (spectral_norm(g), spectral_norm(h));
    if ng == 0.0 || nh == 0.0 {
        return Err(LabError::InvalidParameter(
            "cancellation ratio of a zero matrix".into(),
        ));
    }
    Ok(spectral_norm(&(g * h)) / (ng * nh))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCertificate {
    pub n_blocks: usize,
    /// Smallest cancellation ratio over consecutive pairs.
    pub epsilon: f64,
    /// Smallest gap ratio over the blocks.
    pub kappa_inv: f64,
    pub hypothesis_ok: bool,
    pub predicted_bound: f64,
    pub actual_error: f64,
}

/// Logs attached to one block sequence, all computed from scaled products.
struct BlockLogs {
    log_norms: Vec<f64>,
    log_gaps: Vec<f64>,
    log_pairs: Vec<f64>,
    log_product: f64,
}

fn log_gap(block: &ScaledMatrix) -> Option<f64> {
    let m = block.mantissa.nrows();
    let top = spectral_norm(&block.mantissa);
    let wedge = spectral_norm(&compound_matrix(&block.mantissa, 2).ok()?);
    if m < 2 || top == 0.0 {
        return None;
    }
    // log gr = 2 log s₁ − log(s₁s₂); the 2^exp2 scalings cancel.
    Some(if wedge < 1e-300 * top * top {
        f64::INFINITY
    } else {
        2.0 * top.ln() - wedge.ln()
    })
}

fn block_logs(blocks: &[ScaledMatrix]) -> Result<BlockLogs> {
    let log_norms: Vec<f64> = blocks.iter().map(ScaledMatrix::log_norm).collect();
    let log_gaps = blocks
        .iter()
        .map(|b| log_gap(b).ok_or_else(|| LabError::NonFinite("block gap ratio".into())))
        .collect::<Result<Vec<_>>>()?;
    let log_pairs: Vec<f64> = blocks
        .windows(2)
        .map(|w| w[1].mul(&w[0]).log_norm())
        .collect();
    let mut prod = blocks[0].clone();
    for b in &blocks[1..] {
        prod = b.mul(&prod);
    }
    if !prod.is_finite() {
        return Err(LabError::NonFinite("block product".into()));
    }
    let log_product = prod.log_norm();
    if log_norms
        .iter()
        .chain(&log_pairs)
        .chain([&log_product])
        .any(|v| !v.is_finite())
    {
        return Err(LabError::NonFinite("block log-norms".into()));
    }
    Ok(BlockLogs {
        log_norms,
        log_gaps,
        log_pairs,
        log_product,
    })
}

fn certify_logs(logs: &BlockLogs, c_gate: f64, c_cal: f64) -> ApCertificate {
    let n = logs.log_norms.len();
    let log_eps = logs
        .log_pairs
        .iter()
        .enumerate()
        .map(|(i, p)| p - logs.log_norms[i + 1] - logs.log_norms[i])
        .fold(f64::INFINITY, f64::min)
        .min(0.0);
    let log_kappa_inv = logs.log_gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let log_kappa = -log_kappa_inv;
    let hypothesis_ok = log_kappa <= c_gate.ln() + 2.0 * log_eps;
    let predicted_bound = c_cal * n as f64 * (log_kappa - 2.0 * log_eps).exp();
    let interior = compensated_sum(logs.log_norms[1..n - 1].iter().copied());
    let pairs = compensated_sum(logs.log_pairs.iter().copied());
    let actual_error = (logs.log_product + interior - pairs).abs();
    ApCertificate {
        n_blocks: n,
        epsilon: log_eps.exp(),
        kappa_inv: log_kappa_inv.exp(),
        hypothesis_ok,
        predicted_bound,
        actual_error,
    }
}

/// Certificate with the default hypothesis gate `c = 1/100`.
pub fn ap_certify(blocks: &[Matrix], c_cal: f64) -> Result<ApCertificate> {
    ap_certify_with_gate(blocks, HYPOTHESIS_C, c_cal)
}

pub fn ap_certify_with_gate(blocks: &[Matrix], c_gate: f64, c_cal: f64) -> Result<ApCertificate> {
    if blocks.len() < 3 {
        return Err(LabError::InvalidParameter(
            "avalanche certificate needs at least 3 blocks".into(),
        ));
    }
    let m = blocks[0].nrows();
    if m < 2 {
        return Err(LabError::InvalidParameter(
            "blocks must be at least 2x2".into(),
        ));
    }
    for b in blocks {
        if b.nrows() != m || b.ncols() != m {
            return Err(LabError::DimensionMismatch {
                expected: m,
                found: b.nrows(),
            });
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(LabError::NonFinite("block entry".into()));
        }
    }
    if !(c_gate > 0.0 && c_cal > 0.0) {
        return Err(LabError::InvalidParameter(
            "AP constants must be positive".into(),
        ));
    }
    let scaled: Vec<ScaledMatrix> = blocks
        .iter()
        .cloned()
        .map(ScaledMatrix::from_matrix)
        .collect();
    Ok(certify_logs(&block_logs(&scaled)?, c_gate, c_cal))
}

/// Block sizes `m_0 = n0 + j`, `m_1 = … = m_{n−2} = n0`, last block
/// absorbing the remainder, with offsets `q_i = m_0 + … + m_{i−1}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfiguration {
    pub n0: usize,
    pub n1: usize,
    pub j: usize,
    pub sizes: Vec<usize>,
    pub offsets: Vec<usize>,
}

/// The `j`-th shifted partition of `[0, n1)`.
///
/// Middle blocks of size `n0` are added until the remainder fits in
/// `(2·n0, 3·n0]`, which becomes the last block.
pub fn shifted_partition(n1: usize, n0: usize, j: usize) -> Result<BlockConfiguration> {
    if n0 == 0 {
        return Err(LabError::InfeasiblePartition("n0 must be >= 1".into()));
    }
    if j >= n0 {
        return Err(LabError::InfeasiblePartition(format!(
            "shift j = {j} must be below n0 = {n0}"
        )));
    }
    if n1 < 5 * n0 {
        return Err(LabError::InfeasiblePartition(format!(
            "n1 = {n1} is below 5*n0 = {}",
            5 * n0
        )));
    }
    let first = n0 + j;
    let rest = n1 - first;
    let middles = (rest - 3 * n0).div_ceil(n0);
    let last = rest - middles * n0;
    let mut sizes = Vec::with_capacity(middles + 2);
    sizes.push(first);
    sizes.extend(std::iter::repeat_n(n0, middles));
    sizes.push(last);
    let offsets = sizes
        .iter()
        .scan(0, |acc, s| {
            let q = *acc;
            *acc += s;
            Some(q)
        })
        .collect();
    Ok(BlockConfiguration {
        n0,
        n1,
        j,
        sizes,
        offsets,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiscaleReport {
    pub n0: usize,
    pub n1: usize,
    #[serde(rename = "L_n0")]
    pub l_n0: f64,
    #[serde(rename = "L_2n0")]
    pub l_2n0: f64,
    #[serde(rename = "predicted_L_n1")]
    pub predicted_l_n1: f64,
    #[serde(rename = "measured_L_n1")]
    pub measured_l_n1: f64,
    /// `L^(n1) + L^(n0) − 2·L^(2n0)`.
    pub residual: f64,
    pub hypothesis_failure_fraction: f64,
    pub sample_count: usize,
    pub excluded: usize,
}

/// Whether every shifted configuration at `x` satisfies the AP hypotheses.
fn hypotheses_hold(
    a: &FourierCocycle,
    omega: &Frequency,
    x: &[f64],
    configs: &[BlockConfiguration],
    n1: usize,
) -> bool {
    let steps = orbit_matrices(a, omega, x, n1);
    let m = a.size();
    let mut scratch = Matrix::zeros(m, m);
    configs.iter().all(|cfg| {
        let blocks: Vec<ScaledMatrix> = cfg
            .sizes
            .iter()
            .zip(&cfg.offsets)
            .map(|(size, q)| {
                let mut prod = ScaledMatrix::identity(m);
                for s in &steps[*q..q + size] {
                    prod.left_mul_assign(s, &mut scratch);
                }
                prod
            })
            .collect();
        match block_logs(&blocks) {
            Ok(logs) => certify_logs(&logs, HYPOTHESIS_C, DEFAULT_C_CAL).hypothesis_ok,
            Err(_) => false,
        }
    })
}

/// Predicts `L^(n1)_1 ≈ 2·L^(2n0)_1 − L^(n0)_1` and measures the residual.
pub fn multiscale_refine(
    a: &FourierCocycle,
    omega: &Frequency,
    n0: usize,
    n1: usize,
    sampler: &Sampler,
) -> Result<MultiscaleReport> {
    if a.size() < 2 {
        return Err(LabError::InvalidParameter(
            "multiscale refinement needs m >= 2".into(),
        ));
    }
    let configs = (0..n0)
        .map(|j| shifted_partition(n1, n0, j))
        .collect::<Result<Vec<_>>>()?;
    let points = sampler.points()?;
    let base = finite_scale_spectrum_on(a, omega, n0, &points)?;
    let gap = base.les[0] - base.les[1];
    if !(gap > REFINE_GAP) {
        return Err(LabError::GapTooSmall {
            index: 1,
            gap,
            required: REFINE_GAP,
        });
    }
    let double = finite_scale_spectrum_on(a, omega, 2 * n0, &points)?;
    let far = finite_scale_spectrum_on(a, omega, n1, &points)?;
    let predicted = 2.0 * double.les[0] - base.les[0];
    let residual = far.les[0] - predicted;

    let failures: Vec<bool> = points
        .par_iter()
        .map(|p| !hypotheses_hold(a, omega, p.coords(), &configs, n1))
        .collect();
    let failed = failures.iter().filter(|f| **f).count();
    Ok(MultiscaleReport {
        n0,
        n1,
        l_n0: base.les[0],
        l_2n0: double.les[0],
        predicted_l_n1: predicted,
        measured_l_n1: far.les[0],
        residual,
        hypothesis_failure_fraction: failed as f64 / points.len() as f64,
        sample_count: far.sample_count,
        excluded: far.excluded.max(base.excluded).max(double.excluded),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cocycle::presets;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> Matrix {
        Matrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    fn rot(t: f64) -> Matrix {
        m2(t.cos(), -t.sin(), t.sin(), t.cos())
    }

    #[test]
    fn gap_ratio_examples() {
        assert!((gap_ratio(&m2(10.0, 0.0, 0.0, 0.1)).unwrap() - 100.0).abs() < 1e-12);
        assert_eq!(gap_ratio(&Matrix::identity(2, 2)).unwrap(), 1.0);
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((gap_ratio(&m2(1.0, 1.0, 0.0, 1.0)).unwrap() - phi * phi).abs() < 1e-12);
        assert_eq!(gap_ratio(&m2(1.0, 0.0, 0.0, 0.0)).unwrap(), f64::INFINITY);
        assert!(gap_ratio(&Matrix::identity(1, 1)).is_err());
    }

    #[test]
    fn cancellation_ratio_examples() {
        let g = m2(10.0, 0.0, 0.0, 0.1);
        assert!((cancellation_ratio(&g, &g).unwrap() - 1.0).abs() < 1e-15);
        let g = m2(1.0, 0.0, 0.0, 1e-3);
        let h = m2(0.0, 0.0, 1.0, 0.0);
        assert!((cancellation_ratio(&g, &h).unwrap() - 1e-3).abs() < 1e-15);
        assert!((cancellation_ratio(&g, &Matrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-15);
        assert!(cancellation_ratio(&g, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn diagonal_blocks_have_zero_error() {
        let blocks = vec![m2(10.0, 0.0, 0.0, 0.1); 6];
        let c = ap_certify(&blocks, DEFAULT_C_CAL).unwrap();
        assert!(c.actual_error < 1e-10);
        assert!(c.hypothesis_ok);
        assert_eq!(c.n_blocks, 6);
    }

    #[test]
    fn rotations_fail_the_hypothesis() {
        let blocks: Vec<Matrix> = (0..5).map(|i| rot(0.3 * i as f64)).collect();
        let c = ap_certify(&blocks, DEFAULT_C_CAL).unwrap();
        assert!(!c.hypothesis_ok);
        assert!((c.kappa_inv - 1.0).abs() < 1e-12);
        assert!(c.actual_error.is_finite());
    }

    #[test]
    fn too_few_blocks() {
        assert!(ap_certify(&[Matrix::identity(2, 2), Matrix::identity(2, 2)], 40.0).is_err());
    }

    /// Reference computation of the AP error straight from the definition,
    /// with explicit product accumulation in log-scale.
    fn brute_force_error(blocks: &[Matrix]) -> f64 {
        let norm = |m: &Matrix| m.clone().singular_values().max();
        let mut prod = Matrix::identity(2, 2);
        let mut log_scale = 0.0;
        for b in blocks {
            prod = b * prod;
            let s = norm(&prod);
            prod /= s;
            log_scale += s.ln();
        }
        let interior: f64 = blocks[1..blocks.len() - 1]
            .iter()
            .map(|b| norm(b).ln())
            .sum();
        let pairs: f64 = blocks.windows(2).map(|w| norm(&(&w[1] * &w[0])).ln()).sum();
        (log_scale + interior - pairs).abs()
    }

    #[test]
    fn conjugated_hyperbolic_suites_obey_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = m2(5f64.exp(), 0.0, 0.0, (-5f64).exp());
        for _ in 0..100 {
            let blocks: Vec<Matrix> = (0..20)
                .map(|_| {
                    let r = rot(rng.random_range(-0.3..0.3));
                    &r * &d * r.transpose()
                })
                .collect();
            let c = ap_certify(&blocks, DEFAULT_C_CAL).unwrap();
            assert!(c.hypothesis_ok);
            assert!(c.actual_error <= c.predicted_bound, "{c:?}");
            assert!((c.actual_error - brute_force_error(&blocks)).abs() < 1e-9);
        }
    }

    #[test]
    fn partition_examples() {
        let p = shifted_partition(100, 10, 0).unwrap();
        assert_eq!(p.sizes.iter().sum::<usize>(), 100);
        assert!(p.offsets.iter().all(|q| q % 10 == 0));
        assert!((10..=30).contains(p.sizes.last().unwrap()));

        let p = shifted_partition(100, 10, 3).unwrap();
        assert_eq!(p.sizes[0], 13);
        for i in 1..p.sizes.len() - 1 {
            assert_eq!(p.sizes[i], 10);
            assert_eq!(p.offsets[i], 10 * i + 3);
        }

        let p = shifted_partition(55, 10, 5).unwrap();
        assert_eq!(p.sizes, vec![15, 10, 30]);
        assert_eq!(p.offsets, vec![0, 15, 25]);

        assert!(shifted_partition(49, 10, 9).is_err());
        assert!(shifted_partition(100, 10, 10).is_err());
    }

    #[test]
    fn refine_constant_cocycle_is_exact() {
        let r = multiscale_refine(
            &presets::const_diag(1),
            &Frequency::golden(),
            10,
            200,
            &Sampler::random(1, 20, 0),
        )
        .unwrap();
        assert!(r.residual.abs() < 1e-12);
        assert_eq!(r.hypothesis_failure_fraction, 0.0);
    }

    #[test]
    fn refine_rotation_lacks_gap() {
        let err = multiscale_refine(
            &presets::rotation(1),
            &Frequency::golden(),
            10,
            200,
            &Sampler::random(1, 20, 0),
        );
        assert!(matches!(err, Err(LabError::GapTooSmall { .. })));
    }

    #[test]
    fn refine_residual_shrinks_with_scale() {
        let a = presets::schrodinger(10.0, 0.0);
        let sampler = Sampler::random(1, 400, 9);
        let res: Vec<f64> = [10, 20, 40]
            .iter()
            .map(|&n0| {
                multiscale_refine(&a, &Frequency::golden(), n0, 20 * n0, &sampler)
                    .unwrap()
                    .residual
                    .abs()
            })
            .collect();
        // Past n0 = 20 the residual sits at the Monte-Carlo floor.
        assert!(res[0] > 2.0 * res[1] && res[0] > 2.0 * res[2], "{res:?}");
        assert!(res[1] < 5e-3 && res[2] < 5e-3, "{res:?}");
    }

    #[test]
    fn report_json_keys() {
        let r = multiscale_refine(
            &presets::const_diag(1),
            &Frequency::golden(),
            10,
            50,
            &Sampler::random(1, 4, 0),
        )
        .unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in [
            "n0",
            "n1",
            "L_n0",
            "L_2n0",
            "predicted_L_n1",
            "measured_L_n1",
            "residual",
            "hypothesis_failure_fraction",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_invariants(n0 in 1usize..40, extra in 0usize..400, jf in 0.0f64..1.0) {
            let n1 = 5 * n0 + extra;
            let j = ((n0 as f64) * jf) as usize % n0;
            let p = shifted_partition(n1, n0, j).unwrap();
            prop_assert_eq!(p.sizes.iter().sum::<usize>(), n1);
            prop_assert!(p.sizes.len() >= 3);
            prop_assert!(p.sizes.iter().all(|s| (n0..=3 * n0).contains(s)));
            prop_assert_eq!(p.sizes[0], n0 + j);
            for i in 1..p.sizes.len() {
                prop_assert_eq!(p.offsets[i], p.offsets[i - 1] + p.sizes[i - 1]);
            }
        }

        #[test]
        fn diagonal_sequences_are_exact(vals in proptest::collection::vec((1.0f64..50.0, 0.01f64..1.0), 3..12)) {
            let blocks: Vec<Matrix> = vals.iter().map(|(a, b)| m2(*a, 0.0, 0.0, *b)).collect();
            let c = ap_certify(&blocks, DEFAULT_C_CAL).unwrap();
            prop_assert!(c.actual_error < 1e-10);
        }

        #[test]
        fn scaling_invariance(angles in proptest::collection::vec(-0.5f64..0.5, 4..10), scale in 1e-3f64..1e3) {
            let d = m2(20.0, 0.0, 0.0, 0.05);
            let blocks: Vec<Matrix> = angles.iter().map(|t| &rot(*t) * &d * rot(*t).transpose()).collect();
            let scaled: Vec<Matrix> = blocks.iter().map(|b| b * scale).collect();
            let c1 = ap_certify(&blocks, DEFAULT_C_CAL).unwrap();
            let c2 = ap_certify(&scaled, DEFAULT_C_CAL).unwrap();
            prop_assert!((c1.actual_error - c2.actual_error).abs() < 1e-9);
        }
    }
}
