//! Reasoning reflection reward.
//!
//! Four scorers over a [`CertaintyMatrix`] (rows = reasoning traces,
//! columns = reference tokens):
//!
//! * **vanilla**: plain sum of log-probabilities,
//! * **weighted**: each column weighted by its spread across traces,
//! * **propagated**: weighted, plus a per-trace discount for certainty that
//!   later reference tokens inherit from low-confidence reflective tokens,
//! * **masked**: weighted difference against a masked-reasoning baseline.
//!
//! Column spread is the population standard deviation of log-probabilities.
//! Weights are linear in the spread and normalized to sum to `|y|`, so uniform
//! spread reproduces the vanilla sum exactly.

use serde::{Deserialize, Serialize};

use crate::certainty::{CertaintyMatrix, CertaintyRow};
use crate::error::{DroError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Vanilla,
    Weighted,
    Propagated,
    Masked,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Vanilla,
        Variant::Weighted,
        Variant::Propagated,
        Variant::Masked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Vanilla => "vanilla",
            Variant::Weighted => "weighted",
            Variant::Propagated => "propagated",
            Variant::Masked => "masked",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = DroError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| DroError::Config(format!("unknown reward variant {s:?}")))
    }
}

/// Column statistics of a certainty matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ReflectionStats {
    pub sigma: Vec<f64>,
    pub mean: Vec<f64>,
    pub weights: Vec<f64>,
    /// Reasoning-reflective positions (0-based, ascending).
    pub reflective: Vec<usize>,
}

impl ReflectionStats {
    /// Column statistics with linear spread weights and top-quantile reflective set.
    pub fn compute(matrix: &CertaintyMatrix, sigma_floor: f64, quantile: f64) -> Result<Self> {
        let mut stats = token_std(matrix)?;
        stats.weights = reflective_weights(&stats.sigma, sigma_floor)?;
        stats.reflective = select_reflective(&stats.sigma, quantile);
        Ok(stats)
    }

    /// Uniform weights and no reflective tokens; reduces every scorer to vanilla.
    pub fn uniform(len: usize) -> Self {
        ReflectionStats {
            sigma: vec![0.0; len],
            mean: vec![0.0; len],
            weights: vec![1.0; len],
            reflective: Vec::new(),
        }
    }

    pub fn max_sigma(&self) -> f64 {
        self.sigma.iter().copied().fold(0.0, f64::max)
    }
}

/// Scalar reward per trace, tagged with the scorer that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub r: Vec<f64>,
    pub variant: Variant,
}

/// Per-column mean and population standard deviation. Weights start uniform
/// and the reflective set empty.
pub fn token_std(matrix: &CertaintyMatrix) -> Result<ReflectionStats> {
    let g = matrix.group_size();
    if g < 2 {
        return Err(DroError::TooFewTraces);
    }
    let n = matrix.reference_len();
    let mut mean = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for j in 0..n {
        let m = matrix.column(j).sum::<f64>() / g as f64;
        let var = matrix.column(j).map(|x| (x - m) * (x - m)).sum::<f64>() / g as f64;
        mean.push(m);
        sigma.push(var.sqrt());
    }
    Ok(ReflectionStats {
        sigma,
        mean,
        weights: vec![1.0; n],
        reflective: Vec::new(),
    })
}

/// `w_j = |y| (σ_j + floor) / Σ_m (σ_m + floor)`, all ones when that sum is zero.
pub fn reflective_weights(sigma: &[f64], floor: f64) -> Result<Vec<f64>> {
    if floor < 0.0 || !floor.is_finite() {
        return Err(DroError::OutOfRange(format!("sigma floor {floor} must be >= 0")));
    }
    if let Some(bad) = sigma.iter().find(|s| !(**s >= 0.0) || !s.is_finite()) {
        return Err(DroError::OutOfRange(format!("negative or non-finite sigma {bad}")));
    }
    let total: f64 = sigma.iter().map(|s| s + floor).sum();
    let n = sigma.len() as f64;
    if total == 0.0 {
        return Ok(vec![1.0; sigma.len()]);
    }
    Ok(sigma.iter().map(|s| n * (s + floor) / total).collect())
}

/// The `⌈quantile·|y|⌉` highest-σ positions (lower index wins ties), minus
/// any with σ = 0. Returned ascending.
pub fn select_reflective(sigma: &[f64], quantile: f64) -> Vec<usize> {
    let quota = (quantile * sigma.len() as f64 - 1e-12).ceil().max(0.0) as usize;
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order
        .into_iter()
        .take(quota.min(sigma.len()))
        .filter(|&j| sigma[j] > 0.0)
        .collect();
    picked.sort_unstable();
    picked
}

pub fn vanilla_aggregate(row: &CertaintyRow) -> Result<f64> {
    if row.is_empty() {
        return Err(DroError::InvalidSequence("empty certainty row".into()));
    }
    Ok(row.logp.iter().sum())
}

fn check_weights(matrix: &CertaintyMatrix, stats: &ReflectionStats) -> Result<()> {
    if stats.weights.len() != matrix.reference_len() {
        return Err(DroError::DimensionMismatch {
            what: "reflection weights",
            expected: matrix.reference_len(),
            got: stats.weights.len(),
        });
    }
    if let Some(&k) = stats.reflective.iter().find(|&&k| k >= matrix.reference_len()) {
        return Err(DroError::OutOfRange(format!("reflective position {k} outside reference")));
    }
    Ok(())
}

fn weighted_sum(weights: &[f64], values: impl Iterator<Item = f64>) -> f64 {
    weights.iter().zip(values).map(|(w, x)| w * x).sum()
}

pub fn vanilla_reward(matrix: &CertaintyMatrix) -> Result<RewardVector> {
    let r = matrix.rows().iter().map(vanilla_aggregate).collect::<Result<_>>()?;
    Ok(RewardVector {
        r,
        variant: Variant::Vanilla,
    })
}

/// `r_i = Σ_j w_j · logp_i[j]`.
pub fn weighted_reward(matrix: &CertaintyMatrix, stats: &ReflectionStats) -> Result<RewardVector> {
    check_weights(matrix, stats)?;
    let r = matrix
        .rows()
        .iter()
        .map(|row| weighted_sum(&stats.weights, row.logp.iter().copied()))
        .collect();
    Ok(RewardVector {
        r,
        variant: Variant::Weighted,
    })
}

/// `P(d) = p + (1 − p)(1 − e^{−γd})`.
pub fn propagation_factor(p: f64, d: usize, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(DroError::OutOfRange(format!("probability {p} outside [0, 1]")));
    }
    if d < 1 {
        return Err(DroError::OutOfRange("propagation distance must be >= 1".into()));
    }
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DroError::OutOfRange(format!("decay {gamma} must be > 0")));
    }
    Ok(p + (1.0 - p) * -(-gamma * d as f64).exp_m1())
}

/// Log of the propagation factor, taking the reflective token's log-probability.
fn log_propagation(logp_k: f64, d: usize, gamma: f64) -> f64 {
    // 1 − (1 − p) e^{−γd}, written to stay accurate when p → 1 or γd → 0
    let one_minus_p = -logp_k.exp_m1();
    (-(one_minus_p * (-gamma * d as f64).exp())).ln_1p()
}

/// `r_i = Σ_j w_j (logp_i[j] + Σ_{k∈reflective, k<j} ln P_k(j))` with
/// `p_k = exp(logp_i[k])` per trace and `d = j − k`.
pub fn propagated_reward(matrix: &CertaintyMatrix, stats: &ReflectionStats, gamma: f64) -> Result<RewardVector> {
    check_weights(matrix, stats)?;
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(DroError::OutOfRange(format!("decay {gamma} must be > 0")));
    }
    let r = matrix
        .rows()
        .iter()
        .map(|row| {
            let corrected = (0..row.len()).map(|j| {
                let discount: f64 = stats
                    .reflective
                    .iter()
                    .take_while(|&&k| k < j)
                    .map(|&k| log_propagation(row.logp[k], j - k, gamma))
                    .sum();
                row.logp[j] + discount
            });
            weighted_sum(&stats.weights, corrected)
        })
        .collect();
    Ok(RewardVector {
        r,
        variant: Variant::Propagated,
    })
}

/// `r_i = Σ_j w_j (logp_i[j] − baseline[j])`.
pub fn masked_reward(
    matrix: &CertaintyMatrix,
    baseline: &CertaintyRow,
    stats: &ReflectionStats,
) -> Result<RewardVector> {
    check_weights(matrix, stats)?;
    if baseline.len() != matrix.reference_len() {
        return Err(DroError::DimensionMismatch {
            what: "masked baseline",
            expected: matrix.reference_len(),
            got: baseline.len(),
        });
    }
    let r = matrix
        .rows()
        .iter()
        .map(|row| {
            weighted_sum(
                &stats.weights,
                row.logp.iter().zip(&baseline.logp).map(|(l, b)| l - b),
            )
        })
        .collect();
    Ok(RewardVector {
        r,
        variant: Variant::Masked,
    })
}

/// Dispatch on `variant`. `baseline` is required for [`Variant::Masked`].
pub fn reward(
    variant: Variant,
    matrix: &CertaintyMatrix,
    stats: &ReflectionStats,
    baseline: Option<&CertaintyRow>,
    gamma: f64,
) -> Result<RewardVector> {
    match variant {
        Variant::Vanilla => vanilla_reward(matrix),
        Variant::Weighted => weighted_reward(matrix, stats),
        Variant::Propagated => propagated_reward(matrix, stats, gamma),
        Variant::Masked => {
            let baseline = baseline
                .ok_or_else(|| DroError::Config("masked reward needs a baseline row".into()))?;
            masked_reward(matrix, baseline, stats)
        }
    }
}

/// Trace indices sorted by descending reward (lower index first on ties).
pub fn ranking(r: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..r.len()).collect();
    order.sort_by(|&a, &b| r[b].total_cmp(&r[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: &[&[f64]]) -> CertaintyMatrix {
        CertaintyMatrix::from_logp(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn std_uses_population_convention() {
        let m = matrix(&[&[0.0, -1.0], &[-2.0, -1.0]]);
        let s = token_std(&m).unwrap();
        assert!((s.sigma[0] - 1.0).abs() < 1e-15);
        assert_eq!(s.sigma[1], 0.0);
        assert_eq!(s.mean, vec![-1.0, -1.0]);
        assert!(matches!(token_std(&matrix(&[&[0.0]])), Err(DroError::TooFewTraces)));
        assert_eq!(
            token_std(&matrix(&[&[0.0]])).unwrap_err().to_string(),
            "reflection statistics need at least two traces"
        );
    }

    #[test]
    fn weights_normalize_to_length() {
        assert_eq!(reflective_weights(&[2.0, 2.0, 2.0], 0.0).unwrap(), vec![1.0; 3]);
        let w = reflective_weights(&[0.0, 1.0, 3.0], 0.0).unwrap();
        assert_eq!(w, vec![0.0, 0.75, 2.25]);
        assert_eq!(reflective_weights(&[0.0; 4], 0.0).unwrap(), vec![1.0; 4]);
        assert!(reflective_weights(&[-0.1, 1.0], 0.0).is_err());
        let w = reflective_weights(&[0.0, 1.0], 1.0).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 4.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reflective_selection() {
        assert_eq!(select_reflective(&[1.0, 2.0, 0.5], 1.0), vec![0, 1, 2]);
        assert_eq!(select_reflective(&[0.0, 0.0, 5.0, 2.0], 0.5), vec![2, 3]);
        assert!(select_reflective(&[0.0; 5], 1.0).is_empty());
        // quota 2 but only one positive
        assert_eq!(select_reflective(&[0.0, 0.3, 0.0, 0.0], 0.5), vec![1]);
        // ties go to the lower index
        assert_eq!(select_reflective(&[1.0, 1.0, 1.0, 1.0], 0.25), vec![0]);
    }

    #[test]
    fn vanilla_sums() {
        let row = |l: Vec<f64>| CertaintyRow { rank: vec![1; l.len()], logp: l };
        assert_eq!(vanilla_aggregate(&row(vec![0.0; 3])).unwrap(), 0.0);
        assert_eq!(vanilla_aggregate(&row(vec![-1.0, -2.0, -3.0])).unwrap(), -6.0);
        assert_eq!(vanilla_aggregate(&row(vec![-3.0, -1.0, -2.0])).unwrap(), -6.0);
        assert!(vanilla_aggregate(&row(vec![])).is_err());
    }

    #[test]
    fn weighted_reductions() {
        let m = matrix(&[&[-1.0, -2.0, -0.5], &[-0.1, -4.0, -2.0]]);
        let uniform = ReflectionStats::uniform(3);
        let w = weighted_reward(&m, &uniform).unwrap();
        assert_eq!(w.r, vanilla_reward(&m).unwrap().r);
        let mut one_hot = ReflectionStats::uniform(3);
        one_hot.weights = vec![0.0, 1.0, 0.0];
        assert_eq!(weighted_reward(&m, &one_hot).unwrap().r, vec![-2.0, -4.0]);
        let mut bad = ReflectionStats::uniform(2);
        bad.weights.pop();
        assert!(weighted_reward(&m, &bad).is_err());
    }

    #[test]
    fn propagation_factor_values() {
        assert_eq!(propagation_factor(1.0, 3, 0.5).unwrap(), 1.0);
        assert!((propagation_factor(0.3, 100, 0.5).unwrap() - 1.0).abs() < 1e-12);
        let expected = 0.2 + 0.8 * (1.0 - (-1.0f64).exp());
        assert!((propagation_factor(0.2, 2, 0.5).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.705_696_447_062_846_1).abs() < 1e-15);
        assert!(propagation_factor(1.2, 1, 0.5).is_err());
        assert!(propagation_factor(0.5, 0, 0.5).is_err());
        assert!(propagation_factor(0.5, 1, 0.0).is_err());
    }

    #[test]
    fn propagated_hand_example() {
        // one trace, |y| = 3, reflective {0}, gamma 0.5, uniform weights
        let l = [-1.2, -0.3, -0.7];
        let m = matrix(&[&l]);
        let mut stats = ReflectionStats::uniform(3);
        stats.reflective = vec![0];
        let p = (-1.2f64).exp();
        let f = |d: f64| (p + (1.0 - p) * (1.0 - (-0.5 * d).exp())).ln();
        let expected = l[0] + (l[1] + f(1.0)) + (l[2] + f(2.0));
        let got = propagated_reward(&m, &stats, 0.5).unwrap().r[0];
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn propagated_reductions() {
        let m = matrix(&[&[-1.0, -2.0, -0.5], &[0.0, -4.0, -2.0]]);
        let mut stats = ReflectionStats::uniform(3);
        let weighted = weighted_reward(&m, &stats).unwrap().r;
        assert_eq!(propagated_reward(&m, &stats, 0.5).unwrap().r, weighted);
        // a reflective token with probability 1 contributes factor 1
        stats.reflective = vec![0];
        let r = propagated_reward(&m, &stats, 0.5).unwrap().r;
        assert_eq!(r[1], weighted[1]);
    }

    #[test]
    fn masked_hand_example() {
        let m = matrix(&[&[-1.0, -1.0], &[-3.0, -2.0]]);
        let baseline = CertaintyRow {
            logp: vec![-2.0, -2.0],
            rank: vec![1, 1],
        };
        let stats = ReflectionStats::uniform(2);
        assert_eq!(masked_reward(&m, &baseline, &stats).unwrap().r, vec![2.0, -1.0]);
        let mut zero = stats.clone();
        zero.weights = vec![0.0, 0.0];
        assert_eq!(masked_reward(&m, &baseline, &zero).unwrap().r, vec![0.0, 0.0]);
        let same = m.rows()[0].clone();
        let m1 = matrix(&[&[-1.0, -1.0], &[-1.0, -1.0]]);
        assert_eq!(masked_reward(&m1, &same, &stats).unwrap().r, vec![0.0, 0.0]);
        let short = CertaintyRow {
            logp: vec![0.0],
            rank: vec![1],
        };
        assert!(masked_reward(&m, &short, &stats).is_err());
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..6, 1usize..10).prop_flat_map(|(g, n)| {
            proptest::collection::vec(proptest::collection::vec(-8.0f64..0.0, n), g)
        })
    }

    proptest! {
        #[test]
        fn weights_sum_to_length(sigma in proptest::collection::vec(0.0f64..3.0, 1..20), floor in 0.0f64..0.5) {
            let w = reflective_weights(&sigma, floor).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - sigma.len() as f64).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn selection_is_order_consistent_and_monotone(sigma in proptest::collection::vec(0.0f64..3.0, 1..20),
                                                       q1 in 0.01f64..1.0, q2 in 0.01f64..1.0) {
            let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
            let small = select_reflective(&sigma, lo);
            let large = select_reflective(&sigma, hi);
            prop_assert!(small.iter().all(|k| large.contains(k)));
            for &k in &small {
                for j in 0..sigma.len() {
                    if !small.contains(&j) {
                        prop_assert!(sigma[k] >= sigma[j]);
                    }
                }
            }
            // idempotent: selecting again over the selected σ keeps everything
            let sub: Vec<f64> = small.iter().map(|&k| sigma[k]).collect();
            prop_assert_eq!(select_reflective(&sub, 1.0).len(), sub.len());
        }

        #[test]
        fn propagation_bounds(rows in arb_matrix(), gamma in 0.05f64..3.0, q in 0.05f64..1.0) {
            let m = CertaintyMatrix::from_logp(rows).unwrap();
            let stats = ReflectionStats::compute(&m, 0.01, q).unwrap();
            let weighted = weighted_reward(&m, &stats).unwrap().r;
            let propagated = propagated_reward(&m, &stats, gamma).unwrap().r;
            for (p, w) in propagated.iter().zip(&weighted) {
                prop_assert!(p <= &(w + 1e-12));
            }
            for row in m.rows() {
                for &k in &stats.reflective {
                    for j in k + 1..row.len() {
                        let term = log_propagation(row.logp[k], j - k, gamma);
                        prop_assert!(term <= 0.0);
                        prop_assert!(term >= row.logp[k] - 1e-12);
                    }
                }
            }
        }

        #[test]
        fn column_shift_preserves_ranking(rows in arb_matrix(), c in -3.0f64..3.0, col in 0usize..10) {
            let m = CertaintyMatrix::from_logp(rows.clone()).unwrap();
            let col = col % m.reference_len();
            let stats = ReflectionStats::compute(&m, 0.01, 0.3).unwrap();
            let shifted_rows: Vec<Vec<f64>> = rows.iter().map(|r| {
                let mut r = r.clone();
                r[col] += c;
                r
            }).collect();
            let shifted = CertaintyMatrix::from_logp(shifted_rows).unwrap();
            let baseline = CertaintyRow { logp: vec![-1.0; m.reference_len()], rank: vec![1; m.reference_len()] };
            let before = weighted_reward(&m, &stats).unwrap().r;
            let after = weighted_reward(&shifted, &stats).unwrap().r;
            for (a, b) in before.iter().zip(&after) {
                prop_assert!((b - a - stats.weights[col] * c).abs() < 1e-9);
            }
            let mb = masked_reward(&m, &baseline, &stats).unwrap().r;
            let ma = masked_reward(&shifted, &baseline, &stats).unwrap().r;
            for (a, b) in mb.iter().zip(&ma) {
                prop_assert!((b - a - stats.weights[col] * c).abs() < 1e-9);
            }
        }
    }
}
