//! Two-trace instances where the plain log-probability sum and the
//! σ-weighted reward disagree.
//!
//! Trace A predicts the few reasoning-sensitive reference tokens well; trace
//! B is slightly more confident on every other token. Summed over a long
//! reference, B's small gains outweigh A's large ones, while σ-weighting
//! concentrates on the columns where the traces actually differ.

use rand::seq::index::sample;
use rand::Rng;

use crate::certainty::CertaintyMatrix;
use crate::error::{DroError, Result};
use crate::r3::{ranking, vanilla_reward, weighted_reward, ReflectionStats};
use crate::rng;

/// Columns count as high-σ when their σ is at least this fraction of the largest.
pub const HIGH_SIGMA_RATIO: f64 = 0.5;
const MAX_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RankingDemo {
    /// Row 0 is trace A (the planted better trace), row 1 is trace B.
    pub matrix: CertaintyMatrix,
    /// Columns where A was planted to be far more certain.
    pub planted: Vec<usize>,
    pub vanilla: Vec<f64>,
    pub weighted: Vec<f64>,
    pub stats: ReflectionStats,
}

impl RankingDemo {
    pub fn vanilla_order(&self) -> Vec<usize> {
        ranking(&self.vanilla)
    }

    pub fn weighted_order(&self) -> Vec<usize> {
        ranking(&self.weighted)
    }

    pub fn high_sigma_columns(&self) -> usize {
        let max = self.stats.max_sigma();
        self.stats.sigma.iter().filter(|&&s| s >= HIGH_SIGMA_RATIO * max).count()
    }

    /// Vanilla ranks B first, weighted ranks A first, and at most three columns are high-σ.
    pub fn separates(&self) -> bool {
        self.vanilla_order()[0] == 1 && self.weighted_order()[0] == 0 && self.high_sigma_columns() <= 3
    }
}

fn candidate(rng: &mut impl Rng, sigma_floor: f64) -> Result<RankingDemo> {
    let n = rng.gen_range(10..=16);
    let k = rng.gen_range(1..=3);
    let mut planted = sample(rng, n, k).into_vec();
    planted.sort_unstable();
    let mut a = Vec::with_capacity(n);
    let mut b = Vec::with_capacity(n);
    for j in 0..n {
        if planted.contains(&j) {
            a.push(rng.gen_range(-0.5..-0.05));
            b.push(rng.gen_range(-3.0..-1.2));
        } else {
            let base: f64 = rng.gen_range(-1.2..-0.4);
            a.push(base);
            b.push(base + rng.gen_range(0.15..0.35));
        }
    }
    let matrix = CertaintyMatrix::from_logp(vec![a, b])?;
    let stats = ReflectionStats::compute(&matrix, sigma_floor, 0.1)?;
    let vanilla = vanilla_reward(&matrix)?.r;
    let weighted = weighted_reward(&matrix, &stats)?.r;
    Ok(RankingDemo {
        matrix,
        planted,
        vanilla,
        weighted,
        stats,
    })
}

/// Draw candidates from the seeded stream until one separates.
pub fn find_instance(seed: u64, sigma_floor: f64) -> Result<RankingDemo> {
    let mut rng = rng::stream(seed, "demo", &[]);
    for _ in 0..MAX_TRIES {
        let demo = candidate(&mut rng, sigma_floor)?;
        if demo.separates() {
            return Ok(demo);
        }
    }
    Err(DroError::OutOfRange(format!(
        "no separating instance in {MAX_TRIES} draws for seed {seed}"
    )))
}

/// Side-by-side text rendering of the two orderings.
pub fn render(demo: &RankingDemo) -> String {
    let name = |i: usize| if i == 0 { "A" } else { "B" };
    let fmt = |order: &[usize], r: &[f64]| {
        order
            .iter()
            .map(|&i| format!("{} ({:.3})", name(i), r[i]))
            .collect::<Vec<_>>()
            .join(" > ")
    };
    let mut out = String::new();
    out.push_str(&format!(
        "reference tokens: {}, planted columns: {:?}\n",
        demo.matrix.reference_len(),
        demo.planted
    ));
    for (label, row) in ["A", "B"].iter().zip(demo.matrix.rows()) {
        let cells: Vec<String> = row.logp.iter().map(|l| format!("{l:6.2}")).collect();
        out.push_str(&format!("{label} logp  {}\n", cells.join(" ")));
    }
    let sig: Vec<String> = demo.stats.sigma.iter().map(|s| format!("{s:6.2}")).collect();
    out.push_str(&format!("sigma   {}\n", sig.join(" ")));
    out.push_str(&format!("vanilla : {}\n", fmt(&demo.vanilla_order(), &demo.vanilla)));
    out.push_str(&format!("weighted: {}\n", fmt(&demo.weighted_order(), &demo.weighted)));
    out
}
