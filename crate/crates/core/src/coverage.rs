//! How many sampling rounds until every pair of clients has met.
//!
//! `theorem1_bound` evaluates the closed-form expression
//! `1 + Σ_{i=K}^{n−1} C(n,K) / (C(n,K) − C(i,K))`, and the Monte-Carlo
//! estimator simulates uniform K-of-n rounds under two coverage notions:
//! every unordered pair co-sampled at least once (`Direct`), or the
//! co-participation graph connected over all clients (`Transitive`).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// `ln(C(i,K) / C(n,K))` for `K ≤ i ≤ n`, as a sum of `ln(1 − (n−i)/(n−j))`.
fn log_binomial_ratio(i: usize, n: usize, k: usize) -> f64 {
    (0..k).map(|j| (-((n - i) as f64) / (n - j) as f64).ln_1p()).sum()
}

pub fn theorem1_bound(n: usize, k: usize) -> Result<f64> {
    if k == 0 || k > n {
        return invalid(format!("need 1 <= K <= n, got n={n}, K={k}"));
    }
    let tail: f64 = (k..n).map(|i| -1.0 / log_binomial_ratio(i, n, k).exp_m1()).sum();
    Ok(1.0 + tail)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoverageMode {
    /// Every unordered pair has been sampled together at least once.
    #[default]
    Direct,
    /// Every client has been sampled and the co-participation graph is connected.
    Transitive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub trials: usize,
}

struct DisjointSets {
    parent: Vec<usize>,
    components: usize,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect(), components: n }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
            self.components -= 1;
        }
    }
}

/// Rounds until coverage for one simulated run.
pub fn rounds_to_coverage(n: usize, k: usize, mode: CoverageMode, seed: u64) -> Result<usize> {
    if k > n {
        return invalid(format!("cannot sample {k} of {n}"));
    }
    if n < 2 {
        return Ok(1);
    }
    if k < 2 {
        return invalid("with fewer than 2 clients per round no pair ever meets");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rounds = 0;
    match mode {
        CoverageMode::Direct => {
            let mut met = vec![false; n * n];
            let mut missing = n * (n - 1) / 2;
            while missing > 0 {
                rounds += 1;
                let mut s = rand::seq::index::sample(&mut rng, n, k).into_vec();
                s.sort_unstable();
                for (a, &i) in s.iter().enumerate() {
                    for &j in &s[a + 1..] {
                        if !met[i * n + j] {
                            met[i * n + j] = true;
                            missing -= 1;
                        }
                    }
                }
            }
        }
        CoverageMode::Transitive => {
            let mut sets = DisjointSets::new(n);
            let mut seen = vec![false; n];
            let mut unseen = n;
            while unseen > 0 || sets.components > 1 {
                rounds += 1;
                let s = rand::seq::index::sample(&mut rng, n, k).into_vec();
                for &i in &s {
                    if !seen[i] {
                        seen[i] = true;
                        unseen -= 1;
                    }
                    sets.union(s[0], i);
                }
            }
        }
    }
    Ok(rounds)
}

/// Mean and standard error of rounds-to-coverage over `trials` runs; run `t`
/// uses seed `seed + t`.
pub fn montecarlo_pair_coverage(n: usize, k: usize, trials: usize, seed: u64, mode: CoverageMode) -> Result<McEstimate> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    let rounds: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| rounds_to_coverage(n, k, mode, seed.wrapping_add(t as u64)))
        .collect::<Result<_>>()?;
    let mean = rounds.iter().sum::<usize>() as f64 / trials as f64;
    let stderr = if trials > 1 {
        let var = rounds.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        (var / trials as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr, trials })
}
