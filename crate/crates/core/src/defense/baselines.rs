//! Reference robust aggregators: Krum / Multi-Krum, coordinate-wise median,
//! trimmed mean, smoothed Weiszfeld geometric median (RFA), and robust
//! learning rate (RLR).
//!
//! All functions work on flattened parameter vectors and sum in a fixed
//! order, so results do not depend on thread scheduling.

use serde::{Deserialize, Serialize};

use super::neighbor_scores;
use crate::error::{invalid, Error, Result};
use crate::tensor::squared_distance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    /// Assumed Byzantine count for Krum; `None` means ⌊ε·K⌋.
    pub byzantine_estimate: Option<usize>,
    /// Multi-Krum selection size; `None` means K − ⌊ε·K⌋.
    pub multikrum_m: Option<usize>,
    pub trim_alpha: f64,
    /// RLR sign-agreement threshold; `None` means ⌊K·ε + 1⌋.
    pub rlr_threshold: Option<usize>,
    pub rlr_server_lr: f64,
    pub weiszfeld_iters: usize,
    pub weiszfeld_tol: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            byzantine_estimate: None,
            multikrum_m: None,
            trim_alpha: 0.1,
            rlr_threshold: None,
            rlr_server_lr: 1.0,
            weiszfeld_iters: 100,
            weiszfeld_tol: 1e-6,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.trim_alpha) {
            return Err(Error::Config(format!("trim_alpha must lie in [0, 0.5), got {}", self.trim_alpha)));
        }
        if !(self.rlr_server_lr > 0.0) {
            return Err(Error::Config("rlr_server_lr must be > 0".into()));
        }
        if self.weiszfeld_iters == 0 || !(self.weiszfeld_tol > 0.0) {
            return Err(Error::Config("weiszfeld_iters and weiszfeld_tol must be positive".into()));
        }
        Ok(())
    }

    pub fn byzantine(&self, k: usize, ratio: f64) -> usize {
        self.byzantine_estimate.unwrap_or((ratio * k as f64 + 1e-9).floor() as usize)
    }

    pub fn multikrum_size(&self, k: usize, ratio: f64) -> usize {
        self.multikrum_m.unwrap_or(k - (ratio * k as f64 + 1e-9).floor() as usize)
    }

    pub fn rlr_theta(&self, k: usize, ratio: f64) -> usize {
        self.rlr_threshold.unwrap_or((k as f64 * ratio + 1.0 + 1e-9).floor() as usize)
    }
}

fn check_points(points: &[Vec<f64>]) -> Result<usize> {
    let Some(first) = points.first() else {
        return invalid("no updates to aggregate");
    };
    if points.iter().any(|p| p.len() != first.len()) {
        return invalid("updates have different lengths");
    }
    Ok(first.len())
}

fn weighted_mean(points: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; points[0].len()];
    for (p, &w) in points.iter().zip(weights) {
        crate::tensor::axpy(w / total, p, &mut out);
    }
    out
}

/// Krum scores with `K − f − 2` neighbours, in input order.
pub fn krum_scores(points: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    check_points(points)?;
    let n = points.len();
    if n < f + 3 {
        return Err(Error::Config(format!("Krum needs K - f - 2 >= 1, got K={n}, f={f}")));
    }
    neighbor_scores(points, n - f - 2)
}

/// Indices of the `m` best Krum scores, best first; ties go to the lower index.
pub fn krum_select(points: &[Vec<f64>], f: usize, m: usize) -> Result<Vec<usize>> {
    let scores = krum_scores(points, f)?;
    if m == 0 || m > points.len() {
        return Err(Error::Config(format!("cannot select {m} of {} updates", points.len())));
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    order.truncate(m);
    Ok(order)
}

/// Sample-weighted mean of the `m` Krum-selected points plus their indices.
pub fn multi_krum(points: &[Vec<f64>], weights: &[f64], f: usize, m: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut chosen = krum_select(points, f, m)?;
    chosen.sort_unstable();
    let sel: Vec<Vec<f64>> = chosen.iter().map(|&i| points[i].clone()).collect();
    let w: Vec<f64> = chosen.iter().map(|&i| weights[i]).collect();
    Ok((weighted_mean(&sel, &w), chosen))
}

fn sorted_column(points: &[Vec<f64>], j: usize) -> Vec<f64> {
    let mut col: Vec<f64> = points.iter().map(|p| p[j]).collect();
    col.sort_by(f64::total_cmp);
    col
}

pub fn coordinate_median(points: &[Vec<f64>]) -> Result<Vec<f64>> {
    let d = check_points(points)?;
    let n = points.len();
    Ok((0..d)
        .map(|j| {
            let col = sorted_column(points, j);
            if n % 2 == 1 {
                col[n / 2]
            } else {
                0.5 * (col[n / 2 - 1] + col[n / 2])
            }
        })
        .collect())
}

/// Drops ⌊α·K⌋ values from each end of every coordinate and averages the rest.
pub fn trimmed_mean(points: &[Vec<f64>], alpha: f64) -> Result<Vec<f64>> {
    let d = check_points(points)?;
    let n = points.len();
    if !(0.0..0.5).contains(&alpha) {
        return invalid(format!("alpha must lie in [0, 0.5), got {alpha}"));
    }
    let t = (alpha * n as f64 + 1e-9).floor() as usize;
    if n <= 2 * t {
        return invalid(format!("trimming {t} from each side of {n} values leaves nothing"));
    }
    Ok((0..d)
        .map(|j| {
            let col = sorted_column(points, j);
            col[t..n - t].iter().sum::<f64>() / (n - 2 * t) as f64
        })
        .collect())
}

/// `Σ w_i ‖x − p_i‖`
pub fn weiszfeld_objective(x: &[f64], points: &[Vec<f64>], weights: &[f64]) -> f64 {
    points.iter().zip(weights).map(|(p, w)| w * squared_distance(x, p).sqrt()).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometricMedian {
    pub point: Vec<f64>,
    pub iterations: usize,
    /// Objective after each iteration, starting with the weighted mean.
    pub objective_trace: Vec<f64>,
}

/// Smoothed Weiszfeld iteration from the weighted mean; distances are floored
/// at 1e-8.
pub fn rfa_geometric_median(points: &[Vec<f64>], weights: &[f64], iters: usize, tol: f64) -> Result<GeometricMedian> {
    check_points(points)?;
    if weights.len() != points.len() || weights.iter().any(|&w| !(w > 0.0)) {
        return invalid("need one positive weight per point");
    }
    const FLOOR: f64 = 1e-8;
    let mut z = weighted_mean(points, weights);
    let mut trace = vec![weiszfeld_objective(&z, points, weights)];
    let mut iterations = 0;
    while iterations < iters {
        iterations += 1;
        let beta: Vec<f64> = points
            .iter()
            .zip(weights)
            .map(|(p, w)| w / squared_distance(&z, p).sqrt().max(FLOOR))
            .collect();
        let next = weighted_mean(points, &beta);
        let shift = squared_distance(&next, &z).sqrt();
        z = next;
        trace.push(weiszfeld_objective(&z, points, weights));
        if shift < tol {
            break;
        }
    }
    Ok(GeometricMedian { point: z, iterations, objective_trace: trace })
}

/// Per-coordinate robust learning rate applied to the weighted mean delta.
/// `deltas[i]` is client i's `local − global`.
pub fn rlr_aggregate(
    global: &[f64],
    deltas: &[Vec<f64>],
    weights: &[f64],
    theta: usize,
    server_lr: f64,
) -> Result<Vec<f64>> {
    let d = check_points(deltas)?;
    if global.len() != d {
        return invalid("global and deltas differ in length");
    }
    if theta > deltas.len() {
        return Err(Error::Config(format!("RLR threshold {theta} exceeds K = {}", deltas.len())));
    }
    let mean = weighted_mean(deltas, weights);
    Ok((0..d)
        .map(|j| {
            let agreement: f64 = deltas.iter().map(|p| sign(p[j])).sum::<f64>().abs();
            let lr = if agreement >= theta as f64 { server_lr } else { -server_lr };
            global[j] + lr * mean[j]
        })
        .collect())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalars(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|&x| vec![x]).collect()
    }

    fn random_points(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect()
    }

    /// Direct transcription: sort all distances per point, sum the smallest.
    fn brute_krum(points: &[Vec<f64>], f: usize) -> usize {
        let n = points.len();
        let mut best = (f64::INFINITY, 0);
        for i in 0..n {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| points[i].iter().zip(&points[j]).map(|(a, b)| (a - b) * (a - b)).sum())
                .collect();
            d.sort_by(f64::total_cmp);
            let s: f64 = d[..n - f - 2].iter().sum();
            if s < best.0 {
                best = (s, i);
            }
        }
        best.1
    }

    #[test]
    fn krum_examples() {
        let pts = scalars(&[0.0, 1.0, 2.0, 100.0]);
        assert_eq!(krum_scores(&pts, 1).unwrap(), vec![1.0, 1.0, 1.0, 98.0 * 98.0]);
        assert_eq!(krum_select(&pts, 1, 1).unwrap(), vec![0]);
        assert_eq!(krum_select(&pts, 0, 1).unwrap(), vec![1]);
        assert_eq!(krum_select(&scalars(&[3.0; 5]), 1, 1).unwrap(), vec![0]);
        assert!(krum_scores(&pts, 2).is_err());
    }

    #[test]
    fn krum_matches_brute_force() {
        for seed in 0..40 {
            let pts = random_points(seed, 9, 4);
            let f = (seed % 6) as usize;
            assert_eq!(krum_select(&pts, f, 1).unwrap()[0], brute_krum(&pts, f), "seed {seed}");
        }
    }

    #[test]
    fn full_multi_krum_is_fedavg() {
        let pts = random_points(3, 6, 5);
        let w = [1.0, 2.0, 3.0, 1.0, 1.0, 2.0];
        let (agg, chosen) = multi_krum(&pts, &w, 0, 6).unwrap();
        assert_eq!(chosen, (0..6).collect::<Vec<_>>());
        for (a, b) in agg.iter().zip(weighted_mean(&pts, &w)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn median_and_trim_examples() {
        let pts = scalars(&[1.0, 2.0, 100.0]);
        assert_eq!(coordinate_median(&pts).unwrap(), vec![2.0]);
        assert_eq!(trimmed_mean(&pts, 1.0 / 3.0).unwrap(), vec![2.0]);
        let sym = scalars(&[-3.0, -1.0, 0.5, 2.0, 4.0]);
        assert_eq!(coordinate_median(&sym).unwrap(), vec![0.5]);
        let sym_mean: f64 = sym.iter().map(|p| p[0]).sum::<f64>() / 5.0;
        assert!((coordinate_median(&sym).unwrap()[0] - sym_mean).abs() < 1e-12);
        assert_eq!(coordinate_median(&scalars(&[1.0, 2.0, 4.0, 10.0])).unwrap(), vec![3.0]);
        assert!(trimmed_mean(&pts, 0.5).is_err());
    }

    #[test]
    fn weiszfeld_examples() {
        let same = vec![vec![1.0, -2.0]; 4];
        let gm = rfa_geometric_median(&same, &[1.0; 4], 50, 1e-9).unwrap();
        assert_eq!(gm.point, vec![1.0, -2.0]);
        assert_eq!(gm.iterations, 1);

        let gm = rfa_geometric_median(&scalars(&[0.0, 0.0, 10.0]), &[1.0; 3], 1000, 1e-12).unwrap();
        assert!(gm.point[0].abs() < 1e-3, "{:?}", gm.point);
    }

    proptest! {
        #[test]
        fn weiszfeld_objective_never_increases(seed in 0u64..500) {
            let pts = random_points(seed, 7, 3);
            let w: Vec<f64> = (1..=7).map(|i| i as f64).collect();
            let gm = rfa_geometric_median(&pts, &w, 50, 1e-12).unwrap();
            for pair in gm.objective_trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9);
            }
            let at_mean = weiszfeld_objective(&weighted_mean(&pts, &w), &pts, &w);
            prop_assert!(weiszfeld_objective(&gm.point, &pts, &w) <= at_mean + 1e-9);
        }

        #[test]
        fn aggregators_are_permutation_invariant(seed in 0u64..500, shift in 1usize..7) {
            let pts = random_points(seed, 7, 4);
            let w: Vec<f64> = (1..=7).map(|i| i as f64).collect();
            let perm: Vec<usize> = (0..7).map(|i| (i + shift) % 7).collect();
            let pp: Vec<Vec<f64>> = perm.iter().map(|&i| pts[i].clone()).collect();
            let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            prop_assert_eq!(coordinate_median(&pts).unwrap(), coordinate_median(&pp).unwrap());
            prop_assert_eq!(trimmed_mean(&pts, 0.2).unwrap(), trimmed_mean(&pp, 0.2).unwrap());
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9);
            let (ka, ca) = multi_krum(&pts, &w, 1, 4).unwrap();
            let (kb, cb) = multi_krum(&pp, &pw, 1, 4).unwrap();
            let mut ca: Vec<usize> = ca.to_vec();
            let mut cb: Vec<usize> = cb.iter().map(|&i| perm[i]).collect();
            ca.sort_unstable();
            cb.sort_unstable();
            prop_assert_eq!(ca, cb);
            prop_assert!(close(&ka, &kb));
            let ga = rfa_geometric_median(&pts, &w, 200, 1e-12).unwrap().point;
            let gb = rfa_geometric_median(&pp, &pw, 200, 1e-12).unwrap().point;
            prop_assert!(close(&ga, &gb));
            let g = vec![0.5; 4];
            prop_assert!(close(&rlr_aggregate(&g, &pts, &w, 3, 1.0).unwrap(), &rlr_aggregate(&g, &pp, &pw, 3, 1.0).unwrap()));
        }

        #[test]
        fn krum_is_scale_equivariant(seed in 0u64..500, c in 0.01f64..100.0) {
            let pts = random_points(seed, 8, 3);
            let scaled: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| v * c).collect()).collect();
            prop_assert_eq!(krum_select(&pts, 2, 1).unwrap(), krum_select(&scaled, 2, 1).unwrap());
        }
    }

    #[test]
    fn rlr_examples() {
        let g = vec![1.0, 1.0];
        let deltas = vec![vec![0.5, 1.0], vec![1.5, 2.0]];
        assert_eq!(rlr_aggregate(&g, &deltas, &[1.0, 1.0], 2, 1.0).unwrap(), vec![2.0, 2.5]);
        assert_eq!(rlr_aggregate(&g, &deltas, &[1.0, 1.0], 2, 0.5).unwrap(), vec![1.5, 1.75]);

        // K=5, θ=4, signs 3 vs 2 on the coordinate: agreement 1 < 4, lr flips.
        let d5 = scalars(&[1.0, 1.0, 1.0, -1.0, -1.0]);
        assert!((rlr_aggregate(&[0.0], &d5, &[1.0; 5], 4, 1.0).unwrap()[0] + 0.2).abs() < 1e-12);
        assert!((rlr_aggregate(&[0.0], &d5, &[1.0; 5], 1, 1.0).unwrap()[0] - 0.2).abs() < 1e-12);
        assert!(rlr_aggregate(&[0.0], &d5, &[1.0; 5], 6, 1.0).is_err());
    }

    #[test]
    fn rlr_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let global: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut deltas = random_points(78, 6, 20);
        deltas[2][3] = 0.0;
        let w = [2.0, 1.0, 1.0, 3.0, 1.0, 2.0];
        let got = rlr_aggregate(&global, &deltas, &w, 4, 1.0).unwrap();
        let total: f64 = w.iter().sum();
        for j in 0..20 {
            let mut s = 0i64;
            let mut m = 0.0;
            for i in 0..6 {
                s += if deltas[i][j] > 0.0 { 1 } else if deltas[i][j] < 0.0 { -1 } else { 0 };
                m += w[i] / total * deltas[i][j];
            }
            let lr = if s.unsigned_abs() >= 4 { 1.0 } else { -1.0 };
            assert_eq!(got[j], global[j] + lr * m);
        }
    }

    #[test]
    fn default_thresholds() {
        let c = BaselineConfig::default();
        assert_eq!(c.byzantine(10, 0.25), 2);
        assert_eq!(c.multikrum_size(10, 0.25), 8);
        assert_eq!(c.rlr_theta(10, 0.25), 3);
        assert!(BaselineConfig { trim_alpha: 0.5, ..Default::default() }.validate().is_err());
    }
}
