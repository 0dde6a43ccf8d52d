//! Two-layer filtering on the last dense layer's implied gradient.
//!
//! Each round the server recovers a gradient proxy from every client's final
//! layer, scores how strongly each client pulls along the round's average
//! gradient (soft filter), and, once enough history exists, clusters clients
//! by the cumulative cosine similarity of their per-class gradient sums (hard
//! filter). A running trust score rescues clients that are rarely accused.
//! The aggregate is the sample-weighted mean of the clients left unflagged.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans2;
use super::neighbor_scores;
use crate::error::{invalid, Result};
use crate::federation::{fedavg_aggregate, Submission};
use crate::nn::{cosine, ModelParams};
use crate::tensor::{dot, l2_norm, Matrix};

/// Which flagged set is excluded from aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Soft ∪ hard, minus clients rescued by trust.
    #[default]
    Full,
    SoftOnly,
    HardOnly,
    /// Soft ∪ hard without the trust rescue.
    Union,
}

/// Sign applied to the compromising cosine before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreOrientation {
    /// `cos(W_i − W_*, ∇_*)` as is.
    Written,
    /// The negated cosine, which ranks a group dominating `∇_*` highest.
    #[default]
    Negated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FedGradConfig {
    pub zeta: f64,
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub hard_filter_start_round: usize,
    pub mode: FilterMode,
    pub orientation: ScoreOrientation,
}

impl Default for FedGradConfig {
    fn default() -> Self {
        Self {
            zeta: 0.5,
            gamma: 0.75,
            lambda1: 0.25,
            lambda2: 1.0,
            hard_filter_start_round: 20,
            mode: FilterMode::Full,
            orientation: ScoreOrientation::Negated,
        }
    }
}

impl FedGradConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.lambda1 && self.lambda1 < self.gamma && self.gamma < self.lambda2) {
            return invalid(format!(
                "need 0 < lambda1 < gamma < lambda2, got {} / {} / {}",
                self.lambda1, self.gamma, self.lambda2
            ));
        }
        if !(self.zeta > 0.0 && self.zeta < 1.0) {
            return invalid(format!("zeta must lie in (0, 1), got {}", self.zeta));
        }
        Ok(())
    }
}

/// `(W_local − W_global) / (−lr)` for the last dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct UltimateGradient {
    pub client_id: usize,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

pub fn ultimate_gradient(client_id: usize, local: &ModelParams, global: &ModelParams, lr: f64) -> Result<UltimateGradient> {
    if !(lr > 0.0) {
        return invalid(format!("lr must be > 0, got {lr}"));
    }
    global.ensure_congruent(local)?;
    let scale = -1.0 / lr;
    let (wl, wg) = (local.ultimate_weight(), global.ultimate_weight());
    let dw: Vec<f64> = wl.as_slice().iter().zip(wg.as_slice()).map(|(a, b)| (a - b) * scale).collect();
    let db = local
        .ultimate_bias()
        .iter()
        .zip(global.ultimate_bias())
        .map(|(a, b)| (a - b) * scale)
        .collect();
    Ok(UltimateGradient {
        client_id,
        dw: Matrix::from_vec(wl.rows(), wl.cols(), dw)?,
        db,
    })
}

/// Per-class reduction of an ultimate gradient: row sums of `dw`, plus `db`.
#[derive(Debug, Clone, PartialEq)]
pub struct ByClassSum {
    pub client_id: usize,
    pub weight_sum: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn by_class_sum(g: &UltimateGradient) -> ByClassSum {
    ByClassSum {
        client_id: g.client_id,
        weight_sum: g.dw.row_sums(),
        bias: g.db.clone(),
    }
}

/// A running mean and the number of values folded into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct RunningMean {
    pub value: f64,
    pub count: usize,
}

impl RunningMean {
    /// `value ← ((m−1)/m)·value + x/m`, written as an increment so a constant
    /// stream reproduces its value exactly.
    pub fn fold(&mut self, x: f64) {
        self.count += 1;
        self.value += (x - self.value) / self.count as f64;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PairSimilarity {
    pub weight: RunningMean,
    pub bias: RunningMean,
}

/// Cross-round memory of the defense.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DefenseState {
    pub compromising: BTreeMap<usize, RunningMean>,
    /// `pairwise[i][j]` with `i < j`.
    pub pairwise: BTreeMap<usize, BTreeMap<usize, PairSimilarity>>,
    pub trust: BTreeMap<usize, RunningMean>,
    pub round_counter: usize,
}

impl DefenseState {
    pub fn pair(&self, i: usize, j: usize) -> Option<&PairSimilarity> {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairwise.get(&a).and_then(|m| m.get(&b))
    }

    fn pair_mut(&mut self, i: usize, j: usize) -> &mut PairSimilarity {
        let (a, b) = if i < j { (i, j) } else { (j, i) };
        self.pairwise.entry(a).or_default().entry(b).or_default()
    }

    pub fn trust_of(&self, client: usize) -> Option<f64> {
        self.trust.get(&client).map(|t| t.value)
    }

    pub fn compromising_of(&self, client: usize) -> Option<f64> {
        self.compromising.get(&client).map(|t| t.value)
    }
}

/// Min-max scaling to [0, 1]; a constant input maps to all zeros.
pub fn min_max_scale(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// `cos(W_i − W_*, ∇_*)` with `W_*` and `∇_*` the sample-weighted means of the
/// clients' ultimate weights and ultimate gradients, Frobenius inner product.
pub fn written_compromising_scores(subs: &[Submission<'_>], global: &ModelParams, lr: f64) -> Result<Vec<f64>> {
    if subs.len() < 2 {
        return invalid(format!("compromising scores need at least 2 updates, got {}", subs.len()));
    }
    let total: usize = subs.iter().map(|s| s.num_samples).sum();
    let grads: Vec<UltimateGradient> = subs
        .iter()
        .map(|s| ultimate_gradient(s.client_id, s.params, global, lr))
        .collect::<Result<_>>()?;
    let len = global.ultimate_weight().as_slice().len();
    let mut w_star = vec![0.0; len];
    let mut g_star = vec![0.0; len];
    for (s, g) in subs.iter().zip(&grads) {
        let a = s.num_samples as f64 / total as f64;
        crate::tensor::axpy(a, s.params.ultimate_weight().as_slice(), &mut w_star);
        crate::tensor::axpy(a, g.dw.as_slice(), &mut g_star);
    }
    let g_norm = l2_norm(&g_star);
    Ok(subs
        .iter()
        .map(|s| {
            let dev: Vec<f64> = s.params.ultimate_weight().as_slice().iter().zip(&w_star).map(|(a, b)| a - b).collect();
            let n = l2_norm(&dev) * g_norm;
            if n < 1e-12 {
                0.0
            } else {
                dot(&dev, &g_star) / n
            }
        })
        .collect())
}

/// Raw per-round scores under the chosen orientation.
///
/// Because `W_i − W_* = −lr·(∇_i − ∇_*)`, the written cosine is large for a
/// client that moves less than the round average along the average update.
/// A small attacker minority training on a shifted distribution does exactly
/// that, while a group large enough to dominate `∇_*` lands at the bottom.
pub fn raw_compromising_scores(
    subs: &[Submission<'_>],
    global: &ModelParams,
    lr: f64,
    orientation: ScoreOrientation,
) -> Result<Vec<f64>> {
    let written = written_compromising_scores(subs, global, lr)?;
    Ok(match orientation {
        ScoreOrientation::Written => written,
        ScoreOrientation::Negated => written.into_iter().map(|v| -v).collect(),
    })
}

/// Scales this round's raw scores and folds them into the cumulative state.
/// Returns the scaled instant scores in `subs` order.
pub fn compromising_scores(
    subs: &[Submission<'_>],
    global: &ModelParams,
    lr: f64,
    orientation: ScoreOrientation,
    state: &mut DefenseState,
) -> Result<Vec<f64>> {
    let scaled = min_max_scale(&raw_compromising_scores(subs, global, lr, orientation)?);
    for (s, &x) in subs.iter().zip(&scaled) {
        state.compromising.entry(s.client_id).or_default().fold(x);
    }
    Ok(scaled)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Flags every `(client, cumulative score)` above `min(zeta, median)`.
pub fn soft_filter(scores: &[(usize, f64)], zeta: f64) -> BTreeSet<usize> {
    if scores.is_empty() {
        return BTreeSet::new();
    }
    let values: Vec<f64> = scores.iter().map(|&(_, s)| s).collect();
    let threshold = zeta.min(median(&values));
    scores.iter().filter(|&&(_, s)| s > threshold).map(|&(id, _)| id).collect()
}

/// Folds this round's pairwise cosines of the per-class sums into the state.
pub fn update_pairwise_similarity(byclass: &[ByClassSum], state: &mut DefenseState) -> Result<()> {
    for (a, x) in byclass.iter().enumerate() {
        for y in &byclass[a + 1..] {
            if x.client_id == y.client_id {
                return invalid(format!("client {} appears twice", x.client_id));
            }
            let w = cosine(&x.weight_sum, &y.weight_sum)?;
            let b = cosine(&x.bias, &y.bias)?;
            let pair = state.pair_mut(x.client_id, y.client_id);
            pair.weight.fold(w);
            pair.bias.fold(b);
        }
    }
    Ok(())
}

/// `f_i = (w_i1..w_iK ; b_i1..b_iK)` over `participants` in ascending id
/// order, with 1 on the diagonal. Returned in the same order.
pub fn build_feature_vectors(participants: &[usize], state: &DefenseState) -> Result<Vec<Vec<f64>>> {
    let mut ids = participants.to_vec();
    ids.sort_unstable();
    ids.iter()
        .map(|&i| {
            let mut f = vec![0.0; 2 * ids.len()];
            for (k, &j) in ids.iter().enumerate() {
                if i == j {
                    f[k] = 1.0;
                    f[ids.len() + k] = 1.0;
                } else {
                    let p = state
                        .pair(i, j)
                        .ok_or_else(|| crate::error::Error::InvalidInput(format!("no similarity history for ({i}, {j})")))?;
                    f[k] = p.weight.value;
                    f[ids.len() + k] = p.bias.value;
                }
            }
            Ok(f)
        })
        .collect()
}

/// Sum of squared distances (full flattened parameters) from each client to
/// its `neighbors` nearest fellow participants, in `subs` order.
pub fn closeness_scores(subs: &[Submission<'_>], neighbors: usize) -> Result<Vec<f64>> {
    let flat: Vec<Vec<f64>> = subs.iter().map(|s| s.params.flatten()).collect();
    neighbor_scores(&flat, neighbors)
}

/// Number of neighbours used by the closeness score for `k` participants
/// and `f` estimated attackers: `k − f − 2`, kept inside `[1, k − 1]`.
pub fn closeness_neighbors(k: usize, f: usize) -> usize {
    (k as isize - f as isize - 2).clamp(1, (k as isize - 1).max(1)) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardFilterOutcome {
    pub flagged: BTreeSet<usize>,
    pub estimated_attackers: usize,
    pub anchor: usize,
    pub degenerate: bool,
}

/// Clusters participants by their similarity features and flags the cluster
/// that does not contain the client with the smallest closeness score.
pub fn hard_filter(subs: &[Submission<'_>], state: &DefenseState) -> Result<HardFilterOutcome> {
    let ids: Vec<usize> = subs.iter().map(|s| s.client_id).collect();
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("submissions must be sorted by client id without repeats");
    }
    let k = subs.len();
    if k < 2 {
        return invalid("hard filter needs at least 2 participants");
    }
    let features = build_feature_vectors(&ids, state)?;
    let clusters = kmeans2(&features)?;
    if clusters.degenerate {
        log::warn!("hard filter: all similarity features coincide; flagging nobody");
        return Ok(HardFilterOutcome {
            flagged: BTreeSet::new(),
            estimated_attackers: 0,
            anchor: ids[0],
            degenerate: true,
        });
    }
    let sizes = [clusters.members(0).len(), clusters.members(1).len()];
    let f = sizes[0].min(sizes[1]).min(k.saturating_sub(3));
    let scores = closeness_scores(subs, closeness_neighbors(k, f))?;
    let anchor_pos = (0..k)
        .min_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)))
        .expect("k >= 2");
    let benign_cluster = clusters.labels[anchor_pos];
    log::debug!(
        "hard filter: clusters {:?} / {:?}, anchor {}",
        clusters.members(0).iter().map(|&i| ids[i]).collect::<Vec<_>>(),
        clusters.members(1).iter().map(|&i| ids[i]).collect::<Vec<_>>(),
        ids[anchor_pos]
    );
    let flagged = (0..k).filter(|&i| clusters.labels[i] != benign_cluster).map(|i| ids[i]).collect();
    Ok(HardFilterOutcome {
        flagged,
        estimated_attackers: f,
        anchor: ids[anchor_pos],
        degenerate: false,
    })
}

/// Records λ1 for flagged participants and λ2 for the rest.
pub fn update_trust(participants: &[usize], flagged: &BTreeSet<usize>, state: &mut DefenseState, lambda1: f64, lambda2: f64) {
    for &id in participants {
        let instant = if flagged.contains(&id) { lambda1 } else { lambda2 };
        state.trust.entry(id).or_default().fold(instant);
    }
}

/// Flagged sets at each stage of one round, kept for ablation reporting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterStages {
    pub soft: Vec<usize>,
    /// `None` before the hard filter is active.
    pub hard: Option<Vec<usize>>,
    pub union: Vec<usize>,
    /// After trust rescue.
    pub after_trust: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct FedGradOutcome {
    pub model: ModelParams,
    pub flagged: Vec<usize>,
    pub stages: FilterStages,
}

/// One round of filtering and aggregation. `round` is 1-based; the hard
/// filter runs once `round >= hard_filter_start_round`. Submissions must be
/// sorted by client id.
pub fn fedgrad_aggregate(
    subs: &[Submission<'_>],
    global: &ModelParams,
    state: &mut DefenseState,
    cfg: &FedGradConfig,
    round: usize,
    lr: f64,
) -> Result<FedGradOutcome> {
    cfg.validate()?;
    state.round_counter += 1;
    let ids: Vec<usize> = subs.iter().map(|s| s.client_id).collect();
    if ids.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("submissions must be sorted by client id without repeats");
    }
    if subs.len() < 2 {
        update_trust(&ids, &BTreeSet::new(), state, cfg.lambda1, cfg.lambda2);
        return Ok(FedGradOutcome {
            model: fedavg_aggregate(subs, global)?,
            flagged: Vec::new(),
            stages: FilterStages::default(),
        });
    }

    let instant = compromising_scores(subs, global, lr, cfg.orientation, state)?;
    log::debug!("round {round}: instant compromising scores {:?}", ids.iter().zip(&instant).collect::<Vec<_>>());
    let cumulative: Vec<(usize, f64)> = ids.iter().map(|&id| (id, state.compromising[&id].value)).collect();
    let s1 = soft_filter(&cumulative, cfg.zeta);

    let byclass: Vec<ByClassSum> = subs
        .iter()
        .map(|s| ultimate_gradient(s.client_id, s.params, global, lr).map(|g| by_class_sum(&g)))
        .collect::<Result<_>>()?;
    for b in &byclass {
        log::trace!("round {round}: client {} weight_sum {:?} bias {:?}", b.client_id, b.weight_sum, b.bias);
    }
    update_pairwise_similarity(&byclass, state)?;

    let s2 = if round >= cfg.hard_filter_start_round {
        Some(hard_filter(subs, state)?.flagged)
    } else {
        None
    };
    let union: BTreeSet<usize> = s1.union(s2.as_ref().unwrap_or(&BTreeSet::new())).copied().collect();
    update_trust(&ids, &union, state, cfg.lambda1, cfg.lambda2);
    let after_trust: BTreeSet<usize> = union
        .iter()
        .copied()
        .filter(|id| state.trust[id].value <= cfg.gamma)
        .collect();

    let excluded = match cfg.mode {
        FilterMode::Full => after_trust.clone(),
        FilterMode::SoftOnly => s1.clone(),
        FilterMode::HardOnly => s2.clone().unwrap_or_default(),
        FilterMode::Union => union.clone(),
    };
    let kept: Vec<Submission<'_>> = subs.iter().filter(|s| !excluded.contains(&s.client_id)).copied().collect();
    let model = if kept.is_empty() {
        log::warn!("round {round}: every participant flagged; keeping the previous global model");
        global.clone()
    } else {
        fedavg_aggregate(&kept, global)?
    };
    Ok(FedGradOutcome {
        model,
        flagged: excluded.into_iter().collect(),
        stages: FilterStages {
            soft: s1.into_iter().collect(),
            hard: s2.map(|s| s.into_iter().collect()),
            union: union.into_iter().collect(),
            after_trust: after_trust.into_iter().collect(),
        },
    })
}
