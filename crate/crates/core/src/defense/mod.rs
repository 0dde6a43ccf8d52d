//! Server-side aggregation rules, selected by name from configuration.

pub mod baselines;
pub mod fedgrad;
pub mod kmeans;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::federation::{fedavg_aggregate, Submission};
use crate::nn::ModelParams;
use crate::tensor::squared_distance;

pub use baselines::BaselineConfig;
pub use fedgrad::{DefenseState, FedGradConfig, FilterMode, FilterStages, ScoreOrientation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    Fedgrad,
    Krum,
    MultiKrum,
    Median,
    TrimmedMean,
    Rfa,
    Rlr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseConfig {
    pub aggregator: AggregatorKind,
    #[serde(default)]
    pub fedgrad: FedGradConfig,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

impl DefenseConfig {
    pub fn new(aggregator: AggregatorKind) -> Self {
        Self {
            aggregator,
            fedgrad: FedGradConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.fedgrad.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.baseline.validate()
    }
}

/// For every point, the sum of squared distances to its `neighbors` nearest
/// other points. Shared by Krum and the closeness score.
pub(crate) fn neighbor_scores(points: &[Vec<f64>], neighbors: usize) -> Result<Vec<f64>> {
    let n = points.len();
    if neighbors == 0 || neighbors >= n {
        return invalid(format!("need 1..{} neighbours, got {neighbors}", n.saturating_sub(1)));
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = squared_distance(&points[i], &points[j]);
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| dist[i][j]).collect();
            row.sort_by(f64::total_cmp);
            row[..neighbors].iter().sum()
        })
        .collect())
}

/// Result of one aggregation step.
#[derive(Debug, Clone)]
pub struct AggregateOutcome {
    pub model: ModelParams,
    /// Clients excluded from (or not selected for) the aggregate.
    pub flagged: Vec<usize>,
    /// Per-stage sets, FedGrad only.
    pub stages: Option<FilterStages>,
}

/// Serializable defense memory for checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct DefenseSnapshot {
    pub fedgrad: Option<DefenseState>,
}

/// A configured aggregator plus whatever it remembers across rounds.
#[derive(Debug, Clone)]
pub struct Defense {
    cfg: DefenseConfig,
    compromise_ratio: f64,
    state: DefenseState,
}

impl Defense {
    /// `compromise_ratio` feeds the default Krum / Multi-Krum / RLR thresholds.
    pub fn new(cfg: DefenseConfig, compromise_ratio: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            compromise_ratio,
            state: DefenseState::default(),
        })
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DefenseState {
        &self.state
    }

    pub fn snapshot(&self) -> DefenseSnapshot {
        DefenseSnapshot {
            fedgrad: (self.cfg.aggregator == AggregatorKind::Fedgrad).then(|| self.state.clone()),
        }
    }

    pub fn restore(&mut self, snap: DefenseSnapshot) -> Result<()> {
        match (self.cfg.aggregator, snap.fedgrad) {
            (AggregatorKind::Fedgrad, Some(s)) => {
                self.state = s;
                Ok(())
            }
            (AggregatorKind::Fedgrad, None) => Err(Error::Config("checkpoint lacks FedGrad state".into())),
            _ => Ok(()),
        }
    }

    /// Aggregates submissions that are sorted by client id. `round` is 1-based
    /// and `lr` is the benign learning rate.
    pub fn aggregate(&mut self, subs: &[Submission<'_>], global: &ModelParams, round: usize, lr: f64) -> Result<AggregateOutcome> {
        if subs.windows(2).any(|w| w[0].client_id >= w[1].client_id) {
            return invalid("submissions must be sorted by client id without repeats");
        }
        if subs.is_empty() {
            return Ok(AggregateOutcome { model: fedavg_aggregate(subs, global)?, flagged: vec![], stages: None });
        }
        let k = subs.len();
        let ratio = self.compromise_ratio;
        let b = &self.cfg.baseline;
        let flat = || -> Vec<Vec<f64>> { subs.iter().map(|s| s.params.flatten()).collect() };
        let weights: Vec<f64> = subs.iter().map(|s| s.num_samples as f64).collect();
        let ids: Vec<usize> = subs.iter().map(|s| s.client_id).collect();
        let rebuild = |v: &[f64]| global.unflatten(v);

        let (model, flagged, stages) = match self.cfg.aggregator {
            AggregatorKind::Fedavg => (fedavg_aggregate(subs, global)?, vec![], None),
            AggregatorKind::Fedgrad => {
                let out = fedgrad::fedgrad_aggregate(subs, global, &mut self.state, &self.cfg.fedgrad, round, lr)?;
                (out.model, out.flagged, Some(out.stages))
            }
            AggregatorKind::Krum | AggregatorKind::MultiKrum => {
                let m = if self.cfg.aggregator == AggregatorKind::Krum { 1 } else { b.multikrum_size(k, ratio) };
                let (agg, chosen) = baselines::multi_krum(&flat(), &weights, b.byzantine(k, ratio), m)?;
                let flagged = (0..k).filter(|i| !chosen.contains(i)).map(|i| ids[i]).collect();
                (rebuild(&agg)?, flagged, None)
            }
            AggregatorKind::Median => (rebuild(&baselines::coordinate_median(&flat())?)?, vec![], None),
            AggregatorKind::TrimmedMean => (rebuild(&baselines::trimmed_mean(&flat(), b.trim_alpha)?)?, vec![], None),
            AggregatorKind::Rfa => {
                let gm = baselines::rfa_geometric_median(&flat(), &weights, b.weiszfeld_iters, b.weiszfeld_tol)?;
                (rebuild(&gm.point)?, vec![], None)
            }
            AggregatorKind::Rlr => {
                let g = global.flatten();
                let deltas: Vec<Vec<f64>> = subs.iter().map(|s| s.params.delta_from(global).flatten()).collect();
                let out = baselines::rlr_aggregate(&g, &deltas, &weights, b.rlr_theta(k, ratio), b.rlr_server_lr)?;
                (rebuild(&out)?, vec![], None)
            }
        };
        Ok(AggregateOutcome { model, flagged, stages })
    }
}
