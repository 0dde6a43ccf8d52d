//! Round orchestration: client sampling, local training, aggregation.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{train_local_malicious, AttackConfig, INITIAL_AUTO_RADIUS};
use crate::data::Dataset;
use crate::defense::Defense;
use crate::error::{invalid, Error, Result};
use crate::metrics::{detection_rates, evaluate, RoundReport};
use crate::nn::ModelParams;
use crate::training::{train_local, TrainSettings};

/// One participant's trained model for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ModelParams,
    pub num_samples: usize,
    /// Ground truth for scoring only. Defenses receive [`Submission`]s, which
    /// do not carry it.
    pub is_malicious_truth: bool,
}

impl ClientUpdate {
    pub fn submission(&self) -> Submission<'_> {
        Submission {
            client_id: self.client_id,
            params: &self.params,
            num_samples: self.num_samples,
        }
    }
}

/// What an aggregator is allowed to see of a client update.
#[derive(Debug, Clone, Copy)]
pub struct Submission<'a> {
    pub client_id: usize,
    pub params: &'a ModelParams,
    pub num_samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttackerData {
    /// Compromised clients' clean shares are merged and re-dealt evenly.
    #[default]
    Pooled,
    /// Compromised clients keep the shares the partitioner gave them.
    Partition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub compromise_ratio: f64,
    pub rounds: usize,
    pub benign: TrainSettings,
    #[serde(default)]
    pub attacker_data: AttackerData,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 || self.clients_per_round == 0 {
            return Err(Error::Config("client counts must be positive".into()));
        }
        if self.clients_per_round > self.num_clients {
            return Err(Error::Config(format!(
                "clients_per_round {} exceeds num_clients {}",
                self.clients_per_round, self.num_clients
            )));
        }
        if !(0.0..1.0).contains(&self.compromise_ratio) {
            return Err(Error::Config(format!(
                "compromise_ratio must lie in [0, 1), got {}",
                self.compromise_ratio
            )));
        }
        self.benign.validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn num_malicious(&self) -> usize {
        (self.compromise_ratio * self.num_clients as f64 + 1e-9).floor() as usize
    }
}

/// Mixes `(seed, a, b)` into an independent 64-bit seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform K-of-N selection without replacement, sorted, deterministic in `(seed, round)`.
pub fn sample_clients(n: usize, k: usize, round: usize, seed: u64) -> Result<Vec<usize>> {
    if k > n {
        return invalid(format!("cannot sample {k} of {n} clients"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    let mut ids = rand::seq::index::sample(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// The fixed compromised pool: first ⌊ratio·N⌋ ids of a seeded shuffle.
pub fn malicious_set(n: usize, ratio: f64, seed: u64) -> BTreeSet<usize> {
    let count = (ratio * n as f64 + 1e-9).floor() as usize;
    let mut ids: Vec<usize> = (0..n).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x6d61_6c69, 0)));
    ids.into_iter().take(count).collect()
}

/// Sample-count weighted mean of the submitted models, summed in slice order.
/// An empty slice keeps `global`.
pub fn fedavg_aggregate(subs: &[Submission<'_>], global: &ModelParams) -> Result<ModelParams> {
    if subs.is_empty() {
        log::warn!("no updates to aggregate; keeping the previous global model");
        return Ok(global.clone());
    }
    let total: usize = subs.iter().map(|s| s.num_samples).sum();
    if total == 0 {
        return invalid("updates report zero samples in total");
    }
    let mut out = global.zeros_like();
    for s in subs {
        global.ensure_congruent(s.params)?;
        out.add_scaled(s.num_samples as f64 / total as f64, s.params);
    }
    Ok(out)
}

/// Held-out data used to score every round.
#[derive(Debug, Clone)]
pub struct EvalSets {
    pub clean_test: Dataset,
    /// Transformed inputs keeping their original labels.
    pub backdoor_test: Dataset,
    pub target_label: usize,
}

/// Everything that survives between rounds and is needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationState {
    pub global: ModelParams,
    pub next_round: usize,
    pub last_benign_norm: f64,
    pub defense: crate::defense::DefenseSnapshot,
}

pub struct Simulation {
    cfg: FederationConfig,
    seed: u64,
    clients: Vec<Dataset>,
    malicious: BTreeSet<usize>,
    attack: Option<AttackConfig>,
    defense: Defense,
    eval: EvalSets,
    global: ModelParams,
    next_round: usize,
    last_benign_norm: f64,
}

impl Simulation {
    /// `clients[i]` is client i's training set; compromised clients' sets are
    /// expected to be poisoned already.
    pub fn new(
        cfg: FederationConfig,
        seed: u64,
        clients: Vec<Dataset>,
        malicious: BTreeSet<usize>,
        attack: Option<AttackConfig>,
        defense: Defense,
        eval: EvalSets,
        initial: ModelParams,
    ) -> Result<Self> {
        cfg.validate()?;
        if clients.len() != cfg.num_clients {
            return invalid(format!("{} client datasets for {} clients", clients.len(), cfg.num_clients));
        }
        if let Some(empty) = clients.iter().position(Dataset::is_empty) {
            return invalid(format!("client {empty} has no data"));
        }
        if malicious.iter().any(|&m| m >= cfg.num_clients) {
            return invalid("malicious id out of range");
        }
        if !malicious.is_empty() && attack.is_none() {
            return Err(Error::Config("compromised clients need an attack config".into()));
        }
        if let Some(a) = &attack {
            a.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(Self {
            cfg,
            seed,
            clients,
            malicious,
            attack,
            defense,
            eval,
            global: initial,
            next_round: 1,
            last_benign_norm: INITIAL_AUTO_RADIUS,
        })
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn malicious(&self) -> &BTreeSet<usize> {
        &self.malicious
    }

    pub fn defense(&self) -> &Defense {
        &self.defense
    }

    pub fn is_finished(&self) -> bool {
        self.next_round > self.cfg.rounds
    }

    pub fn snapshot(&self) -> SimulationState {
        SimulationState {
            global: self.global.clone(),
            next_round: self.next_round,
            last_benign_norm: self.last_benign_norm,
            defense: self.defense.snapshot(),
        }
    }

    pub fn restore(&mut self, state: SimulationState) -> Result<()> {
        self.global.ensure_congruent(&state.global)?;
        self.global = state.global;
        self.next_round = state.next_round;
        self.last_benign_norm = state.last_benign_norm;
        self.defense.restore(state.defense)
    }

    /// Local training for every sampled client, sorted by client id.
    fn train_participants(&self, round: usize, participants: &[usize]) -> Result<Vec<ClientUpdate>> {
        let mut updates: Vec<ClientUpdate> = participants
            .par_iter()
            .map(|&id| {
                let seed = derive_seed(self.seed, round as u64, id as u64);
                let data = &self.clients[id];
                if self.malicious.contains(&id) {
                    let attack = self.attack.as_ref().expect("checked in new");
                    train_local_malicious(id, &self.global, data, attack, self.last_benign_norm, seed)
                } else {
                    let mut params = self.global.clone();
                    train_local(&mut params, data, &self.cfg.benign, seed, |_, _| {})?;
                    Ok(ClientUpdate {
                        client_id: id,
                        params,
                        num_samples: data.len(),
                        is_malicious_truth: false,
                    })
                }
            })
            .collect::<Result<_>>()?;
        updates.sort_by_key(|u| u.client_id);
        Ok(updates)
    }

    /// Runs the next round and returns its report.
    pub fn run_round(&mut self) -> Result<RoundReport> {
        let round = self.next_round;
        self.step(round).map_err(|e| Error::Round { round, source: Box::new(e) })
    }

    fn step(&mut self, round: usize) -> Result<RoundReport> {
        let participants = sample_clients(self.cfg.num_clients, self.cfg.clients_per_round, round, self.seed)?;

        let t0 = Instant::now();
        let updates = self.train_participants(round, &participants)?;
        let train_ms = t0.elapsed().as_secs_f64() * 1e3;

        let subs: Vec<Submission<'_>> = updates.iter().map(ClientUpdate::submission).collect();
        let t1 = Instant::now();
        let outcome = self.defense.aggregate(&subs, &self.global, round, self.cfg.benign.lr)?;
        let defense_ms = t1.elapsed().as_secs_f64() * 1e3;

        let benign_norms: Vec<f64> = updates
            .iter()
            .filter(|u| !u.is_malicious_truth)
            .map(|u| u.params.distance(&self.global))
            .collect();
        if !benign_norms.is_empty() {
            self.last_benign_norm = benign_norms.iter().sum::<f64>() / benign_norms.len() as f64;
        }
        if !outcome.model.is_finite() {
            return invalid("aggregated model is not finite");
        }
        self.global = outcome.model;
        self.next_round += 1;

        let malicious_ids: Vec<usize> =
            updates.iter().filter(|u| u.is_malicious_truth).map(|u| u.client_id).collect();
        let (tpr, fpr) = detection_rates(&outcome.flagged, &participants, &malicious_ids)?;
        let (ma, ba) = evaluate(&self.global, &self.eval.clean_test, &self.eval.backdoor_test, self.eval.target_label)?;
        let stages = outcome.stages.map(|s| s.score(&participants, &malicious_ids)).transpose()?;
        Ok(RoundReport {
            round,
            ma,
            ba,
            tpr,
            fpr,
            flagged: outcome.flagged,
            participants,
            malicious_participants: malicious_ids,
            train_ms,
            defense_ms,
            stages,
        })
    }
}
