//! Experiment configuration, setup and the run loop with its output files.
//!
//! A run directory receives:
//! - `rounds.csv`: one row per round (reproducible byte for byte).
//! - `summary.json`: final metrics, round-averaged detection rates, flags.
//! - `series.json`: per-round MA/BA arrays for plotting.
//! - `timings.csv`: wall-clock phase timings (not reproducible).
//! - `partition.json`: client → sample indices.
//! - `checkpoint.json`: resumable state, when checkpointing is enabled.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::data::{
    build_poisoned_dataset, edge_case_pool, load_mnist_dir, partition_noniid, synth_dataset_with_separation, Dataset,
    PartitionPlan, PoisonKind, DEFAULT_SEPARATION,
};
use crate::defense::{Defense, DefenseConfig};
use crate::error::{Error, Result};
use crate::federation::{derive_seed, malicious_set, AttackerData, EvalSets, FederationConfig, Simulation, SimulationState};
use crate::metrics::{mean_defined, rounds_csv, RoundReport};
use crate::nn::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX files (`train-*` / `t10k-*`, optionally gzipped) in `dir`.
    Mnist {
        dir: PathBuf,
        #[serde(default)]
        train_limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
    Synthetic {
        num_classes: usize,
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        #[serde(default = "default_separation")]
        separation: f64,
    },
}

fn default_separation() -> f64 {
    DEFAULT_SEPARATION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hidden: vec![128] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionConfig {
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    /// Write `checkpoint.json` every this many rounds; 0 disables it.
    pub checkpoint_every: usize,
    /// Fill the timing columns of `rounds.csv`.
    pub wall_times: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub partition: PartitionConfig,
    pub federation: FederationConfig,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    pub defense: DefenseConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.federation.validate()?;
        self.defense.validate()?;
        if !(0.0..=1.0).contains(&self.partition.phi) {
            return Err(Error::Config(format!("partition.phi must lie in [0, 1], got {}", self.partition.phi)));
        }
        if self.model.hidden.contains(&0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        match (&self.attack, self.federation.num_malicious()) {
            (None, m) if m > 0 => {
                return Err(Error::Config("compromise_ratio > 0 needs an attack section".into()));
            }
            (Some(a), _) => {
                a.validate().map_err(cfg_err)?;
                if matches!(a.poison.kind, PoisonKind::EdgeCase) && a.edge_source_class.is_none() {
                    return Err(Error::Config("edge_case poisoning needs attack.edge_source_class".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn truncate(d: Dataset, limit: Option<usize>) -> Dataset {
    match limit {
        Some(n) if n < d.len() => d.subset(&(0..n).collect::<Vec<_>>()),
        _ => d,
    }
}

/// Train and test sets described by `cfg`, with relative paths resolved
/// against `base_dir`.
pub fn load_datasets(cfg: &DatasetConfig, base_dir: &Path, seed: u64) -> Result<(Dataset, Dataset)> {
    match cfg {
        DatasetConfig::Mnist { dir, train_limit, test_limit } => {
            let dir = resolve(base_dir, dir);
            let train = load_mnist_dir(&dir, "train")?;
            let test = load_mnist_dir(&dir, "t10k")?;
            Ok((truncate(train, *train_limit), truncate(test, *test_limit)))
        }
        DatasetConfig::Synthetic { num_classes, per_class, test_per_class, dim, separation } => Ok((
            synth_dataset_with_separation(*num_classes, *per_class, *dim, *separation, derive_seed(seed, 10, 0))?,
            synth_dataset_with_separation(*num_classes, *test_per_class, *dim, *separation, derive_seed(seed, 10, 1))?,
        )),
    }
}

/// A fully built simulation plus the partition it was built from.
pub struct Setup {
    pub simulation: Simulation,
    pub plan: PartitionPlan,
}

/// Builds datasets, partition, poisoned shares, model and defense.
pub fn prepare(cfg: &ExperimentConfig, base_dir: &Path) -> Result<Setup> {
    cfg.validate()?;
    let seed = cfg.seed;
    let fed = &cfg.federation;
    let (train, test) = load_datasets(&cfg.dataset, base_dir, seed)?;
    let v = train.num_classes().max(test.num_classes());
    let mut plan = partition_noniid(&train, fed.num_clients, cfg.partition.phi, v, derive_seed(seed, 11, 0))?;
    let malicious = malicious_set(fed.num_clients, fed.compromise_ratio, seed);
    let mal_ids: Vec<usize> = malicious.iter().copied().collect();
    if fed.attacker_data == AttackerData::Pooled {
        plan.pool_clients(&mal_ids, derive_seed(seed, 12, 0))?;
    }

    let (edge_train, backdoor_test, target) = match &cfg.attack {
        Some(a) => {
            let target = a.poison.target_label;
            match &a.poison.kind {
                PoisonKind::EdgeCase => {
                    let src = a.edge_source_class.expect("validated");
                    (
                        Some(edge_case_pool(&train.subset(&train.indices_of(src)))),
                        edge_case_pool(&test.subset(&test.indices_of(src))),
                        target,
                    )
                }
                PoisonKind::LabelFlip { source } => (None, test.subset(&test.indices_of(*source)), target),
                PoisonKind::Trigger | PoisonKind::DbaShard { .. } => (None, a.poison.trigger.stamp_all(&test)?, target),
            }
        }
        None => (None, test.clone(), 0),
    };

    let mut clients = Vec::with_capacity(fed.num_clients);
    for id in 0..fed.num_clients {
        let share = train.subset(plan.client_indices(id));
        if let (Some(a), Ok(rank)) = (&cfg.attack, mal_ids.binary_search(&id)) {
            let mut spec = a.poison.clone();
            if let PoisonKind::DbaShard { total_parts, .. } = spec.kind {
                spec.kind = PoisonKind::DbaShard { part: rank % total_parts, total_parts };
            }
            clients.push(build_poisoned_dataset(&share, &spec, edge_train.as_ref(), derive_seed(seed, 13, id as u64))?);
        } else {
            clients.push(share);
        }
    }

    let mut sizes = vec![train.dim()];
    sizes.extend(&cfg.model.hidden);
    sizes.push(v);
    let initial = ModelParams::mlp(&sizes, derive_seed(seed, 14, 0))?;
    let defense = Defense::new(cfg.defense.clone(), fed.compromise_ratio)?;
    let eval = EvalSets { clean_test: test, backdoor_test, target_label: target };
    let simulation = Simulation::new(fed.clone(), seed, clients, malicious, cfg.attack.clone(), defense, eval, initial)?;
    Ok(Setup { simulation, plan })
}

/// Round-averaged rates of each FedGrad stage (rounds where defined).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct StageSummary {
    pub soft_tpr: Option<f64>,
    pub soft_fpr: Option<f64>,
    pub hard_tpr: Option<f64>,
    pub hard_fpr: Option<f64>,
    pub union_tpr: Option<f64>,
    pub union_fpr: Option<f64>,
    pub after_trust_tpr: Option<f64>,
    pub after_trust_fpr: Option<f64>,
}

impl StageSummary {
    pub fn from_reports(reports: &[RoundReport]) -> Option<Self> {
        let st: Vec<_> = reports.iter().filter_map(|r| r.stages.as_ref()).collect();
        if st.is_empty() {
            return None;
        }
        Some(Self {
            soft_tpr: mean_defined(st.iter().map(|s| s.soft.tpr)),
            soft_fpr: mean_defined(st.iter().map(|s| Some(s.soft.fpr))),
            hard_tpr: mean_defined(st.iter().map(|s| s.hard.and_then(|h| h.tpr))),
            hard_fpr: mean_defined(st.iter().map(|s| s.hard.map(|h| h.fpr))),
            union_tpr: mean_defined(st.iter().map(|s| s.union.tpr)),
            union_fpr: mean_defined(st.iter().map(|s| Some(s.union.fpr))),
            after_trust_tpr: mean_defined(st.iter().map(|s| s.after_trust.tpr)),
            after_trust_fpr: mean_defined(st.iter().map(|s| Some(s.after_trust.fpr))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub aggregator: String,
    pub rounds_completed: usize,
    pub final_ma: Option<f64>,
    pub final_ba: Option<f64>,
    pub mean_tpr: Option<f64>,
    pub mean_fpr: Option<f64>,
    pub stages: Option<StageSummary>,
    pub malicious_clients: Vec<usize>,
    /// Command-line flags and environment overrides used for this run.
    pub flags: BTreeMap<String, String>,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, reports: &[RoundReport], malicious: Vec<usize>, flags: BTreeMap<String, String>) -> Self {
        let last = reports.last();
        Self {
            name: cfg.name.clone(),
            seed: cfg.seed,
            aggregator: serde_json::to_value(cfg.defense.aggregator)
                .ok()
                .and_then(|v| v.as_str().map(str::to_owned))
                .unwrap_or_default(),
            rounds_completed: reports.len(),
            final_ma: last.map(|r| r.ma),
            final_ba: last.map(|r| r.ba),
            mean_tpr: mean_defined(reports.iter().map(|r| r.tpr)),
            mean_fpr: mean_defined(reports.iter().map(|r| Some(r.fpr))),
            stages: StageSummary::from_reports(reports),
            malicious_clients: malicious,
            flags,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
struct Series {
    round: Vec<usize>,
    ma: Vec<f64>,
    ba: Vec<f64>,
    tpr: Vec<Option<f64>>,
    fpr: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Checkpoint {
    config: ExperimentConfig,
    state: SimulationState,
    reports: Vec<RoundReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: Option<PathBuf>,
    pub resume: bool,
    /// Worker threads for client training; `None` uses rayon's default.
    pub threads: Option<usize>,
    /// Stop after this round (inclusive) even if more are configured.
    pub stop_after: Option<usize>,
    pub flags: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub reports: Vec<RoundReport>,
    pub summary: Summary,
    pub out_dir: Option<PathBuf>,
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn write_outputs(dir: &Path, cfg: &ExperimentConfig, reports: &[RoundReport], summary: &Summary, plan: &PartitionPlan) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("rounds.csv"), rounds_csv(reports, cfg.output.wall_times))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    let series = Series {
        round: reports.iter().map(|r| r.round).collect(),
        ma: reports.iter().map(|r| r.ma).collect(),
        ba: reports.iter().map(|r| r.ba).collect(),
        tpr: reports.iter().map(|r| r.tpr).collect(),
        fpr: reports.iter().map(|r| r.fpr).collect(),
    };
    fs::write(dir.join("series.json"), serde_json::to_string(&series)?)?;
    let mut timings = String::from("round,train_ms,defense_ms\n");
    for r in reports {
        timings.push_str(&format!("{},{:.3},{:.3}\n", r.round, r.train_ms, r.defense_ms));
    }
    fs::write(dir.join("timings.csv"), timings)?;
    fs::write(dir.join("partition.json"), serde_json::to_string(&plan.to_json())?)?;
    Ok(())
}

fn write_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(dir)?;
    let tmp = dir.join("checkpoint.json.tmp");
    fs::write(&tmp, serde_json::to_string(ck)?)?;
    fs::rename(tmp, dir.join("checkpoint.json"))?;
    Ok(())
}

/// Runs (or resumes) an experiment. Output files are written only when an
/// output directory is given through `opts` or the config.
pub fn run_experiment(cfg: &ExperimentConfig, base_dir: &Path, opts: &RunOptions) -> Result<RunOutcome> {
    let out_dir = opts.out_dir.clone().or_else(|| cfg.output.dir.as_ref().map(|d| resolve(base_dir, d)));
    let Setup { mut simulation, plan } = prepare(cfg, base_dir)?;
    let mut reports = Vec::new();

    if opts.resume {
        let dir = out_dir.as_ref().ok_or_else(|| Error::Config("--resume needs an output directory".into()))?;
        let text = fs::read_to_string(dir.join("checkpoint.json"))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.config != *cfg {
            return Err(Error::Config("checkpoint was written by a different configuration".into()));
        }
        simulation.restore(ck.state)?;
        reports = ck.reports;
    }

    let last_round = opts.stop_after.map_or(cfg.federation.rounds, |s| s.min(cfg.federation.rounds));
    let every = cfg.output.checkpoint_every;
    in_pool(opts.threads, || -> Result<()> {
        while simulation.next_round() <= last_round {
            let report = simulation.run_round()?;
            log::info!(
                "round {:>4}  MA {:.4}  BA {:.4}  flagged {:?}",
                report.round,
                report.ma,
                report.ba,
                report.flagged
            );
            let round = report.round;
            reports.push(report);
            if let Some(dir) = &out_dir {
                if every > 0 && (round % every == 0 || round == last_round) {
                    write_checkpoint(dir, &Checkpoint { config: cfg.clone(), state: simulation.snapshot(), reports: reports.clone() })?;
                }
            }
        }
        Ok(())
    })??;

    let summary = Summary::new(cfg, &reports, simulation.malicious().iter().copied().collect(), opts.flags.clone());
    if let Some(dir) = &out_dir {
        write_outputs(dir, cfg, &reports, &summary, &plan)?;
    }
    Ok(RunOutcome { reports, summary, out_dir })
}
