//! Accuracy, detection rates and the per-round log.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::defense::FilterStages;
use crate::error::{invalid, Result};
use crate::nn::{predict, ModelParams};

/// Main accuracy on `clean_test` and backdoor accuracy on `backdoor_test`.
/// Backdoor samples whose true label already is `target_label` are skipped.
pub fn evaluate(model: &ModelParams, clean_test: &Dataset, backdoor_test: &Dataset, target_label: usize) -> Result<(f64, f64)> {
    if clean_test.is_empty() {
        return invalid("clean test set is empty");
    }
    let pred = predict(model, clean_test.features())?;
    let correct = pred.iter().zip(clean_test.labels()).filter(|(p, l)| p == l).count();
    let ma = correct as f64 / clean_test.len() as f64;

    let keep: Vec<usize> = (0..backdoor_test.len()).filter(|&i| backdoor_test.labels()[i] != target_label).collect();
    if keep.is_empty() {
        return invalid("backdoor test set has no samples outside the target class");
    }
    let bd = predict(model, &backdoor_test.features().select_rows(&keep))?;
    let hits = bd.iter().filter(|&&p| p == target_label).count();
    Ok((ma, hits as f64 / keep.len() as f64))
}

/// `(TPR, FPR)` of a flagged set. TPR is `None` when no attacker took part;
/// FPR is 0 when no benign client took part.
pub fn detection_rates(flagged: &[usize], participants: &[usize], malicious: &[usize]) -> Result<(Option<f64>, f64)> {
    let part: BTreeSet<usize> = participants.iter().copied().collect();
    let mal: BTreeSet<usize> = malicious.iter().copied().collect();
    let fl: BTreeSet<usize> = flagged.iter().copied().collect();
    if !fl.is_subset(&part) || !mal.is_subset(&part) {
        return invalid("flagged and malicious ids must be participants");
    }
    let tp = fl.intersection(&mal).count();
    let tpr = (!mal.is_empty()).then(|| tp as f64 / mal.len() as f64);
    let benign = part.len() - mal.len();
    let fp = fl.len() - tp;
    let fpr = if benign == 0 { 0.0 } else { fp as f64 / benign as f64 };
    Ok((tpr, fpr))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: f64,
}

/// Detection rates of each intermediate FedGrad set for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRates {
    pub soft: Rates,
    pub hard: Option<Rates>,
    pub union: Rates,
    pub after_trust: Rates,
}

impl FilterStages {
    pub fn score(&self, participants: &[usize], malicious: &[usize]) -> Result<StageRates> {
        let rate = |set: &[usize]| -> Result<Rates> {
            let (tpr, fpr) = detection_rates(set, participants, malicious)?;
            Ok(Rates { tpr, fpr })
        };
        Ok(StageRates {
            soft: rate(&self.soft)?,
            hard: self.hard.as_deref().map(rate).transpose()?,
            union: rate(&self.union)?,
            after_trust: rate(&self.after_trust)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub ma: f64,
    pub ba: f64,
    pub tpr: Option<f64>,
    pub fpr: f64,
    pub flagged: Vec<usize>,
    pub participants: Vec<usize>,
    pub malicious_participants: Vec<usize>,
    pub train_ms: f64,
    pub defense_ms: f64,
    pub stages: Option<StageRates>,
}

pub const CSV_HEADER: &str = "round,ma,ba,tpr,fpr,flagged_ids,train_ms,defense_ms";

/// Renders the run log. Wall-clock cells are left empty unless
/// `wall_times` is set, which keeps the file reproducible byte for byte.
pub fn rounds_csv(reports: &[RoundReport], wall_times: bool) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        let tpr = r.tpr.map(|v| v.to_string()).unwrap_or_default();
        let flagged: Vec<String> = r.flagged.iter().map(usize::to_string).collect();
        let (tm, dm) = if wall_times {
            (format!("{:.3}", r.train_ms), format!("{:.3}", r.defense_ms))
        } else {
            (String::new(), String::new())
        };
        let _ = writeln!(out, "{},{},{},{},{},{},{},{}", r.round, r.ma, r.ba, tpr, r.fpr, flagged.join(";"), tm, dm);
    }
    out
}

/// Mean over rounds where the value is defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}
