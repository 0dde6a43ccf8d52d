//! Local training for compromised clients.
//!
//! Strategies:
//! - `blackbox`: plain SGD on the poisoned set.
//! - `pgd`: after every `projection_frequency` epochs the model is projected
//!   back onto the L2 ball of radius `pgd_radius` around the global model.
//! - `pgd_mr`: PGD followed by model-replacement scaling of the final update.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoisonSpec};
use crate::error::{invalid, Result};
use crate::federation::ClientUpdate;
use crate::nn::ModelParams;
use crate::training::{train_local, TrainSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStrategy {
    Blackbox,
    Pgd,
    PgdMr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoRadius {
    Auto,
}

/// Either a fixed radius or `"auto"`: the mean benign update norm observed
/// in the previous round (1.0 before any round has completed).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PgdRadius {
    Fixed(f64),
    Auto(AutoRadius),
}

impl PgdRadius {
    pub fn resolve(self, auto_value: f64) -> f64 {
        match self {
            PgdRadius::Fixed(r) => r,
            PgdRadius::Auto(_) => auto_value,
        }
    }
}

pub const INITIAL_AUTO_RADIUS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub strategy: AttackStrategy,
    #[serde(default = "one")]
    pub scale_factor: f64,
    #[serde(default = "auto_radius")]
    pub pgd_radius: PgdRadius,
    /// Poison learning rate, epochs and batch size.
    pub train: TrainSettings,
    #[serde(default = "one_usize")]
    pub projection_frequency: usize,
    /// How compromised clients build their poisoned sets.
    pub poison: PoisonSpec,
    /// Class whose transformed samples form the edge-case pool.
    #[serde(default)]
    pub edge_source_class: Option<usize>,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn auto_radius() -> PgdRadius {
    PgdRadius::Auto(AutoRadius::Auto)
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_factor >= 1.0) {
            return invalid(format!("scale factor must be >= 1, got {}", self.scale_factor));
        }
        if self.strategy == AttackStrategy::PgdMr && self.scale_factor <= 1.0 {
            return invalid("pgd_mr needs a scale factor > 1");
        }
        if self.projection_frequency == 0 {
            return invalid("projection frequency must be >= 1");
        }
        if let PgdRadius::Fixed(r) = self.pgd_radius {
            if !(r >= 0.0) {
                return invalid(format!("pgd radius must be >= 0, got {r}"));
            }
        }
        if !(self.poison.pdr > 0.0 && self.poison.pdr < 1.0) {
            return invalid(format!("pdr must lie in (0, 1), got {}", self.poison.pdr));
        }
        self.train.validate()
    }
}

/// Projects `candidate` onto the L2 ball (flattened parameters) of `radius` around `center`.
pub fn pgd_project(candidate: &ModelParams, center: &ModelParams, radius: f64) -> Result<ModelParams> {
    if !(radius >= 0.0) {
        return invalid(format!("radius must be >= 0, got {radius}"));
    }
    center.ensure_congruent(candidate)?;
    let dist = candidate.distance(center);
    if dist <= radius {
        return Ok(candidate.clone());
    }
    let mut out = center.clone();
    out.add_scaled(radius / dist, &candidate.delta_from(center));
    Ok(out)
}

/// `global + factor · (local − global)`
pub fn scale_update(local: &ModelParams, global: &ModelParams, factor: f64) -> Result<ModelParams> {
    if !(factor >= 1.0) {
        return invalid(format!("scale factor must be >= 1, got {factor}"));
    }
    global.ensure_congruent(local)?;
    let mut out = global.clone();
    out.add_scaled(factor, &local.delta_from(global));
    Ok(out)
}

pub fn train_local_malicious(
    client_id: usize,
    global: &ModelParams,
    poisoned: &Dataset,
    cfg: &AttackConfig,
    auto_radius: f64,
    seed: u64,
) -> Result<ClientUpdate> {
    cfg.validate()?;
    let radius = cfg.pgd_radius.resolve(auto_radius);
    let project = cfg.strategy != AttackStrategy::Blackbox;
    let mut model = global.clone();
    let mut projection_err = None;
    train_local(&mut model, poisoned, &cfg.train, seed, |epoch, m| {
        if project && epoch % cfg.projection_frequency == 0 {
            match pgd_project(m, global, radius) {
                Ok(p) => *m = p,
                Err(e) => projection_err = Some(e),
            }
        }
    })?;
    if let Some(e) = projection_err {
        return Err(e);
    }
    if project && cfg.train.epochs % cfg.projection_frequency != 0 {
        model = pgd_project(&model, global, radius)?;
    }
    if cfg.strategy == AttackStrategy::PgdMr {
        model = scale_update(&model, global, cfg.scale_factor)?;
    }
    Ok(ClientUpdate {
        client_id,
        params: model,
        num_samples: poisoned.len(),
        is_malicious_truth: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_poisoned_dataset, synth_dataset, PoisonKind, PoisonSpec, TriggerPatch};
    use proptest::prelude::*;

    fn poison() -> PoisonSpec {
        PoisonSpec {
            kind: PoisonKind::Trigger,
            target_label: 0,
            pdr: 0.25,
            trigger: TriggerPatch { row: 0, col: 0, height: 1, width: 2, value: 5.0 },
        }
    }

    fn cfg(strategy: AttackStrategy, radius: f64) -> AttackConfig {
        AttackConfig {
            strategy,
            scale_factor: if strategy == AttackStrategy::PgdMr { 5.0 } else { 1.0 },
            pgd_radius: PgdRadius::Fixed(radius),
            train: TrainSettings::new(0.1, 3, 8),
            projection_frequency: 1,
            poison: poison(),
            edge_source_class: None,
        }
    }

    fn setup() -> (ModelParams, Dataset) {
        let clean = synth_dataset(3, 20, 8, 4).unwrap();
        (
            ModelParams::mlp(&[8, 6, 3], 1).unwrap(),
            build_poisoned_dataset(&clean, &poison(), None, 2).unwrap(),
        )
    }

    #[test]
    fn infinite_radius_pgd_matches_blackbox() {
        let (g, d) = setup();
        let a = train_local_malicious(0, &g, &d, &cfg(AttackStrategy::Blackbox, 1.0), 1.0, 7).unwrap();
        let b = train_local_malicious(0, &g, &d, &cfg(AttackStrategy::Pgd, f64::INFINITY), 1.0, 7).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn zero_radius_returns_global() {
        let (g, d) = setup();
        let u = train_local_malicious(0, &g, &d, &cfg(AttackStrategy::Pgd, 0.0), 1.0, 7).unwrap();
        assert_eq!(u.params, g);
    }

    #[test]
    fn intermediate_models_stay_inside_the_ball() {
        let (g, d) = setup();
        let radius = 0.05;
        let mut model = g.clone();
        train_local(&mut model, &d, &TrainSettings::new(0.1, 4, 8), 3, |_, m| {
            *m = pgd_project(m, &g, radius).unwrap();
            assert!(m.distance(&g) <= radius + 1e-9);
        })
        .unwrap();
        let u = train_local_malicious(0, &g, &d, &cfg(AttackStrategy::PgdMr, radius), 1.0, 3).unwrap();
        assert!((u.params.distance(&g) - 5.0 * radius).abs() < 1e-9);
    }

    #[test]
    fn projection_scales_ray() {
        let center = ModelParams::mlp(&[2, 2], 0).unwrap();
        let mut cand = center.clone();
        let dir = center.unflatten(&[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        cand.add_scaled(2.0, &dir);
        assert!((cand.distance(&center) - 10.0).abs() < 1e-12);
        let p = pgd_project(&cand, &center, 2.0).unwrap();
        assert!((p.distance(&center) - 2.0).abs() < 1e-9);
        assert_eq!(pgd_project(&center, &center, 1.0).unwrap(), center);
    }

    #[test]
    fn scaling_examples() {
        let global = ModelParams::mlp(&[3, 2], 0).unwrap();
        let local = ModelParams::mlp(&[3, 2], 1).unwrap();
        assert_eq!(scale_update(&local, &global, 1.0).unwrap().flatten(), {
            let mut m = global.clone();
            m.add_scaled(1.0, &local.delta_from(&global));
            m.flatten()
        });
        let eps = 1e-3;
        let v = global.unflatten(&vec![1.0; global.num_params()]).unwrap();
        let mut small = global.clone();
        small.add_scaled(eps, &v);
        let scaled = scale_update(&small, &global, 100.0).unwrap();
        assert!((scaled.distance(&global) - 100.0 * eps * v.norm()).abs() < 1e-9);
        assert!(scale_update(&local, &global, 0.5).is_err());
    }

    #[test]
    fn replacement_with_k_clients() {
        // One attacker among K equally weighted clients whose deltas are zero:
        // scaling by K makes the average delta equal the attacker's delta.
        let k = 10;
        let global = ModelParams::mlp(&[4, 3], 0).unwrap();
        let target = ModelParams::mlp(&[4, 3], 1).unwrap();
        let scaled = scale_update(&target, &global, k as f64).unwrap();
        let mut avg = global.zeros_like();
        avg.add_scaled(1.0 / k as f64, &scaled);
        for _ in 1..k {
            avg.add_scaled(1.0 / k as f64, &global);
        }
        assert!(avg.distance(&target) < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(AttackStrategy::PgdMr, 1.0);
        c.scale_factor = 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg(AttackStrategy::Pgd, 1.0);
        c.projection_frequency = 0;
        assert!(c.validate().is_err());
        let parsed: AttackConfig = serde_json::from_str(
            r#"{"strategy":"pgd","pgd_radius":"auto","train":{"lr":0.1,"epochs":2},
                "poison":{"kind":{"type":"trigger"},"target_label":1,"pdr":0.1}}"#,
        )
        .unwrap();
        assert_eq!(parsed.pgd_radius.resolve(0.7), 0.7);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(seed_a in 0u64..500, seed_b in 0u64..500, radius in 0.0f64..5.0) {
            let a = ModelParams::mlp(&[3, 4, 2], seed_a).unwrap();
            let b = ModelParams::mlp(&[3, 4, 2], seed_b + 1000).unwrap();
            let once = pgd_project(&a, &b, radius).unwrap();
            let twice = pgd_project(&once, &b, radius).unwrap();
            prop_assert!(once.distance(&twice) < 1e-12);
            prop_assert!(once.distance(&b) <= radius + 1e-9);
        }

        #[test]
        fn scaling_composes_multiplicatively(x in 1.0f64..20.0, y in 1.0f64..20.0) {
            let g = ModelParams::mlp(&[3, 2], 5).unwrap();
            let l = ModelParams::mlp(&[3, 2], 6).unwrap();
            let ab = scale_update(&scale_update(&l, &g, x).unwrap(), &g, y).unwrap();
            let direct = scale_update(&l, &g, x * y).unwrap();
            prop_assert!(ab.distance(&direct) <= 1e-9 * direct.norm().max(1.0));
        }
    }
}
