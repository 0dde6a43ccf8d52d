//! Deterministic federated-learning simulator with backdoor attacks, the
//! FedGrad ultimate-gradient defense, and baseline robust aggregators.
//!
//! Layout, bottom-up:
//! - [`tensor`], [`nn`], [`training`]: dense MLP engine with SGD.
//! - [`data`]: IDX loading, synthetic blobs, non-IID partitions, poisoning.
//! - [`attack`]: compromised-client training (black-box, PGD, model replacement).
//! - [`federation`]: sampling, local training, aggregation rounds.
//! - [`defense`]: FedGrad and the baseline aggregators.
//! - [`metrics`], [`experiment`], [`coverage`]: reporting, config-driven runs,
//!   and the pair-coverage bound / Monte-Carlo estimator.

pub mod attack;
pub mod coverage;
pub mod data;
pub mod defense;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
