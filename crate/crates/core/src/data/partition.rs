//! Class-grouped non-IID client partitioning.
//!
//! Clients are split at random into one group per class. For each class, a
//! `phi` fraction of its samples is dealt to the clients of that class's group
//! and the remainder is dealt over all clients. Dealing is round-robin over a
//! seeded client order, so shares stay balanced.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionPlan {
    /// `assignments[client_id]` holds sorted sample indices.
    assignments: Vec<Vec<usize>>,
    /// Group (class) of each client.
    groups: Vec<usize>,
    phi: f64,
    num_groups: usize,
}

impl PartitionPlan {
    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn client_indices(&self, client: usize) -> &[usize] {
        &self.assignments[client]
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn group_of(&self, client: usize) -> usize {
        self.groups[client]
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn num_groups(&self) -> usize {
        self.num_groups
    }

    /// Merges the shares of `clients` and deals the pooled samples back out
    /// evenly, so those clients end up holding draws from one distribution.
    pub fn pool_clients(&mut self, clients: &[usize], seed: u64) -> Result<()> {
        if let Some(&bad) = clients.iter().find(|&&c| c >= self.num_clients()) {
            return invalid(format!("client {bad} not in plan"));
        }
        let mut ids = clients.to_vec();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() < 2 {
            return Ok(());
        }
        let mut pool: Vec<usize> = ids
            .iter()
            .flat_map(|&c| std::mem::take(&mut self.assignments[c]))
            .collect();
        pool.sort_unstable();
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (k, s) in pool.into_iter().enumerate() {
            self.assignments[ids[k % ids.len()]].push(s);
        }
        for &c in &ids {
            self.assignments[c].sort_unstable();
        }
        Ok(())
    }

    /// `{client_id: [indices]}`
    pub fn to_json(&self) -> serde_json::Value {
        let map: BTreeMap<usize, &Vec<usize>> = self.assignments.iter().enumerate().collect();
        serde_json::to_value(map).expect("plain map serializes")
    }
}

pub fn partition_noniid(
    dataset: &Dataset,
    num_clients: usize,
    phi: f64,
    num_groups: usize,
    seed: u64,
) -> Result<PartitionPlan> {
    let v = dataset.num_classes();
    if num_groups != v {
        return invalid(format!("need one group per class: {num_groups} groups for {v} classes"));
    }
    if num_clients < num_groups {
        return invalid(format!("{num_clients} clients cannot cover {num_groups} groups"));
    }
    if !(0.0..=1.0).contains(&phi) {
        return invalid(format!("phi must lie in [0, 1], got {phi}"));
    }
    if dataset.len() < num_clients {
        return invalid(format!("{} samples cannot fill {num_clients} clients", dataset.len()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..num_clients).collect();
    order.shuffle(&mut rng);
    let mut groups = vec![0; num_clients];
    let mut members = vec![Vec::new(); num_groups];
    for (pos, &client) in order.iter().enumerate() {
        groups[client] = pos % num_groups;
        members[pos % num_groups].push(client);
    }
    let mut deal_order: Vec<usize> = (0..num_clients).collect();
    deal_order.shuffle(&mut rng);

    let mut assignments = vec![Vec::new(); num_clients];
    let mut group_cursor = vec![0usize; num_groups];
    let mut all_cursor = 0usize;
    for class in 0..v {
        let mut idx = dataset.indices_of(class);
        idx.shuffle(&mut rng);
        let to_group = (phi * idx.len() as f64).round() as usize;
        for &s in &idx[..to_group] {
            let g = &members[class];
            assignments[g[group_cursor[class] % g.len()]].push(s);
            group_cursor[class] += 1;
        }
        for &s in &idx[to_group..] {
            assignments[deal_order[all_cursor % num_clients]].push(s);
            all_cursor += 1;
        }
    }

    rebalance_empty(&mut assignments);
    for a in &mut assignments {
        a.sort_unstable();
    }
    Ok(PartitionPlan {
        assignments,
        groups,
        phi,
        num_groups,
    })
}

/// Gives every empty client one sample taken from the currently largest client.
fn rebalance_empty(assignments: &mut [Vec<usize>]) {
    while let Some(empty) = assignments.iter().position(Vec::is_empty) {
        let donor = (0..assignments.len())
            .max_by(|&a, &b| assignments[a].len().cmp(&assignments[b].len()).then(b.cmp(&a)))
            .expect("non-empty plan");
        let moved = assignments[donor].pop().expect("donor holds samples");
        assignments[empty].push(moved);
    }
}
