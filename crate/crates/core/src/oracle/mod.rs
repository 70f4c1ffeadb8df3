//! The labeling oracle: observed-state registry, query accounting, a
//! simulated ground-truth backend and a human backend fed over HTTP.

mod queue;
mod server;

use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use queue::{HumanBackend, LabelQueue, SubmitError};
pub use server::{serve_oracle, OracleServer};

use crate::error::{Error, Result};
use crate::mdp::ActionId;

/// Observations are quantized to this step before hashing.
pub const FINGERPRINT_STEP: f64 = 1e-9;

/// 64-bit hash of the quantized observation.
pub fn fingerprint(observation: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    observation.len().hash(&mut h);
    for &x in observation {
        ((x / FINGERPRINT_STEP).round() as i64).hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelQuery {
    pub id: u64,
    pub fingerprint: u64,
    pub features: Vec<f64>,
    pub action: ActionId,
    pub epoch: usize,
    pub iteration: usize,
}

/// A pair the learner wants labeled, tied to the state it was observed in.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryRequest {
    pub fingerprint: u64,
    pub features: Vec<f64>,
    pub action: ActionId,
}

/// Append-only set of observed states with the episode they first appeared in.
#[derive(Debug, Clone, Default)]
pub struct ObservedStateRegistry {
    first_seen: HashMap<u64, usize>,
}

impl ObservedStateRegistry {
    pub fn register(&mut self, observation: &[f64], episode: usize) -> u64 {
        let fp = fingerprint(observation);
        self.first_seen.entry(fp).or_insert(episode);
        fp
    }

    pub fn first_seen(&self, fingerprint: u64) -> Option<usize> {
        self.first_seen.get(&fingerprint).copied()
    }

    pub fn contains(&self, fingerprint: u64) -> bool {
        self.first_seen.contains_key(&fingerprint)
    }

    pub fn len(&self) -> usize {
        self.first_seen.len()
    }

    pub fn is_empty(&self) -> bool {
        self.first_seen.is_empty()
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct OracleLedger {
    pub total: usize,
    /// Calls per `(epoch, iteration)`.
    pub per_iteration: BTreeMap<(usize, usize), usize>,
    /// Seconds per answered batch, divided evenly over its labels.
    pub latencies: Vec<f64>,
}

impl OracleLedger {
    fn record(&mut self, epoch: usize, iteration: usize, count: usize, seconds: f64) {
        self.total += count;
        *self.per_iteration.entry((epoch, iteration)).or_default() += count;
        self.latencies
            .extend(std::iter::repeat_n(seconds / count as f64, count));
    }
}

/// Progress published to oracle clients.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStatus {
    pub total_calls: usize,
    pub episodes_done: usize,
    pub unsafe_actions: usize,
    pub current_epoch: usize,
}

/// Something that turns queries into `+1` / `-1` labels.
pub trait LabelBackend {
    fn label(&mut self, queries: &[LabelQuery]) -> Result<Vec<i8>>;

    fn publish(&mut self, _status: RunStatus) {}
}

/// Labels from a ground-truth rule `safe(features, action)`.
pub struct SimulatedBackend<F>(pub F);

impl<F: Fn(&[f64], ActionId) -> bool> LabelBackend for SimulatedBackend<F> {
    fn label(&mut self, queries: &[LabelQuery]) -> Result<Vec<i8>> {
        Ok(queries
            .iter()
            .map(|q| if (self.0)(&q.features, q.action) { 1 } else { -1 })
            .collect())
    }
}

impl LabelBackend for Box<dyn LabelBackend + Send + '_> {
    fn label(&mut self, queries: &[LabelQuery]) -> Result<Vec<i8>> {
        (**self).label(queries)
    }

    fn publish(&mut self, status: RunStatus) {
        (**self).publish(status)
    }
}

/// A backend plus the query contract and accounting.
pub struct Oracle<B> {
    backend: B,
    registry: ObservedStateRegistry,
    ledger: OracleLedger,
    next_id: u64,
}

impl<B: LabelBackend> Oracle<B> {
    pub fn new(backend: B) -> Self {
        Self {
            backend,
            registry: ObservedStateRegistry::default(),
            ledger: OracleLedger::default(),
            next_id: 0,
        }
    }

    /// Records a state seen in a rollout; returns its fingerprint.
    pub fn observe(&mut self, observation: &[f64], episode: usize) -> u64 {
        self.registry.register(observation, episode)
    }

    pub fn registry(&self) -> &ObservedStateRegistry {
        &self.registry
    }

    pub fn ledger(&self) -> &OracleLedger {
        &self.ledger
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    /// Labels in request order. Fails without charging the ledger if any
    /// state was never observed; a failed backend call can be retried and
    /// reuses the same query ids.
    pub fn query_labels(&mut self, requests: &[QueryRequest], epoch: usize, iteration: usize) -> Result<Vec<i8>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        if let Some(r) = requests.iter().find(|r| !self.registry.contains(r.fingerprint)) {
            return Err(Error::ContractViolation(format!(
                "query for unobserved state {:016x}",
                r.fingerprint
            )));
        }
        let queries: Vec<LabelQuery> = requests
            .iter()
            .enumerate()
            .map(|(i, r)| LabelQuery {
                id: self.next_id + i as u64,
                fingerprint: r.fingerprint,
                features: r.features.clone(),
                action: r.action,
                epoch,
                iteration,
            })
            .collect();
        let start = Instant::now();
        let labels = self.backend.label(&queries)?;
        if labels.len() != queries.len() || labels.iter().any(|&l| l != 1 && l != -1) {
            return Err(Error::ContractViolation(
                "backend returned a malformed label batch".into(),
            ));
        }
        self.next_id += queries.len() as u64;
        self.ledger
            .record(epoch, iteration, queries.len(), start.elapsed().as_secs_f64());
        Ok(labels)
    }

    pub fn publish(&mut self, episodes_done: usize, unsafe_actions: usize, current_epoch: usize) {
        self.backend.publish(RunStatus {
            total_calls: self.ledger.total,
            episodes_done,
            unsafe_actions,
            current_epoch,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_block_env, BlockLatent, StateKind, BLOCK_ACTIONS};
    use crate::rng;
    use rand::Rng;

    fn request(fp: u64, features: Vec<f64>, action: ActionId) -> QueryRequest {
        QueryRequest {
            fingerprint: fp,
            features,
            action,
        }
    }

    #[test]
    fn fingerprints_quantize() {
        let a = fingerprint(&[0.1, 0.2]);
        assert_eq!(a, fingerprint(&[0.1 + 1e-12, 0.2]));
        assert_ne!(a, fingerprint(&[0.1 + 1e-8, 0.2]));
        assert_ne!(fingerprint(&[0.0]), fingerprint(&[0.0, 0.0]));
    }

    #[test]
    fn empty_query_is_free() {
        let mut o = Oracle::new(SimulatedBackend(|_: &[f64], _| true));
        assert!(o.query_labels(&[], 0, 0).unwrap().is_empty());
        assert_eq!(o.ledger().total, 0);
    }

    #[test]
    fn unobserved_states_are_rejected() {
        let mut o = Oracle::new(SimulatedBackend(|_: &[f64], _| true));
        let fp = o.observe(&[1.0], 0);
        assert!(matches!(
            o.query_labels(&[request(fp ^ 1, vec![0.5], 1)], 0, 0),
            Err(Error::ContractViolation(_))
        ));
        assert_eq!(o.ledger().total, 0);
        assert_eq!(o.query_labels(&[request(fp, vec![0.5], 1)], 2, 1).unwrap(), vec![1]);
        assert_eq!(o.ledger().total, 1);
        assert_eq!(o.ledger().per_iteration[&(2, 1)], 1);
        assert_eq!(o.registry().first_seen(fp), Some(0));
    }

    #[test]
    fn ledger_totals_match_per_iteration_counts() {
        let mut o = Oracle::new(SimulatedBackend(|f: &[f64], _| f[0] > 0.0));
        let fp = o.observe(&[0.0], 3);
        for (e, n) in [(0, 2), (0, 3), (1, 1)] {
            let reqs: Vec<_> = (0..n).map(|i| request(fp, vec![i as f64 - 1.0], 1)).collect();
            o.query_labels(&reqs, e, n).unwrap();
        }
        let sum: usize = o.ledger().per_iteration.values().sum();
        assert_eq!(o.ledger().total, sum);
        assert_eq!(sum, 6);
    }

    #[test]
    fn simulated_labels_match_latent_paths() {
        let env = build_block_env(5, 21).unwrap();
        let mut o = Oracle::new(SimulatedBackend(|f: &[f64], a| {
            a == env.a_safe() || env.true_score(f) > 0.0
        }));
        let mut r = rng::seeded(8);
        let kinds = [StateKind::HighReward, StateKind::LowReward, StateKind::Safe, StateKind::Unsafe];
        for i in 0..10_000 {
            let latent = if i % 50 == 0 {
                BlockLatent::start()
            } else {
                BlockLatent {
                    kind: kinds[r.random_range(0..4)],
                    level: r.random_range(1..5),
                }
            };
            let obs = env.emit_observation(latent, &mut r);
            let fp = o.observe(&obs, i);
            let feats = env.safety_features(latent, &mut r);
            let a = r.random_range(0..BLOCK_ACTIONS);
            let label = o.query_labels(&[request(fp, feats[a].clone(), a)], 0, 0).unwrap()[0];
            let leads_to_unsafe = env.next_latent(latent, a).kind == StateKind::Unsafe;
            assert_eq!(label == -1, leads_to_unsafe, "{latent:?} action {a}");
            assert_eq!(label == -1, env.is_unsafe(latent, a));
        }
        // identical pairs always get identical labels
        let mut again = Oracle::new(SimulatedBackend(|f: &[f64], _| env.true_score(f) > 0.0));
        let fp = again.observe(&[0.0], 0);
        let phi = env.safety_features(BlockLatent::start(), &mut r)[1].clone();
        let a = again.query_labels(&[request(fp, phi.clone(), 1)], 0, 0).unwrap();
        let b = again.query_labels(&[request(fp, phi, 1)], 0, 0).unwrap();
        assert_eq!(a, b);
    }
}
