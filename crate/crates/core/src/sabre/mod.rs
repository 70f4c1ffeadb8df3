//! The safe exploration loop: epoch-frozen safe policy classes, exploration
//! toward the region of disagreement, label expansion and the final safe
//! optimization of the environment reward.

mod diagnostics;

use std::collections::HashSet;

use rand::RngCore;
use serde::{Deserialize, Serialize};

pub use diagnostics::{compute_u, disagreement_mass_g, rd_probability};

use crate::blackbox::{Blackbox, BlackboxRequest, Observe, RewardSpec};
use crate::env::{BlockMdpEnv, BlockState, SafetyMdp, TabularState};
use crate::error::{Error, Result};
use crate::mdp::{rollout_with, ActionId, Environment, EpisodeTrace};
use crate::oracle::{LabelBackend, Oracle, QueryRequest};
use crate::rng;
use crate::safety::{
    any_disagreement, FeatureKey, HalfspaceClass, LabeledPair, MaskedPolicy, SafetyDataset, SafetyFeatures,
    VersionSpace,
};

/// An environment with safety features and a ground truth to audit against.
pub trait SafetyEnv: Environment<State: SafetyFeatures + Observe> {
    fn safe_action(&self) -> ActionId;
    fn safety_dim(&self) -> usize;
    /// Ground truth for an executed action.
    fn unsafe_step(&self, state: &Self::State, action: ActionId) -> bool;
    /// Ground-truth label of a feature vector, as the simulated oracle answers.
    fn safe_label(&self, features: &[f64], action: ActionId) -> bool;
    /// Smallest and largest per-step reward.
    fn step_reward_range(&self) -> (f64, f64);
}

impl SafetyEnv for BlockMdpEnv {
    fn safe_action(&self) -> ActionId {
        self.a_safe()
    }

    fn safety_dim(&self) -> usize {
        self.feature_dim()
    }

    fn unsafe_step(&self, state: &BlockState, action: ActionId) -> bool {
        self.is_unsafe(state.latent, action)
    }

    fn safe_label(&self, features: &[f64], action: ActionId) -> bool {
        action == self.a_safe() || self.true_score(features) > 0.0
    }

    fn step_reward_range(&self) -> (f64, f64) {
        self.reward_range()
    }
}

impl SafetyEnv for SafetyMdp {
    fn safe_action(&self) -> ActionId {
        self.a_safe
    }

    fn safety_dim(&self) -> usize {
        self.truth.0.len()
    }

    fn unsafe_step(&self, state: &TabularState, action: ActionId) -> bool {
        !self.safe[state.index][action]
    }

    fn safe_label(&self, features: &[f64], action: ActionId) -> bool {
        action == self.a_safe || self.true_score(features) > 0.0
    }

    fn step_reward_range(&self) -> (f64, f64) {
        let (s, a) = (self.mdp.states(), self.mdp.actions());
        let rewards = (0..s).flat_map(|s| (0..a).map(move |a| (s, a)));
        rewards.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (s, a)| {
            let r = self.mdp.reward(s, a) * self.reward_scale + self.reward_offset;
            (lo.min(r), hi.max(r))
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Query every disagreement pair of the batch against the dataset as it
    /// stood at the start of the iteration.
    Batch,
    /// Re-check each pair against the growing dataset before asking.
    #[default]
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SabreConfig {
    /// `N`.
    pub epochs: usize,
    /// `B`.
    pub iterations: usize,
    /// `m`.
    pub rollouts: usize,
    pub epsilon_explore: f64,
    pub epsilon_r: f64,
    pub delta_explore: f64,
    pub delta_r: f64,
    pub label_mode: LabelMode,
    /// Episode budget of each exploration call.
    pub explore_episodes: usize,
    /// Episode budget of the final call.
    pub final_episodes: usize,
    /// Learner reward is `(r - r_min) / reward_scale`; defaults to the span
    /// of the step reward.
    pub reward_scale: Option<f64>,
}

impl Default for SabreConfig {
    fn default() -> Self {
        Self::paper_experiment()
    }
}

/// `Delta = epsilon / (4 H^3)`.
pub fn theorem_gap(epsilon: f64, horizon: usize) -> f64 {
    epsilon / (4.0 * (horizon as f64).powi(3))
}

/// Parameters that make the guarantee hold, with unspecified constants
/// `c_b` (for `B`) and `c_m` (for `m`).
#[allow(clippy::too_many_arguments)]
pub fn theorem1_schedule(
    epsilon: f64,
    delta: f64,
    horizon: usize,
    d_pi: usize,
    d_theta: f64,
    d_vc: usize,
    c_b: f64,
    c_m: f64,
) -> Result<SabreConfig> {
    for (name, v) in [("epsilon", epsilon), ("delta", delta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    if horizon == 0 || d_pi == 0 || d_vc == 0 || !(d_theta >= 1.0) || !(c_b > 0.0) || !(c_m > 0.0) {
        return Err(Error::Config("dimensions and constants must be positive".into()));
    }
    let h = horizon as f64;
    let gap = theorem_gap(epsilon, horizon);
    let epochs = horizon;
    let iterations = (c_b * 8.0 * d_pi as f64 * (1.0 / gap).log2().ceil()).ceil() as usize;
    let delta_explore = delta / (4.0 * epochs as f64 * iterations as f64);
    let m = c_m / gap * d_theta * d_theta * d_vc as f64 * (1.0 / delta_explore).ln() * h.ln();
    Ok(SabreConfig {
        epochs,
        iterations,
        rollouts: (m.ceil() as usize).max(1),
        epsilon_explore: epsilon / (8.0 * h * h),
        epsilon_r: epsilon / 2.0,
        delta_explore,
        delta_r: delta / 2.0,
        ..SabreConfig::paper_experiment()
    })
}

impl SabreConfig {
    /// Five epochs of one iteration with 100 rollouts; 1000 episodes per
    /// exploration call and 6500 for the final call.
    pub fn paper_experiment() -> Self {
        Self {
            epochs: 5,
            iterations: 1,
            rollouts: 100,
            epsilon_explore: 0.1,
            epsilon_r: 0.1,
            delta_explore: 0.1,
            delta_r: 0.1,
            label_mode: LabelMode::Incremental,
            explore_episodes: 1000,
            final_episodes: 6500,
            reward_scale: Some(4.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon_explore", self.epsilon_explore),
            ("epsilon_r", self.epsilon_r),
            ("delta_explore", self.delta_explore),
            ("delta_r", self.delta_r),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        if self.iterations == 0 || self.rollouts == 0 {
            return Err(Error::Config("iterations and rollouts must be at least 1".into()));
        }
        if let Some(s) = self.reward_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("reward_scale must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Environment-reward spec for learners on `env`.
    pub fn learner_reward<'a, S>(&self, env: &impl SafetyEnv) -> RewardSpec<'a, S> {
        let (lo, hi) = env.step_reward_range();
        let scale = self.reward_scale.unwrap_or((hi - lo).max(f64::MIN_POSITIVE));
        RewardSpec::Environment { offset: lo, scale }
    }
}

/// `R~(s) = 1` when some action of `s` lies in the region of disagreement.
pub fn exploration_reward<'a, S: SafetyFeatures>(
    vs: &'a VersionSpace,
    num_actions: usize,
    a_safe: ActionId,
) -> impl Fn(&S) -> Result<f64> + Sync + 'a {
    move |s: &S| Ok(if any_disagreement(vs, s, num_actions, a_safe)? { 1.0 } else { 0.0 })
}

/// Labels the disagreement pairs of `observed` (fingerprint, state) and adds
/// them to `vs`. Returns the number of oracle calls.
#[allow(clippy::too_many_arguments)]
pub fn expand_labels<S: SafetyFeatures, L: LabelBackend>(
    vs: &mut VersionSpace,
    observed: &[(u64, S)],
    num_actions: usize,
    a_safe: ActionId,
    mode: LabelMode,
    oracle: &mut Oracle<L>,
    epoch: usize,
    iteration: usize,
) -> Result<usize> {
    let request = |fp: u64, s: &S, a: ActionId| QueryRequest {
        fingerprint: fp,
        features: s.action_features(a).to_vec(),
        action: a,
    };
    let insert = |vs: &mut VersionSpace, r: QueryRequest, label: i8| {
        vs.insert(LabeledPair::new(r.features, r.action, label > 0)).map(|_| ())
    };
    match mode {
        LabelMode::Batch => {
            let mut seen = HashSet::new();
            let mut requests = Vec::new();
            for (fp, s) in observed {
                for a in (0..num_actions).filter(|&a| a != a_safe) {
                    let phi = s.action_features(a);
                    if vs.in_disagreement(phi, a, a_safe)? && seen.insert(FeatureKey::new(phi)) {
                        requests.push(request(*fp, s, a));
                    }
                }
            }
            let labels = oracle.query_labels(&requests, epoch, iteration)?;
            let calls = requests.len();
            for (r, label) in requests.into_iter().zip(labels) {
                insert(vs, r, label)?;
            }
            Ok(calls)
        }
        LabelMode::Incremental => {
            let mut calls = 0;
            for (fp, s) in observed {
                for a in (0..num_actions).filter(|&a| a != a_safe) {
                    if vs.in_disagreement(s.action_features(a), a, a_safe)? {
                        let r = request(*fp, s, a);
                        let label = oracle.query_labels(std::slice::from_ref(&r), epoch, iteration)?[0];
                        insert(vs, r, label)?;
                        calls += 1;
                    }
                }
            }
            Ok(calls)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// The `m` labeled rollouts of an inner iteration.
    Rollout,
    /// Training episodes of the final reward-maximizing call.
    Final,
}

/// One episode of the run timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: usize,
    pub phase: Phase,
    #[serde(rename = "return")]
    pub episode_return: f64,
    pub oracle_calls_cum: usize,
    pub unsafe_actions_cum: usize,
    /// Steps of this episode whose state had an action in the region of
    /// disagreement of the current dataset.
    pub rd_hits: usize,
    /// State-action pairs encountered so far on the timeline.
    pub pairs_cum: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    /// Version of the frozen mask the exploration call ran under.
    pub mask_version: u64,
    pub dataset_before: usize,
    pub dataset_after: usize,
    pub oracle_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub timeline_episodes: usize,
    /// Training episodes of exploration calls, outside the timeline.
    pub explore_episodes: usize,
    /// Unsafe actions among them (also included in `unsafe_actions`).
    pub explore_unsafe_actions: usize,
    pub unsafe_actions: usize,
    pub oracle_calls: usize,
    pub pairs: usize,
}

pub struct SabreRun<P> {
    /// The final learner seen through the mask of the final dataset.
    pub policy: MaskedPolicy<P, VersionSpace>,
    pub metrics: Vec<EpisodeMetrics>,
    pub iterations: Vec<IterationRecord>,
    pub totals: RunTotals,
}

impl<P> SabreRun<P> {
    pub fn dataset(&self) -> &SafetyDataset {
        self.policy.space.dataset()
    }
}

/// What a per-iteration observer sees once labels have been added.
pub struct IterationView<'a, P> {
    pub epoch: usize,
    pub iteration: usize,
    pub policy: &'a P,
    pub before: &'a VersionSpace,
    pub after: &'a VersionSpace,
}

/// Seed of the `call`-th blackbox call of a run.
pub fn call_seed(seed: u64, call: usize) -> u64 {
    seed ^ (call as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Default)]
pub(crate) struct Timeline {
    pub totals: RunTotals,
    pub metrics: Vec<EpisodeMetrics>,
}

impl Timeline {
    pub fn count_unsafe<E: SafetyEnv>(env: &E, trace: &EpisodeTrace<E::State>) -> usize {
        trace.steps.iter().filter(|st| env.unsafe_step(&st.state, st.action)).count()
    }

    /// Appends one timeline episode; `rd_hits` is measured against `vs`
    /// when given, and unsafe actions are only an error under a mask.
    pub fn record<E: SafetyEnv>(
        &mut self,
        env: &E,
        trace: &EpisodeTrace<E::State>,
        phase: Phase,
        vs: Option<&VersionSpace>,
        oracle_calls: usize,
    ) -> Result<()> {
        let unsafe_steps = Self::count_unsafe(env, trace);
        if unsafe_steps > 0 && vs.is_some() {
            log::error!("{unsafe_steps} unsafe actions executed in a {phase:?} episode");
        }
        let mut rd_hits = 0;
        if let Some(vs) = vs {
            for st in &trace.steps {
                if any_disagreement(vs, &st.state, env.num_actions(), env.safe_action())? {
                    rd_hits += 1;
                }
            }
        }
        let t = &mut self.totals;
        t.unsafe_actions += unsafe_steps;
        t.pairs += trace.steps.len() * env.num_actions();
        t.oracle_calls = oracle_calls;
        self.metrics.push(EpisodeMetrics {
            episode: t.timeline_episodes,
            phase,
            episode_return: trace.total_return(),
            oracle_calls_cum: oracle_calls,
            unsafe_actions_cum: t.unsafe_actions,
            rd_hits,
            pairs_cum: t.pairs,
        });
        t.timeline_episodes += 1;
        Ok(())
    }
}

pub fn run_sabre<E, B, L>(
    env: &E,
    oracle: &mut Oracle<L>,
    config: &SabreConfig,
    blackbox: &B,
    initial: &SafetyDataset,
    seed: u64,
) -> Result<SabreRun<B::Output>>
where
    E: SafetyEnv,
    B: Blackbox<E>,
    L: LabelBackend,
{
    run_sabre_observed(env, oracle, config, blackbox, initial, seed, &mut |_| Ok(()))
}

/// [`run_sabre`] with a hook called after every inner iteration.
#[allow(clippy::too_many_arguments)]
pub fn run_sabre_observed<E, B, L>(
    env: &E,
    oracle: &mut Oracle<L>,
    config: &SabreConfig,
    blackbox: &B,
    initial: &SafetyDataset,
    seed: u64,
    on_iteration: &mut dyn FnMut(&IterationView<'_, B::Output>) -> Result<()>,
) -> Result<SabreRun<B::Output>>
where
    E: SafetyEnv,
    B: Blackbox<E>,
    L: LabelBackend,
{
    config.validate()?;
    let (num_actions, a_safe) = (env.num_actions(), env.safe_action());
    let class = HalfspaceClass::new(env.safety_dim())?;
    let mut vs = VersionSpace::from_dataset(class, initial)?;
    let mut timeline = Timeline::default();
    let mut records = Vec::new();
    let mut call = 0;

    for epoch in 0..config.epochs {
        let frozen = vs.clone();
        for iteration in 0..config.iterations {
            let start = vs.clone();
            let reward = exploration_reward::<E::State>(&start, num_actions, a_safe);
            let request = BlackboxRequest {
                reward: RewardSpec::State(&reward),
                mask: Some(&frozen),
                a_safe,
                epsilon: config.epsilon_explore,
                delta: config.delta_explore,
                episodes: config.explore_episodes,
            };
            let totals = &mut timeline.totals;
            let policy = blackbox.train(env, &request, call_seed(seed, call), &mut |trace| {
                totals.explore_episodes += 1;
                let unsafe_steps = Timeline::count_unsafe(env, trace);
                totals.explore_unsafe_actions += unsafe_steps;
                totals.unsafe_actions += unsafe_steps;
                Ok(())
            })?;
            let masked = MaskedPolicy {
                base: &policy,
                space: &frozen,
                num_actions,
                a_safe,
            };
            let mut rng = rng::stream(seed, (1 << 32) | call as u64);
            call += 1;
            let mut observed = Vec::with_capacity(config.rollouts * env.horizon());
            for _ in 0..config.rollouts {
                let trace = rollout_with(env, &masked, &mut rng as &mut dyn RngCore)?;
                let episode = timeline.totals.timeline_episodes;
                for st in &trace.steps {
                    let fp = oracle.observe(st.state.observation(), episode);
                    observed.push((fp, st.state.clone()));
                }
                timeline.record(env, &trace, Phase::Rollout, Some(&start), oracle.ledger().total)?;
            }
            let before = vs.dataset().len();
            let calls = expand_labels(
                &mut vs,
                &observed,
                num_actions,
                a_safe,
                config.label_mode,
                oracle,
                epoch,
                iteration,
            )?;
            timeline.totals.oracle_calls = oracle.ledger().total;
            records.push(IterationRecord {
                epoch,
                iteration,
                mask_version: frozen.version(),
                dataset_before: before,
                dataset_after: vs.dataset().len(),
                oracle_calls: calls,
            });
            on_iteration(&IterationView {
                epoch,
                iteration,
                policy: &policy,
                before: &start,
                after: &vs,
            })?;
            let t = &timeline.totals;
            oracle.publish(t.timeline_episodes, t.unsafe_actions, epoch);
        }
    }

    let request = BlackboxRequest {
        reward: config.learner_reward(env),
        mask: Some(&vs),
        a_safe,
        epsilon: config.epsilon_r,
        delta: config.delta_r,
        episodes: config.final_episodes,
    };
    let calls = oracle.ledger().total;
    let policy = blackbox.train(env, &request, call_seed(seed, call), &mut |trace| {
        timeline.record(env, trace, Phase::Final, Some(&vs), calls)
    })?;
    let t = &timeline.totals;
    oracle.publish(t.timeline_episodes, t.unsafe_actions, config.epochs);
    Ok(SabreRun {
        policy: MaskedPolicy {
            base: policy,
            space: vs,
            num_actions,
            a_safe,
        },
        metrics: timeline.metrics,
        iterations: records,
        totals: timeline.totals,
    })
}
