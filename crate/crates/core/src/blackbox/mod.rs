//! Blackbox RL learners: tabular UCB-VI, a clipped policy-gradient learner,
//! and the environment view that replaces unverified actions with `a_safe`.

pub mod nn;
mod ppo;
mod ucbvi;

use std::borrow::Borrow;

use rand::RngCore;

pub use ppo::{train_pg, PgHyperparams, PgPolicy, PgReport};
pub use ucbvi::{pac_schedule_ucbvi, train_ucbvi, MixturePolicy, TabularRequest, UcbviConfig, UcbviResult};

use crate::env::{BlockState, SafetyMdp, TabularState};
use crate::error::{Error, Result};
use crate::mdp::{
    sample_action, validate_distribution, ActionId, Environment, EpisodeTrace, Policy, TabularPolicy, TraceStep,
};
use crate::safety::{allowed_actions, SafetyFeatures, VersionSpace};

/// Agent-visible input for function-approximation learners.
pub trait Observe {
    fn observation(&self) -> &[f64];
}

impl Observe for BlockState {
    fn observation(&self) -> &[f64] {
        &self.observation
    }
}

impl Observe for TabularState {
    fn observation(&self) -> &[f64] {
        &self.observation
    }
}

/// A learner that answers [`BlackboxRequest`]s on environment `E`.
pub trait Blackbox<E: Environment> {
    type Output: Policy<E::State> + Send + Sync;

    /// `on_episode` sees every executed training episode, in environment
    /// reward units.
    fn train(
        &self,
        env: &E,
        request: &BlackboxRequest<'_, E::State>,
        seed: u64,
        on_episode: &mut dyn FnMut(&EpisodeTrace<E::State>) -> Result<()>,
    ) -> Result<Self::Output>;
}

/// The policy-gradient learner with fixed hyperparameters.
#[derive(Debug, Clone, Default)]
pub struct PgBlackbox(pub PgHyperparams);

impl<E> Blackbox<E> for PgBlackbox
where
    E: Environment,
    E::State: Observe + SafetyFeatures,
{
    type Output = PgPolicy;

    fn train(
        &self,
        env: &E,
        request: &BlackboxRequest<'_, E::State>,
        seed: u64,
        on_episode: &mut dyn FnMut(&EpisodeTrace<E::State>) -> Result<()>,
    ) -> Result<PgPolicy> {
        train_pg(env, request, &self.0, seed, on_episode).map(|(policy, _)| policy)
    }
}

/// UCB-VI on a [`SafetyMdp`] with deterministic features, where rewards and
/// masks are functions of the latent state.
#[derive(Debug, Clone, Default)]
pub struct UcbviBlackbox(pub UcbviConfig);

/// Markov policy over latent indices, usable on visited states.
#[derive(Debug, Clone)]
pub struct LatentPolicy(pub TabularPolicy);

impl Policy<TabularState> for LatentPolicy {
    fn distribution(&self, state: &TabularState, step: usize) -> Vec<f64> {
        self.0.probs(state.index, step).to_vec()
    }
}

impl Blackbox<SafetyMdp> for UcbviBlackbox {
    type Output = LatentPolicy;

    fn train(
        &self,
        env: &SafetyMdp,
        request: &BlackboxRequest<'_, TabularState>,
        seed: u64,
        on_episode: &mut dyn FnMut(&EpisodeTrace<TabularState>) -> Result<()>,
    ) -> Result<LatentPolicy> {
        request.validate()?;
        if !env.has_deterministic_features() {
            return Err(Error::Unsupported("UCB-VI needs deterministic features".into()));
        }
        let (s_count, a_count) = (env.mdp.states(), env.mdp.actions());
        let states: Vec<TabularState> = (0..s_count).map(|s| env.canonical_state(s)).collect();
        let mut reward = Vec::with_capacity(s_count * a_count);
        let mut allowed = Vec::with_capacity(s_count * a_count);
        for (s, state) in states.iter().enumerate() {
            let mask = request.allowed(state, a_count)?;
            for (a, ok) in mask.into_iter().enumerate() {
                let env_reward = env.mdp.reward(s, a) * env.reward_scale + env.reward_offset;
                reward.push(request.reward.evaluate(state, env_reward)?);
                allowed.push(ok);
            }
        }
        let tabular = TabularRequest {
            reward: |s: usize, a: ActionId| reward[s * a_count + a],
            allowed: |s: usize, a: ActionId| allowed[s * a_count + a],
            epsilon: request.epsilon,
            delta: request.delta,
        };
        let config = UcbviConfig {
            episodes: Some(request.episodes),
            ..self.0.clone()
        };
        let mut failure = None;
        let result = train_ucbvi(&env.mdp, &tabular, &config, seed, |trace| {
            if failure.is_some() {
                return;
            }
            let steps = trace
                .steps
                .iter()
                .map(|st| TraceStep {
                    state: states[st.state].clone(),
                    action: st.action,
                    reward: env.mdp.reward(st.state, st.action) * env.reward_scale + env.reward_offset,
                })
                .collect();
            let full = EpisodeTrace {
                steps,
                terminal: states[trace.terminal].clone(),
            };
            if let Err(e) = on_episode(&full) {
                failure = Some(e);
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(LatentPolicy(result.policy.to_markov(&env.mdp)?))
    }
}

/// Reward handed to a learner, always in `[0, 1]`.
pub enum RewardSpec<'a, S> {
    /// The environment's own reward mapped through `(r - offset) / scale`.
    Environment { offset: f64, scale: f64 },
    /// `R'(s)` of the state an action is taken in.
    State(&'a (dyn Fn(&S) -> Result<f64> + Sync)),
}

impl<S> RewardSpec<'_, S> {
    pub fn unit() -> Self {
        RewardSpec::Environment {
            offset: 0.0,
            scale: 1.0,
        }
    }

    pub fn evaluate(&self, state: &S, env_reward: f64) -> Result<f64> {
        match self {
            RewardSpec::Environment { offset, scale } => Ok((env_reward - offset) / scale),
            RewardSpec::State(f) => f(state),
        }
    }
}

/// One call `Alg(R', Pi, epsilon, delta)`.
pub struct BlackboxRequest<'a, S> {
    pub reward: RewardSpec<'a, S>,
    /// Restrict to the surely-safe actions of this version space; `None`
    /// leaves every action available.
    pub mask: Option<&'a VersionSpace>,
    pub a_safe: ActionId,
    pub epsilon: f64,
    pub delta: f64,
    pub episodes: usize,
}

impl<S> BlackboxRequest<'_, S> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("epsilon", self.epsilon), ("delta", self.delta)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }

    pub fn allowed<T: SafetyFeatures + ?Sized>(&self, state: &T, num_actions: usize) -> Result<Vec<bool>> {
        match self.mask {
            Some(vs) => allowed_actions(vs, state, num_actions, self.a_safe),
            None => Ok(vec![true; num_actions]),
        }
    }
}

/// `M(D)`: the environment in which any action that is not surely safe is
/// executed as `a_safe`.
pub struct SafeWrappedEnv<'a, E, V = &'a VersionSpace> {
    pub base: &'a E,
    pub space: V,
    pub a_safe: ActionId,
}

pub fn wrap_safe_env<E, V: Borrow<VersionSpace>>(base: &E, space: V, a_safe: ActionId) -> SafeWrappedEnv<'_, E, V> {
    SafeWrappedEnv { base, space, a_safe }
}

/// Step of a wrapped rollout: what the policy asked for and what ran.
#[derive(Debug, Clone)]
pub struct WrappedStep<S> {
    pub state: S,
    pub requested: ActionId,
    pub executed: ActionId,
    pub reward: f64,
}

impl<E, V> SafeWrappedEnv<'_, E, V>
where
    E: Environment,
    E::State: SafetyFeatures,
    V: Borrow<VersionSpace>,
{
    pub fn executed_action(&self, state: &E::State, requested: ActionId) -> Result<ActionId> {
        let vs = self.space.borrow();
        Ok(
            if vs.surely_safe(state.action_features(requested), requested, self.a_safe)? {
                requested
            } else {
                self.a_safe
            },
        )
    }

    pub fn rollout<P: Policy<E::State> + ?Sized>(
        &self,
        policy: &P,
        rng: &mut dyn RngCore,
    ) -> Result<(Vec<WrappedStep<E::State>>, E::State)> {
        let mut state = self.base.reset(rng);
        let mut steps = Vec::with_capacity(self.base.horizon());
        for h in 0..self.base.horizon() {
            let dist = policy.distribution(&state, h);
            validate_distribution(&dist, self.base.num_actions())?;
            let requested = sample_action(&dist, rng);
            let executed = self.executed_action(&state, requested)?;
            let (next, reward) = self.base.step(&state, executed, rng);
            steps.push(WrappedStep {
                state,
                requested,
                executed,
                reward,
            });
            state = next;
        }
        Ok((steps, state))
    }

    /// The executed-action view as an ordinary trace.
    pub fn executed_trace(steps: Vec<WrappedStep<E::State>>, terminal: E::State) -> EpisodeTrace<E::State> {
        EpisodeTrace {
            steps: steps
                .into_iter()
                .map(|s| TraceStep {
                    state: s.state,
                    action: s.executed,
                    reward: s.reward,
                })
                .collect(),
            terminal,
        }
    }
}
