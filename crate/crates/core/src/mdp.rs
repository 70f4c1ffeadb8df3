//! Reward-free episodic MDP abstractions, rollouts and exact tabular evaluation.
//!
//! Steps are indexed from 0: an episode visits states `s_0 .. s_{H-1}`, takes one
//! action in each, and ends in a terminal state `s_H` that is recorded but never
//! acted upon.

use rand::RngCore;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type ActionId = usize;

/// Probability tolerance for distribution checks.
pub const PROB_TOL: f64 = 1e-9;
/// Tolerance for comparing policy values.
pub const VALUE_TOL: f64 = 1e-6;

/// An episodic environment. Implementations are immutable after construction;
/// all randomness comes from the caller's generator.
pub trait Environment: Sync {
    type State: Clone + Send + Sync;

    fn horizon(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn reset(&self, rng: &mut dyn RngCore) -> Self::State;
    /// Returns the next state and the reward of the transition.
    fn step(&self, state: &Self::State, action: ActionId, rng: &mut dyn RngCore)
        -> (Self::State, f64);
}

/// A (possibly time-dependent) stochastic policy.
pub trait Policy<S> {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64>;
}

impl<S, P: Policy<S> + ?Sized> Policy<S> for &P {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64> {
        (**self).distribution(state, step)
    }
}

impl<S, P: Policy<S> + ?Sized> Policy<S> for Box<P> {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64> {
        (**self).distribution(state, step)
    }
}

/// Adapts a closure into a [`Policy`].
pub struct FnPolicy<F>(pub F);

impl<S, F: Fn(&S, usize) -> Vec<f64>> Policy<S> for FnPolicy<F> {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64> {
        (self.0)(state, step)
    }
}

/// Point mass on `action` out of `num_actions`.
pub fn point_mass(num_actions: usize, action: ActionId) -> Vec<f64> {
    let mut d = vec![0.0; num_actions];
    d[action] = 1.0;
    d
}

pub fn uniform(num_actions: usize) -> Vec<f64> {
    vec![1.0 / num_actions as f64; num_actions]
}

pub fn validate_distribution(dist: &[f64], num_actions: usize) -> Result<()> {
    let sum: f64 = dist.iter().sum();
    let bad = |reason| Error::InvalidDistribution {
        len: dist.len(),
        sum,
        reason,
    };
    if dist.len() != num_actions {
        return Err(bad("length differs from action count"));
    }
    if dist.iter().any(|p| !p.is_finite() || *p < -PROB_TOL) {
        return Err(bad("negative or non-finite entry"));
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(bad("does not sum to one"));
    }
    Ok(())
}

/// Inverse-CDF sampling. The last positive entry absorbs rounding slack.
pub fn sample_action(dist: &[f64], rng: &mut dyn RngCore) -> ActionId {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (a, &p) in dist.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = a;
        if u < acc {
            return a;
        }
    }
    last
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TraceStep<S> {
    pub state: S,
    pub action: ActionId,
    pub reward: f64,
}

/// One rollout: exactly `horizon` acting steps plus the terminal state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeTrace<S> {
    pub steps: Vec<TraceStep<S>>,
    pub terminal: S,
}

impl<S> EpisodeTrace<S> {
    pub fn total_return(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

pub fn rollout<E, P>(env: &E, policy: &P, seed: u64) -> Result<EpisodeTrace<E::State>>
where
    E: Environment,
    P: Policy<E::State> + ?Sized,
{
    let mut rng = rng::seeded(seed);
    rollout_with(env, policy, &mut rng)
}

pub fn rollout_with<E, P>(
    env: &E,
    policy: &P,
    rng: &mut dyn RngCore,
) -> Result<EpisodeTrace<E::State>>
where
    E: Environment,
    P: Policy<E::State> + ?Sized,
{
    let num_actions = env.num_actions();
    let mut state = env.reset(rng);
    let mut steps = Vec::with_capacity(env.horizon());
    for h in 0..env.horizon() {
        let dist = policy.distribution(&state, h);
        validate_distribution(&dist, num_actions)?;
        let action = sample_action(&dist, rng);
        let (next, reward) = env.step(&state, action, rng);
        steps.push(TraceStep {
            state,
            action,
            reward,
        });
        state = next;
    }
    Ok(EpisodeTrace {
        steps,
        terminal: state,
    })
}

/// Finite-horizon MDP with time-homogeneous transitions and rewards.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TabularMdp {
    states: usize,
    actions: usize,
    horizon: usize,
    /// Row-major `[s][a][s']`.
    transitions: Vec<f64>,
    initial: Vec<f64>,
    /// Row-major `[s][a]`.
    reward: Vec<f64>,
}

impl TabularMdp {
    pub fn new(
        states: usize,
        actions: usize,
        horizon: usize,
        transitions: Vec<f64>,
        initial: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self> {
        if states == 0 || actions == 0 || horizon == 0 {
            return Err(Error::Config("S, A and H must be positive".into()));
        }
        if transitions.len() != states * actions * states
            || initial.len() != states
            || reward.len() != states * actions
        {
            return Err(Error::Config("tabular MDP array shapes do not match S, A".into()));
        }
        validate_distribution(&initial, states)?;
        for row in transitions.chunks(states) {
            validate_distribution(row, states)?;
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("tabular rewards must lie in [0, 1]".into()));
        }
        Ok(Self {
            states,
            actions,
            horizon,
            transitions,
            initial,
            reward,
        })
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }

    pub fn transition(&self, s: usize, a: ActionId) -> &[f64] {
        let start = (s * self.actions + a) * self.states;
        &self.transitions[start..start + self.states]
    }

    pub fn reward(&self, s: usize, a: ActionId) -> f64 {
        self.reward[s * self.actions + a]
    }

    /// Same dynamics with a different horizon.
    pub fn with_horizon(&self, horizon: usize) -> Self {
        Self {
            horizon,
            ..self.clone()
        }
    }

    /// Random instance with Dirichlet(1)-like rows and uniform rewards.
    pub fn random(
        states: usize,
        actions: usize,
        horizon: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mut simplex = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
            let total: f64 = raw.iter().sum();
            raw.into_iter().map(|x| x / total).collect::<Vec<_>>()
        };
        let mut transitions = Vec::with_capacity(states * actions * states);
        for _ in 0..states * actions {
            transitions.extend(simplex(states));
        }
        let initial = simplex(states);
        let reward = (0..states * actions).map(|_| rng.random::<f64>()).collect();
        Self::new(states, actions, horizon, transitions, initial, reward)
    }
}

impl Environment for TabularMdp {
    type State = usize;

    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_actions(&self) -> usize {
        self.actions
    }

    fn reset(&self, rng: &mut dyn RngCore) -> usize {
        sample_action(&self.initial, rng)
    }

    fn step(&self, state: &usize, action: ActionId, rng: &mut dyn RngCore) -> (usize, f64) {
        let next = sample_action(self.transition(*state, action), rng);
        (next, self.reward(*state, action))
    }
}

/// Time-dependent stochastic tabular policy, `probs[h][s][a]` flattened.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    states: usize,
    actions: usize,
    horizon: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(states: usize, actions: usize, horizon: usize) -> Self {
        Self {
            states,
            actions,
            horizon,
            probs: vec![1.0 / actions as f64; states * actions * horizon],
        }
    }

    pub fn from_fn(
        states: usize,
        actions: usize,
        horizon: usize,
        f: impl Fn(usize, usize) -> Vec<f64>,
    ) -> Result<Self> {
        let mut probs = Vec::with_capacity(states * actions * horizon);
        for h in 0..horizon {
            for s in 0..states {
                let d = f(s, h);
                validate_distribution(&d, actions)?;
                probs.extend(d);
            }
        }
        Ok(Self {
            states,
            actions,
            horizon,
            probs,
        })
    }

    pub fn probs(&self, s: usize, h: usize) -> &[f64] {
        let start = (h * self.states + s) * self.actions;
        &self.probs[start..start + self.actions]
    }
}

impl Policy<usize> for TabularPolicy {
    fn distribution(&self, state: &usize, step: usize) -> Vec<f64> {
        self.probs(*state, step.min(self.horizon - 1)).to_vec()
    }
}

/// Deterministic time-dependent tabular policy, `actions[h][s]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DeterministicPolicy {
    pub num_actions: usize,
    pub actions: Vec<Vec<ActionId>>,
}

impl DeterministicPolicy {
    pub fn constant(states: usize, actions: usize, horizon: usize, action: ActionId) -> Self {
        Self {
            num_actions: actions,
            actions: vec![vec![action; states]; horizon],
        }
    }

    pub fn action(&self, s: usize, h: usize) -> ActionId {
        self.actions[h][s]
    }

    /// Every time-dependent deterministic policy whose action at each state is
    /// permitted by `allowed`. The count is the product of allowed-set sizes
    /// raised to `H`; callers must keep instances small.
    pub fn enumerate(
        states: usize,
        actions: usize,
        horizon: usize,
        allowed: impl Fn(usize, ActionId) -> bool,
    ) -> Vec<Self> {
        let choices: Vec<Vec<ActionId>> = (0..states)
            .map(|s| (0..actions).filter(|&a| allowed(s, a)).collect())
            .collect();
        if choices.iter().any(|c| c.is_empty()) {
            return Vec::new();
        }
        let slots: Vec<&Vec<ActionId>> = (0..horizon).flat_map(|_| choices.iter()).collect();
        let mut out = Vec::new();
        let mut idx = vec![0usize; slots.len()];
        loop {
            let mut table = vec![vec![0; states]; horizon];
            for (k, &i) in idx.iter().enumerate() {
                table[k / states][k % states] = slots[k][i];
            }
            out.push(Self {
                num_actions: actions,
                actions: table,
            });
            let mut k = 0;
            loop {
                if k == idx.len() {
                    return out;
                }
                idx[k] += 1;
                if idx[k] < slots[k].len() {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }
}

impl Policy<usize> for DeterministicPolicy {
    fn distribution(&self, state: &usize, step: usize) -> Vec<f64> {
        point_mass(self.num_actions, self.action(*state, step))
    }
}

/// `V(pi) = E_{s ~ mu}[V_0^pi(s)]` by backward induction.
pub fn exact_policy_value<P>(
    mdp: &TabularMdp,
    policy: &P,
    reward: impl Fn(usize, ActionId) -> f64,
) -> Result<f64>
where
    P: Policy<usize> + ?Sized,
{
    let mut next = vec![0.0; mdp.states];
    for h in (0..mdp.horizon).rev() {
        let mut cur = vec![0.0; mdp.states];
        for (s, v) in cur.iter_mut().enumerate() {
            let dist = policy.distribution(&s, h);
            validate_distribution(&dist, mdp.actions)?;
            *v = dist
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, p)| p * (reward(s, a) + dot(mdp.transition(s, a), &next)))
                .sum();
        }
        next = cur;
    }
    Ok(dot(&mdp.initial, &next))
}

/// Optimal value and a maximizing deterministic policy over the class of
/// time-dependent deterministic policies restricted to `allowed` actions.
/// Returns `None` when some state has no allowed action.
pub fn optimal_value(
    mdp: &TabularMdp,
    reward: impl Fn(usize, ActionId) -> f64,
    allowed: impl Fn(usize, ActionId) -> bool,
) -> Option<(f64, DeterministicPolicy)> {
    let mut next = vec![0.0; mdp.states];
    let mut table = vec![vec![0; mdp.states]; mdp.horizon];
    for h in (0..mdp.horizon).rev() {
        let mut cur = vec![0.0; mdp.states];
        for s in 0..mdp.states {
            let best = (0..mdp.actions)
                .filter(|&a| allowed(s, a))
                .map(|a| (a, reward(s, a) + dot(mdp.transition(s, a), &next)))
                .fold(None, |acc: Option<(ActionId, f64)>, (a, q)| match acc {
                    Some((_, bq)) if bq >= q => acc,
                    _ => Some((a, q)),
                })?;
            table[h][s] = best.0;
            cur[s] = best.1;
        }
        next = cur;
    }
    let policy = DeterministicPolicy {
        num_actions: mdp.actions,
        actions: table,
    };
    Some((dot(&mdp.initial, &next), policy))
}

/// `sup_{pi in class} V(pi) - V(policy)`.
pub fn suboptimality<P>(
    mdp: &TabularMdp,
    policy: &P,
    class: &[DeterministicPolicy],
    reward: impl Fn(usize, ActionId) -> f64 + Copy,
) -> Result<f64>
where
    P: Policy<usize> + ?Sized,
{
    if class.is_empty() {
        return Err(Error::Domain("policy class is empty".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for pi in class {
        best = best.max(exact_policy_value(mdp, pi, reward)?);
    }
    Ok(best - exact_policy_value(mdp, policy, reward)?)
}

/// State occupancies `d_h(s) = P(s_h = s)` for `h = 0..H-1`.
pub fn state_occupancy<P>(mdp: &TabularMdp, policy: &P) -> Result<Vec<Vec<f64>>>
where
    P: Policy<usize> + ?Sized,
{
    let mut out = Vec::with_capacity(mdp.horizon);
    let mut d = mdp.initial.clone();
    for h in 0..mdp.horizon {
        let mut next = vec![0.0; mdp.states];
        for (s, &mass) in d.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let dist = policy.distribution(&s, h);
            validate_distribution(&dist, mdp.actions)?;
            for (a, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (s2, &t) in mdp.transition(s, a).iter().enumerate() {
                    next[s2] += mass * p * t;
                }
            }
        }
        out.push(std::mem::replace(&mut d, next));
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bandit() -> TabularMdp {
        TabularMdp::new(1, 2, 1, vec![1.0, 1.0], vec![1.0], vec![1.0, 0.0]).unwrap()
    }

    fn chain(n: usize) -> TabularMdp {
        // state s moves to s+1 (capped) under every action; reward 1 everywhere
        let mut t = vec![0.0; n * n];
        for s in 0..n {
            t[s * n + (s + 1).min(n - 1)] = 1.0;
        }
        let mut initial = vec![0.0; n];
        initial[0] = 1.0;
        TabularMdp::new(n, 1, n, t, initial, vec![1.0; n]).unwrap()
    }

    #[test]
    fn single_path_rollout() {
        let mdp = TabularMdp::new(1, 1, 3, vec![1.0], vec![1.0], vec![1.0]).unwrap();
        let pi = TabularPolicy::uniform(1, 1, 3);
        let trace = rollout(&mdp, &pi, 7).unwrap();
        assert_eq!(trace.len(), 3);
        assert_eq!(trace.steps.iter().map(|s| s.reward).collect::<Vec<_>>(), [1.0; 3]);
        assert_eq!(trace.total_return(), 3.0);
    }

    #[test]
    fn rollout_is_deterministic_per_seed() {
        let mut r = rng::seeded(3);
        let mdp = TabularMdp::random(3, 2, 6, &mut r).unwrap();
        let pi = TabularPolicy::uniform(3, 2, 6);
        let a = serde_json::to_string(&rollout(&mdp, &pi, 11).unwrap()).unwrap();
        let b = serde_json::to_string(&rollout(&mdp, &pi, 11).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_policy_distribution_is_rejected() {
        let mdp = bandit();
        let bad = FnPolicy(|_: &usize, _| vec![0.7, 0.7]);
        assert!(matches!(
            rollout(&mdp, &bad, 0),
            Err(Error::InvalidDistribution { .. })
        ));
    }

    #[test]
    fn chain_value() {
        let mdp = chain(4);
        let v = exact_policy_value(&mdp, &TabularPolicy::uniform(4, 1, 4), |s, a| mdp.reward(s, a))
            .unwrap();
        assert!((v - 4.0).abs() < VALUE_TOL);
    }

    #[test]
    fn uniform_bandit_value() {
        let mdp = bandit();
        let v = exact_policy_value(&mdp, &TabularPolicy::uniform(1, 2, 1), |s, a| mdp.reward(s, a))
            .unwrap();
        assert!((v - 0.5).abs() < VALUE_TOL);
    }

    #[test]
    fn value_matches_monte_carlo() {
        let mut r = rng::seeded(42);
        let mdp = TabularMdp::random(3, 2, 4, &mut r).unwrap();
        let pi = TabularPolicy::from_fn(3, 2, 4, |s, h| {
            let p = 0.2 + 0.15 * ((s + h) % 4) as f64;
            vec![p, 1.0 - p]
        })
        .unwrap();
        let exact = exact_policy_value(&mdp, &pi, |s, a| mdp.reward(s, a)).unwrap();
        let n = 100_000;
        let returns: Vec<f64> = (0..n)
            .map(|_| rollout_with(&mdp, &pi, &mut r).unwrap().total_return())
            .collect();
        let mean = returns.iter().sum::<f64>() / n as f64;
        let var = returns.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - exact).abs() < 3.0 * se, "mc {mean} exact {exact} se {se}");
    }

    #[test]
    fn suboptimality_examples() {
        let mdp = bandit();
        let class = DeterministicPolicy::enumerate(1, 2, 1, |_, _| true);
        let best = DeterministicPolicy::constant(1, 2, 1, 0);
        let worst = DeterministicPolicy::constant(1, 2, 1, 1);
        let r = |s, a| mdp.reward(s, a);
        assert!(suboptimality(&mdp, &best, &class, r).unwrap().abs() < VALUE_TOL);
        assert!((suboptimality(&mdp, &worst, &class, r).unwrap() - 1.0).abs() < VALUE_TOL);
        assert!(matches!(suboptimality(&mdp, &best, &[], r), Err(Error::Domain(_))));
    }

    #[test]
    fn dp_optimum_matches_exhaustive_enumeration() {
        let mut r = rng::seeded(9);
        for _ in 0..20 {
            let mdp = TabularMdp::random(3, 2, 3, &mut r).unwrap();
            let class = DeterministicPolicy::enumerate(3, 2, 3, |_, _| true);
            assert_eq!(class.len(), 2usize.pow(9));
            let rew = |s, a| mdp.reward(s, a);
            let brute = class
                .iter()
                .map(|p| exact_policy_value(&mdp, p, rew).unwrap())
                .fold(f64::NEG_INFINITY, f64::max);
            let (dp, argmax) = optimal_value(&mdp, rew, |_, _| true).unwrap();
            assert!((dp - brute).abs() < 1e-9);
            assert!(suboptimality(&mdp, &argmax, &class, rew).unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn occupancy_rows_are_distributions() {
        let mut r = rng::seeded(1);
        let mdp = TabularMdp::random(4, 3, 5, &mut r).unwrap();
        let occ = state_occupancy(&mdp, &TabularPolicy::uniform(4, 3, 5)).unwrap();
        assert_eq!(occ.len(), 5);
        for row in occ {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < PROB_TOL);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #[test]
            fn value_is_linear_in_reward(seed in any::<u64>()) {
                let mut r = rng::seeded(seed);
                let mdp = TabularMdp::random(3, 2, 4, &mut r).unwrap();
                let r1: Vec<f64> = (0..6).map(|_| r.random()).collect();
                let r2: Vec<f64> = (0..6).map(|_| r.random()).collect();
                let pi = TabularPolicy::from_fn(3, 2, 4, |s, h| {
                    let p = ((s * 7 + h * 3) % 10) as f64 / 10.0;
                    vec![p, 1.0 - p]
                }).unwrap();
                let v1 = exact_policy_value(&mdp, &pi, |s, a| r1[s * 2 + a]).unwrap();
                let v2 = exact_policy_value(&mdp, &pi, |s, a| r2[s * 2 + a]).unwrap();
                let v12 = exact_policy_value(&mdp, &pi, |s, a| r1[s * 2 + a] + r2[s * 2 + a]).unwrap();
                prop_assert!((v12 - v1 - v2).abs() < 1e-9);
            }

            #[test]
            fn rollout_length_is_horizon(seed in any::<u64>(), h in 1usize..8) {
                let mut r = rng::seeded(seed);
                let mdp = TabularMdp::random(3, 2, h, &mut r).unwrap();
                let trace = rollout(&mdp, &TabularPolicy::uniform(3, 2, h), seed).unwrap();
                prop_assert_eq!(trace.len(), h);
            }

            #[test]
            fn subopt_nonnegative_for_members(seed in any::<u64>()) {
                let mut r = rng::seeded(seed);
                let mdp = TabularMdp::random(2, 2, 2, &mut r).unwrap();
                let class = DeterministicPolicy::enumerate(2, 2, 2, |_, _| true);
                let member = &class[(seed % class.len() as u64) as usize];
                let g = suboptimality(&mdp, member, &class, |s, a| mdp.reward(s, a)).unwrap();
                prop_assert!(g >= -1e-12);
            }
        }
    }
}
