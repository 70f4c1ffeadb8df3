use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    dot, exact_policy_value, rollout_with, state_occupancy, ActionId, DeterministicPolicy, Environment,
    EpisodeTrace, TabularMdp, TabularPolicy,
};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UcbviConfig {
    /// Episode budget; defaults to the PAC schedule.
    pub episodes: Option<usize>,
    /// Multiplier on the Hoeffding bonus `H sqrt(L / n)`.
    pub bonus_scale: f64,
    /// Constant in front of the PAC schedule.
    pub schedule_constant: f64,
}

impl Default for UcbviConfig {
    fn default() -> Self {
        Self {
            episodes: None,
            bonus_scale: 1.0,
            schedule_constant: 1.0,
        }
    }
}

/// Episodes for an `epsilon`-optimal average policy with probability
/// `1 - delta`: `max(S^3 A, c H^3 S^3 A eps^-2 ln(1/delta)^4)`.
pub fn pac_schedule_ucbvi(
    states: usize,
    actions: usize,
    horizon: usize,
    epsilon: f64,
    delta: f64,
    constant: f64,
) -> u64 {
    let (s, a, h) = (states as f64, actions as f64, horizon as f64);
    let floor = s.powi(3) * a;
    let bound = constant * h.powi(3) * s.powi(3) * a / (epsilon * epsilon) * (1.0 / delta).ln().powi(4);
    floor.max(bound).ceil() as u64
}

/// Uniform mixture over per-episode greedy policies, stored run-length
/// encoded. Sampling a component once per episode realizes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixturePolicy {
    pub components: Vec<(DeterministicPolicy, usize)>,
}

impl MixturePolicy {
    pub fn episodes(&self) -> usize {
        self.components.iter().map(|c| c.1).sum()
    }

    pub fn value(&self, mdp: &TabularMdp, reward: impl Fn(usize, ActionId) -> f64 + Copy) -> Result<f64> {
        let mut total = 0.0;
        for (pi, n) in &self.components {
            total += *n as f64 * exact_policy_value(mdp, pi, reward)?;
        }
        Ok(total / self.episodes() as f64)
    }

    /// Mixture weight of components choosing `action` at `(s, h)`.
    pub fn action_weight(&self, s: usize, h: usize, action: ActionId) -> f64 {
        let hits: usize = self
            .components
            .iter()
            .filter(|(pi, _)| pi.action(s, h) == action)
            .map(|c| c.1)
            .sum();
        hits as f64 / self.episodes() as f64
    }

    /// The Markov policy with the same per-step state-action occupancies,
    /// hence the same value under every reward.
    pub fn to_markov(&self, mdp: &TabularMdp) -> Result<TabularPolicy> {
        let (s_count, a_count, horizon) = (mdp.states(), mdp.actions(), mdp.horizon());
        let mut mass = vec![0.0; horizon * s_count * a_count];
        for (pi, n) in &self.components {
            let occ = state_occupancy(mdp, pi)?;
            for (h, row) in occ.iter().enumerate() {
                for (s, &d) in row.iter().enumerate() {
                    mass[(h * s_count + s) * a_count + pi.action(s, h)] += *n as f64 * d;
                }
            }
        }
        let fallback = &self.components[0].0;
        TabularPolicy::from_fn(s_count, a_count, horizon, |s, h| {
            let m = &mass[(h * s_count + s) * a_count..(h * s_count + s + 1) * a_count];
            let total: f64 = m.iter().sum();
            if total > 0.0 {
                m.iter().map(|x| x / total).collect()
            } else {
                crate::mdp::point_mass(a_count, fallback.action(s, h))
            }
        })
    }
}

/// Reward, action restriction and accuracy target of one tabular call.
pub struct TabularRequest<R, M> {
    pub reward: R,
    pub allowed: M,
    pub epsilon: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UcbviResult {
    pub policy: MixturePolicy,
    pub episodes: usize,
    pub required_episodes: u64,
    /// The budget was below the PAC schedule; the guarantee does not apply.
    pub under_budget: bool,
}

/// Optimistic value iteration with count-based Hoeffding bonuses. The reward
/// is known to the learner, transitions are learned from interaction, and
/// only `allowed` actions are ever chosen.
pub fn train_ucbvi<R, M>(
    mdp: &TabularMdp,
    request: &TabularRequest<R, M>,
    config: &UcbviConfig,
    seed: u64,
    mut on_episode: impl FnMut(&EpisodeTrace<usize>),
) -> Result<UcbviResult>
where
    R: Fn(usize, ActionId) -> f64,
    M: Fn(usize, ActionId) -> bool,
{
    let TabularRequest {
        reward,
        allowed,
        epsilon,
        delta,
    } = request;
    let (epsilon, delta) = (*epsilon, *delta);
    for (name, v) in [("epsilon", epsilon), ("delta", delta)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("{name} must lie in (0, 1), got {v}")));
        }
    }
    let (s_count, a_count, horizon) = (mdp.states(), mdp.actions(), mdp.horizon());
    let allowed_sets: Vec<Vec<ActionId>> = (0..s_count)
        .map(|s| (0..a_count).filter(|&a| allowed(s, a)).collect())
        .collect();
    if allowed_sets.iter().any(Vec::is_empty) {
        return Err(Error::Domain("some state has no allowed action".into()));
    }
    let required = pac_schedule_ucbvi(s_count, a_count, horizon, epsilon, delta, config.schedule_constant);
    let budget = config.episodes.unwrap_or(required.min(usize::MAX as u64) as usize);
    let under_budget = (budget as u64) < required;
    if under_budget {
        log::warn!("UCB-VI budget {budget} is below the PAC schedule {required}");
    }
    let r: Vec<f64> = (0..s_count * a_count).map(|i| reward(i / a_count, i % a_count)).collect();
    let log_term = (5.0 * (s_count * a_count * horizon * budget.max(1)) as f64 / delta).ln();
    let hf = horizon as f64;

    let mut visits = vec![0usize; s_count * a_count];
    let mut next_counts = vec![0usize; s_count * a_count * s_count];
    let mut components: Vec<(DeterministicPolicy, usize)> = Vec::new();
    let mut rng = rng::stream(seed, 1);
    let mut p_hat = vec![0.0; s_count];
    for _ in 0..budget {
        let mut next_v = vec![0.0; s_count];
        let mut table = vec![vec![0; s_count]; horizon];
        for h in (0..horizon).rev() {
            let cap = (horizon - h) as f64;
            let mut cur = vec![0.0; s_count];
            for s in 0..s_count {
                // ties, typically at the optimistic cap, go to the least tried action
                let mut best = (allowed_sets[s][0], f64::NEG_INFINITY);
                for &a in &allowed_sets[s] {
                    let n = visits[s * a_count + a];
                    let q = if n == 0 {
                        cap
                    } else {
                        let counts = &next_counts[(s * a_count + a) * s_count..(s * a_count + a + 1) * s_count];
                        for (p, &c) in p_hat.iter_mut().zip(counts) {
                            *p = c as f64 / n as f64;
                        }
                        let bonus = config.bonus_scale * hf * (log_term / n as f64).sqrt();
                        (r[s * a_count + a] + bonus + dot(&p_hat, &next_v)).min(cap)
                    };
                    let fewer = visits[s * a_count + a] < visits[s * a_count + best.0];
                    if q > best.1 + 1e-12 || (q >= best.1 - 1e-12 && fewer) {
                        best = (a, q);
                    }
                }
                table[h][s] = best.0;
                cur[s] = best.1;
            }
            next_v = cur;
        }
        let greedy = DeterministicPolicy {
            num_actions: a_count,
            actions: table,
        };
        let trace = rollout_with(mdp, &greedy, &mut rng)?;
        let mut states: Vec<usize> = trace.steps.iter().map(|st| st.state).collect();
        states.push(trace.terminal);
        for (h, st) in trace.steps.iter().enumerate() {
            let (s, a) = (st.state, st.action);
            visits[s * a_count + a] += 1;
            next_counts[(s * a_count + a) * s_count + states[h + 1]] += 1;
        }
        on_episode(&trace);
        match components.last_mut() {
            Some((last, n)) if *last == greedy => *n += 1,
            _ => components.push((greedy, 1)),
        }
    }
    if components.is_empty() {
        return Err(Error::Config("UCB-VI needs a budget of at least one episode".into()));
    }
    Ok(UcbviResult {
        policy: MixturePolicy { components },
        episodes: budget,
        required_episodes: required,
        under_budget,
    })
}
