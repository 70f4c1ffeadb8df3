use rand::{Rng, RngCore};

use crate::error::Result;
use crate::mdp::{sample_action, ActionId, Environment, TabularMdp};
use crate::safety::SafetyFeatures;

/// Finite feature distribution: `(probability, phi)` pairs.
pub type FeatureSupport = Vec<(f64, Vec<f64>)>;

/// A tabular MDP whose states carry safety features, with the ground-truth
/// safety table. Used for exact diagnostics and the small-instance property
/// suites.
#[derive(Debug, Clone)]
pub struct SafetyMdp {
    pub mdp: TabularMdp,
    /// `features[s][a]`.
    pub features: Vec<Vec<FeatureSupport>>,
    /// `safe[s][a] = (f*(s, a) == +1)`.
    pub safe: Vec<Vec<bool>>,
    pub a_safe: ActionId,
    /// Ground-truth halfspace `(w*, b*)`.
    pub truth: (Vec<f64>, f64),
    /// Rewards of `mdp` are `(r - reward_offset) / reward_scale`.
    pub reward_offset: f64,
    pub reward_scale: f64,
}

impl SafetyMdp {
    /// Random instance with one deterministic feature per pair, labeled by a
    /// random halfspace. `a_safe = 0` always gets a positively scored feature.
    pub fn random(
        states: usize,
        actions: usize,
        horizon: usize,
        dim: usize,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let mdp = TabularMdp::random(states, actions, horizon, rng)?;
        // both labels must be attainable on the feature box
        let (w, b) = loop {
            let w: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
            let b: f64 = rng.random_range(-1.0..=1.0);
            let reach: f64 = w.iter().map(|x| x.abs()).sum();
            if reach - b.abs() > 0.1 {
                break (w, b);
            }
        };
        let score = |phi: &[f64]| phi.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() + b;
        let mut features = Vec::with_capacity(states);
        let mut safe = Vec::with_capacity(states);
        for _ in 0..states {
            let mut row = Vec::with_capacity(actions);
            let mut labels = Vec::with_capacity(actions);
            for a in 0..actions {
                let phi = loop {
                    let phi: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
                    let s = score(&phi);
                    if s.abs() > 1e-3 && (a != 0 || s > 0.0) {
                        break phi;
                    }
                };
                labels.push(score(&phi) > 0.0);
                row.push(vec![(1.0, phi)]);
            }
            features.push(row);
            safe.push(labels);
        }
        Ok(Self {
            mdp,
            features,
            safe,
            a_safe: 0,
            truth: (w, b),
            reward_offset: 0.0,
            reward_scale: 1.0,
        })
    }

    pub fn true_score(&self, features: &[f64]) -> f64 {
        crate::mdp::dot(features, &self.truth.0) + self.truth.1
    }

    /// Every action has a single feature vector.
    pub fn has_deterministic_features(&self) -> bool {
        self.features.iter().flatten().all(|support| support.len() == 1)
    }

    /// The state `s` with its most likely feature of every action; exact when
    /// features are deterministic.
    pub fn canonical_state(&self, s: usize) -> TabularState {
        let features = self.features[s]
            .iter()
            .map(|support| {
                support
                    .iter()
                    .fold(&support[0], |best, x| if x.0 > best.0 { x } else { best })
                    .1
                    .clone()
            })
            .collect();
        self.make_state(s, features)
    }

    fn make_state(&self, s: usize, features: Vec<Vec<f64>>) -> TabularState {
        let mut observation = vec![0.0; self.mdp.states()];
        observation[s] = 1.0;
        TabularState {
            index: s,
            observation,
            features,
        }
    }

    fn visit(&self, s: usize, rng: &mut dyn RngCore) -> TabularState {
        let features = self.features[s]
            .iter()
            .map(|support| {
                let probs: Vec<f64> = support.iter().map(|x| x.0).collect();
                support[sample_action(&probs, rng)].1.clone()
            })
            .collect();
        self.make_state(s, features)
    }

    /// Undo the reward rescaling for an `H`-step return.
    pub fn unscale_return(&self, value: f64, horizon: usize) -> f64 {
        value * self.reward_scale + horizon as f64 * self.reward_offset
    }
}

/// A visited state of a [`SafetyMdp`]: the latent index, a one-hot
/// observation and the sampled features.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularState {
    pub index: usize,
    pub observation: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl SafetyFeatures for TabularState {
    fn action_features(&self, action: ActionId) -> &[f64] {
        &self.features[action]
    }
}

/// Rewards are reported in original units.
impl Environment for SafetyMdp {
    type State = TabularState;

    fn horizon(&self) -> usize {
        self.mdp.horizon()
    }

    fn num_actions(&self) -> usize {
        self.mdp.actions()
    }

    fn reset(&self, rng: &mut dyn RngCore) -> TabularState {
        let s = sample_action(self.mdp.initial(), rng);
        self.visit(s, rng)
    }

    fn step(&self, state: &TabularState, action: ActionId, rng: &mut dyn RngCore) -> (TabularState, f64) {
        let next = sample_action(self.mdp.transition(state.index, action), rng);
        let r = self.mdp.reward(state.index, action) * self.reward_scale + self.reward_offset;
        (self.visit(next, rng), r)
    }
}
