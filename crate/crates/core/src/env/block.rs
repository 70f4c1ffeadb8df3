//! Block MDP testbed with Hadamard-mixed observations and per-action safety
//! features.
//!
//! Latent states are `s_{1,0}` plus `s_{i,h}` for types `i = 1..=4` and levels
//! `h = 1..=H`. The level always equals the number of actions taken so far,
//! so every episode ends on level `H`. Types 1 and 2 are the normal (high- and
//! low-reward) paths, type 3 is the absorbing safe path and type 4 the unsafe
//! path.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::hadamard::{mat_t_vec, mat_vec, sylvester_hadamard};
use super::tabular::SafetyMdp;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, Environment, TabularMdp};
use crate::rng;
use crate::safety::SafetyFeatures;

pub const NUM_ACTIONS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StateKind {
    HighReward,
    LowReward,
    Safe,
    Unsafe,
}

impl StateKind {
    pub const ALL: [StateKind; 4] = [
        StateKind::HighReward,
        StateKind::LowReward,
        StateKind::Safe,
        StateKind::Unsafe,
    ];

    /// Type index `i` in `1..=4`.
    pub fn index(self) -> usize {
        match self {
            StateKind::HighReward => 1,
            StateKind::LowReward => 2,
            StateKind::Safe => 3,
            StateKind::Unsafe => 4,
        }
    }

    pub fn is_normal(self) -> bool {
        matches!(self, StateKind::HighReward | StateKind::LowReward)
    }

    fn other_normal(self) -> StateKind {
        match self {
            StateKind::HighReward => StateKind::LowReward,
            _ => StateKind::HighReward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockLatent {
    pub kind: StateKind,
    pub level: usize,
}

impl BlockLatent {
    pub fn start() -> Self {
        Self {
            kind: StateKind::HighReward,
            level: 0,
        }
    }

    /// Dense index: `s_{1,0} -> 0`, `s_{i,h} -> 1 + 4(h-1) + (i-1)`.
    pub fn id(&self) -> usize {
        if self.level == 0 {
            0
        } else {
            1 + 4 * (self.level - 1) + (self.kind.index() - 1)
        }
    }

    pub fn from_id(id: usize) -> Self {
        if id == 0 {
            return Self::start();
        }
        Self {
            kind: StateKind::ALL[(id - 1) % 4],
            level: (id - 1) / 4 + 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JitterKind {
    /// Each varying coordinate moves by `+-feature_jitter` with equal odds.
    Sign,
    /// Gaussian with std `feature_jitter`, clamped at three deviations.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockEnvConfig {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub seed: u64,
    /// Safety-feature coordinates per level block.
    #[serde(rename = "B_feat")]
    pub feature_block: usize,
    /// Emission noise standard deviation.
    pub sigma: f64,
    pub feature_jitter: f64,
    pub jitter: JitterKind,
    /// Minimum `|w*.phi + b*|` over every reachable feature.
    pub margin: f64,
    /// When false the ground truth has `b* = 0`.
    pub bias: bool,
}

impl Default for BlockEnvConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            seed: 0,
            feature_block: 2,
            sigma: 0.1,
            feature_jitter: 0.1,
            jitter: JitterKind::Sign,
            margin: 0.1,
            bias: true,
        }
    }
}

/// What the agent sees on each visit: the observation and one safety feature
/// vector per action. The latent is carried for oracles and metrics only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockState {
    pub latent: BlockLatent,
    pub observation: Vec<f64>,
    pub features: Vec<Vec<f64>>,
}

impl SafetyFeatures for BlockState {
    fn action_features(&self, action: ActionId) -> &[f64] {
        &self.features[action]
    }
}

#[derive(Debug, Clone)]
pub struct BlockMdpEnv {
    config: BlockEnvConfig,
    hadamard: Vec<Vec<f64>>,
    a_safe: ActionId,
    continue_actions: Vec<ActionId>,
    unsafe_actions: Vec<ActionId>,
    w_star: Vec<f64>,
    b_star: f64,
    safe_feature: Vec<f64>,
    unsafe_feature: Vec<f64>,
    /// Base feature of each action role (continue, switch, unsafe), shared by
    /// all levels so low-reward visits inform high-reward ones.
    bases: [Vec<f64>; 3],
}

pub fn build_block_env(horizon: usize, seed: u64) -> Result<BlockMdpEnv> {
    BlockMdpEnv::new(BlockEnvConfig {
        horizon,
        seed,
        ..BlockEnvConfig::default()
    })
}

impl BlockMdpEnv {
    pub fn new(config: BlockEnvConfig) -> Result<Self> {
        if config.horizon < 2 {
            return Err(Error::Config(format!(
                "Block env needs H >= 2, got {}",
                config.horizon
            )));
        }
        if config.feature_block == 0 {
            return Err(Error::Config("B_feat must be at least 1".into()));
        }
        if !(config.sigma >= 0.0 && config.feature_jitter >= 0.0 && config.margin > 0.0) {
            return Err(Error::Config("sigma, jitter and margin must be nonnegative (margin positive)".into()));
        }
        let h = config.horizon;
        let k = (h + 5).next_power_of_two();
        let hadamard = sylvester_hadamard(k)?;
        let mut rng = rng::stream(config.seed, 0);

        let a_safe = rng.random_range(0..NUM_ACTIONS);
        let others: Vec<ActionId> = (0..NUM_ACTIONS).filter(|&a| a != a_safe).collect();
        let mut continue_actions = Vec::with_capacity(h);
        let mut unsafe_actions = Vec::with_capacity(h);
        for _ in 0..h {
            let mut pick = others.clone();
            pick.shuffle(&mut rng);
            continue_actions.push(pick[0]);
            unsafe_actions.push(pick[1]);
        }

        let dim = (h + 1) * config.feature_block;
        let w_star: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let b_star = if config.bias {
            rng.random_range(-1.0..=1.0)
        } else {
            0.0
        };
        let w_norm_sq: f64 = w_star.iter().map(|w| w * w).sum();
        if w_norm_sq < 1e-6 {
            return Err(Error::Config("degenerate ground-truth weights".into()));
        }
        let jitter_bound = match config.jitter {
            JitterKind::Sign => config.feature_jitter,
            JitterKind::Gaussian => 3.0 * config.feature_jitter,
        };
        let worst_shift = jitter_bound * w_star.iter().map(|w| w.abs()).sum::<f64>();

        // Shift a random point along w* so its ground-truth score equals `target`.
        let anchored = |target: f64, rng: &mut rng::SeededRng| -> Vec<f64> {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-0.5..=0.5)).collect();
            let score: f64 = v.iter().zip(&w_star).map(|(x, w)| x * w).sum::<f64>() + b_star;
            let step = (target - score) / w_norm_sq;
            for (x, w) in v.iter_mut().zip(&w_star) {
                *x += step * w;
            }
            v
        };

        let safe_feature = anchored(config.margin + 0.4, &mut rng);
        let unsafe_feature = anchored(-(config.margin + 0.4), &mut rng);
        let mut anchor_role = |sign: f64| {
            let magnitude = config.margin + worst_shift + 0.5 * rng.random::<f64>();
            anchored(sign * magnitude, &mut rng)
        };
        let bases = [anchor_role(1.0), anchor_role(1.0), anchor_role(-1.0)];

        Ok(Self {
            config,
            hadamard,
            a_safe,
            continue_actions,
            unsafe_actions,
            w_star,
            b_star,
            safe_feature,
            unsafe_feature,
            bases,
        })
    }

    pub fn config(&self) -> &BlockEnvConfig {
        &self.config
    }

    pub fn a_safe(&self) -> ActionId {
        self.a_safe
    }

    pub fn continue_action(&self, level: usize) -> ActionId {
        self.continue_actions[level]
    }

    pub fn unsafe_action(&self, level: usize) -> ActionId {
        self.unsafe_actions[level]
    }

    /// The action that switches between the two normal paths at `level`.
    pub fn switch_action(&self, level: usize) -> ActionId {
        (0..NUM_ACTIONS)
            .find(|&a| {
                a != self.a_safe
                    && a != self.continue_actions[level]
                    && a != self.unsafe_actions[level]
            })
            .expect("four actions leave exactly one switch action")
    }

    pub fn num_latents(&self) -> usize {
        4 * self.config.horizon + 1
    }

    pub fn observation_dim(&self) -> usize {
        self.hadamard.len()
    }

    pub fn feature_dim(&self) -> usize {
        (self.config.horizon + 1) * self.config.feature_block
    }

    pub fn ground_truth(&self) -> (&[f64], f64) {
        (&self.w_star, self.b_star)
    }

    /// `w*.phi + b*`.
    pub fn true_score(&self, features: &[f64]) -> f64 {
        features
            .iter()
            .zip(&self.w_star)
            .map(|(x, w)| x * w)
            .sum::<f64>()
            + self.b_star
    }

    pub fn next_latent(&self, latent: BlockLatent, action: ActionId) -> BlockLatent {
        let level = latent.level + 1;
        let kind = match latent.kind {
            k if k.is_normal() => {
                if action == self.continue_actions[latent.level] {
                    k
                } else if action == self.a_safe {
                    StateKind::Safe
                } else if action == self.unsafe_actions[latent.level] {
                    StateKind::Unsafe
                } else {
                    k.other_normal()
                }
            }
            StateKind::Safe => StateKind::Safe,
            _ if action == self.a_safe => StateKind::Safe,
            _ => StateKind::Unsafe,
        };
        BlockLatent { kind, level }
    }

    /// Reward of landing in `landing`.
    pub fn landing_reward(&self, landing: BlockLatent) -> f64 {
        let h = self.config.horizon;
        match landing.kind {
            StateKind::HighReward if landing.level < h => 1.0 / h as f64,
            StateKind::HighReward => 2.0,
            StateKind::LowReward | StateKind::Unsafe => -1.0,
            StateKind::Safe => 0.0,
        }
    }

    pub fn reward_range(&self) -> (f64, f64) {
        (-1.0, 2.0)
    }

    /// Ground truth `f*(s, a) = -1`.
    pub fn is_unsafe(&self, latent: BlockLatent, action: ActionId) -> bool {
        if action == self.a_safe || latent.level >= self.config.horizon {
            return false;
        }
        match latent.kind {
            k if k.is_normal() => action == self.unsafe_actions[latent.level],
            StateKind::Safe => false,
            _ => true,
        }
    }

    pub fn emit_observation(&self, latent: BlockLatent, rng: &mut dyn RngCore) -> Vec<f64> {
        self.emit_with_sigma(latent, self.config.sigma, rng)
    }

    pub(crate) fn emit_with_sigma(
        &self,
        latent: BlockLatent,
        sigma: f64,
        rng: &mut dyn RngCore,
    ) -> Vec<f64> {
        let h = self.config.horizon;
        let k = self.hadamard.len();
        let mut z = vec![0.0; k];
        z[latent.kind.index() - 1] = 1.0;
        z[4 + latent.level] = 1.0;
        for x in z.iter_mut().take(h + 5) {
            let n: f64 = rng.sample(StandardNormal);
            *x += sigma * n;
        }
        mat_vec(&self.hadamard, &z)
    }

    /// Inverts the mixing and arg-maxes each one-hot block.
    pub fn decode_observation(&self, observation: &[f64]) -> BlockLatent {
        let k = self.hadamard.len() as f64;
        let z: Vec<f64> = mat_t_vec(&self.hadamard, observation)
            .into_iter()
            .map(|x| x / k)
            .collect();
        let argmax = |xs: &[f64]| {
            xs.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
                .0
        };
        let kind = StateKind::ALL[argmax(&z[..4])];
        let level = argmax(&z[4..5 + self.config.horizon]);
        BlockLatent { kind, level }
    }

    fn jitter_draw(&self, rng: &mut dyn RngCore) -> f64 {
        let s = self.config.feature_jitter;
        match self.config.jitter {
            JitterKind::Sign => {
                if rng.random::<bool>() {
                    s
                } else {
                    -s
                }
            }
            JitterKind::Gaussian => {
                let n: f64 = rng.sample(StandardNormal);
                (s * n).clamp(-3.0 * s, 3.0 * s)
            }
        }
    }

    fn base(&self, level: usize, action: ActionId) -> &[f64] {
        let role = if action == self.continue_actions[level] {
            0
        } else if action == self.unsafe_actions[level] {
            2
        } else {
            1
        };
        &self.bases[role]
    }

    /// Coordinates that vary for a normal state of `kind` at `level`.
    fn varying_coords(&self, kind: StateKind, level: usize) -> std::ops::Range<usize> {
        match kind {
            StateKind::HighReward => {
                let b = self.config.feature_block;
                level * b..(level + 1) * b
            }
            _ => 0..self.feature_dim(),
        }
    }

    /// Per-action safety features for one visit. Terminal states (level `H`)
    /// have no actions and carry no features.
    pub fn safety_features(&self, latent: BlockLatent, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        if latent.level >= self.config.horizon {
            return Vec::new();
        }
        (0..NUM_ACTIONS)
            .map(|a| {
                if a == self.a_safe {
                    return self.safe_feature.clone();
                }
                match latent.kind {
                    StateKind::Safe => self.safe_feature.clone(),
                    StateKind::Unsafe => self.unsafe_feature.clone(),
                    kind => {
                        let mut phi = self.base(latent.level, a).to_vec();
                        for c in self.varying_coords(kind, latent.level) {
                            phi[c] += self.jitter_draw(rng);
                        }
                        phi
                    }
                }
            })
            .collect()
    }

    fn visit(&self, latent: BlockLatent, rng: &mut dyn RngCore) -> BlockState {
        BlockState {
            latent,
            observation: self.emit_observation(latent, rng),
            features: self.safety_features(latent, rng),
        }
    }

    /// The latent MDP with rewards affinely rescaled into `[0, 1]`, together with
    /// the exact feature distribution of every latent state. Only sign jitter
    /// has finite support; `max_patterns` bounds the per-action enumeration.
    pub fn latent_safety_mdp(&self, max_patterns: usize) -> Result<SafetyMdp> {
        if self.config.jitter != JitterKind::Sign {
            return Err(Error::Unsupported(
                "exact feature distributions need sign jitter".into(),
            ));
        }
        let s_count = self.num_latents();
        let (lo, hi) = self.reward_range();
        let mut transitions = vec![0.0; s_count * NUM_ACTIONS * s_count];
        let mut reward = vec![0.0; s_count * NUM_ACTIONS];
        let mut features = Vec::with_capacity(s_count);
        let mut safe = Vec::with_capacity(s_count);
        for id in 0..s_count {
            let latent = BlockLatent::from_id(id);
            let mut feats = Vec::with_capacity(NUM_ACTIONS);
            for a in 0..NUM_ACTIONS {
                // Terminal latents self-loop; they are never reached before step H.
                let next = if latent.level >= self.config.horizon {
                    latent
                } else {
                    self.next_latent(latent, a)
                };
                transitions[(id * NUM_ACTIONS + a) * s_count + next.id()] = 1.0;
                reward[id * NUM_ACTIONS + a] = if latent.level >= self.config.horizon {
                    0.0
                } else {
                    (self.landing_reward(next) - lo) / (hi - lo)
                };
                feats.push(self.feature_support(latent, a, max_patterns)?);
            }
            features.push(feats);
            safe.push((0..NUM_ACTIONS).map(|a| !self.is_unsafe(latent, a)).collect());
        }
        let mut initial = vec![0.0; s_count];
        initial[0] = 1.0;
        let mdp = TabularMdp::new(
            s_count,
            NUM_ACTIONS,
            self.config.horizon,
            transitions,
            initial,
            reward,
        )?;
        Ok(SafetyMdp {
            mdp,
            features,
            safe,
            a_safe: self.a_safe,
            truth: (self.w_star.clone(), self.b_star),
            reward_offset: lo,
            reward_scale: hi - lo,
        })
    }

    fn feature_support(
        &self,
        latent: BlockLatent,
        action: ActionId,
        max_patterns: usize,
    ) -> Result<Vec<(f64, Vec<f64>)>> {
        if latent.level >= self.config.horizon
            || action == self.a_safe
            || !latent.kind.is_normal()
        {
            let mut r = rng::seeded(0);
            let f = self
                .safety_features(latent, &mut r)
                .get(action)
                .cloned()
                .unwrap_or_else(|| self.safe_feature.clone());
            return Ok(vec![(1.0, f)]);
        }
        let coords: Vec<usize> = self.varying_coords(latent.kind, latent.level).collect();
        let count = 1usize
            .checked_shl(coords.len() as u32)
            .filter(|&c| c <= max_patterns)
            .ok_or_else(|| {
                Error::Unsupported(format!(
                    "{} jitter patterns exceed the limit {max_patterns}",
                    coords.len()
                ))
            })?;
        let p = 1.0 / count as f64;
        let s = self.config.feature_jitter;
        Ok((0..count)
            .map(|mask| {
                let mut phi = self.base(latent.level, action).to_vec();
                for (bit, &c) in coords.iter().enumerate() {
                    phi[c] += if mask >> bit & 1 == 1 { s } else { -s };
                }
                (p, phi)
            })
            .collect())
    }
}

impl Environment for BlockMdpEnv {
    type State = BlockState;

    fn horizon(&self) -> usize {
        self.config.horizon
    }

    fn num_actions(&self) -> usize {
        NUM_ACTIONS
    }

    fn reset(&self, rng: &mut dyn RngCore) -> BlockState {
        self.visit(BlockLatent::start(), rng)
    }

    fn step(&self, state: &BlockState, action: ActionId, rng: &mut dyn RngCore) -> (BlockState, f64) {
        let next = self.next_latent(state.latent, action);
        let reward = self.landing_reward(next);
        (self.visit(next, rng), reward)
    }
}
