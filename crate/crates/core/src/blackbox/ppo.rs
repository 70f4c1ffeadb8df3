//! Clipped-surrogate policy gradient with a separate value baseline. The
//! policy is non-stationary: one network per step. The safety mask is applied
//! inside action sampling, so masked actions are never executed and carry no
//! probability in the surrogate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::nn::{clip_grad_norm, masked_softmax, Adam, Mlp};
use super::{BlackboxRequest, Observe};
use crate::error::{Error, Result};
use crate::mdp::{sample_action, ActionId, Environment, EpisodeTrace, Policy, TraceStep};
use crate::rng;
use crate::safety::SafetyFeatures;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PgHyperparams {
    pub learning_rate: f64,
    /// Transitions per gradient step.
    pub batch_size: usize,
    /// Episodes collected between update rounds.
    pub episodes_per_update: usize,
    pub grad_clip: f64,
    /// Passes over the collected transitions per update round.
    pub ppo_updates: usize,
    pub ratio_clip: f64,
    pub entropy_coef: f64,
    /// Training episodes.
    pub iterations: usize,
    pub hidden: usize,
    pub gae_lambda: f64,
}

impl Default for PgHyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            episodes_per_update: 16,
            grad_clip: 20.0,
            ppo_updates: 10,
            ratio_clip: 0.1,
            entropy_coef: 0.01,
            iterations: 6500,
            hidden: 64,
            gae_lambda: 1.0,
        }
    }
}

impl PgHyperparams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.episodes_per_update > 0
            && self.grad_clip > 0.0
            && self.ppo_updates > 0
            && self.ratio_clip > 0.0
            && self.entropy_coef >= 0.0
            && self.hidden > 0
            && (0.0..=1.0).contains(&self.gae_lambda);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid policy-gradient hyperparameters: {self:?}")))
        }
    }
}

/// Softmax policy over observations with one network per step. Unmasked;
/// wrap it in a [`crate::safety::MaskedPolicy`] to restrict it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgPolicy {
    pub nets: Vec<Mlp>,
    pub num_actions: usize,
}

impl PgPolicy {
    fn net(&self, step: usize) -> &Mlp {
        &self.nets[step.min(self.nets.len() - 1)]
    }
}

impl<S: Observe> Policy<S> for PgPolicy {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64> {
        masked_softmax(&self.net(step).forward(state.observation()), None)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PgReport {
    pub episodes: usize,
    /// Gradient steps taken (per step-network, all networks step together).
    pub updates: usize,
    /// Mean learner-reward return over the final round.
    pub final_batch_return: f64,
}

struct Sample {
    obs: Vec<f64>,
    step: usize,
    mask: Vec<bool>,
    action: ActionId,
    logp: f64,
    advantage: f64,
    target: f64,
}

/// Trains for `request.episodes` episodes. `on_episode` sees every executed
/// trace with environment rewards.
pub fn train_pg<E>(
    env: &E,
    request: &BlackboxRequest<'_, E::State>,
    hyper: &PgHyperparams,
    seed: u64,
    on_episode: &mut dyn FnMut(&EpisodeTrace<E::State>) -> Result<()>,
) -> Result<(PgPolicy, PgReport)>
where
    E: Environment,
    E::State: Observe + SafetyFeatures,
{
    request.validate()?;
    hyper.validate()?;
    let num_actions = env.num_actions();
    let horizon = env.horizon();
    let mut init_rng = rng::stream(seed, 0);
    let obs_dim = env.reset(&mut init_rng).observation().len();
    let h = hyper.hidden;
    let mut policies: Vec<Mlp> = (0..horizon)
        .map(|_| Mlp::new(&[obs_dim, h, h, num_actions], 0.01, &mut init_rng))
        .collect();
    let mut values: Vec<Mlp> = (0..horizon)
        .map(|_| Mlp::new(&[obs_dim, h, h, 1], 1.0, &mut init_rng))
        .collect();
    let mut policy_opts: Vec<Adam> = policies
        .iter()
        .map(|p| Adam::new(p.num_params(), hyper.learning_rate))
        .collect();
    let mut value_opts: Vec<Adam> = values
        .iter()
        .map(|v| Adam::new(v.num_params(), hyper.learning_rate))
        .collect();
    let mut shuffle_rng = rng::stream(seed, u64::MAX);
    let mut report = PgReport::default();

    let mut episode = 0usize;
    while episode < request.episodes {
        let batch = hyper.episodes_per_update.min(request.episodes - episode);
        let mut samples = Vec::with_capacity(batch * horizon);
        let mut batch_return = 0.0;
        for _ in 0..batch {
            let mut rng = rng::stream(seed, 1 + episode as u64);
            episode += 1;
            let mut state = env.reset(&mut rng);
            let mut steps = Vec::with_capacity(horizon);
            let mut rewards = Vec::with_capacity(horizon);
            let mut baseline = Vec::with_capacity(horizon);
            let first = samples.len();
            for t in 0..horizon {
                let obs = state.observation().to_vec();
                let mask = request.allowed(&state, num_actions)?;
                let probs = masked_softmax(&policies[t].forward(&obs), Some(&mask));
                let action = sample_action(&probs, &mut rng);
                let (next, env_reward) = env.step(&state, action, &mut rng);
                rewards.push(request.reward.evaluate(&state, env_reward)?);
                baseline.push(values[t].forward(&obs)[0]);
                samples.push(Sample {
                    obs,
                    step: t,
                    mask,
                    action,
                    logp: probs[action].ln(),
                    advantage: 0.0,
                    target: 0.0,
                });
                steps.push(TraceStep {
                    state,
                    action,
                    reward: env_reward,
                });
                state = next;
            }
            let mut gae = 0.0;
            let mut ret = 0.0;
            for t in (0..horizon).rev() {
                let next_v = baseline.get(t + 1).copied().unwrap_or(0.0);
                gae = rewards[t] + next_v - baseline[t] + hyper.gae_lambda * gae;
                ret += rewards[t];
                samples[first + t].advantage = gae;
                samples[first + t].target = ret;
            }
            batch_return += ret;
            on_episode(&EpisodeTrace {
                steps,
                terminal: state,
            })?;
        }
        report.final_batch_return = batch_return / batch as f64;

        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..hyper.ppo_updates {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(hyper.batch_size) {
                update(
                    &samples,
                    chunk,
                    hyper,
                    num_actions,
                    &mut policies,
                    &mut values,
                    &mut policy_opts,
                    &mut value_opts,
                )
                .map_err(|loss| {
                    Error::Diverged(format!(
                        "non-finite loss {loss} after {episode} episodes and {} updates",
                        report.updates
                    ))
                })?;
                report.updates += 1;
            }
        }
    }
    report.episodes = episode;
    Ok((
        PgPolicy {
            nets: policies,
            num_actions,
        },
        report,
    ))
}

/// One clipped-surrogate step on `chunk`; returns the loss when it or a
/// gradient is not finite.
#[allow(clippy::too_many_arguments)]
fn update(
    samples: &[Sample],
    chunk: &[usize],
    hyper: &PgHyperparams,
    num_actions: usize,
    policies: &mut [Mlp],
    values: &mut [Mlp],
    policy_opts: &mut [Adam],
    value_opts: &mut [Adam],
) -> std::result::Result<(), f64> {
    let n = chunk.len() as f64;
    let mut pgs: Vec<Vec<f64>> = policies.iter().map(|p| vec![0.0; p.num_params()]).collect();
    let mut vgs: Vec<Vec<f64>> = values.iter().map(|v| vec![0.0; v.num_params()]).collect();
    let mut touched = vec![false; policies.len()];
    let mut loss = 0.0;
    for &i in chunk {
        let s = &samples[i];
        touched[s.step] = true;
        let (logits, tape) = policies[s.step].forward_tape(&s.obs);
        let p = masked_softmax(&logits, Some(&s.mask));
        let ratio = (p[s.action].ln() - s.logp).exp();
        let clipped = ratio.clamp(1.0 - hyper.ratio_clip, 1.0 + hyper.ratio_clip);
        let surrogate = (ratio * s.advantage).min(clipped * s.advantage);
        let entropy: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
        loss += -surrogate - hyper.entropy_coef * entropy;
        // the clipped branch has zero gradient
        let active = if s.advantage >= 0.0 {
            ratio <= 1.0 + hyper.ratio_clip
        } else {
            ratio >= 1.0 - hyper.ratio_clip
        };
        let mut g = vec![0.0; num_actions];
        for j in 0..num_actions {
            if p[j] == 0.0 {
                continue;
            }
            let indicator = if j == s.action { 1.0 } else { 0.0 };
            if active {
                g[j] -= s.advantage * ratio * (indicator - p[j]);
            }
            g[j] += hyper.entropy_coef * p[j] * (p[j].ln() + entropy);
            g[j] /= n;
        }
        policies[s.step].backward(&tape, &g, &mut pgs[s.step]);

        let (v, vtape) = values[s.step].forward_tape(&s.obs);
        let err = v[0] - s.target;
        loss += 0.5 * err * err;
        values[s.step].backward(&vtape, &[err / n], &mut vgs[s.step]);
    }
    if !loss.is_finite() || pgs.iter().chain(&vgs).flatten().any(|g| !g.is_finite()) {
        return Err(loss);
    }
    for k in (0..policies.len()).filter(|&k| touched[k]) {
        clip_grad_norm(&mut pgs[k], hyper.grad_clip);
        clip_grad_norm(&mut vgs[k], hyper.grad_clip);
        policy_opts[k].step(policies[k].params_mut(), &pgs[k]);
        value_opts[k].step(values[k].params_mut(), &vgs[k]);
    }
    Ok(())
}
