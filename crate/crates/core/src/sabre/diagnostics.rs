//! Exact disagreement quantities on enumerable latent MDPs.

use crate::env::SafetyMdp;
use crate::error::{Error, Result};
use crate::mdp::{dot, state_occupancy, Environment, Policy};
use crate::safety::VersionSpace;

/// Probability that latent state `s` shows some action in the region of
/// disagreement, with actions' features drawn independently.
pub fn rd_probability(env: &SafetyMdp, vs: &VersionSpace, s: usize) -> Result<f64> {
    let mut miss = 1.0;
    for (a, support) in env.features[s].iter().enumerate() {
        let mut p = 0.0;
        for (prob, phi) in support {
            if vs.in_disagreement(phi, a, env.a_safe)? {
                p += prob;
            }
        }
        miss *= 1.0 - p;
    }
    Ok(1.0 - miss)
}

fn rd_table(env: &SafetyMdp, vs: &VersionSpace) -> Result<Vec<f64>> {
    (0..env.mdp.states()).map(|s| rd_probability(env, vs, s)).collect()
}

/// `G(pi; D) = (1/H) sum_h P_pi(s_h in RD(D))`.
pub fn disagreement_mass_g<P: Policy<usize> + ?Sized>(env: &SafetyMdp, policy: &P, vs: &VersionSpace) -> Result<f64> {
    let q = rd_table(env, vs)?;
    let occupancy = state_occupancy(&env.mdp, policy)?;
    let total: f64 = occupancy.iter().map(|d| dot(d, &q)).sum();
    Ok(total / env.mdp.horizon() as f64)
}

/// `U(D)`: the largest probability, over policies taking only truly safe
/// actions, of ever visiting a state in the region of disagreement.
pub fn compute_u(env: &SafetyMdp, vs: &VersionSpace) -> Result<f64> {
    let q = rd_table(env, vs)?;
    let (states, actions) = (env.mdp.states(), env.mdp.actions());
    let mut next = vec![0.0; states];
    for _ in 0..env.mdp.horizon() {
        let mut cur = vec![0.0; states];
        for s in 0..states {
            let best = (0..actions)
                .filter(|&a| env.safe[s][a])
                .map(|a| dot(env.mdp.transition(s, a), &next))
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |b| b.max(v))))
                .ok_or_else(|| Error::ContractViolation(format!("state {s} has no safe action")))?;
            cur[s] = q[s] + (1.0 - q[s]) * best;
        }
        next = cur;
    }
    Ok(dot(env.mdp.initial(), &next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{BlockEnvConfig, BlockMdpEnv};
    use crate::mdp::{exact_policy_value, DeterministicPolicy, TabularPolicy};
    use crate::rng;
    use crate::safety::{HalfspaceClass, LabeledPair};
    use rand::Rng;

    fn small_block() -> SafetyMdp {
        let env = BlockMdpEnv::new(BlockEnvConfig {
            horizon: 3,
            feature_block: 1,
            seed: 6,
            ..Default::default()
        })
        .unwrap();
        env.latent_safety_mdp(16).unwrap()
    }

    fn empty(dim: usize) -> VersionSpace {
        VersionSpace::new(HalfspaceClass::new(dim).unwrap())
    }

    /// The version space that has every feature of `env` labeled.
    fn full(env: &SafetyMdp) -> VersionSpace {
        let mut vs = empty(env.truth.0.len());
        for row in &env.features {
            for (a, support) in row.iter().enumerate() {
                for (_, phi) in support {
                    if a != env.a_safe {
                        let safe = env.true_score(phi) > 0.0;
                        vs.insert(LabeledPair::new(phi.clone(), a, safe)).unwrap();
                    }
                }
            }
        }
        vs
    }

    #[test]
    fn g_extremes() {
        let mut r = rng::seeded(1);
        let env = SafetyMdp::random(4, 3, 3, 2, &mut r).unwrap();
        let pi = TabularPolicy::uniform(4, 3, 3);
        assert_eq!(disagreement_mass_g(&env, &pi, &full(&env)).unwrap(), 0.0);
        assert!((disagreement_mass_g(&env, &pi, &empty(2)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn g_matches_the_exploration_value() {
        let mdp = small_block();
        let mut vs = empty(mdp.truth.0.len());
        let mut r = rng::seeded(2);
        // label a random half of the features
        for row in &mdp.features {
            for (a, support) in row.iter().enumerate() {
                for (_, phi) in support {
                    if a != mdp.a_safe && r.random_bool(0.5) {
                        vs.insert(LabeledPair::new(phi.clone(), a, mdp.true_score(phi) > 0.0)).unwrap();
                    }
                }
            }
        }
        let q: Vec<f64> = (0..mdp.mdp.states()).map(|s| rd_probability(&mdp, &vs, s).unwrap()).collect();
        assert!(q.iter().any(|&p| p > 0.0 && p < 1.0));
        for seed in 0..5 {
            let mut pr = rng::seeded(seed);
            let n = mdp.mdp.states();
            let table: Vec<Vec<f64>> = (0..n * 3)
                .map(|_| {
                    let w: Vec<f64> = (0..4).map(|_| pr.random_range(0.0..1.0)).collect();
                    let sum: f64 = w.iter().sum();
                    w.iter().map(|x| x / sum).collect()
                })
                .collect();
            let pi = TabularPolicy::from_fn(n, 4, 3, |s, h| table[h * n + s].clone()).unwrap();
            let g = disagreement_mass_g(&mdp, &pi, &vs).unwrap();
            let v = exact_policy_value(&mdp.mdp, &pi, |s, _| q[s]).unwrap();
            assert!((3.0 * g - v).abs() < 1e-9, "{g} {v}");
        }
    }

    #[test]
    fn u_examples() {
        let mdp = small_block();
        assert!((compute_u(&mdp, &empty(mdp.truth.0.len())).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(compute_u(&mdp, &full(&mdp)).unwrap(), 0.0);

        let mut r = rng::seeded(3);
        let mut bad = SafetyMdp::random(3, 2, 2, 2, &mut r).unwrap();
        bad.safe[1] = vec![false, false];
        assert!(matches!(compute_u(&bad, &empty(2)), Err(Error::ContractViolation(_))));
    }

    #[test]
    fn u_matches_enumeration() {
        let mut r = rng::seeded(4);
        for _ in 0..30 {
            let (s_n, a_n) = (r.random_range(2..=4), r.random_range(2..=3));
            let h = r.random_range(1..=8 / s_n);
            let env = SafetyMdp::random(s_n, a_n, h, 2, &mut r).unwrap();
            let mut vs = empty(2);
            for (s, row) in env.features.iter().enumerate() {
                for (a, support) in row.iter().enumerate() {
                    if a != env.a_safe && r.random_bool(0.4) {
                        vs.insert(LabeledPair::new(support[0].1.clone(), a, env.safe[s][a])).unwrap();
                    }
                }
            }
            let rd: Vec<bool> = (0..s_n).map(|s| rd_probability(&env, &vs, s).unwrap() == 1.0).collect();
            let policies = DeterministicPolicy::enumerate(s_n, a_n, h, |s, a| env.safe[s][a]);
            let mut best: f64 = 0.0;
            for pi in &policies {
                let mut w = vec![0.0; s_n];
                for step in (0..h).rev() {
                    w = (0..s_n)
                        .map(|s| if rd[s] { 1.0 } else { dot(env.mdp.transition(s, pi.action(s, step)), &w) })
                        .collect();
                }
                best = best.max(dot(env.mdp.initial(), &w));
            }
            let u = compute_u(&env, &vs).unwrap();
            assert!((u - best).abs() < 1e-9, "{u} vs {best}");
        }
    }
}
