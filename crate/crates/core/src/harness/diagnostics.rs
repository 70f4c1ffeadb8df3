//! Exact small-instance checks of the complexity assumptions.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{state_occupancy, Environment, Policy, TabularMdp};

/// A safety labeling of a tabular MDP: `table[s][a]` is true when safe.
pub type LabelTable = Vec<Vec<bool>>;

/// `max_h max_{r in radii} P_pi(some f, f' in B_h(r) disagree at s_h) / r`,
/// where `B_h(r)` holds the members of `class` within `rho_h` distance `r`
/// of `truth`. The truth itself always belongs to the ball.
pub fn estimate_disagreement_coefficient<P: Policy<usize> + ?Sized>(
    mdp: &TabularMdp,
    policy: &P,
    class: &[LabelTable],
    truth: &LabelTable,
    radii: &[f64],
) -> Result<f64> {
    if radii.is_empty() {
        return Err(Error::Domain("the radius grid is empty".into()));
    }
    if let Some(r) = radii.iter().find(|r| !(**r > 0.0)) {
        return Err(Error::Domain(format!("radii must be positive, got {r}")));
    }
    let states = mdp.states();
    if truth.len() != states || class.iter().any(|f| f.len() != states) {
        return Err(Error::Domain("label tables must cover every state".into()));
    }
    let occupancy = state_occupancy(mdp, policy)?;
    let mut best: f64 = 0.0;
    for d in &occupancy {
        let rho = |f: &LabelTable| -> f64 { (0..states).filter(|&s| f[s] != truth[s]).map(|s| d[s]).sum() };
        let distances: Vec<f64> = class.iter().map(rho).collect();
        for &r in radii {
            let ball: Vec<&LabelTable> = class
                .iter()
                .zip(&distances)
                .filter(|(_, &dist)| dist <= r + 1e-12)
                .map(|(f, _)| f)
                .collect();
            let disagreement: f64 = (0..states)
                .filter(|&s| ball.iter().any(|f| f[s] != truth[s]))
                .map(|s| d[s])
                .sum();
            best = best.max(disagreement / r);
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverReport {
    /// Indices into the policy set, one per distinct maximizer.
    pub cover: Vec<usize>,
    /// Largest `visit(pi, S) - sum_cover visit(pi_i, S)` over checked pairs.
    pub worst_gap: f64,
    pub valid: bool,
}

/// Builds the cover of per-state visitation maximizers from `policies` and
/// checks `visit(pi, S) <= sum_i visit(pi_i, S)` for every policy and every
/// nonempty subset `S` (all subsets up to 16 states, otherwise singletons
/// plus `sampled_subsets` random ones). `visit(pi, S)` is the average over
/// steps of the probability of being in `S`.
pub fn verify_policy_cover<P: Policy<usize>>(
    mdp: &TabularMdp,
    policies: &[P],
    sampled_subsets: usize,
    rng: &mut dyn RngCore,
) -> Result<CoverReport> {
    if policies.is_empty() {
        return Err(Error::Domain("the policy set is empty".into()));
    }
    let (states, h) = (mdp.states(), mdp.horizon() as f64);
    let visits: Vec<Vec<f64>> = policies
        .iter()
        .map(|p| {
            let occ = state_occupancy(mdp, p)?;
            Ok((0..states).map(|s| occ.iter().map(|d| d[s]).sum::<f64>() / h).collect())
        })
        .collect::<Result<_>>()?;
    let mut cover: Vec<usize> = (0..states)
        .map(|s| {
            (0..policies.len())
                .fold(0, |best, i| if visits[i][s] > visits[best][s] { i } else { best })
        })
        .collect();
    cover.sort_unstable();
    cover.dedup();
    let covered: Vec<f64> = (0..states).map(|s| cover.iter().map(|&i| visits[i][s]).sum()).collect();

    let subsets: Vec<Vec<usize>> = if states <= 16 {
        (1u32..1 << states)
            .map(|mask| (0..states).filter(|&s| mask >> s & 1 == 1).collect())
            .collect()
    } else {
        let mut out: Vec<Vec<usize>> = (0..states).map(|s| vec![s]).collect();
        for _ in 0..sampled_subsets {
            let subset: Vec<usize> = (0..states).filter(|_| rng.random_bool(0.5)).collect();
            if !subset.is_empty() {
                out.push(subset);
            }
        }
        out
    };
    let mut worst_gap = f64::NEG_INFINITY;
    for v in &visits {
        for subset in &subsets {
            let lhs: f64 = subset.iter().map(|&s| v[s]).sum();
            let rhs: f64 = subset.iter().map(|&s| covered[s]).sum();
            worst_gap = worst_gap.max(lhs - rhs);
        }
    }
    Ok(CoverReport {
        valid: worst_gap <= 1e-12,
        cover,
        worst_gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{DeterministicPolicy, TabularPolicy};
    use crate::rng;

    /// `n` states with a uniform start and every action staying put.
    fn uniform_chain(n: usize) -> TabularMdp {
        TabularMdp::new(
            n,
            1,
            1,
            (0..n).flat_map(|s| (0..n).map(move |t| if s == t { 1.0 } else { 0.0 })).collect(),
            vec![1.0 / n as f64; n],
            vec![0.0; n],
        )
        .unwrap()
    }

    fn threshold(n: usize, t: usize) -> LabelTable {
        (0..n).map(|s| vec![s >= t]).collect()
    }

    #[test]
    fn degenerate_classes() {
        let mdp = uniform_chain(10);
        let pi = TabularPolicy::uniform(10, 1, 1);
        let truth = threshold(10, 5);
        let theta = estimate_disagreement_coefficient(&mdp, &pi, &[truth.clone()], &truth, &[0.1, 0.5]).unwrap();
        assert_eq!(theta, 0.0);

        // {f*, g} with rho(f*, g) = p
        let g = threshold(10, 8);
        let p = 0.3;
        let theta = estimate_disagreement_coefficient(&mdp, &pi, &[truth.clone(), g], &truth, &[p]).unwrap();
        assert!((theta - 1.0).abs() < 1e-12);
        assert!(estimate_disagreement_coefficient(&mdp, &pi, &[truth.clone()], &truth, &[]).is_err());
        assert!(estimate_disagreement_coefficient(&mdp, &pi, &[truth.clone()], &truth, &[0.0]).is_err());
    }

    #[test]
    fn thresholds_under_uniform_marginals_have_coefficient_two() {
        let n = 200;
        let mdp = uniform_chain(n);
        let pi = TabularPolicy::uniform(n, 1, 1);
        let class: Vec<LabelTable> = (0..=n).map(|t| threshold(n, t)).collect();
        let truth = threshold(n, n / 2);
        let radii: Vec<f64> = (1..=20).map(|k| k as f64 / n as f64).collect();
        let theta = estimate_disagreement_coefficient(&mdp, &pi, &class, &truth, &radii).unwrap();
        assert!((theta - 2.0).abs() <= 0.4, "{theta}");
    }

    #[test]
    fn single_state_cover() {
        let mdp = TabularMdp::new(1, 2, 3, vec![1.0; 2], vec![1.0], vec![0.0; 2]).unwrap();
        let policies = DeterministicPolicy::enumerate(1, 2, 3, |_, _| true);
        let report = verify_policy_cover(&mdp, &policies, 0, &mut rng::seeded(0)).unwrap();
        assert!(report.valid);
        assert_eq!(report.cover.len(), 1);
    }

    #[test]
    fn random_three_state_covers_hold_on_all_subsets() {
        let mut r = rng::seeded(5);
        for _ in 0..10 {
            let mdp = TabularMdp::random(3, 2, 2, &mut r).unwrap();
            let policies = DeterministicPolicy::enumerate(3, 2, 2, |_, _| true);
            let report = verify_policy_cover(&mdp, &policies, 0, &mut r).unwrap();
            assert!(report.valid, "{report:?}");
            assert!(report.cover.len() <= 3);
        }
    }
}
