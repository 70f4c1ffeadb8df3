//! Halfspace safety class, labeled data, version-space queries and the
//! surely-safe policy restriction.

mod dataset;
pub mod lp;
mod version_space;

use std::borrow::Borrow;

use rand::RngCore;

pub use dataset::{FeatureKey, Insertion, LabeledPair, SafetyDataset};
pub use lp::{solve_bounded_lp, LpProblem, LpSolution};
pub use version_space::{
    rd_membership, surely_safe, HalfspaceClass, SafetyStatus, ScoreRange, VersionSpace, SIGN_TOL,
};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, Policy};

/// States that expose one safety feature vector per action.
pub trait SafetyFeatures {
    fn action_features(&self, action: ActionId) -> &[f64];
}

impl SafetyFeatures for Vec<Vec<f64>> {
    fn action_features(&self, action: ActionId) -> &[f64] {
        &self[action]
    }
}

/// `pi_D(a|s)`: keep the mass of allowed actions and renormalize, or fall
/// back to `a_safe` when none of it survives.
pub fn restrict_policy(distribution: &[f64], allowed: &[bool], a_safe: ActionId) -> Vec<f64> {
    let mass: f64 = distribution
        .iter()
        .zip(allowed)
        .filter(|(_, &ok)| ok)
        .map(|(p, _)| p)
        .sum();
    if mass <= 0.0 {
        return crate::mdp::point_mass(distribution.len(), a_safe);
    }
    distribution
        .iter()
        .zip(allowed)
        .map(|(&p, &ok)| if ok { p / mass } else { 0.0 })
        .collect()
}

/// Actions that are surely safe in `state`, `a_safe` always included.
pub fn allowed_actions<S: SafetyFeatures + ?Sized>(
    vs: &VersionSpace,
    state: &S,
    num_actions: usize,
    a_safe: ActionId,
) -> Result<Vec<bool>> {
    (0..num_actions)
        .map(|a| vs.surely_safe(state.action_features(a), a, a_safe))
        .collect()
}

/// Does any action of `state` fall in the region of disagreement?
pub fn any_disagreement<S: SafetyFeatures + ?Sized>(
    vs: &VersionSpace,
    state: &S,
    num_actions: usize,
    a_safe: ActionId,
) -> Result<bool> {
    for a in 0..num_actions {
        if vs.in_disagreement(state.action_features(a), a, a_safe)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// A base policy seen through the surely-safe mask of a fixed version space.
/// LP failures cannot surface through `Policy`, so they degrade to `a_safe`
/// and are logged.
pub struct MaskedPolicy<P, V = VersionSpace> {
    pub base: P,
    pub space: V,
    pub num_actions: usize,
    pub a_safe: ActionId,
}

impl<S: SafetyFeatures, P: Policy<S>, V: Borrow<VersionSpace>> Policy<S> for MaskedPolicy<P, V> {
    fn distribution(&self, state: &S, step: usize) -> Vec<f64> {
        let base = self.base.distribution(state, step);
        match allowed_actions(self.space.borrow(), state, self.num_actions, self.a_safe) {
            Ok(mask) => restrict_policy(&base, &mask, self.a_safe),
            Err(e) => {
                log::error!("safety mask unavailable, falling back to the safe action: {e}");
                crate::mdp::point_mass(self.num_actions, self.a_safe)
            }
        }
    }
}

/// Monte-Carlo mass of states with at least one action in the region of
/// disagreement. `sample` draws the per-action features of one state.
pub fn version_space_diameter_estimate(
    vs: &VersionSpace,
    mut sample: impl FnMut(&mut dyn RngCore) -> Vec<Vec<f64>>,
    n_samples: usize,
    a_safe: ActionId,
    rng: &mut dyn RngCore,
) -> Result<f64> {
    if n_samples == 0 {
        return Err(Error::Domain("need at least one sample".into()));
    }
    let mut hits = 0usize;
    for _ in 0..n_samples {
        let feats = sample(rng);
        if any_disagreement(vs, &feats, feats.len(), a_safe)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / n_samples as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{uniform, validate_distribution};
    use crate::rng;
    use proptest::prelude::*;
    use rand::{Rng, RngCore};

    #[test]
    fn restrict_examples() {
        let u = uniform(4);
        assert_eq!(restrict_policy(&u, &[true; 4], 0), u);
        assert_eq!(
            restrict_policy(&u, &[true, false, false, false], 0),
            vec![1.0, 0.0, 0.0, 0.0]
        );
        assert_eq!(
            restrict_policy(&[0.0, 0.5, 0.5, 0.0], &[false, false, false, true], 3),
            vec![0.0, 0.0, 0.0, 1.0]
        );
        let r = restrict_policy(&[0.2, 0.3, 0.5], &[true, true, false], 0);
        assert!((r[0] - 0.4).abs() < 1e-12 && (r[1] - 0.6).abs() < 1e-12 && r[2] == 0.0);
    }

    #[test]
    fn diameter_extremes() {
        let class = HalfspaceClass::new(1).unwrap();
        let empty = VersionSpace::new(class);
        let mut r = rng::seeded(1);
        let sampler = |rng: &mut dyn RngCore| vec![vec![0.0], vec![rng.random_range(0.1..1.0)]];
        let p = version_space_diameter_estimate(&empty, sampler, 200, 0, &mut r).unwrap();
        assert_eq!(p, 1.0);
        assert!(matches!(
            version_space_diameter_estimate(&empty, sampler, 0, 0, &mut r),
            Err(Error::Domain(_))
        ));
        let mut pinned = VersionSpace::new(class);
        pinned.insert(LabeledPair::new(vec![0.05], 1, true)).unwrap();
        pinned.insert(LabeledPair::new(vec![-0.05], 1, true)).unwrap();
        pinned.insert(LabeledPair::new(vec![-1.0], 1, false)).unwrap();
        // support [0.1, 1) is decided by the labels at +-0.05
        let p = version_space_diameter_estimate(&pinned, sampler, 200, 0, &mut r).unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn two_cluster_gap_fraction() {
        // labels at +-0.5 leave thresholds -b/w anywhere in (-0.5, 0.5); a
        // uniform point on [-1, 1] is undecided iff it lies in that gap
        let class = HalfspaceClass::new(1).unwrap();
        let mut vs = VersionSpace::new(class);
        vs.insert(LabeledPair::new(vec![-0.5], 1, false)).unwrap();
        vs.insert(LabeledPair::new(vec![0.5], 1, true)).unwrap();
        let n = 4000;
        let mut r = rng::seeded(9);
        let p = version_space_diameter_estimate(
            &vs,
            |rng: &mut dyn RngCore| vec![vec![0.0], vec![rng.random_range(-1.0..1.0)]],
            n,
            0,
            &mut r,
        )
        .unwrap();
        let exact = 0.5;
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((p - exact).abs() <= 2.0 * se, "{p}");
    }

    #[test]
    fn masked_policy_respects_mask() {
        let class = HalfspaceClass::new(1).unwrap();
        let mut vs = VersionSpace::new(class);
        vs.insert(LabeledPair::new(vec![1.0], 1, true)).unwrap();
        vs.insert(LabeledPair::new(vec![-1.0], 1, false)).unwrap();
        let state = vec![vec![0.0], vec![1.0], vec![0.2], vec![-1.0]];
        let p = MaskedPolicy {
            base: crate::mdp::FnPolicy(|_: &Vec<Vec<f64>>, _| uniform(4)),
            space: &vs,
            num_actions: 4,
            a_safe: 0,
        };
        assert_eq!(p.distribution(&state, 0), vec![0.5, 0.5, 0.0, 0.0]);
    }

    fn arb_pairs(dim: usize) -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
        (
            prop::collection::vec(-1.0f64..1.0, dim + 1),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, dim), 1..10),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn restrict_is_a_masked_distribution(
            raw in prop::collection::vec(0.0f64..1.0, 2..6),
            mask_bits in any::<u8>(),
        ) {
            let total: f64 = raw.iter().sum();
            let dist: Vec<f64> = if total > 0.0 {
                raw.iter().map(|p| p / total).collect()
            } else {
                uniform(raw.len())
            };
            let a_safe = mask_bits as usize % raw.len();
            let mask: Vec<bool> = (0..raw.len()).map(|i| i == a_safe || mask_bits >> i & 1 == 1).collect();
            let r = restrict_policy(&dist, &mask, a_safe);
            prop_assert!(validate_distribution(&r, r.len()).is_ok());
            for (p, ok) in r.iter().zip(&mask) {
                prop_assert!(*ok || *p == 0.0);
            }
        }

        #[test]
        fn statuses_are_exclusive_and_sound((truth, points) in arb_pairs(2), query in prop::collection::vec(-1.0f64..1.0, 2)) {
            let class = HalfspaceClass::new(2).unwrap();
            let score = |x: &[f64]| truth[0] * x[0] + truth[1] * x[1] + truth[2];
            let mut vs = VersionSpace::new(class);
            for x in &points {
                let s = score(x);
                if s.abs() > 1e-3 {
                    vs.insert(LabeledPair::new(x.clone(), 1, s > 0.0)).unwrap();
                }
            }
            let range = vs.score_range(&query).unwrap();
            let status = vs.status(&query, 1, 0).unwrap();
            prop_assert_eq!(status, range.status());
            let rd = vs.in_disagreement(&query, 1, 0).unwrap();
            let ss = vs.surely_safe(&query, 1, 0).unwrap();
            let su = status == SafetyStatus::SurelyUnsafe;
            prop_assert_eq!(u8::from(rd) + u8::from(ss) + u8::from(su), 1);
            if ss && score(&query).abs() > 1e-6 {
                prop_assert!(score(&query) > 0.0);
            }
            if su && score(&query).abs() > 1e-6 {
                prop_assert!(score(&query) < 0.0);
            }
        }
    }
}
