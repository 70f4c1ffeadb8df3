use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::dataset::{FeatureKey, Insertion, LabeledPair, SafetyDataset};
use super::lp::maximize_with_cuts;
use crate::error::{Error, Result};
use crate::mdp::ActionId;

/// Sign tolerance for LP optima.
pub const SIGN_TOL: f64 = 1e-7;

/// `{sign(w.phi + b) : |w|_inf <= 1, |b| <= 1}`; `b` is pinned to zero when
/// `bias` is off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HalfspaceClass {
    pub dim: usize,
    pub bias: bool,
}

impl HalfspaceClass {
    pub fn new(dim: usize) -> Result<Self> {
        Self::with_bias(dim, true)
    }

    pub fn with_bias(dim: usize, bias: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be at least 1".into()));
        }
        Ok(Self { dim, bias })
    }

    fn lower(&self) -> Vec<f64> {
        let mut v = vec![-1.0; self.dim + 1];
        if !self.bias {
            v[self.dim] = 0.0;
        }
        v
    }

    fn upper(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.dim + 1];
        if !self.bias {
            v[self.dim] = 0.0;
        }
        v
    }

    fn augment(&self, features: &[f64]) -> Result<Vec<f64>> {
        if features.len() != self.dim {
            return Err(Error::Domain(format!(
                "feature length {} does not match class dimension {}",
                features.len(),
                self.dim
            )));
        }
        let mut v = features.to_vec();
        v.push(1.0);
        Ok(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreRange {
    pub c_max: f64,
    pub c_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SafetyStatus {
    SurelySafe,
    SurelyUnsafe,
    Disagreement,
}

impl ScoreRange {
    /// Consistent hypotheses are those with `y_i (w.phi_i + b) > 0`; the LPs
    /// optimize over their closure, so a strict sign is achievable exactly
    /// when the closed optimum has that strict sign.
    pub fn status(&self) -> SafetyStatus {
        if self.c_min >= -SIGN_TOL {
            SafetyStatus::SurelySafe
        } else if self.c_max > SIGN_TOL {
            SafetyStatus::Disagreement
        } else {
            SafetyStatus::SurelyUnsafe
        }
    }
}

/// The version space of a halfspace class given a labeled dataset, with
/// memoized per-feature answers.
#[derive(Debug)]
pub struct VersionSpace {
    class: HalfspaceClass,
    dataset: SafetyDataset,
    rows: Vec<Vec<f64>>,
    version: u64,
    cache: Mutex<HashMap<FeatureKey, (SafetyStatus, u64)>>,
    lp_solves: AtomicUsize,
}

impl Clone for VersionSpace {
    fn clone(&self) -> Self {
        Self {
            class: self.class,
            dataset: self.dataset.clone(),
            rows: self.rows.clone(),
            version: self.version,
            cache: Mutex::new(self.cache.lock().expect("cache lock").clone()),
            lp_solves: AtomicUsize::new(self.lp_solves.load(Ordering::Relaxed)),
        }
    }
}

impl VersionSpace {
    pub fn new(class: HalfspaceClass) -> Self {
        Self {
            class,
            dataset: SafetyDataset::new(),
            rows: Vec::new(),
            version: 0,
            cache: Mutex::new(HashMap::new()),
            lp_solves: AtomicUsize::new(0),
        }
    }

    pub fn from_dataset(class: HalfspaceClass, dataset: &SafetyDataset) -> Result<Self> {
        let mut vs = Self::new(class);
        for e in dataset.entries() {
            vs.insert_unchecked(e.clone())?;
        }
        vs.check_realizable(None)?;
        Ok(vs)
    }

    pub fn class(&self) -> HalfspaceClass {
        self.class
    }

    pub fn dataset(&self) -> &SafetyDataset {
        &self.dataset
    }

    /// Bumped on every added label.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn lp_solves(&self) -> usize {
        self.lp_solves.load(Ordering::Relaxed)
    }

    fn insert_unchecked(&mut self, pair: LabeledPair) -> Result<Insertion> {
        let mut row = self.class.augment(&pair.features)?;
        let y = f64::from(pair.label);
        let inserted = self.dataset.insert(pair)?;
        if inserted == Insertion::Added {
            row.iter_mut().for_each(|v| *v *= y);
            self.rows.push(row);
            self.version += 1;
        }
        Ok(inserted)
    }

    /// Adds a label; a dataset no halfspace separates strictly is rejected
    /// and leaves the version space unchanged.
    pub fn insert(&mut self, pair: LabeledPair) -> Result<Insertion> {
        let snapshot = (pair.features.clone(), pair.action);
        let before = self.clone();
        let inserted = self.insert_unchecked(pair)?;
        if inserted == Insertion::Added {
            if let Err(e) = self.check_realizable(Some(snapshot)) {
                *self = before;
                return Err(e);
            }
            // decided answers stay valid as the space shrinks
            self.cache
                .get_mut()
                .expect("cache lock")
                .retain(|_, (s, _)| *s != SafetyStatus::Disagreement);
        }
        Ok(inserted)
    }

    /// Largest margin `t` with `y_i (w.phi_i + b) >= t` over the box.
    pub fn separation_margin(&self) -> Result<f64> {
        if self.rows.is_empty() {
            return Ok(1.0);
        }
        let n = self.class.dim + 1;
        let mut objective = vec![0.0; n + 1];
        objective[n] = 1.0;
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| {
                let mut g = r.clone();
                g.push(-1.0);
                g
            })
            .collect();
        let mut lower = self.class.lower();
        lower.push(-1.0);
        let mut upper = self.class.upper();
        upper.push(1.0);
        self.lp_solves.fetch_add(1, Ordering::Relaxed);
        Ok(maximize_with_cuts(&objective, &rows, &lower, &upper)?.value)
    }

    fn check_realizable(&self, last: Option<(Vec<f64>, ActionId)>) -> Result<()> {
        if self.separation_margin()? > SIGN_TOL {
            return Ok(());
        }
        let (features, action) = last.unwrap_or_else(|| {
            let e = self.dataset.entries().last().expect("nonempty when unrealizable");
            (e.features.clone(), e.action)
        });
        Err(Error::Realizability { features, action })
    }

    fn optimize(&self, objective: &[f64]) -> Result<f64> {
        self.lp_solves.fetch_add(1, Ordering::Relaxed);
        match maximize_with_cuts(objective, &self.rows, &self.class.lower(), &self.class.upper()) {
            Ok(s) => Ok(s.value),
            Err(Error::Infeasible) => {
                let e = self.dataset.entries().last();
                Err(Error::Realizability {
                    features: e.map(|e| e.features.clone()).unwrap_or_default(),
                    action: e.map_or(0, |e| e.action),
                })
            }
            Err(e) => Err(e),
        }
    }

    /// `c_max` and `c_min` of `w.phi + b` over the version space.
    pub fn score_range(&self, features: &[f64]) -> Result<ScoreRange> {
        let phi = self.class.augment(features)?;
        let c_max = self.optimize(&phi)?;
        let neg: Vec<f64> = phi.iter().map(|v| -v).collect();
        let c_min = -self.optimize(&neg)?;
        Ok(ScoreRange { c_max, c_min })
    }

    /// Status of a feature vector, ignoring which action produced it.
    pub fn feature_status(&self, features: &[f64]) -> Result<SafetyStatus> {
        if let Some(label) = self.dataset.label_of(features) {
            return Ok(if label > 0 {
                SafetyStatus::SurelySafe
            } else {
                SafetyStatus::SurelyUnsafe
            });
        }
        let key = FeatureKey::new(features);
        if let Some(&(status, at)) = self.cache.lock().expect("cache lock").get(&key) {
            if status != SafetyStatus::Disagreement || at == self.version {
                return Ok(status);
            }
        }
        let phi = self.class.augment(features)?;
        let neg: Vec<f64> = phi.iter().map(|v| -v).collect();
        // c_min first: most queries on a trained mask are surely safe
        let c_min = -self.optimize(&neg)?;
        let status = if c_min >= -SIGN_TOL {
            SafetyStatus::SurelySafe
        } else {
            ScoreRange {
                c_max: self.optimize(&phi)?,
                c_min,
            }
            .status()
        };
        self.cache
            .lock()
            .expect("cache lock")
            .insert(key, (status, self.version));
        Ok(status)
    }

    pub fn status(&self, features: &[f64], action: ActionId, a_safe: ActionId) -> Result<SafetyStatus> {
        if action == a_safe {
            return Ok(SafetyStatus::SurelySafe);
        }
        self.feature_status(features)
    }

    pub fn in_disagreement(&self, features: &[f64], action: ActionId, a_safe: ActionId) -> Result<bool> {
        Ok(self.status(features, action, a_safe)? == SafetyStatus::Disagreement)
    }

    pub fn surely_safe(&self, features: &[f64], action: ActionId, a_safe: ActionId) -> Result<bool> {
        Ok(self.status(features, action, a_safe)? == SafetyStatus::SurelySafe)
    }
}

/// One-shot membership test against a dataset.
pub fn rd_membership(
    class: HalfspaceClass,
    dataset: &SafetyDataset,
    features: &[f64],
    action: ActionId,
    a_safe: ActionId,
) -> Result<bool> {
    if action == a_safe {
        return Ok(false);
    }
    VersionSpace::from_dataset(class, dataset)?.in_disagreement(features, action, a_safe)
}

pub fn surely_safe(
    class: HalfspaceClass,
    dataset: &SafetyDataset,
    features: &[f64],
    action: ActionId,
    a_safe: ActionId,
) -> Result<bool> {
    if action == a_safe {
        return Ok(true);
    }
    VersionSpace::from_dataset(class, dataset)?.surely_safe(features, action, a_safe)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class1() -> HalfspaceClass {
        HalfspaceClass::new(1).unwrap()
    }

    #[test]
    fn empty_dataset_disagrees_everywhere() {
        let d = SafetyDataset::new();
        let c = HalfspaceClass::new(3).unwrap();
        assert!(rd_membership(c, &d, &[0.3, -0.2, 0.0], 1, 0).unwrap());
        assert!(!surely_safe(c, &d, &[0.3, -0.2, 0.0], 1, 0).unwrap());
        assert!(surely_safe(c, &d, &[0.3, -0.2, 0.0], 0, 0).unwrap());
        assert!(!rd_membership(c, &d, &[0.3, -0.2, 0.0], 0, 0).unwrap());
        let vs = VersionSpace::new(c);
        let r = vs.score_range(&[0.5, -0.5, 0.25]).unwrap();
        assert!((r.c_max - 2.25).abs() < 1e-9 && (r.c_min + 2.25).abs() < 1e-9);
    }

    #[test]
    fn own_label_is_decided() {
        let c = HalfspaceClass::new(2).unwrap();
        let mut vs = VersionSpace::new(c);
        vs.insert(LabeledPair::new(vec![0.4, 0.1], 2, true)).unwrap();
        vs.insert(LabeledPair::new(vec![-0.3, 0.9], 1, false)).unwrap();
        assert!(vs.surely_safe(&[0.4, 0.1], 2, 0).unwrap());
        assert!(!vs.in_disagreement(&[0.4, 0.1], 2, 0).unwrap());
        assert_eq!(vs.status(&[-0.3, 0.9], 3, 0).unwrap(), SafetyStatus::SurelyUnsafe);
        // the same answers via the LP rather than the exact-label shortcut
        let r = vs.score_range(&[0.4, 0.1]).unwrap();
        assert!(r.c_min >= -SIGN_TOL);
        let r = vs.score_range(&[-0.3, 0.9]).unwrap();
        assert!(r.c_max <= SIGN_TOL);
    }

    #[test]
    fn two_cluster_interval() {
        let d: Result<SafetyDataset> = vec![
            LabeledPair::new(vec![-1.0], 1, false),
            LabeledPair::new(vec![1.0], 1, true),
        ]
        .into_iter()
        .collect();
        let d = d.unwrap();
        assert!(rd_membership(class1(), &d, &[0.0], 1, 0).unwrap());
        // consistent hypotheses have threshold -b/w inside [-1, 1]
        assert!(surely_safe(class1(), &d, &[1.5], 1, 0).unwrap());
        let vs = VersionSpace::from_dataset(class1(), &d).unwrap();
        assert_eq!(vs.status(&[-1.5], 1, 0).unwrap(), SafetyStatus::SurelyUnsafe);
    }

    #[test]
    fn without_bias_origin_threshold() {
        let c = HalfspaceClass::with_bias(1, false).unwrap();
        let mut vs = VersionSpace::new(c);
        vs.insert(LabeledPair::new(vec![0.5], 1, true)).unwrap();
        assert!(vs.surely_safe(&[0.01], 1, 0).unwrap());
        assert_eq!(vs.status(&[-0.01], 1, 0).unwrap(), SafetyStatus::SurelyUnsafe);
    }

    #[test]
    fn rejects_unrealizable_labels() {
        let c = HalfspaceClass::with_bias(1, false).unwrap();
        let mut vs = VersionSpace::new(c);
        vs.insert(LabeledPair::new(vec![1.0], 1, true)).unwrap();
        let err = vs.insert(LabeledPair::new(vec![2.0], 2, false)).unwrap_err();
        assert!(matches!(err, Error::Realizability { action: 2, .. }));
        assert_eq!(vs.dataset().len(), 1);
        assert!(vs.surely_safe(&[3.0], 1, 0).unwrap());
    }

    #[test]
    fn cache_tracks_versions() {
        let mut vs = VersionSpace::new(class1());
        assert!(vs.in_disagreement(&[0.1], 1, 0).unwrap());
        let solves = vs.lp_solves();
        assert!(vs.in_disagreement(&[0.1], 1, 0).unwrap());
        assert_eq!(vs.lp_solves(), solves);
        vs.insert(LabeledPair::new(vec![0.25], 1, true)).unwrap();
        vs.insert(LabeledPair::new(vec![-0.25], 1, true)).unwrap();
        // b >= 0.25|w| > 0 on every strictly consistent hypothesis
        assert!(vs.surely_safe(&[0.1], 1, 0).unwrap());
        assert!(vs.in_disagreement(&[0.5], 1, 0).unwrap());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let vs = VersionSpace::new(class1());
        assert!(matches!(vs.score_range(&[1.0, 2.0]), Err(Error::Domain(_))));
    }
}
