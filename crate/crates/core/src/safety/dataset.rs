use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::ActionId;

/// Exact bit pattern of a feature vector, usable as a map key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FeatureKey(Box<[u64]>);

impl FeatureKey {
    pub fn new(features: &[f64]) -> Self {
        // -0.0 and 0.0 describe the same point
        Self(
            features
                .iter()
                .map(|&x| if x == 0.0 { 0 } else { x.to_bits() })
                .collect(),
        )
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.0.hash(&mut h);
        h.finish()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledPair {
    pub features: Vec<f64>,
    pub action: ActionId,
    pub label: i8,
}

impl LabeledPair {
    pub fn new(features: Vec<f64>, action: ActionId, safe: bool) -> Self {
        Self {
            features,
            action,
            label: if safe { 1 } else { -1 },
        }
    }

    pub fn is_safe(&self) -> bool {
        self.label > 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Insertion {
    Added,
    Duplicate,
}

/// Append-only labeled safety data. Labels attach to feature vectors; the
/// action is kept for bookkeeping and the wire format.
#[derive(Debug, Clone, Default)]
pub struct SafetyDataset {
    entries: Vec<LabeledPair>,
    pairs: HashMap<(FeatureKey, ActionId), i8>,
    by_features: HashMap<FeatureKey, i8>,
}

impl SafetyDataset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LabeledPair] {
        &self.entries
    }

    /// Rejects labels outside `{+1, -1}`, non-finite features and any pair
    /// contradicting an earlier label for the same feature vector.
    pub fn insert(&mut self, pair: LabeledPair) -> Result<Insertion> {
        if pair.label != 1 && pair.label != -1 {
            return Err(Error::ContractViolation(format!(
                "label must be +1 or -1, got {}",
                pair.label
            )));
        }
        if pair.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::ContractViolation("non-finite safety feature".into()));
        }
        let key = FeatureKey::new(&pair.features);
        if let Some(&existing) = self.by_features.get(&key) {
            if existing != pair.label {
                return Err(Error::Realizability {
                    features: pair.features,
                    action: pair.action,
                });
            }
        }
        match self.pairs.entry((key.clone(), pair.action)) {
            std::collections::hash_map::Entry::Occupied(_) => Ok(Insertion::Duplicate),
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(pair.label);
                self.by_features.insert(key, pair.label);
                self.entries.push(pair);
                Ok(Insertion::Added)
            }
        }
    }

    pub fn label_of(&self, features: &[f64]) -> Option<i8> {
        self.by_features.get(&FeatureKey::new(features)).copied()
    }

    pub fn contains(&self, features: &[f64], action: ActionId) -> bool {
        self.pairs
            .contains_key(&(FeatureKey::new(features), action))
    }

    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut d = Self::new();
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            d.insert(serde_json::from_str(&line)?)?;
        }
        Ok(d)
    }
}

impl FromIterator<LabeledPair> for Result<SafetyDataset> {
    fn from_iter<T: IntoIterator<Item = LabeledPair>>(iter: T) -> Self {
        let mut d = SafetyDataset::new();
        for p in iter {
            d.insert(p)?;
        }
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dedup_and_contradiction() {
        let mut d = SafetyDataset::new();
        assert_eq!(
            d.insert(LabeledPair::new(vec![0.5, 1.0], 1, true)).unwrap(),
            Insertion::Added
        );
        assert_eq!(
            d.insert(LabeledPair::new(vec![0.5, 1.0], 1, true)).unwrap(),
            Insertion::Duplicate
        );
        assert_eq!(
            d.insert(LabeledPair::new(vec![0.5, 1.0], 2, true)).unwrap(),
            Insertion::Added
        );
        assert!(matches!(
            d.insert(LabeledPair::new(vec![0.5, 1.0], 3, false)),
            Err(Error::Realizability { action: 3, .. })
        ));
        assert_eq!(d.len(), 2);
        assert_eq!(d.label_of(&[0.5, 1.0]), Some(1));
        assert!(d.contains(&[0.5, 1.0], 2));
        assert!(!d.contains(&[0.5, 1.0], 0));
    }

    #[test]
    fn rejects_bad_labels() {
        let mut d = SafetyDataset::new();
        let bad = LabeledPair {
            features: vec![1.0],
            action: 0,
            label: 0,
        };
        assert!(matches!(d.insert(bad), Err(Error::ContractViolation(_))));
        assert!(d.is_empty());
    }

    #[test]
    fn signed_zero_is_one_key() {
        assert_eq!(FeatureKey::new(&[0.0, 1.0]), FeatureKey::new(&[-0.0, 1.0]));
    }

    #[test]
    fn jsonl_round_trip() {
        let mut d = SafetyDataset::new();
        d.insert(LabeledPair::new(vec![0.25, -1.5], 0, true)).unwrap();
        d.insert(LabeledPair::new(vec![1e-17, 3.0], 2, false)).unwrap();
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"label\":1"));
        let back = SafetyDataset::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back.entries(), d.entries());
    }
}
