use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::train::head::PooledFeature;

/// Supervision attached to one pooled feature.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainExample {
    pub feature_id: String,
    /// Teacher embedding per axis name.
    pub teachers: BTreeMap<String, Vec<f64>>,
    /// Label per attribute (speaker, sentence, dialect, ...).
    pub labels: BTreeMap<String, String>,
    /// Explicit positive partner for pair-based contrastive training.
    pub positive: Option<String>,
}

impl TrainExample {
    pub fn new(feature_id: impl Into<String>) -> Self {
        Self {
            feature_id: feature_id.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Item {
    pub feature: PooledFeature,
    pub example: TrainExample,
    pub positive: Option<usize>,
}

/// Features joined with their supervision, validated for consistency.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub(crate) items: Vec<Item>,
    by_id: HashMap<String, usize>,
    feature_dim: usize,
}

impl TrainSet {
    /// Joins features with supervision by id. Features without a matching
    /// example get an empty one.
    pub fn new(features: Vec<PooledFeature>, supervision: Vec<TrainExample>) -> Result<Self> {
        let Some(first) = features.first() else {
            return Err(Error::ConfigInvalid("training set has no features".into()));
        };
        let feature_dim = first.vector.len();
        let mut by_id = HashMap::with_capacity(features.len());
        for (i, f) in features.iter().enumerate() {
            if f.vector.len() != feature_dim {
                return Err(Error::dim(format!("feature `{}`", f.id), feature_dim, f.vector.len()));
            }
            if let Some(col) = f.vector.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite { row: i, col });
            }
            if by_id.insert(f.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(f.id.clone()));
            }
        }
        let mut examples: Vec<Option<TrainExample>> = vec![None; features.len()];
        for ex in supervision {
            let i = *by_id
                .get(&ex.feature_id)
                .ok_or_else(|| Error::UnknownId(ex.feature_id.clone()))?;
            if examples[i].is_some() {
                return Err(Error::DuplicateId(ex.feature_id.clone()));
            }
            examples[i] = Some(ex);
        }
        let mut items = Vec::with_capacity(features.len());
        for (feature, ex) in features.into_iter().zip(examples) {
            let example = ex.unwrap_or_else(|| TrainExample::new(feature.id.clone()));
            let positive = match &example.positive {
                Some(p) => Some(*by_id.get(p).ok_or_else(|| Error::UnknownId(p.clone()))?),
                None => None,
            };
            items.push(Item {
                feature,
                example,
                positive,
            });
        }
        Ok(Self {
            items,
            by_id,
            feature_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn feature(&self, i: usize) -> &PooledFeature {
        &self.items[i].feature
    }

    pub fn example(&self, i: usize) -> &TrainExample {
        &self.items[i].example
    }

    pub fn positive_of(&self, i: usize) -> Option<usize> {
        self.items[i].positive
    }

    /// Every label key that appears on any item, sorted.
    pub fn label_keys(&self) -> Vec<String> {
        let keys: BTreeSet<&String> = self
            .items
            .iter()
            .flat_map(|it| it.example.labels.keys())
            .collect();
        keys.into_iter().cloned().collect()
    }

    /// Restricts the set to the given item positions (e.g. a train/held-out
    /// split). Positive partners outside the subset are dropped.
    pub fn subset(&self, keep: &[usize]) -> Result<Self> {
        let ids: BTreeSet<&str> = keep.iter().map(|&i| self.items[i].feature.id.as_str()).collect();
        let features = keep.iter().map(|&i| self.items[i].feature.clone()).collect();
        let examples = keep
            .iter()
            .map(|&i| {
                let mut ex = self.items[i].example.clone();
                if ex.positive.as_deref().is_some_and(|p| !ids.contains(p)) {
                    ex.positive = None;
                }
                ex
            })
            .collect();
        Self::new(features, examples)
    }
}
