//! Exact top-k retrieval over an immutable set of items.
//!
//! Every admissible item is scored with the signed weighted similarity and
//! ordered by score descending, ties broken by ascending item id. The order
//! therefore never depends on insertion order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{AxisSchema, PartitionedEmbedding, QueryWeights, ResolvedWeights};
use crate::error::{Error, Result};

/// An indexed item: id, corpus tag, labels and embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemRecord {
    pub id: String,
    pub corpus: String,
    pub labels: BTreeMap<String, String>,
    pub embedding: PartitionedEmbedding,
}

impl ItemRecord {
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

/// Conjunction of corpus and label clauses. An empty filter admits
/// everything; a `label_ne` clause admits items that lack the label.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ItemFilter {
    pub corpus: Option<String>,
    pub corpus_ne: Option<String>,
    pub label_eq: BTreeMap<String, String>,
    pub label_ne: BTreeMap<String, String>,
}

impl ItemFilter {
    pub fn corpus_ne(corpus: impl Into<String>) -> Self {
        Self {
            corpus_ne: Some(corpus.into()),
            ..Self::default()
        }
    }

    pub fn matches(&self, corpus: &str, labels: &BTreeMap<String, String>) -> bool {
        self.corpus.as_deref().is_none_or(|c| c == corpus)
            && self.corpus_ne.as_deref().is_none_or(|c| c != corpus)
            && self
                .label_eq
                .iter()
                .all(|(k, v)| labels.get(k).is_some_and(|x| x == v))
            && self
                .label_ne
                .iter()
                .all(|(k, v)| labels.get(k).is_none_or(|x| x != v))
    }

    pub fn admits(&self, item: &ItemRecord) -> bool {
        self.matches(&item.corpus, &item.labels)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct QueryOptions {
    pub filter: Option<ItemFilter>,
    pub exclude_ids: BTreeSet<String>,
}

impl QueryOptions {
    pub fn excluding(id: impl Into<String>) -> Self {
        Self {
            filter: None,
            exclude_ids: [id.into()].into(),
        }
    }

    pub fn with_filter(mut self, filter: ItemFilter) -> Self {
        self.filter = Some(filter);
        self
    }

    fn admits(&self, item: &ItemRecord) -> bool {
        !self.exclude_ids.contains(&item.id) && self.filter.as_ref().is_none_or(|f| f.admits(item))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub item_id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
    pub per_axis: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryResults {
    pub results: Vec<RetrievalResult>,
    /// True when the filter and exclusions left nothing to rank.
    pub empty_after_filter: bool,
    /// Number of items that passed the filter and exclusions.
    pub candidates: usize,
}

/// One scored position in a ranking.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scored {
    pub item: usize,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct Index {
    schema: Arc<AxisSchema>,
    items: Vec<ItemRecord>,
    by_id: HashMap<String, usize>,
}

impl Index {
    pub fn build(items: Vec<ItemRecord>) -> Result<Self> {
        let Some(first) = items.first() else {
            return Err(Error::EmptyIndex);
        };
        let schema = first.embedding.schema().clone();
        let mut by_id = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if !item.embedding.same_schema(&first.embedding) {
                return Err(Error::SchemaMismatch);
            }
            if by_id.insert(item.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(item.id.clone()));
            }
        }
        Ok(Self {
            schema,
            items,
            by_id,
        })
    }

    pub fn schema(&self) -> &Arc<AxisSchema> {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items in insertion order.
    pub fn items(&self) -> &[ItemRecord] {
        &self.items
    }

    pub fn get(&self, id: &str) -> Option<&ItemRecord> {
        self.by_id.get(id).map(|&i| &self.items[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    fn order(&self, a: &Scored, b: &Scored) -> Ordering {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.items[a.item].id.cmp(&self.items[b.item].id))
    }

    fn check_query(&self, q: &PartitionedEmbedding) -> Result<()> {
        if q.schema().as_ref() == self.schema.as_ref() {
            Ok(())
        } else {
            Err(Error::SchemaMismatch)
        }
    }

    fn score_all(&self, q: &PartitionedEmbedding, w: &ResolvedWeights, opts: &QueryOptions) -> Vec<Scored> {
        self.items
            .iter()
            .enumerate()
            .filter(|(_, it)| opts.admits(it))
            .map(|(i, it)| Scored {
                item: i,
                score: w.score(q, &it.embedding),
            })
            .collect()
    }

    /// Every admissible item in ranking order.
    pub fn ranking(&self, q: &PartitionedEmbedding, w: &QueryWeights, opts: &QueryOptions) -> Result<Vec<Scored>> {
        self.check_query(q)?;
        let w = w.resolve(&self.schema)?;
        let mut scored = self.score_all(q, &w, opts);
        scored.sort_by(|a, b| self.order(a, b));
        Ok(scored)
    }

    /// The `k` best admissible items.
    pub fn query(
        &self,
        q: &PartitionedEmbedding,
        w: &QueryWeights,
        k: usize,
        opts: &QueryOptions,
    ) -> Result<QueryResults> {
        if k == 0 {
            return Err(Error::ConfigInvalid("k must be at least 1".into()));
        }
        self.check_query(q)?;
        let resolved = w.resolve(&self.schema)?;
        let mut scored = self.score_all(q, &resolved, opts);
        let candidates = scored.len();
        if k < scored.len() {
            scored.select_nth_unstable_by(k - 1, |a, b| self.order(a, b));
            scored.truncate(k);
        }
        scored.sort_by(|a, b| self.order(a, b));
        let results = scored
            .iter()
            .enumerate()
            .map(|(r, s)| self.result(q, s, r + 1))
            .collect();
        Ok(QueryResults {
            results,
            empty_after_filter: candidates == 0,
            candidates,
        })
    }

    pub fn result(&self, q: &PartitionedEmbedding, s: &Scored, rank: usize) -> RetrievalResult {
        let item = &self.items[s.item];
        let per_axis = self
            .schema
            .axes()
            .iter()
            .enumerate()
            .map(|(i, a)| (a.name.clone(), q.cosine_at(&item.embedding, i)))
            .collect();
        RetrievalResult {
            item_id: item.id.clone(),
            score: s.score,
            rank,
            per_axis,
        }
    }

    /// 1-based position of `target_id` in the full ranking.
    pub fn rank_of(
        &self,
        q: &PartitionedEmbedding,
        w: &QueryWeights,
        target_id: &str,
        opts: &QueryOptions,
    ) -> Result<usize> {
        self.check_query(q)?;
        let resolved = w.resolve(&self.schema)?;
        let t = self
            .position(target_id)
            .ok_or_else(|| Error::UnknownId(target_id.to_string()))?;
        if !opts.admits(&self.items[t]) {
            return Err(Error::ExcludedTarget(target_id.to_string()));
        }
        let target = Scored {
            item: t,
            score: resolved.score(q, &self.items[t].embedding),
        };
        let ahead = self
            .score_all(q, &resolved, opts)
            .iter()
            .filter(|s| self.order(s, &target) == Ordering::Less)
            .count();
        Ok(ahead + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_normalize;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn schema() -> Arc<AxisSchema> {
        Arc::new(AxisSchema::new([("semantic", 2), ("speaker_id", 2)]).unwrap())
    }

    fn item(id: &str, corpus: &str, data: &[f64]) -> ItemRecord {
        ItemRecord {
            id: id.into(),
            corpus: corpus.into(),
            labels: BTreeMap::new(),
            embedding: PartitionedEmbedding::new(schema(), data.to_vec()).unwrap(),
        }
    }

    fn random_index(rng: &mut ChaCha8Rng, n: usize) -> Index {
        let items = (0..n)
            .map(|i| {
                let mut d = Vec::new();
                for _ in 0..2 {
                    let v: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                    d.extend(l2_normalize(&v).unwrap());
                }
                item(&format!("item{i:03}"), "c", &d)
            })
            .collect();
        Index::build(items).unwrap()
    }

    #[test]
    fn build_errors() {
        assert!(matches!(Index::build(vec![]), Err(Error::EmptyIndex)));
        let a = item("a", "c", &[1.0, 0.0, 1.0, 0.0]);
        let idx = Index::build(vec![a.clone(), item("b", "c", &[0.0, 1.0, 1.0, 0.0]), item("c", "c", &[1.0, 0.0, 0.0, 1.0])]).unwrap();
        assert_eq!(idx.len(), 3);
        match Index::build(vec![a.clone(), a.clone()]) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("{other:?}"),
        }
        let other = Arc::new(AxisSchema::new([("semantic", 4)]).unwrap());
        let mut b = a.clone();
        b.id = "b".into();
        b.embedding = PartitionedEmbedding::new(other, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(Index::build(vec![a, b]), Err(Error::SchemaMismatch)));
    }

    #[test]
    fn self_first_and_exclusion() {
        let q = item("q", "c", &[1.0, 0.0, 1.0, 0.0]);
        let o = item("o", "c", &[0.0, 1.0, 0.0, 1.0]);
        let idx = Index::build(vec![o, q.clone()]).unwrap();
        let w = QueryWeights::new().with("semantic", 1.0);
        let r = idx.query(&q.embedding, &w, 2, &QueryOptions::default()).unwrap();
        assert_eq!(r.results[0].item_id, "q");
        assert_eq!(r.results[0].score, 1.0);
        assert_eq!(r.results[0].rank, 1);
        assert_eq!(r.results[1].item_id, "o");
        assert_eq!(r.results[1].score, 0.0);
        assert_eq!(r.results[1].per_axis["speaker_id"], 0.0);

        let r = idx.query(&q.embedding, &w, 2, &QueryOptions::excluding("q")).unwrap();
        assert_eq!(r.results.len(), 1);
        assert_eq!(r.results[0].item_id, "o");
        assert_eq!(r.results[0].rank, 1);

        let none = QueryOptions::default().with_filter(ItemFilter {
            corpus: Some("elsewhere".into()),
            ..ItemFilter::default()
        });
        let r = idx.query(&q.embedding, &w, 2, &none).unwrap();
        assert!(r.empty_after_filter && r.results.is_empty());
        assert!(idx.query(&q.embedding, &w, 0, &QueryOptions::default()).is_err());
        assert!(matches!(
            idx.query(&q.embedding, &QueryWeights::new().with("gender", 1.0), 1, &QueryOptions::default()),
            Err(Error::UnknownAxis { .. })
        ));
    }

    #[test]
    fn rank_of_tie_break_and_errors() {
        let q = item("q", "c", &[1.0, 0.0, 1.0, 0.0]);
        let a = item("a", "c", &[0.0, 1.0, 1.0, 0.0]);
        let b = item("b", "c", &[0.0, 1.0, 1.0, 0.0]);
        let idx = Index::build(vec![b, q.clone(), a]).unwrap();
        let w = QueryWeights::new().with("semantic", 1.0);
        let opts = QueryOptions::default();
        assert_eq!(idx.rank_of(&q.embedding, &w, "q", &opts).unwrap(), 1);
        assert_eq!(idx.rank_of(&q.embedding, &w, "a", &opts).unwrap(), 2);
        assert_eq!(idx.rank_of(&q.embedding, &w, "b", &opts).unwrap(), 3);
        assert!(matches!(idx.rank_of(&q.embedding, &w, "zz", &opts), Err(Error::UnknownId(_))));
        assert!(matches!(
            idx.rank_of(&q.embedding, &w, "q", &QueryOptions::excluding("q")),
            Err(Error::ExcludedTarget(_))
        ));
    }

    #[test]
    fn query_agrees_with_brute_force_and_rank_of() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let idx = random_index(&mut rng, 50);
            let q = idx.items()[trial].embedding.clone();
            let w = QueryWeights::new()
                .with("semantic", rng.random_range(-2.0..2.0))
                .with("speaker_id", rng.random_range(-2.0..2.0));
            let opts = QueryOptions::default();
            // oracle: independent full score table, sorted by (-score, id)
            let mut table: Vec<(f64, String)> = idx
                .items()
                .iter()
                .map(|it| {
                    let s: f64 = ["semantic", "speaker_id"]
                        .iter()
                        .map(|a| {
                            let x = q.split(a).unwrap();
                            let y = it.embedding.split(a).unwrap();
                            w.get(a) * x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>()
                        })
                        .sum();
                    (s, it.id.clone())
                })
                .collect();
            table.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let got = idx.query(&q, &w, 50, &opts).unwrap();
            for (r, (s, id)) in got.results.iter().zip(&table) {
                assert_eq!(&r.item_id, id);
                assert!((r.score - s).abs() < 1e-12);
                assert_eq!(idx.rank_of(&q, &w, id, &opts).unwrap(), r.rank);
            }
            let top5 = idx.query(&q, &w, 5, &opts).unwrap();
            assert_eq!(top5.results, got.results[..5].to_vec());
        }
    }

    #[test]
    fn negated_weights_reverse_ranking() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let idx = random_index(&mut rng, 40);
        let q = idx.items()[0].embedding.clone();
        let w = QueryWeights::new().with("semantic", 0.7).with("speaker_id", -1.3);
        let opts = QueryOptions::default();
        let fwd = idx.ranking(&q, &w, &opts).unwrap();
        let rev = idx.ranking(&q, &w.negated(), &opts).unwrap();
        let score_of = |r: &[Scored], i: usize| r.iter().find(|s| s.item == i).unwrap().score;
        for s in &fwd {
            assert_eq!(score_of(&rev, s.item), -s.score);
        }
        // random continuous scores: no ties, so the order reverses exactly
        let f: Vec<usize> = fwd.iter().map(|s| s.item).collect();
        let mut r: Vec<usize> = rev.iter().map(|s| s.item).collect();
        r.reverse();
        assert_eq!(f, r);
    }

    #[test]
    fn insertion_order_does_not_matter() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let idx = random_index(&mut rng, 30);
        let mut shuffled = idx.items().to_vec();
        shuffled.reverse();
        let idx2 = Index::build(shuffled).unwrap();
        let q = idx.items()[3].embedding.clone();
        let w = QueryWeights::new().with("semantic", 1.0);
        let a = idx.query(&q, &w, 30, &QueryOptions::default()).unwrap();
        let b = idx2.query(&q, &w, 30, &QueryOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn filter_clauses() {
        let mut labels = BTreeMap::new();
        labels.insert("speaker".to_string(), "s1".to_string());
        let f = ItemFilter {
            corpus_ne: Some("rehasp".into()),
            label_ne: [("speaker".to_string(), "s2".to_string())].into(),
            ..ItemFilter::default()
        };
        assert!(f.matches("osr", &labels));
        assert!(!f.matches("rehasp", &labels));
        assert!(f.matches("osr", &BTreeMap::new()));
        let eq = ItemFilter {
            label_eq: [("speaker".to_string(), "s1".to_string())].into(),
            ..ItemFilter::default()
        };
        assert!(eq.matches("x", &labels));
        assert!(!eq.matches("x", &BTreeMap::new()));
    }
}
