//! Evaluation metrics against brute-force recounts over full score tables.

use std::cmp::Ordering;
use std::sync::Arc;

use faxis::eval::{
    metric_ceiling, precision_at_k, preference_flip_report, EvalOptions, FlipCategory, QuerySet,
};
use faxis::io::synth::{generate_synthetic, SynthConfig, SynthData};
use faxis::{AxisSchema, Index, ItemFilter, ItemRecord, PartitionedEmbedding, QueryWeights};
use proptest::prelude::*;

/// Index whose embeddings are the planted latents themselves: the semantic
/// and speaker blocks, each renormalized.
fn planted_index(data: &SynthData) -> Index {
    let c = &data.config;
    let schema = Arc::new(AxisSchema::new([("semantic", c.semantic_dim), ("speaker_id", c.speaker_dim)]).unwrap());
    let records = data
        .items
        .iter()
        .zip(&data.latents)
        .map(|(m, l)| ItemRecord {
            id: m.id.clone(),
            corpus: m.corpus.clone(),
            labels: m.labels.clone(),
            embedding: PartitionedEmbedding::new(
                schema.clone(),
                l[..c.semantic_dim + c.speaker_dim].to_vec(),
            )
            .unwrap(),
        })
        .collect();
    Index::build(records).unwrap()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

/// Independent ranking: per-axis cosines recomputed from raw slices,
/// sorted by score then id.
fn oracle_ranking<'a>(index: &'a Index, q: &ItemRecord, w: &[(usize, f64)], exclude_self: bool) -> Vec<&'a ItemRecord> {
    let schema = index.schema();
    let mut scored: Vec<(f64, &ItemRecord)> = index
        .items()
        .iter()
        .filter(|it| !(exclude_self && it.id == q.id))
        .map(|it| {
            let s = w
                .iter()
                .map(|&(axis, wi)| {
                    let r = schema.range(axis);
                    wi * cosine(&q.embedding.data()[r.clone()], &it.embedding.data()[r])
                })
                .sum::<f64>();
            (s, it)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.id.cmp(&b.1.id)));
    scored.into_iter().map(|(_, it)| it).collect()
}

fn oracle_precision(index: &Index, qs: &QuerySet, w: &[(usize, f64)], k: usize) -> f64 {
    let mut hits = 0;
    for q in &qs.queries {
        let ranked = oracle_ranking(index, q, w, true);
        let good = |it: &ItemRecord| it.corpus != q.corpus && it.labels["sentence"] == q.labels["sentence"];
        let hit = if k == 1 {
            good(ranked[0])
        } else {
            ranked.iter().filter(|it| it.corpus != q.corpus).take(k).any(|it| good(it))
        };
        hits += usize::from(hit);
    }
    hits as f64 / qs.len() as f64
}

fn weights(sem: f64, spk: f64) -> QueryWeights {
    QueryWeights::new().with("semantic", sem).with("speaker_id", spk)
}

fn query_filter(corpus: &str) -> ItemFilter {
    ItemFilter {
        corpus: Some(corpus.into()),
        ..ItemFilter::default()
    }
}

#[test]
fn precision_matches_brute_force_recount() {
    let data = generate_synthetic(&SynthConfig {
        n_speakers: 5,
        n_sentences: 8,
        query_speakers: 2,
        noise_sigma: 0.4,
        seed: 21,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = planted_index(&data);
    let qs = QuerySet::from_index(&index, Some(&query_filter("query"))).unwrap();
    assert_eq!(qs.len(), 16);
    for (sem, spk) in [(1.0, 0.0), (1.0, -1.0), (0.3, 1.0), (-1.0, 0.5)] {
        let w = weights(sem, spk);
        for k in [1, 2, 3, 5, 10, 40] {
            let ours = precision_at_k(&qs, &index, &w, k, EvalOptions::default()).unwrap();
            let oracle = oracle_precision(&index, &qs, &[(0, sem), (1, spk)], k);
            assert_eq!(ours, oracle, "w=({sem},{spk}) k={k}");
        }
    }
}

#[test]
fn flip_report_moves_categories_in_the_expected_direction() {
    let data = generate_synthetic(&SynthConfig {
        noise_sigma: 0.1,
        seed: 5,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = planted_index(&data);
    let qs = QuerySet::from_index(&index, Some(&query_filter("query"))).unwrap();
    let r = preference_flip_report(
        &qs,
        &index,
        &[weights(1.0, 1.0), weights(1.0, -1.0)],
        EvalOptions { exclude_self: false },
    )
    .unwrap();
    let (pos, neg) = (&r.settings[0].per_category_mean_rank, &r.settings[1].per_category_mean_rank);
    assert!(neg.ds_same_spk.unwrap() > pos.ds_same_spk.unwrap());
    assert!(neg.ss_diff_spk.unwrap() < pos.ss_diff_spk.unwrap());
    assert!(r.settings[1].p_at["1"] >= 0.5);
    assert!(!r.metadata.self_excluded);
    assert_eq!(r.metadata.mean_rank_aggregation, "item");

    // brute-force mean rank of ss_diff_spk under the negative setting
    let (mut sum, mut n) = (0.0, 0usize);
    for q in &qs.queries {
        for (pos, it) in oracle_ranking(&index, q, &[(0, 1.0), (1, -1.0)], false).iter().enumerate() {
            if it.labels["sentence"] == q.labels["sentence"] && it.labels["speaker"] != q.labels["speaker"] {
                sum += (pos + 1) as f64;
                n += 1;
            }
        }
    }
    assert_eq!(neg.ss_diff_spk.unwrap(), sum / n as f64);
    assert_eq!(r.settings[1].per_category_count.ss_diff_spk, n);
}

#[test]
fn all_zero_weights_give_the_uniform_baseline() {
    let data = generate_synthetic(&SynthConfig {
        n_speakers: 4,
        n_sentences: 6,
        seed: 8,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = planted_index(&data);
    let qs = QuerySet::from_index(&index, None).unwrap();
    let r = preference_flip_report(&qs, &index, &[QueryWeights::new()], EvalOptions::default()).unwrap();
    let s = &r.settings[0];
    let n = index.len() - 1;
    let total: usize = FlipCategory::ALL.iter().map(|&c| s.per_category_count.get(c)).sum();
    assert_eq!(total, qs.len() * n);
    let weighted: f64 = FlipCategory::ALL
        .iter()
        .map(|&c| s.per_category_mean_rank.get(c).unwrap_or(0.0) * s.per_category_count.get(c) as f64)
        .sum();
    assert!((weighted / total as f64 - (n as f64 + 1.0) / 2.0).abs() < 1e-9);
    for c in [FlipCategory::SsDiffSpk, FlipCategory::DsSameSpk, FlipCategory::DsDiffSpk] {
        let m = s.per_category_mean_rank.get(c).unwrap();
        assert!(m >= 1.0 && m <= n as f64);
    }
}

#[test]
fn ceiling_counts_retrievable_queries() {
    let data = generate_synthetic(&SynthConfig {
        n_speakers: 3,
        n_sentences: 3,
        ..SynthConfig::default()
    })
    .unwrap();
    let index = planted_index(&data);
    // drop every reference item reading sentence 0 so those queries are unanswerable
    let kept: Vec<ItemRecord> = index
        .items()
        .iter()
        .filter(|it| !(it.corpus == "reference" && it.labels["sentence"] == "sent000"))
        .cloned()
        .collect();
    let index = Index::build(kept).unwrap();
    let qs = QuerySet::from_index(&index, Some(&query_filter("query"))).unwrap();
    let c = metric_ceiling(&qs, &index).unwrap();
    assert_eq!((c.retrievable, c.total), (2, 3));
    assert_eq!(c.render(), "66.7%");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ceiling_bounds_precision_and_precision_grows_with_k(
        seed in any::<u64>(),
        sem in -1.0f64..1.0,
        spk in -1.0f64..1.0,
        query_speakers in 1usize..4,
    ) {
        let data = generate_synthetic(&SynthConfig {
            n_speakers: 4,
            n_sentences: 5,
            query_speakers,
            noise_sigma: 0.5,
            seed,
            ..SynthConfig::default()
        }).unwrap();
        let index = planted_index(&data);
        let qs = QuerySet::from_index(&index, Some(&query_filter("query"))).unwrap();
        let ceiling = metric_ceiling(&qs, &index).unwrap().fraction;
        let w = weights(sem, spk);
        let mut prev = 0.0;
        for k in 1..=12 {
            let p = precision_at_k(&qs, &index, &w, k, EvalOptions::default()).unwrap();
            prop_assert!((0.0..=ceiling).contains(&p));
            if k > 2 {
                prop_assert!(p >= prev);
            }
            prev = p;
        }
    }
}
