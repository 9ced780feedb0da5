//! Cross-corpus precision, metric ceilings and the preference-flip report.
//!
//! A hit is an index item from a different corpus than the query that reads
//! the same sentence. P@1 looks at the unfiltered top result; P@k for k > 1
//! looks at the first k items of the ranking restricted to other corpora.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::embedding::QueryWeights;
use crate::error::{Error, Result};
use crate::index::{Index, ItemFilter, ItemRecord, QueryOptions};

pub const SENTENCE_KEY: &str = "sentence";
pub const SPEAKER_KEY: &str = "speaker";
/// The k values reported alongside mean ranks.
pub const REPORT_KS: [usize; 2] = [1, 10];
/// Table cell for a category with no items (U+2014).
pub const EMPTY_CELL: &str = "\u{2014}";

#[derive(Clone, Debug)]
pub struct QuerySet {
    pub queries: Vec<ItemRecord>,
    /// Label field defining "same sentence".
    pub sentence_key: String,
    /// Label field defining "same speaker".
    pub speaker_key: String,
}

impl QuerySet {
    pub fn new(queries: Vec<ItemRecord>) -> Result<Self> {
        if queries.is_empty() {
            return Err(Error::ConfigInvalid("query set is empty".into()));
        }
        Ok(Self {
            queries,
            sentence_key: SENTENCE_KEY.into(),
            speaker_key: SPEAKER_KEY.into(),
        })
    }

    /// Index items passing `filter` (all items without one), in index order.
    pub fn from_index(index: &Index, filter: Option<&ItemFilter>) -> Result<Self> {
        let queries = index
            .items()
            .iter()
            .filter(|it| filter.is_none_or(|f| f.admits(it)))
            .cloned()
            .collect();
        Self::new(queries)
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    fn sentence_of<'a>(&self, item: &'a ItemRecord) -> Result<&'a str> {
        required(item, &self.sentence_key)
    }

    fn speaker_of<'a>(&self, item: &'a ItemRecord) -> Result<&'a str> {
        required(item, &self.speaker_key)
    }
}

fn required<'a>(item: &'a ItemRecord, key: &str) -> Result<&'a str> {
    item.label(key).ok_or_else(|| Error::MissingLabel {
        id: item.id.clone(),
        label: key.to_string(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Leave each query's own id out of its ranking.
    pub exclude_self: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { exclude_self: true }
    }
}

impl EvalOptions {
    fn query_options(&self, q: &ItemRecord) -> QueryOptions {
        if self.exclude_self {
            QueryOptions::excluding(q.id.clone())
        } else {
            QueryOptions::default()
        }
    }
}

fn is_hit(query: &ItemRecord, query_sentence: &str, item: &ItemRecord, sentence_key: &str) -> bool {
    item.corpus != query.corpus && item.label(sentence_key) == Some(query_sentence)
}

/// Hit positions of one query's ranking.
#[derive(Clone, Copy, Debug, Default)]
struct HitProfile {
    top1: bool,
    /// 1-based position of the first hit in the cross-corpus-only list.
    first_cross: Option<usize>,
}

impl HitProfile {
    fn hit_at(&self, k: usize) -> bool {
        if k == 1 {
            self.top1
        } else {
            self.first_cross.is_some_and(|p| p <= k)
        }
    }
}

fn hit_profile<'a>(
    qs: &QuerySet,
    query: &ItemRecord,
    ranked: impl Iterator<Item = &'a ItemRecord>,
) -> Result<HitProfile> {
    let sentence = qs.sentence_of(query)?;
    let mut profile = HitProfile::default();
    let mut cross = 0;
    for (pos, item) in ranked.enumerate() {
        let hit = is_hit(query, sentence, item, &qs.sentence_key);
        if pos == 0 {
            profile.top1 = hit;
        }
        if item.corpus != query.corpus {
            cross += 1;
            if hit {
                profile.first_cross = Some(cross);
                break;
            }
        }
    }
    Ok(profile)
}

/// Fraction of queries with a hit at `k`.
pub fn precision_at_k(qs: &QuerySet, index: &Index, w: &QueryWeights, k: usize, opts: EvalOptions) -> Result<f64> {
    if k == 0 {
        return Err(Error::ConfigInvalid("k must be at least 1".into()));
    }
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let mut hits = 0;
    for q in &qs.queries {
        let ranking = index.ranking(&q.embedding, w, &opts.query_options(q))?;
        let p = hit_profile(qs, q, ranking.iter().map(|s| &index.items()[s.item]))?;
        hits += usize::from(p.hit_at(k));
    }
    Ok(hits as f64 / qs.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ceiling {
    pub retrievable: usize,
    pub total: usize,
    pub fraction: f64,
}

impl Ceiling {
    pub fn from_counts(retrievable: usize, total: usize) -> Self {
        let fraction = if total == 0 { 0.0 } else { retrievable as f64 / total as f64 };
        Self {
            retrievable,
            total,
            fraction,
        }
    }

    /// e.g. `9.9%`
    pub fn render(&self) -> String {
        format!("{}%", format_percent(self.fraction))
    }
}

/// Queries with at least one cross-corpus same-sentence item in the index.
pub fn metric_ceiling(qs: &QuerySet, index: &Index) -> Result<Ceiling> {
    let mut retrievable = 0;
    for q in &qs.queries {
        let sentence = qs.sentence_of(q)?;
        if index.items().iter().any(|it| is_hit(q, sentence, it, &qs.sentence_key)) {
            retrievable += 1;
        }
    }
    Ok(Ceiling::from_counts(retrievable, qs.len()))
}

/// A fraction as a percentage with one decimal, without the sign.
pub fn format_percent(x: f64) -> String {
    format!("{:.1}", x * 100.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipCategory {
    SsSameSpk,
    SsDiffSpk,
    DsSameSpk,
    DsDiffSpk,
}

impl FlipCategory {
    pub const ALL: [FlipCategory; 4] = [Self::SsSameSpk, Self::SsDiffSpk, Self::DsSameSpk, Self::DsDiffSpk];

    pub fn of(same_sentence: bool, same_speaker: bool) -> Self {
        match (same_sentence, same_speaker) {
            (true, true) => Self::SsSameSpk,
            (true, false) => Self::SsDiffSpk,
            (false, true) => Self::DsSameSpk,
            (false, false) => Self::DsDiffSpk,
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Self::SsSameSpk => "ss/same",
            Self::SsDiffSpk => "ss/diff",
            Self::DsSameSpk => "ds/same",
            Self::DsDiffSpk => "ds/diff",
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// One value per category; `None` for a category with no members.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CategoryValues<T> {
    pub ss_same_spk: T,
    pub ss_diff_spk: T,
    pub ds_same_spk: T,
    pub ds_diff_spk: T,
}

impl<T: Copy> CategoryValues<T> {
    fn from_fn(f: impl Fn(FlipCategory) -> T) -> Self {
        Self {
            ss_same_spk: f(FlipCategory::SsSameSpk),
            ss_diff_spk: f(FlipCategory::SsDiffSpk),
            ds_same_spk: f(FlipCategory::DsSameSpk),
            ds_diff_spk: f(FlipCategory::DsDiffSpk),
        }
    }

    pub fn get(&self, c: FlipCategory) -> T {
        match c {
            FlipCategory::SsSameSpk => self.ss_same_spk,
            FlipCategory::SsDiffSpk => self.ss_diff_spk,
            FlipCategory::DsSameSpk => self.ds_same_spk,
            FlipCategory::DsDiffSpk => self.ds_diff_spk,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub weights: QueryWeights,
    pub per_category_mean_rank: CategoryValues<Option<f64>>,
    /// (query, item) pairs per category.
    pub per_category_count: CategoryValues<usize>,
    /// Keyed by k as a string.
    pub p_at: std::collections::BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    /// `item`: each category's mean is over all its (query, item) pairs.
    pub mean_rank_aggregation: String,
    pub self_excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub settings: Vec<SettingReport>,
    pub ceiling: f64,
    pub n_queries: usize,
    pub n_retrievable: usize,
    pub metadata: ReportMetadata,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::ConfigInvalid(format!("bad report JSON: {e}")))
    }

    pub fn ceiling(&self) -> Ceiling {
        Ceiling::from_counts(self.n_retrievable, self.n_queries)
    }
}

/// Ranks every non-excluded index item for every query under each weight
/// setting and averages ranks per category.
pub fn preference_flip_report(
    qs: &QuerySet,
    index: &Index,
    settings: &[QueryWeights],
    opts: EvalOptions,
) -> Result<EvalReport> {
    if settings.is_empty() {
        return Err(Error::ConfigInvalid("at least one weight setting is required".into()));
    }
    // Labels are checked once up front so a missing one fails before any scoring.
    let mut item_labels = Vec::with_capacity(index.len());
    for it in index.items() {
        item_labels.push((qs.sentence_of(it)?, qs.speaker_of(it)?));
    }
    let mut query_labels = Vec::with_capacity(qs.len());
    for q in &qs.queries {
        query_labels.push((qs.sentence_of(q)?, qs.speaker_of(q)?));
    }
    let ceiling = metric_ceiling(qs, index)?;

    let mut reports = Vec::with_capacity(settings.len());
    for w in settings {
        let mut sums = [0.0f64; 4];
        let mut counts = [0usize; 4];
        let mut hits = [0usize; REPORT_KS.len()];
        for (q, (q_sent, q_spk)) in qs.queries.iter().zip(&query_labels) {
            let ranking = index.ranking(&q.embedding, w, &opts.query_options(q))?;
            for (pos, s) in ranking.iter().enumerate() {
                let (sent, spk) = item_labels[s.item];
                let c = FlipCategory::of(sent == *q_sent, spk == *q_spk);
                sums[c.slot()] += (pos + 1) as f64;
                counts[c.slot()] += 1;
            }
            let p = hit_profile(qs, q, ranking.iter().map(|s| &index.items()[s.item]))?;
            for (h, &k) in hits.iter_mut().zip(&REPORT_KS) {
                *h += usize::from(p.hit_at(k));
            }
        }
        reports.push(SettingReport {
            weights: w.clone(),
            per_category_mean_rank: CategoryValues::from_fn(|c| {
                (counts[c.slot()] > 0).then(|| sums[c.slot()] / counts[c.slot()] as f64)
            }),
            per_category_count: CategoryValues::from_fn(|c| counts[c.slot()]),
            p_at: REPORT_KS
                .iter()
                .zip(hits)
                .map(|(k, h)| (k.to_string(), h as f64 / qs.len() as f64))
                .collect(),
        });
    }
    Ok(EvalReport {
        settings: reports,
        ceiling: ceiling.fraction,
        n_queries: ceiling.total,
        n_retrievable: ceiling.retrievable,
        metadata: ReportMetadata {
            mean_rank_aggregation: "item".into(),
            self_excluded: opts.exclude_self,
            seed: None,
            config_hash: None,
        },
    })
}

/// Fixed-column text table: one row per weight setting.
pub fn report_render(report: &EvalReport) -> String {
    let mut header = vec!["weights".to_string()];
    header.extend(FlipCategory::ALL.iter().map(|c| c.column().to_string()));
    header.extend(REPORT_KS.iter().map(|k| format!("P@{k}")));
    let mut rows = vec![header];
    for s in &report.settings {
        let mut row = vec![s.weights.to_string()];
        row.extend(FlipCategory::ALL.iter().map(|&c| match s.per_category_mean_rank.get(c) {
            Some(r) => format!("{}", r.round() as i64),
            None => EMPTY_CELL.to_string(),
        }));
        row.extend(REPORT_KS.iter().map(|k| match s.p_at.get(&k.to_string()) {
            Some(p) => format_percent(*p),
            None => EMPTY_CELL.to_string(),
        }));
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (cell, &w))| {
                let pad = " ".repeat(w - cell.chars().count());
                if i == 0 { format!("{cell}{pad}") } else { format!("{pad}{cell}") }
            })
            .collect();
        writeln!(out, "{}", cells.join("  ").trim_end()).unwrap();
    }
    writeln!(
        out,
        "ceiling: {} ({} of {} queries retrievable)",
        report.ceiling().render(),
        report.n_retrievable,
        report.n_queries
    )
    .unwrap();
    out
}
