//! Planted-factor synthetic data.
//!
//! Every label value on every axis gets a random unit prototype in its own
//! latent block. An item's latent vector is the concatenation of its noisy,
//! renormalized prototypes (the speaker block scaled by `speaker_scale`), and
//! its pooled feature is a fixed mixing matrix applied to that latent.
//! Teachers are the clean prototypes, so every supervision signal has a
//! known ground truth.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::blob::{write_blob, Matrix};
use crate::io::manifest::{BlobRef, ItemMeta, Manifest, ManifestEntry, ManifestKind};
use crate::rng::{stream, Stream};
use crate::train::{polar_project, PooledFeature, TrainExample};

pub const QUERY_CORPUS: &str = "query";
pub const REFERENCE_CORPUS: &str = "reference";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Orthonormal columns: the transpose unmixes exactly.
    Orthogonal,
    /// Gaussian entries; full column rank almost surely.
    RandomFullRank,
}

impl std::str::FromStr for Mixing {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "orthogonal" => Ok(Self::Orthogonal),
            "random_full_rank" | "random" => Ok(Self::RandomFullRank),
            _ => Err(format!("unknown mixing `{s}` (expected orthogonal or random_full_rank)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_speakers: usize,
    pub n_sentences: usize,
    pub n_dialects: usize,
    /// Recordings of each (speaker, sentence) pair.
    pub repetitions: usize,
    pub feature_dim: usize,
    pub semantic_dim: usize,
    pub speaker_dim: usize,
    pub dialect_dim: usize,
    pub noise_sigma: f64,
    pub mixing: Mixing,
    /// Scale of the speaker block before mixing; values above 1 make speaker
    /// variance dominate the pooled features.
    pub speaker_scale: f64,
    /// Speakers `0..query_speakers` are tagged with the query corpus, the
    /// rest with the reference corpus.
    pub query_speakers: usize,
    /// Label whose next same-valued item becomes each item's explicit
    /// positive partner.
    pub positive_label: Option<String>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            n_sentences: 25,
            n_dialects: 3,
            repetitions: 1,
            feature_dim: 64,
            semantic_dim: 16,
            speaker_dim: 16,
            dialect_dim: 4,
            noise_sigma: 0.1,
            mixing: Mixing::Orthogonal,
            speaker_scale: 3.0,
            query_speakers: 1,
            positive_label: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn latent_dim(&self) -> usize {
        self.semantic_dim + self.speaker_dim + self.dialect_dim
    }

    pub fn n_items(&self) -> usize {
        self.n_speakers * self.n_sentences * self.repetitions
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::ConfigInvalid(m.into()));
        if self.n_speakers == 0 || self.n_sentences == 0 || self.n_dialects == 0 || self.repetitions == 0 {
            return bad("speaker, sentence, dialect and repetition counts must be positive");
        }
        if self.semantic_dim == 0 || self.speaker_dim == 0 || self.dialect_dim == 0 {
            return bad("latent block dimensions must be positive");
        }
        if self.feature_dim < self.latent_dim() {
            return Err(Error::ConfigInvalid(format!(
                "feature_dim {} is smaller than the latent dimension {}",
                self.feature_dim,
                self.latent_dim()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a non-negative finite number");
        }
        if !(self.speaker_scale > 0.0 && self.speaker_scale.is_finite()) {
            return bad("speaker_scale must be positive");
        }
        if self.query_speakers > self.n_speakers {
            return bad("query_speakers exceeds n_speakers");
        }
        Ok(())
    }
}

/// Clean unit prototypes per label value.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub semantic: Vec<Vec<f64>>,
    pub speaker: Vec<Vec<f64>>,
    pub dialect: Vec<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct SynthData {
    pub config: SynthConfig,
    pub features: Vec<PooledFeature>,
    /// Labels, teachers (keyed by axis name) and positives per item.
    pub examples: Vec<TrainExample>,
    pub items: Vec<ItemMeta>,
    pub prototypes: Prototypes,
    /// `feature_dim × latent_dim`
    pub mixing: DMatrix<f64>,
    pub latents: Vec<Vec<f64>>,
}

fn unit_gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::embedding::l2_norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn noisy<R: Rng>(rng: &mut R, proto: &[f64], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return proto.to_vec();
    }
    let v: Vec<f64> = proto
        .iter()
        .map(|&p| p + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    crate::embedding::l2_normalize(&v).unwrap_or_else(|_| proto.to_vec())
}

pub fn speaker_label(s: usize) -> String {
    format!("spk{s:02}")
}

pub fn sentence_label(t: usize) -> String {
    format!("sent{t:03}")
}

pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthData> {
    config.validate()?;
    let mut rng = stream(config.seed, Stream::Synth);
    let prototypes = Prototypes {
        semantic: (0..config.n_sentences).map(|_| unit_gaussian(&mut rng, config.semantic_dim)).collect(),
        speaker: (0..config.n_speakers).map(|_| unit_gaussian(&mut rng, config.speaker_dim)).collect(),
        dialect: (0..config.n_dialects).map(|_| unit_gaussian(&mut rng, config.dialect_dim)).collect(),
    };
    let latent_dim = config.latent_dim();
    let gaussian = DMatrix::from_fn(config.feature_dim, latent_dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mixing = match config.mixing {
        Mixing::Orthogonal => polar_project(&gaussian),
        Mixing::RandomFullRank => gaussian / (latent_dim as f64).sqrt(),
    };

    let n = config.n_items();
    let mut features = Vec::with_capacity(n);
    let mut examples = Vec::with_capacity(n);
    let mut items = Vec::with_capacity(n);
    let mut latents = Vec::with_capacity(n);
    for s in 0..config.n_speakers {
        let d = s % config.n_dialects;
        let corpus = if s < config.query_speakers { QUERY_CORPUS } else { REFERENCE_CORPUS };
        for t in 0..config.n_sentences {
            for r in 0..config.repetitions {
                let id = format!("{}_{}_r{r}", speaker_label(s), sentence_label(t));
                let mut latent = noisy(&mut rng, &prototypes.semantic[t], config.noise_sigma);
                latent.extend(
                    noisy(&mut rng, &prototypes.speaker[s], config.noise_sigma)
                        .into_iter()
                        .map(|x| x * config.speaker_scale),
                );
                latent.extend(noisy(&mut rng, &prototypes.dialect[d], config.noise_sigma));
                let pooled = &mixing * DVector::from_column_slice(&latent);

                let labels: BTreeMap<String, String> = [
                    ("speaker".to_string(), speaker_label(s)),
                    ("sentence".to_string(), sentence_label(t)),
                    ("dialect".to_string(), format!("dial{d}")),
                ]
                .into();
                let mut ex = TrainExample::new(&id);
                ex.labels = labels.clone();
                ex.teachers.insert("semantic".into(), prototypes.semantic[t].clone());
                ex.teachers.insert("speaker_id".into(), prototypes.speaker[s].clone());
                ex.teachers.insert("dialect".into(), prototypes.dialect[d].clone());

                features.push(PooledFeature::new(&id, pooled.iter().copied().collect()));
                examples.push(ex);
                items.push(ItemMeta {
                    id,
                    corpus: corpus.to_string(),
                    labels,
                });
                latents.push(latent);
            }
        }
    }
    if let Some(key) = &config.positive_label {
        assign_positives(&mut examples, key);
    }
    Ok(SynthData {
        config: config.clone(),
        features,
        examples,
        items,
        prototypes,
        mixing,
        latents,
    })
}

/// Pairs each item with the next item (cyclically) sharing its `key` label.
fn assign_positives(examples: &mut [TrainExample], key: &str) {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, ex) in examples.iter().enumerate() {
        if let Some(v) = ex.labels.get(key) {
            groups.entry(v.clone()).or_default().push(i);
        }
    }
    for members in groups.values().filter(|m| m.len() > 1) {
        for (k, &i) in members.iter().enumerate() {
            let partner = members[(k + 1) % members.len()];
            examples[i].positive = Some(examples[partner].feature_id.clone());
        }
    }
}

pub const FEATURES_BLOB: &str = "features.fpeb";
pub const SYNTH_MANIFEST: &str = "manifest.jsonl";

pub fn teacher_blob_name(axis: &str) -> String {
    format!("teacher_{axis}.fpeb")
}

/// Writes `manifest.jsonl`, `features.fpeb` and one `teacher_<axis>.fpeb`
/// per axis into `dir`.
pub fn write_synthetic(data: &SynthData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let feats: Vec<&[f64]> = data.features.iter().map(|f| f.vector.as_slice()).collect();
    write_blob(dir.join(FEATURES_BLOB), &Matrix::from_rows(data.config.feature_dim, &feats)?)?;
    let axes = [
        ("semantic", data.config.semantic_dim),
        ("speaker_id", data.config.speaker_dim),
        ("dialect", data.config.dialect_dim),
    ];
    for (axis, dim) in axes {
        let rows: Vec<&[f64]> = data.examples.iter().map(|e| e.teachers[axis].as_slice()).collect();
        write_blob(dir.join(teacher_blob_name(axis)), &Matrix::from_rows(dim, &rows)?)?;
    }
    let mut m = Manifest::new(ManifestKind::Features, None);
    m.entries = data
        .items
        .iter()
        .zip(&data.examples)
        .enumerate()
        .map(|(row, (item, ex))| ManifestEntry {
            id: item.id.clone(),
            corpus: item.corpus.clone(),
            labels: item.labels.clone(),
            feature_ref: Some(BlobRef {
                blob: FEATURES_BLOB.into(),
                row,
            }),
            embedding_ref: None,
            teacher_refs: axes
                .iter()
                .map(|(axis, _)| {
                    (
                        axis.to_string(),
                        BlobRef {
                            blob: teacher_blob_name(axis),
                            row,
                        },
                    )
                })
                .collect(),
            positive: ex.positive.clone(),
        })
        .collect();
    m.write(dir.join(SYNTH_MANIFEST))
}
