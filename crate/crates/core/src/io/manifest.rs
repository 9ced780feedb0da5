//! JSON-lines manifests.
//!
//! Line 1 is a header naming the manifest kind (and, for embeddings, the
//! axis schema). Each following line is one entry whose vectors are
//! referenced as `(blob path, row)`; blob paths are relative to the
//! manifest's directory.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_norm, AxisSchema, PartitionedEmbedding, UNIT_NORM_TOLERANCE};
use crate::error::{Error, Result};
use crate::index::ItemRecord;
use crate::io::blob::{read_blob, Matrix};
use crate::train::{PooledFeature, TrainExample};

pub const MANIFEST_FORMAT: &str = "faxis-manifest";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifestKind {
    Features,
    Embeddings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub kind: ManifestKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schema: Option<AxisSchema>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlobRef {
    pub blob: String,
    pub row: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    #[serde(default)]
    pub corpus: String,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_ref: Option<BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding_ref: Option<BlobRef>,
    /// Teacher embeddings keyed by axis name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub teacher_refs: BTreeMap<String, BlobRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positive: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(kind: ManifestKind, schema: Option<AxisSchema>) -> Self {
        Self {
            header: ManifestHeader {
                format: MANIFEST_FORMAT.into(),
                version: MANIFEST_VERSION,
                kind,
                schema,
            },
            entries: Vec::new(),
        }
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_jsonl().as_bytes()))
            .map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Manifest {
            path: path.into(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| err(1, "empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
        if header.format != MANIFEST_FORMAT {
            return Err(err(1, format!("unexpected format `{}`", header.format)));
        }
        if header.version != MANIFEST_VERSION {
            return Err(err(1, format!("unsupported manifest version {}", header.version)));
        }
        if header.kind == ManifestKind::Embeddings && header.schema.is_none() {
            return Err(err(1, "embedding manifest lacks a schema block".into()));
        }
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (n, line) in lines {
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|e| err(n + 1, e.to_string()))?;
            if !seen.insert(e.id.clone()) {
                return Err(Error::DuplicateId(e.id));
            }
            let needed = match header.kind {
                ManifestKind::Features => e.feature_ref.is_some(),
                ManifestKind::Embeddings => e.embedding_ref.is_some(),
            };
            if !needed {
                return Err(err(n + 1, format!("entry `{}` lacks its vector reference", e.id)));
            }
            entries.push(e);
        }
        Ok(Self { header, entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

/// Loads each referenced blob once.
struct BlobCache {
    base: PathBuf,
    blobs: HashMap<String, Matrix>,
}

impl BlobCache {
    fn new(manifest_path: &Path) -> Self {
        Self {
            base: manifest_path.parent().map(Path::to_path_buf).unwrap_or_default(),
            blobs: HashMap::new(),
        }
    }

    fn row(&mut self, id: &str, r: &BlobRef) -> Result<Vec<f64>> {
        if !self.blobs.contains_key(&r.blob) {
            let m = read_blob(self.base.join(&r.blob))?;
            self.blobs.insert(r.blob.clone(), m);
        }
        let m = &self.blobs[&r.blob];
        if r.row >= m.rows() {
            return Err(Error::RefOutOfRange {
                id: id.to_string(),
                blob: self.base.join(&r.blob),
                row: r.row,
                rows: m.rows(),
            });
        }
        Ok(m.row_f64(r.row))
    }
}

/// Item identity and labels without a vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub id: String,
    pub corpus: String,
    pub labels: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct FeatureDataset {
    pub features: Vec<PooledFeature>,
    pub examples: Vec<TrainExample>,
    pub items: Vec<ItemMeta>,
}

#[derive(Clone, Debug)]
pub enum Dataset {
    Features(FeatureDataset),
    Embeddings {
        schema: Arc<AxisSchema>,
        records: Vec<ItemRecord>,
    },
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    match manifest.header.kind {
        ManifestKind::Features => load_features_from(&manifest, path).map(Dataset::Features),
        ManifestKind::Embeddings => {
            let (schema, records) = load_embeddings_from(&manifest, path)?;
            Ok(Dataset::Embeddings { schema, records })
        }
    }
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    if manifest.header.kind != ManifestKind::Features {
        return Err(Error::Manifest {
            path: path.into(),
            line: 1,
            message: "expected a features manifest".into(),
        });
    }
    load_features_from(&manifest, path)
}

fn load_features_from(manifest: &Manifest, path: &Path) -> Result<FeatureDataset> {
    let mut cache = BlobCache::new(path);
    let mut out = FeatureDataset {
        features: Vec::with_capacity(manifest.entries.len()),
        examples: Vec::with_capacity(manifest.entries.len()),
        items: Vec::with_capacity(manifest.entries.len()),
    };
    for e in &manifest.entries {
        let r = e.feature_ref.as_ref().expect("validated at parse");
        out.features.push(PooledFeature::new(&e.id, cache.row(&e.id, r)?));
        let mut ex = TrainExample::new(&e.id);
        ex.labels = e.labels.clone();
        ex.positive = e.positive.clone();
        for (axis, tr) in &e.teacher_refs {
            ex.teachers.insert(axis.clone(), cache.row(&e.id, tr)?);
        }
        out.examples.push(ex);
        out.items.push(ItemMeta {
            id: e.id.clone(),
            corpus: e.corpus.clone(),
            labels: e.labels.clone(),
        });
    }
    Ok(out)
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<(Arc<AxisSchema>, Vec<ItemRecord>)> {
    let path = path.as_ref();
    let manifest = Manifest::read(path)?;
    if manifest.header.kind != ManifestKind::Embeddings {
        return Err(Error::Manifest {
            path: path.into(),
            line: 1,
            message: "expected an embeddings manifest".into(),
        });
    }
    load_embeddings_from(&manifest, path)
}

fn load_embeddings_from(manifest: &Manifest, path: &Path) -> Result<(Arc<AxisSchema>, Vec<ItemRecord>)> {
    let schema = Arc::new(manifest.header.schema.clone().expect("validated at parse"));
    let mut cache = BlobCache::new(path);
    let mut rows = Vec::with_capacity(manifest.entries.len());
    let mut violations = Vec::new();
    for e in &manifest.entries {
        let r = e.embedding_ref.as_ref().expect("validated at parse");
        let v = cache.row(&e.id, r)?;
        if v.len() != schema.total_dim() {
            return Err(Error::dim(format!("embedding of `{}`", e.id), schema.total_dim(), v.len()));
        }
        if !unit_slices(&schema, &v) {
            violations.push(e.id.clone());
        }
        rows.push(v);
    }
    if !violations.is_empty() {
        return Err(Error::NormViolation(violations));
    }
    let records = manifest
        .entries
        .iter()
        .zip(rows)
        .map(|(e, v)| {
            Ok(ItemRecord {
                id: e.id.clone(),
                corpus: e.corpus.clone(),
                labels: e.labels.clone(),
                embedding: PartitionedEmbedding::new(schema.clone(), v)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((schema, records))
}

pub(crate) fn unit_slices(schema: &AxisSchema, v: &[f64]) -> bool {
    (0..schema.len()).all(|i| (l2_norm(&v[schema.range(i)]) - 1.0).abs() <= UNIT_NORM_TOLERANCE)
}
