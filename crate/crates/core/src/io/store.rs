//! On-disk index and embedding sets.
//!
//! An index directory holds `index.jsonl` (a header with the schema and blob
//! name, then one item header per line with its byte offset into the blob)
//! and `vectors.fpeb`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::embedding::{AxisSchema, PartitionedEmbedding};
use crate::error::{Error, Result};
use crate::index::{Index, ItemRecord};
use crate::io::blob::{read_blob, row_offset, write_blob, Matrix, BLOB_HEADER_LEN};
use crate::io::manifest::{unit_slices, BlobRef, Manifest, ManifestEntry, ManifestKind};

pub const INDEX_MANIFEST: &str = "index.jsonl";
pub const INDEX_BLOB: &str = "vectors.fpeb";
pub const INDEX_FORMAT: &str = "faxis-index";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct IndexHeader {
    format: String,
    version: u32,
    schema: AxisSchema,
    blob: String,
    items: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct IndexLine {
    id: String,
    corpus: String,
    labels: BTreeMap<String, String>,
    offset: u64,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

fn records_matrix(schema: &AxisSchema, records: &[ItemRecord]) -> Result<Matrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.embedding.data()).collect();
    Matrix::from_rows(schema.total_dim(), &rows)
}

pub fn save_index(index: &Index, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let schema = index.schema();
    write_blob(dir.join(INDEX_BLOB), &records_matrix(schema, index.items())?)?;
    let header = IndexHeader {
        format: INDEX_FORMAT.into(),
        version: 1,
        schema: schema.as_ref().clone(),
        blob: INDEX_BLOB.into(),
        items: index.len(),
    };
    let mut text = serde_json::to_string(&header).expect("header serializes");
    text.push('\n');
    for (row, item) in index.items().iter().enumerate() {
        let line = IndexLine {
            id: item.id.clone(),
            corpus: item.corpus.clone(),
            labels: item.labels.clone(),
            offset: row_offset(row, schema.total_dim()),
        };
        text.push_str(&serde_json::to_string(&line).expect("line serializes"));
        text.push('\n');
    }
    write_text(&dir.join(INDEX_MANIFEST), &text)
}

pub fn load_index(dir: impl AsRef<Path>) -> Result<Index> {
    let dir = dir.as_ref();
    let path = dir.join(INDEX_MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let err = |line: usize, message: String| Error::Manifest {
        path: path.clone(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, first) = lines.next().ok_or_else(|| err(1, "empty index manifest".into()))?;
    let header: IndexHeader =
        serde_json::from_str(first).map_err(|e| err(1, format!("bad header: {e}")))?;
    if header.format != INDEX_FORMAT || header.version != 1 {
        return Err(err(1, format!("unsupported index format {} v{}", header.format, header.version)));
    }
    let schema = Arc::new(header.schema);
    let blob = read_blob(dir.join(&header.blob))?;
    let dim = schema.total_dim();
    if blob.dim() != dim {
        return Err(Error::dim("index blob", dim, blob.dim()));
    }
    let stride = 4 * dim as u64;
    let mut records = Vec::with_capacity(header.items);
    let mut violations = Vec::new();
    for (n, line) in lines {
        let l: IndexLine = serde_json::from_str(line).map_err(|e| err(n + 1, e.to_string()))?;
        let rel = l.offset.checked_sub(BLOB_HEADER_LEN).filter(|r| r % stride == 0);
        let Some(rel) = rel else {
            return Err(err(n + 1, format!("offset {} is not a row boundary", l.offset)));
        };
        let row = (rel / stride) as usize;
        if row >= blob.rows() {
            return Err(Error::RefOutOfRange {
                id: l.id,
                blob: dir.join(&header.blob),
                row,
                rows: blob.rows(),
            });
        }
        let v = blob.row_f64(row);
        if !unit_slices(&schema, &v) {
            violations.push(l.id.clone());
            continue;
        }
        records.push(ItemRecord {
            id: l.id,
            corpus: l.corpus,
            labels: l.labels,
            embedding: PartitionedEmbedding::new(schema.clone(), v)?,
        });
    }
    if !violations.is_empty() {
        return Err(Error::NormViolation(violations));
    }
    if records.len() != header.items {
        return Err(err(1, format!("header lists {} items, found {}", header.items, records.len())));
    }
    Index::build(records)
}

/// Writes records as an embeddings manifest plus one blob next to it.
pub fn write_embeddings(
    manifest_path: impl AsRef<Path>,
    blob_name: &str,
    schema: &AxisSchema,
    records: &[ItemRecord],
) -> Result<()> {
    let manifest_path = manifest_path.as_ref();
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    write_blob(dir.join(blob_name), &records_matrix(schema, records)?)?;
    let mut m = Manifest::new(ManifestKind::Embeddings, Some(schema.clone()));
    m.entries = records
        .iter()
        .enumerate()
        .map(|(row, r)| ManifestEntry {
            id: r.id.clone(),
            corpus: r.corpus.clone(),
            labels: r.labels.clone(),
            embedding_ref: Some(BlobRef {
                blob: blob_name.into(),
                row,
            }),
            ..ManifestEntry::default()
        })
        .collect();
    m.write(manifest_path)
}
