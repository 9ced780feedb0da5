//! File formats, dataset loading and synthetic data.
//!
//! - `FPEB` vector blobs ([`blob`])
//! - JSON-lines manifests referencing blob rows ([`manifest`])
//! - index directories and embedding sets ([`store`])
//! - the planted-factor generator ([`synth`])
//!
//! All integers are little-endian. Vectors are stored as f32 and computed
//! with as f64.

pub mod blob;
pub mod manifest;
pub mod store;
pub mod synth;

pub use blob::{read_blob, write_blob, Matrix};
pub use manifest::{
    load_dataset, load_embeddings, load_features, BlobRef, Dataset, FeatureDataset, ItemMeta, Manifest,
    ManifestEntry, ManifestKind,
};
pub use store::{load_index, save_index, write_embeddings};
pub use synth::{generate_synthetic, write_synthetic, Mixing, SynthConfig, SynthData};
