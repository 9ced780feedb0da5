//! Factor-partitioned embeddings for attribute-conditioned retrieval.
//!
//! An item is embedded as one vector made of per-axis unit slices (semantic
//! content, speaker identity, dialect, ...). Retrieval scores pairs with a
//! signed weighted sum of per-axis cosines, so a query can ask for items
//! that say the same thing while actively pushing away items from the same
//! speaker.
//!
//! - [`embedding`]: schemas, partitioned embeddings, weighted similarity
//! - [`train`]: projection heads and their training objectives
//! - [`index`]: exact top-k retrieval and rank lookup
//! - [`eval`]: cross-corpus precision, metric ceilings, preference-flip reports
//! - [`io`]: vector blobs, manifests, synthetic planted-factor data

// `!(x >= floor)` is deliberate: NaN has to fail these checks too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod embedding;
pub mod error;
pub mod eval;
pub mod index;
pub mod io;
pub mod rng;
pub mod train;

pub use embedding::{
    axis_cosine, l2_normalize, weighted_similarity, Axis, AxisSchema, PartitionedEmbedding,
    QueryWeights,
};
pub use error::{Error, Result};
pub use index::{Index, ItemFilter, ItemRecord, QueryOptions, RetrievalResult};
