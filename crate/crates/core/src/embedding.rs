//! Axis schemas, factor-partitioned embeddings and the signed multi-axis
//! similarity.
//!
//! A [`PartitionedEmbedding`] is one flat vector whose contiguous slices are
//! per-axis unit vectors, laid out in [`AxisSchema`] order. Similarity between
//! two embeddings is a signed weighted sum of per-axis cosines:
//!
//! ```text
//! sim(a, b) = Σ_i w_i · cos(a_i, b_i)
//! ```
//!
//! Negative weights are allowed and repel items that agree on that axis.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm below which a vector is treated as zero.
pub const ZERO_NORM: f64 = 1e-12;

/// Allowed drift of an ingested slice from unit norm before it is renormalized
/// (or rejected, for strict validation).
pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub dim: usize,
}

/// Ordered list of named axes with fixed dimensions.
///
/// Slice offsets are derived from the order and the dims, so two schemas with
/// the same axes in the same order lay out embeddings identically.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AxisSchema {
    axes: Vec<Axis>,
    #[serde(skip)]
    offsets: Vec<usize>,
    #[serde(skip)]
    total_dim: usize,
}

impl AxisSchema {
    pub fn new<I, S>(axes: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, usize)>,
        S: Into<String>,
    {
        let axes: Vec<Axis> = axes
            .into_iter()
            .map(|(name, dim)| Axis {
                name: name.into(),
                dim,
            })
            .collect();
        Self::from_axes(axes)
    }

    pub fn from_axes(axes: Vec<Axis>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::InvalidSchema("schema has no axes".into()));
        }
        let mut offsets = Vec::with_capacity(axes.len());
        let mut total_dim = 0;
        for (i, axis) in axes.iter().enumerate() {
            if axis.name.is_empty() {
                return Err(Error::InvalidSchema(format!("axis {i} has an empty name")));
            }
            if axis.dim == 0 {
                return Err(Error::InvalidSchema(format!(
                    "axis `{}` has dimension 0",
                    axis.name
                )));
            }
            if axes[..i].iter().any(|a| a.name == axis.name) {
                return Err(Error::InvalidSchema(format!(
                    "duplicate axis name `{}`",
                    axis.name
                )));
            }
            offsets.push(total_dim);
            total_dim += axis.dim;
        }
        Ok(Self {
            axes,
            offsets,
            total_dim,
        })
    }

    /// Semantic 384 / speaker 256 / dialect 12.
    pub fn standard() -> Self {
        Self::standard_with_speaker_dim(256)
    }

    /// The standard layout with a different speaker dimension (512 for
    /// x-vector style speaker teachers).
    pub fn standard_with_speaker_dim(speaker_dim: usize) -> Self {
        Self::new([
            ("semantic", 384),
            ("speaker_id", speaker_dim),
            ("dialect", 12),
        ])
        .expect("standard schema is valid")
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.axes.is_empty()
    }

    pub fn total_dim(&self) -> usize {
        self.total_dim
    }

    pub fn names(&self) -> Vec<String> {
        self.axes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.axes.iter().position(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.position(name).ok_or_else(|| self.unknown_axis(name))
    }

    pub fn unknown_axis(&self, name: &str) -> Error {
        Error::UnknownAxis {
            axis: name.to_string(),
            valid: self.names(),
        }
    }

    /// Range of the `i`-th axis inside a flat embedding.
    pub fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i] + self.axes[i].dim
    }

    pub fn range_of(&self, name: &str) -> Result<std::ops::Range<usize>> {
        self.require(name).map(|i| self.range(i))
    }
}

impl<'de> Deserialize<'de> for AxisSchema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            axes: Vec<Axis>,
        }
        let raw = Raw::deserialize(d)?;
        AxisSchema::from_axes(raw.axes).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for AxisSchema {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.axes.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", a.name, a.dim)?;
        }
        Ok(())
    }
}

/// Scales `v` to unit L2 norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = l2_norm(v);
    if !(norm >= ZERO_NORM) {
        return Err(Error::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// One concatenated vector of per-axis unit slices.
///
/// Immutable once built. Slices within [`UNIT_NORM_TOLERANCE`] of unit norm
/// are stored verbatim; anything further off is renormalized at construction
/// and [`PartitionedEmbedding::was_renormalized`] reports it.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionedEmbedding {
    schema: Arc<AxisSchema>,
    data: Vec<f64>,
    renormalized: bool,
}

impl PartitionedEmbedding {
    pub fn new(schema: Arc<AxisSchema>, mut data: Vec<f64>) -> Result<Self> {
        if data.len() != schema.total_dim() {
            return Err(Error::dim("partitioned embedding", schema.total_dim(), data.len()));
        }
        if let Some(col) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        let mut renormalized = false;
        for i in 0..schema.len() {
            let slice = &mut data[schema.range(i)];
            let norm = l2_norm(slice);
            if norm < ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                slice.iter_mut().for_each(|x| *x /= norm);
                renormalized = true;
            }
        }
        Ok(Self {
            schema,
            data,
            renormalized,
        })
    }

    /// Builds an embedding only if every slice is already unit-norm within
    /// [`UNIT_NORM_TOLERANCE`]; returns the offending axis names otherwise.
    pub fn new_strict(schema: Arc<AxisSchema>, data: Vec<f64>) -> Result<Self, StrictError> {
        if data.len() != schema.total_dim() {
            return Err(StrictError::Invalid(Error::dim(
                "partitioned embedding",
                schema.total_dim(),
                data.len(),
            )));
        }
        let bad: Vec<String> = (0..schema.len())
            .filter(|&i| {
                let n = l2_norm(&data[schema.range(i)]);
                !((n - 1.0).abs() <= UNIT_NORM_TOLERANCE)
            })
            .map(|i| schema.axes()[i].name.clone())
            .collect();
        if !bad.is_empty() {
            return Err(StrictError::NotUnit(bad));
        }
        Self::new(schema, data).map_err(StrictError::Invalid)
    }

    /// Concatenates per-axis vectors in schema order.
    pub fn concat(schema: Arc<AxisSchema>, parts: &[Vec<f64>]) -> Result<Self> {
        if parts.len() != schema.len() {
            return Err(Error::dim("axis count", schema.len(), parts.len()));
        }
        let mut data = Vec::with_capacity(schema.total_dim());
        for (axis, part) in schema.axes().iter().zip(parts) {
            if part.len() != axis.dim {
                return Err(Error::dim(format!("axis `{}`", axis.name), axis.dim, part.len()));
            }
            data.extend_from_slice(part);
        }
        Self::new(schema, data)
    }

    pub fn schema(&self) -> &Arc<AxisSchema> {
        &self.schema
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn was_renormalized(&self) -> bool {
        self.renormalized
    }

    pub fn axis_slice(&self, i: usize) -> &[f64] {
        &self.data[self.schema.range(i)]
    }

    /// The unit vector of one axis.
    pub fn split(&self, axis: &str) -> Result<&[f64]> {
        let i = self.schema.require(axis)?;
        Ok(self.axis_slice(i))
    }

    pub fn same_schema(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.schema, &other.schema) || self.schema == other.schema
    }

    fn check_schema(&self, other: &Self) -> Result<()> {
        if self.same_schema(other) {
            Ok(())
        } else {
            Err(Error::SchemaMismatch)
        }
    }

    /// Cosine of the `i`-th axis slices, clamped to [-1, 1].
    pub fn cosine_at(&self, other: &Self, i: usize) -> f64 {
        let r = self.schema.range(i);
        dot(&self.data[r.clone()], &other.data[r]).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StrictError {
    #[error("axis slices are not unit-norm: {}", .0.join(", "))]
    NotUnit(Vec<String>),
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// Per-axis cosine between two embeddings that share a schema.
pub fn axis_cosine(a: &PartitionedEmbedding, b: &PartitionedEmbedding, axis: &str) -> Result<f64> {
    a.check_schema(b)?;
    let i = a.schema.require(axis)?;
    Ok(a.cosine_at(b, i))
}

/// Signed per-axis weights. Axes without an entry weigh 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueryWeights(BTreeMap<String, f64>);

impl QueryWeights {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, axis: impl Into<String>, weight: f64) -> Self {
        self.0.insert(axis.into(), weight);
        self
    }

    pub fn set(&mut self, axis: impl Into<String>, weight: f64) {
        self.0.insert(axis.into(), weight);
    }

    pub fn get(&self, axis: &str) -> f64 {
        self.0.get(axis).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Negates every weight.
    pub fn negated(&self) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), -v)).collect())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|(k, v)| (k.clone(), v * factor)).collect())
    }

    /// Parses `axis=value` pairs separated by commas, e.g.
    /// `semantic=1,speaker_id=-1.0`. An empty string yields no weights.
    pub fn parse(s: &str) -> std::result::Result<Self, String> {
        let mut out = Self::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected axis=value, got `{part}`"))?;
            let name = name.trim();
            if name.is_empty() {
                return Err(format!("missing axis name in `{part}`"));
            }
            let value: f64 = value
                .trim()
                .parse()
                .map_err(|_| format!("invalid weight `{}` for axis `{name}`", value.trim()))?;
            if !value.is_finite() {
                return Err(format!("weight for axis `{name}` is not finite"));
            }
            if out.0.insert(name.to_string(), value).is_some() {
                return Err(format!("axis `{name}` given twice"));
            }
        }
        Ok(out)
    }

    /// Aligns the weights with schema order, rejecting unknown axes.
    pub fn resolve(&self, schema: &AxisSchema) -> Result<ResolvedWeights> {
        let mut w = vec![0.0; schema.len()];
        for (name, value) in &self.0 {
            w[schema.require(name)?] = *value;
        }
        Ok(ResolvedWeights(w))
    }
}

impl fmt::Display for QueryWeights {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (k, v)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for QueryWeights {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::parse(s)
    }
}

impl<S: Into<String>> FromIterator<(S, f64)> for QueryWeights {
    fn from_iter<I: IntoIterator<Item = (S, f64)>>(iter: I) -> Self {
        Self(iter.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }
}

/// Weights laid out in schema order.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedWeights(pub Vec<f64>);

impl ResolvedWeights {
    /// Σ_i w_i · cos_i, folded left in schema order. Zero-weight axes are
    /// skipped; adding their 0 term would not change the sum.
    pub fn score(&self, a: &PartitionedEmbedding, b: &PartitionedEmbedding) -> f64 {
        let mut acc = 0.0;
        for (i, &w) in self.0.iter().enumerate() {
            if w != 0.0 {
                acc += w * a.cosine_at(b, i);
            }
        }
        // -0.0 and 0.0 must tie
        acc + 0.0
    }

    pub fn abs_sum(&self) -> f64 {
        self.0.iter().map(|w| w.abs()).sum()
    }
}

/// Signed weighted sum of per-axis cosines.
pub fn weighted_similarity(
    a: &PartitionedEmbedding,
    b: &PartitionedEmbedding,
    w: &QueryWeights,
) -> Result<f64> {
    a.check_schema(b)?;
    Ok(w.resolve(&a.schema)?.score(a, b))
}
