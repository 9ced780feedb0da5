use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::embedding::ZERO_NORM;
use crate::error::{Error, Result};
use crate::train::loss::orthogonality_penalty;

/// A pooled encoder output for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledFeature {
    pub id: String,
    pub vector: Vec<f64>,
}

impl PooledFeature {
    pub fn new(id: impl Into<String>, vector: Vec<f64>) -> Self {
        Self {
            id: id.into(),
            vector,
        }
    }
}

/// Learned map from teacher space into an axis subspace, `D_axis × D_teacher`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix(pub DMatrix<f64>);

impl AlignmentMatrix {
    pub fn teacher_dim(&self) -> usize {
        self.0.ncols()
    }

    /// ‖AᵀA − I‖_F over the smaller side.
    pub fn orthogonality_error(&self) -> f64 {
        orthogonality_penalty(&self.0).sqrt()
    }
}

/// Linear projection from pooled-feature space into one axis subspace.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionHead {
    pub axis: String,
    /// `D_axis × D_enc`
    pub weight: DMatrix<f64>,
    pub bias: Option<DVector<f64>>,
    pub alignment: Option<AlignmentMatrix>,
}

impl ProjectionHead {
    pub fn new(axis: impl Into<String>, weight: DMatrix<f64>) -> Self {
        Self {
            axis: axis.into(),
            weight,
            bias: None,
            alignment: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().all(|x| x.is_finite())
            && self.bias.iter().flat_map(|b| b.iter()).all(|x| x.is_finite())
            && self
                .alignment
                .iter()
                .flat_map(|a| a.0.iter())
                .all(|x| x.is_finite())
    }

    /// `Wx + b`, before normalization.
    pub fn forward_raw(&self, x: &[f64]) -> Result<DVector<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::dim(
                format!("feature for head `{}`", self.axis),
                self.input_dim(),
                x.len(),
            ));
        }
        let mut z = &self.weight * DVector::from_column_slice(x);
        if let Some(b) = &self.bias {
            z += b;
        }
        Ok(z)
    }

    /// `normalize(Wx + b)`.
    pub fn project(&self, x: &PooledFeature) -> Result<Vec<f64>> {
        let z = self.forward_raw(&x.vector)?;
        let n = z.norm();
        if !(n >= ZERO_NORM) {
            return Err(Error::DegenerateHead {
                axis: self.axis.clone(),
                item: x.id.clone(),
            });
        }
        Ok(z.iter().map(|v| v / n).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.encode(&mut buf);
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Checkpoint layout, little-endian: magic `FPHD`, u16 version, u16
    /// axis-name length + UTF-8 name, u32 D_enc, u32 D_axis, f32 row-major W,
    /// u8 has-bias flag, optional f32 bias, then optionally u32 D_teacher and
    /// f32 row-major alignment matrix through to end of file.
    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(HEAD_MAGIC);
        out.extend_from_slice(&HEAD_VERSION.to_le_bytes());
        let name = self.axis.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(self.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(self.output_dim() as u32).to_le_bytes());
        write_row_major(out, &self.weight);
        match &self.bias {
            Some(b) => {
                out.push(1);
                b.iter().for_each(|x| out.extend_from_slice(&(*x as f32).to_le_bytes()));
            }
            None => out.push(0),
        }
        if let Some(a) = &self.alignment {
            out.extend_from_slice(&(a.teacher_dim() as u32).to_le_bytes());
            write_row_major(out, &a.0);
        }
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if &magic != HEAD_MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: *HEAD_MAGIC,
                found: magic,
            });
        }
        let version = r.u16()?;
        if version != HEAD_VERSION {
            return Err(Error::UnsupportedVersion {
                path: path.into(),
                version,
            });
        }
        let name_len = r.u16()? as usize;
        let axis = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Manifest {
            path: path.into(),
            line: 0,
            message: "axis name is not UTF-8".into(),
        })?;
        let d_enc = r.u32()? as usize;
        let d_axis = r.u32()? as usize;
        let weight = r.matrix(d_axis, d_enc)?;
        let bias = match r.take(1)?[0] {
            0 => None,
            _ => Some(DVector::from_column_slice(&r.f32s(d_axis)?)),
        };
        let alignment = if r.pos == bytes.len() {
            None
        } else {
            let d_teacher = r.u32()? as usize;
            Some(AlignmentMatrix(r.matrix(d_axis, d_teacher)?))
        };
        if r.pos != bytes.len() {
            return Err(Error::TruncatedFile {
                path: path.into(),
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(Self {
            axis,
            weight,
            bias,
            alignment,
        })
    }
}

const HEAD_MAGIC: &[u8; 4] = b"FPHD";
const HEAD_VERSION: u16 = 1;

fn write_row_major(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&(m[(i, j)] as f32).to_le_bytes());
        }
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::TruncatedFile {
                path: self.path.into(),
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n * 4)?;
        let out: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        if let Some(col) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { row: 0, col });
        }
        Ok(out)
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let data = self.f32s(rows * cols)?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }
}
