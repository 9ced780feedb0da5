//! `FPEB` vector blobs: a 14-byte header (magic, u16 version, u32 rows,
//! u32 dim) followed by little-endian f32 values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"FPEB";
pub const BLOB_VERSION: u16 = 1;
pub const BLOB_HEADER_LEN: u64 = 14;

/// Dense row-major f32 matrix as stored in a blob.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::dim("matrix data", rows * dim, data.len()));
        }
        Ok(Self { rows, dim, data })
    }

    /// Rounds f64 rows to f32. All rows must share one length.
    pub fn from_rows<R: AsRef<[f64]>>(dim: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::dim(format!("row {i}"), dim, r.len()));
            }
            data.extend(r.iter().map(|&x| x as f32));
        }
        Ok(Self {
            rows: rows.len(),
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&x| x as f64).collect()
    }

    fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            Some(p) => Err(Error::NonFinite {
                row: p / self.dim.max(1),
                col: p % self.dim.max(1),
            }),
            None => Ok(()),
        }
    }
}

/// Byte offset of row `row` in a blob of dimension `dim`.
pub fn row_offset(row: usize, dim: usize) -> u64 {
    BLOB_HEADER_LEN + 4 * (row as u64) * (dim as u64)
}

pub fn encode_blob(m: &Matrix) -> Result<Vec<u8>> {
    m.check_finite()?;
    let rows = u32::try_from(m.rows).map_err(|_| Error::ConfigInvalid("row count exceeds u32".into()))?;
    let dim = u32::try_from(m.dim).map_err(|_| Error::ConfigInvalid("dimension exceeds u32".into()))?;
    let mut out = Vec::with_capacity(BLOB_HEADER_LEN as usize + 4 * m.data.len());
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    for x in &m.data {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_blob(bytes: &[u8], path: &Path) -> Result<Matrix> {
    if bytes.len() < BLOB_HEADER_LEN as usize {
        if bytes.len() >= 4 && &bytes[..4] != BLOB_MAGIC {
            return Err(bad_magic(bytes, path));
        }
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected: BLOB_HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    if &bytes[..4] != BLOB_MAGIC {
        return Err(bad_magic(bytes, path));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != BLOB_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.into(),
            version,
        });
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let expected = row_offset(rows, dim);
    if bytes.len() as u64 != expected {
        return Err(Error::TruncatedFile {
            path: path.into(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[BLOB_HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = Matrix { rows, dim, data };
    m.check_finite()?;
    Ok(m)
}

fn bad_magic(bytes: &[u8], path: &Path) -> Error {
    Error::BadMagic {
        path: path.into(),
        expected: *BLOB_MAGIC,
        found: bytes[..4].try_into().unwrap(),
    }
}

pub fn write_blob(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_blob(m)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingBlob(path.into())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_blob(&bytes, path)
}
