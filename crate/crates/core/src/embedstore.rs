//! EMB1 embedding exchange format.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 0..8         | ASCII magic `EMBV0001`                    |
//! | 8..12        | u32 header length `H`                     |
//! | 12..12+H     | UTF-8 JSON header (`n`, `d`, `dtype`, `variant`, `ids`) |
//! | 12+H..       | `n * d` f32 values, row-major             |

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{AtlasError, Result};

pub const MAGIC: &[u8; 8] = b"EMBV0001";
pub const DTYPE: &str = "f32le";

/// Dense row-major embedding matrix with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    data: Vec<f32>,
    n: usize,
    d: usize,
    ids: Vec<String>,
    variant: String,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    d: usize,
    dtype: String,
    variant: String,
    ids: Vec<String>,
}

impl EmbeddingMatrix {
    pub fn new(data: Vec<f32>, d: usize, ids: Vec<String>, variant: impl Into<String>) -> Result<Self> {
        let n = ids.len();
        if data.len() != n * d {
            return Err(AtlasError::InvalidArgument(format!(
                "{} values do not fill a {n}x{d} matrix",
                data.len()
            )));
        }
        let m = EmbeddingMatrix {
            data,
            n,
            d,
            ids,
            variant: variant.into(),
        };
        m.check_ids()?;
        Ok(m)
    }

    pub fn from_array(x: &Array2<f64>, ids: Vec<String>, variant: impl Into<String>) -> Result<Self> {
        let d = x.ncols();
        let data = x.iter().map(|&v| v as f32).collect();
        Self::new(data, d, ids, variant)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.ids.len());
        for id in &self.ids {
            if !seen.insert(id.as_str()) {
                return Err(AtlasError::InvalidArgument(format!("duplicate id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(AtlasError::NonFinite {
                row: p / self.d.max(1),
                col: p % self.d.max(1),
            }),
            None => Ok(()),
        }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.d
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn variant(&self) -> &str {
        &self.variant
    }

    pub fn set_variant(&mut self, variant: impl Into<String>) {
        self.variant = variant.into();
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    /// Widens to an f64 ndarray for the numeric kernels.
    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.n, self.d), self.data.iter().map(|&v| v as f64).collect())
            .expect("shape checked at construction")
    }

    /// Rows whose ids are listed, in the listed order.
    pub fn select(&self, ids: &[String]) -> Result<Self> {
        let pos: HashMap<&str, usize> = self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut data = Vec::with_capacity(ids.len() * self.d);
        for id in ids {
            let &i = pos.get(id.as_str()).ok_or_else(|| AtlasError::UnknownId(id.clone()))?;
            data.extend_from_slice(self.row(i));
        }
        Self::new(data, self.d, ids.to_vec(), self.variant.clone())
    }

    /// Serializes to EMB1 bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_finite()?;
        let header = Header {
            n: self.n,
            d: self.d,
            dtype: DTYPE.to_owned(),
            variant: self.variant.clone(),
            ids: self.ids.clone(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let hlen = u32::try_from(header.len())
            .map_err(|_| AtlasError::InvalidArgument("EMB1 header exceeds 4 GiB".into()))?;
        let mut out = Vec::with_capacity(12 + header.len() + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&hlen.to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| AtlasError::format(path, msg);
        if bytes.len() < 12 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic, not an EMB1 file".into()));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let hend = 12usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {hlen} exceeds file size {}", bytes.len())))?;
        let header: Header = serde_json::from_slice(&bytes[12..hend]).map_err(|e| bad(format!("header: {e}")))?;
        if header.dtype != DTYPE {
            return Err(bad(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.ids.len() != header.n {
            return Err(bad(format!("header declares n={} but lists {} ids", header.n, header.ids.len())));
        }
        let expected = header
            .n
            .checked_mul(header.d)
            .and_then(|v| v.checked_mul(4))
            .ok_or_else(|| bad("payload size overflows".into()))?;
        let payload = &bytes[hend..];
        if payload.len() != expected {
            return Err(bad(format!(
                "payload length mismatch: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(data, header.d, header.ids, header.variant).map_err(|e| bad(e.to_string()))
    }
}

pub fn write_embeddings(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = m.to_bytes()?;
    let mut f = fs::File::create(path).map_err(|e| AtlasError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| AtlasError::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| AtlasError::io(path, e))?;
    EmbeddingMatrix::from_bytes(&bytes, path)
}

/// Ids present on only one side of an alignment.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AlignReport {
    pub missing_embedding: Vec<String>,
    pub missing_record: Vec<String>,
}

/// Reorders rows into corpus order, keeping ids present on both sides.
pub fn align(corpus: &Corpus, m: &EmbeddingMatrix) -> Result<(EmbeddingMatrix, AlignReport)> {
    let in_matrix: HashSet<&str> = m.ids().iter().map(String::as_str).collect();
    let in_corpus: HashSet<&str> = corpus.ids().collect();
    let mut report = AlignReport::default();
    let mut keep = Vec::new();
    for id in corpus.ids() {
        if in_matrix.contains(id) {
            keep.push(id.to_owned());
        } else {
            report.missing_embedding.push(id.to_owned());
        }
    }
    report.missing_record = m
        .ids()
        .iter()
        .filter(|id| !in_corpus.contains(id.as_str()))
        .cloned()
        .collect();
    if keep.is_empty() {
        return Err(AtlasError::Empty("corpus and embedding ids do not overlap".into()));
    }
    Ok((m.select(&keep)?, report))
}
