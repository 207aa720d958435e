//! Binary embedding files aligned row-for-row with a corpus.
//!
//! Layout (`DPEB1`, all integers little-endian):
//!
//! | offset | size | field                                     |
//! |-------:|-----:|-------------------------------------------|
//! | 0      | 6    | magic `b"DPEB1\0"`                        |
//! | 6      | 4    | version, `u32` = 1                        |
//! | 10     | 4    | row count, `u32`                          |
//! | 14     | 4    | dimension, `u32`                          |
//! | 18     | 1    | dtype tag, `1` = `f32`                    |
//! | 19     | 16   | corpus fingerprint                        |
//! | 35     | 4·n·d| row-major `f32` payload                   |
//!
//! The fingerprint is the first 16 bytes of SHA-256 over the record ids
//! joined with `\n` (no trailing newline). It is order-sensitive.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::Corpus;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"DPEB1\0";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 6 + 4 + 4 + 4 + 1 + 16;

pub type Fingerprint = [u8; 16];

/// 128-bit fingerprint of an ordered id sequence.
pub fn fingerprint_ids<'a>(ids: impl IntoIterator<Item = &'a str>) -> Fingerprint {
    let mut hasher = Sha256::new();
    for (i, id) in ids.into_iter().enumerate() {
        if i > 0 {
            hasher.update(b"\n");
        }
        hasher.update(id.as_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 16];
    out.copy_from_slice(&digest[..16]);
    out
}

pub fn corpus_fingerprint(corpus: &Corpus) -> Fingerprint {
    fingerprint_ids(corpus.ids())
}

/// Dense row-major embeddings for a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    count: usize,
    dim: usize,
    data: Vec<f32>,
    fingerprint: Fingerprint,
}

impl EmbeddingMatrix {
    /// Build a matrix, rejecting shape mismatches and non-finite values.
    pub fn new(count: usize, dim: usize, data: Vec<f32>, fingerprint: Fingerprint) -> Result<Self> {
        if data.len() != count * dim {
            return Err(Error::DimMismatch {
                expected: count * dim,
                found: data.len(),
            });
        }
        if dim == 0 && count > 0 {
            return Err(Error::InvalidValue("embedding dimension must be positive".into()));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "non-finite value in row {} (column {})",
                pos / dim.max(1),
                pos % dim.max(1)
            )));
        }
        Ok(Self {
            count,
            dim,
            data,
            fingerprint,
        })
    }

    /// Build from rows aligned to `corpus`.
    pub fn from_rows(rows: &[Vec<f32>], corpus: &Corpus) -> Result<Self> {
        if rows.len() != corpus.len() {
            return Err(Error::Alignment {
                expected: format!("{} rows", corpus.len()),
                found: format!("{} rows", rows.len()),
            });
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), dim, data, corpus_fingerprint(corpus))
    }

    /// Embeddings without a backing corpus (fingerprint of the empty id list).
    pub fn unaligned(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(count, dim, data, fingerprint_ids(std::iter::empty()))
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        // chunks_exact(0) panics, and an empty matrix has no rows anyway.
        self.data.chunks_exact(self.dim.max(1)).take(self.count)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    /// Rows selected by index, in the given order (fingerprint cleared).
    pub fn select_rows(&self, indices: &[usize]) -> EmbeddingMatrix {
        let mut data = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        EmbeddingMatrix {
            count: indices.len(),
            dim: self.dim,
            data,
            fingerprint: fingerprint_ids(std::iter::empty()),
        }
    }

    /// Stack two matrices of equal dimension.
    pub fn concat(&self, other: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
        if self.dim != other.dim && self.count > 0 && other.count > 0 {
            return Err(Error::DimMismatch {
                expected: self.dim,
                found: other.dim,
            });
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(EmbeddingMatrix {
            count: self.count + other.count,
            dim: self.dim.max(other.dim),
            data,
            fingerprint: fingerprint_ids(std::iter::empty()),
        })
    }

    pub fn with_fingerprint(mut self, fingerprint: Fingerprint) -> Self {
        self.fingerprint = fingerprint;
        self
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&self.fingerprint);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic(String::from_utf8_lossy(&bytes[..bytes.len().min(6)]).into_owned()));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN as u64,
                found: bytes.len() as u64,
            });
        }
        let u32_at = |off: usize| u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
        let version = u32_at(6);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported embedding file version {version}")));
        }
        let count = u32_at(10) as usize;
        let dim = u32_at(14) as usize;
        let dtype = bytes[18];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype tag {dtype}")));
        }
        let mut fingerprint = [0u8; 16];
        fingerprint.copy_from_slice(&bytes[19..35]);
        let expected = HEADER_LEN as u64 + 4 * count as u64 * dim as u64;
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len() as u64,
            });
        }
        if (bytes.len() as u64) > expected {
            return Err(Error::DimMismatch {
                expected: (expected - HEADER_LEN as u64) as usize / 4,
                found: (bytes.len() - HEADER_LEN) / 4,
            });
        }
        let data = bytes[HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(count, dim, data, fingerprint)
    }
}

/// Write `matrix` in the DPEB1 format.
pub fn write_embeddings(matrix: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&matrix.encode()).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    EmbeddingMatrix::decode(&bytes)
}

/// Succeeds iff `matrix` has one row per record and was computed for these
/// ids in this order.
pub fn validate_alignment(matrix: &EmbeddingMatrix, corpus: &Corpus) -> Result<()> {
    if matrix.count() != corpus.len() {
        return Err(Error::Alignment {
            expected: format!("{} rows", corpus.len()),
            found: format!("{} rows", matrix.count()),
        });
    }
    let expected = corpus_fingerprint(corpus);
    if &expected != matrix.fingerprint() {
        return Err(Error::Alignment {
            expected: format!("fingerprint {}", hex::encode(expected)),
            found: format!("fingerprint {}", hex::encode(matrix.fingerprint())),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusRole;

    fn corpus() -> Corpus {
        Corpus::from_texts(CorpusRole::Real, "r", &["a", "b", "c"])
    }

    fn matrix() -> EmbeddingMatrix {
        let rows: Vec<Vec<f32>> = (0..3)
            .map(|i| (0..4).map(|j| (i * 4 + j) as f32 * 0.1 - 0.3).collect())
            .collect();
        EmbeddingMatrix::from_rows(&rows, &corpus()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dpemb");
        let m = matrix();
        write_embeddings(&m, &path).unwrap();
        let back = read_embeddings(&path).unwrap();
        assert_eq!(back.count(), 3);
        assert_eq!(back.dim(), 4);
        for (a, b) in m.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(std::fs::read(&path).unwrap(), back.encode());
    }

    #[test]
    fn empty_matrix_has_header_only() {
        let m = EmbeddingMatrix::unaligned(0, 8, Vec::new()).unwrap();
        let bytes = m.encode();
        assert_eq!(bytes.len(), HEADER_LEN);
        let back = EmbeddingMatrix::decode(&bytes).unwrap();
        assert_eq!(back.count(), 0);
        assert_eq!(back.dim(), 8);
    }

    #[test]
    fn nan_rejected() {
        let err = EmbeddingMatrix::unaligned(1, 2, vec![1.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::InvalidValue(_)));
    }

    #[test]
    fn header_layout_is_fixed() {
        let bytes = matrix().encode();
        assert_eq!(&bytes[..6], b"DPEB1\0");
        assert_eq!(&bytes[6..10], &1u32.to_le_bytes());
        assert_eq!(&bytes[10..14], &3u32.to_le_bytes());
        assert_eq!(&bytes[14..18], &4u32.to_le_bytes());
        assert_eq!(bytes[18], 1);
        assert_eq!(&bytes[19..35], &corpus_fingerprint(&corpus()));
        assert_eq!(bytes.len(), 35 + 48);
    }

    #[test]
    fn fingerprint_golden_vector() {
        // SHA-256("r-0\nr-1\nr-2") truncated to 16 bytes.
        assert_eq!(
            hex::encode(corpus_fingerprint(&corpus())),
            hex::encode(&Sha256::digest(b"r-0\nr-1\nr-2")[..16])
        );
        assert_eq!(hex::encode(fingerprint_ids(["a", "b"])), "7e18f737311b2dc3b2f269dd78396b03");
    }

    #[test]
    fn decode_errors_are_distinct() {
        let bytes = matrix().encode();
        assert!(matches!(EmbeddingMatrix::decode(&bytes[..bytes.len() - 3]), Err(Error::Truncated { .. })));
        assert!(matches!(EmbeddingMatrix::decode(&bytes[..20]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(EmbeddingMatrix::decode(&bad), Err(Error::BadMagic(_))));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(EmbeddingMatrix::decode(&long), Err(Error::DimMismatch { .. })));
    }

    #[test]
    fn alignment_checks() {
        let m = matrix();
        validate_alignment(&m, &corpus()).unwrap();
        let mut shorter = corpus();
        shorter.records.pop();
        assert!(matches!(validate_alignment(&m, &shorter), Err(Error::Alignment { .. })));
        let mut reordered = corpus();
        reordered.records.swap(0, 1);
        let err = validate_alignment(&m, &reordered).unwrap_err();
        assert!(err.to_string().contains("fingerprint"), "{err}");
    }
}
